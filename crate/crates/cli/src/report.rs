use std::path::Path;

use anyhow::{Context, Result};
use msmmt_core::diffmath::msmt::write_atomic;
use msmmt_core::evalharness::{FoldReport, LosoReport, MetricsReport, Prediction, SweepRow};
use serde::Serialize;

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().context("flush csv")?;
    write_atomic(path, &bytes).with_context(|| format!("write {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("write {}", path.display()))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn write_folds(path: &Path, folds: &[FoldReport]) -> Result<()> {
    let header = strings(&["subject", "train_size", "test_size", "acc", "uar", "uf1", "train_acc", "final_loss"]);
    write_csv(
        path,
        &header,
        folds.iter().map(|r| {
            vec![
                r.subject.clone(),
                r.train_size.to_string(),
                r.test_size.to_string(),
                f(r.metrics.acc),
                f(r.metrics.uar),
                f(r.metrics.uf1),
                f(r.train_accuracy),
                f(r.final_loss),
            ]
        }),
    )
}

pub fn write_predictions(path: &Path, preds: &[Prediction], classes: usize) -> Result<()> {
    let mut header = strings(&["clip_id", "subject", "source", "label", "prediction"]);
    header.extend((0..classes).map(|c| format!("score_{c}")));
    write_csv(
        path,
        &header,
        preds.iter().map(|p| {
            let mut row = vec![
                p.id.clone(),
                p.subject.clone(),
                p.source.clone(),
                p.label.to_string(),
                p.prediction.to_string(),
            ];
            row.extend(p.scores.iter().map(|&s| f(s)));
            row
        }),
    )
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(
        path,
        &strings(&["alpha", "acc", "uar", "uf1"]),
        rows.iter()
            .map(|r| vec![format!("{:.2}", r.alpha), f(r.acc), f(r.uar), f(r.uf1)]),
    )
}

#[derive(Serialize)]
pub struct Aggregate<'a> {
    pub seed: u64,
    pub folds: usize,
    pub acc: f64,
    pub uar: f64,
    pub uf1: f64,
    pub train_accuracy: f64,
    pub metrics: &'a MetricsReport,
    pub per_source: &'a std::collections::BTreeMap<String, MetricsReport>,
}

impl<'a> Aggregate<'a> {
    pub fn new(r: &'a LosoReport, seed: u64) -> Self {
        Aggregate {
            seed,
            folds: r.folds.len(),
            acc: r.aggregate.acc,
            uar: r.aggregate.uar,
            uf1: r.aggregate.uf1,
            train_accuracy: r.train_accuracy,
            metrics: &r.aggregate,
            per_source: &r.per_source,
        }
    }
}

pub fn table(r: &LosoReport) -> String {
    let mut s = format!("{:<12} {:>8} {:>8} {:>8}\n", "", "Acc", "UAR", "UF1");
    let mut line = |name: &str, m: &MetricsReport| {
        s.push_str(&format!("{:<12} {:>8.4} {:>8.4} {:>8.4}\n", name, m.acc, m.uar, m.uf1));
    };
    if r.per_source.len() > 1 {
        for (src, m) in &r.per_source {
            line(src, m);
        }
    }
    line("pooled", &r.aggregate);
    s
}
