use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use log::info;
use msmmt_core::config::RunConfig;
use msmmt_core::evalharness::{alpha_sweep, compute_metrics, predict, run_loso, train_model, SampleFeatures};
use msmmt_core::msmmt::save_checkpoint;
use msmmt_core::pipeline::{self, ClipFailure, MANIFEST_FILE};
use msmmt_core::{Error, Manifest};
use serde::Serialize;

use crate::report;
use crate::{Common, WithManifest};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type Outcome = Result<ExitCode, Failure>;

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: e.into(),
    }
}

fn internal(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 3,
        error: e.into(),
    }
}

/// Core errors about bad inputs map to the validation code.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Format { .. } | Error::Json(_) => validation(e),
        _ => internal(e),
    }
}

fn partial(what: &str, failures: &[ClipFailure]) -> Failure {
    let ids: Vec<&str> = failures.iter().take(5).map(|f| f.id.as_str()).collect();
    Failure {
        code: 2,
        error: anyhow!("{what} failed for {} clip(s): {}", failures.len(), ids.join(", ")),
    }
}

struct Setup {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
}

fn setup(c: &Common) -> Result<Setup, Failure> {
    let mut cfg = RunConfig::load(&c.config).map_err(validation)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.eval.workers = w;
    }
    cfg.validate().map_err(validation)?;
    Ok(Setup {
        workers: cfg.eval.workers,
        cfg,
        out: c.out.clone(),
    })
}

fn manifest(a: &WithManifest, out: &Path) -> Result<Manifest, Failure> {
    let path = a.manifest.clone().unwrap_or_else(|| out.join(MANIFEST_FILE));
    Manifest::load(&path)
        .with_context(|| format!("load manifest {}", path.display()))
        .map_err(validation)
}

pub fn gen_synth(c: &Common) -> Outcome {
    let mut s = setup(c)?;
    if let Some(seed) = c.seed {
        s.cfg.data.synthetic.seed = seed;
    }
    let m = pipeline::write_synthetic(&s.cfg.data.synthetic, &s.out).map_err(classify)?;
    println!("wrote {} clips and {}", m.entries.len(), s.out.join(MANIFEST_FILE).display());
    Ok(ExitCode::SUCCESS)
}

pub fn preprocess(a: &WithManifest) -> Outcome {
    let s = setup(&a.common)?;
    let m = manifest(a, &s.out)?;
    let r = pipeline::preprocess(&s.cfg, &m, &s.out, s.workers).map_err(classify)?;
    println!(
        "preprocessed {} clips into {}, {} failed",
        r.manifest.entries.len(),
        s.out.display(),
        r.failures.len()
    );
    if !r.failures.is_empty() {
        return Err(partial("preprocessing", &r.failures));
    }
    Ok(ExitCode::SUCCESS)
}

fn ensure_features(s: &Setup, m: &Manifest) -> Result<pipeline::FeatureReport, Failure> {
    let r = pipeline::extract_features(&s.cfg, m, &s.out, s.workers).map_err(classify)?;
    println!(
        "features: {} recomputed ({} dynamic, {} flow-OS), {} reused",
        r.recomputed(),
        r.counts.dyn_computed,
        r.counts.flow_computed,
        r.counts.reused
    );
    if !r.failures.is_empty() {
        return Err(partial("feature extraction", &r.failures));
    }
    Ok(r)
}

pub fn features(a: &WithManifest) -> Outcome {
    let s = setup(&a.common)?;
    let m = manifest(a, &s.out)?;
    ensure_features(&s, &m)?;
    Ok(ExitCode::SUCCESS)
}

fn samples(s: &Setup, m: &Manifest) -> Result<Vec<SampleFeatures>, Failure> {
    ensure_features(s, m)?;
    pipeline::load_samples(&s.cfg, m, &s.out).map_err(classify)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    subject: &'a str,
    train_size: usize,
    test_size: usize,
    train_accuracy: f64,
    epochs: &'a [msmmt_core::evalharness::EpochLog],
    metrics: &'a msmmt_core::MetricsReport,
}

pub fn train(a: &WithManifest) -> Outcome {
    let s = setup(&a.common)?;
    let m = manifest(a, &s.out)?;
    let all = samples(&s, &m)?;
    let subject = match a.fold.clone().or(s.cfg.eval.fold.clone()) {
        Some(x) => x,
        None => all
            .iter()
            .map(|x| x.subject.clone())
            .min()
            .ok_or_else(|| validation(anyhow!("empty manifest")))?,
    };
    let train: Vec<&SampleFeatures> = all.iter().filter(|x| x.subject != subject).collect();
    let test: Vec<&SampleFeatures> = all.iter().filter(|x| x.subject == subject && !x.augmented).collect();
    if test.is_empty() || train.is_empty() {
        return Err(validation(anyhow!("subject {subject} leaves an empty train or test split")));
    }
    let settings = s.cfg.settings();
    let (model, stats) = train_model(&train, &settings, s.cfg.seed).map_err(classify)?;
    let preds = predict(&model, &test, 32).map_err(internal)?;
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let guesses: Vec<usize> = preds.iter().map(|p| p.prediction).collect();
    let metrics = compute_metrics(&labels, &guesses, s.cfg.model.num_classes).map_err(internal)?;
    save_checkpoint(&s.out.join("checkpoint"), model.config(), model.params()).map_err(internal)?;
    report::write_predictions(&s.out.join("train_predictions.csv"), &preds, s.cfg.model.num_classes)
        .map_err(internal)?;
    report::write_json(
        &s.out.join("train.json"),
        &TrainSummary {
            subject: &subject,
            train_size: train.len(),
            test_size: test.len(),
            train_accuracy: stats.train_accuracy,
            epochs: &stats.epochs,
            metrics: &metrics,
        },
    )
    .map_err(internal)?;
    println!(
        "held-out {subject}: acc {:.4} uar {:.4} uf1 {:.4} (train acc {:.4})",
        metrics.acc, metrics.uar, metrics.uf1, stats.train_accuracy
    );
    Ok(ExitCode::SUCCESS)
}

pub fn loso(a: &WithManifest, sweep: bool) -> Outcome {
    let s = setup(&a.common)?;
    let m = manifest(a, &s.out)?;
    let all = samples(&s, &m)?;
    let settings = s.cfg.settings();
    if sweep {
        let rows = alpha_sweep(&all, &settings, &s.cfg.eval.alpha_grid, s.workers).map_err(classify)?;
        let path = s.out.join("alpha_sweep.csv");
        report::write_sweep(&path, &rows).map_err(internal)?;
        println!("{:>6} {:>8} {:>8}", "alpha", "UAR", "UF1");
        for r in &rows {
            println!("{:>6.2} {:>8.4} {:>8.4}", r.alpha, r.uar, r.uf1);
        }
        info!("wrote {}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let fold = a.fold.clone().or(s.cfg.eval.fold.clone());
    let r = run_loso(&all, &settings, fold.as_deref(), s.workers).map_err(classify)?;
    report::write_folds(&s.out.join("folds.csv"), &r.folds).map_err(internal)?;
    report::write_predictions(&s.out.join("predictions.csv"), &r.predictions, s.cfg.model.num_classes)
        .map_err(internal)?;
    report::write_json(&s.out.join("aggregate.json"), &report::Aggregate::new(&r, s.cfg.seed)).map_err(internal)?;
    print!("{}", report::table(&r));
    Ok(ExitCode::SUCCESS)
}
