use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loso::{loso_split, Fold};
use super::metrics::{compute_metrics, MetricsReport};
use crate::diffmath::{AdamW, AdamWConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{tape_contrastive_loss, tape_total_loss, LossConfig};
use crate::msmmt::{batch_tensors, ModelConfig, Mode, Msmmt, PatchInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.weight_decay >= 0.0 && o.epsilon > 0.0) {
            return Err(Error::Config("optimizer rates must be non-negative and epsilon positive".into()));
        }
        if !((0.0..1.0).contains(&o.betas.0) && (0.0..1.0).contains(&o.betas.1)) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Model, loss and optimization settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

/// Cached model inputs of one clip.
#[derive(Clone, Debug)]
pub struct SampleFeatures {
    pub id: String,
    pub subject: String,
    pub label: usize,
    pub source: String,
    /// Augmented copies only ever join training sets.
    pub augmented: bool,
    pub dy: PatchInput,
    pub flow: PatchInput,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub con: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainStats {
    pub epochs: Vec<EpochLog>,
    /// Eval-mode accuracy on the training samples after the last epoch.
    pub train_accuracy: f64,
    pub train_correct: usize,
    pub train_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub subject: String,
    pub source: String,
    pub label: usize,
    pub prediction: usize,
    pub scores: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Eval-mode class scores, in chunks of `batch` samples.
pub fn predict(model: &Msmmt<f32>, samples: &[&SampleFeatures], batch: usize) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let dy: Vec<&PatchInput> = chunk.iter().map(|s| &s.dy).collect();
        let fl: Vec<&PatchInput> = chunk.iter().map(|s| &s.flow).collect();
        let logits = model.predict(&batch_tensors(cfg, &dy), &batch_tensors(cfg, &fl))?;
        let c = cfg.num_classes;
        for (s, row) in chunk.iter().zip(logits.to_f64_vec().chunks_exact(c)) {
            out.push(Prediction {
                id: s.id.clone(),
                subject: s.subject.clone(),
                source: s.source.clone(),
                label: s.label,
                prediction: argmax(row),
                scores: row.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Trains a freshly initialized model on `samples`.
pub fn train_model(samples: &[&SampleFeatures], settings: &Settings, seed: u64) -> Result<(Msmmt<f32>, TrainStats)> {
    settings.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let cfg = &settings.model;
    if let Some(s) = samples.iter().find(|s| s.label >= cfg.num_classes) {
        return Err(Error::Invalid(format!(
            "sample {} has label {} but the model has {} classes",
            s.id, s.label, cfg.num_classes
        )));
    }
    let mut model = Msmmt::<f32>::new(cfg.clone(), seed)?;
    let mut opt = AdamW::new(settings.train.optimizer.clone());
    opt.init(model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(settings.train.epochs);

    for epoch in 0..settings.train.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_ce, mut sum_con, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(settings.train.batch_size) {
            let batch: Vec<&SampleFeatures> = idx.iter().map(|&i| samples[i]).collect();
            let dy: Vec<&PatchInput> = batch.iter().map(|s| &s.dy).collect();
            let fl: Vec<&PatchInput> = batch.iter().map(|s| &s.flow).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape);
            let out = model.forward(
                &mut tape,
                &bound,
                &batch_tensors(cfg, &dy),
                &batch_tensors(cfg, &fl),
                Mode::Train(&mut rng),
            )?;
            let ce = tape.cross_entropy(out.logits, &labels)?;
            let con = tape_contrastive_loss(&mut tape, out.dy.feature, out.flow.feature, settings.loss.temperature)?;
            let total = tape_total_loss(&mut tape, ce, con, settings.loss.alpha)?;
            let n = batch.len() as f64;
            sum += tape.value(total).item()? as f64 * n;
            sum_ce += tape.value(ce).item()? as f64 * n;
            sum_con += tape.value(con).item()? as f64 * n;
            seen += batch.len();

            let mut grads = tape.backward(total)?;
            let g: Vec<Tensor<f32>> = bound
                .vars()
                .iter()
                .zip(model.params().tensors())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            opt.step(model.params_mut().tensors_mut(), &g)?;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            loss: sum / seen as f64,
            ce: sum_ce / seen as f64,
            con: sum_con / seen as f64,
        };
        debug!(
            "epoch {:>3}: loss {:.4} (ce {:.4}, con {:.4})",
            log.epoch, log.loss, log.ce, log.con
        );
        epochs.push(log);
    }

    let preds = predict(&model, samples, settings.train.batch_size.max(32))?;
    let correct = preds.iter().filter(|p| p.label == p.prediction).count();
    let stats = TrainStats {
        epochs,
        train_accuracy: correct as f64 / preds.len() as f64,
        train_correct: correct,
        train_total: preds.len(),
    };
    Ok((model, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldReport {
    pub subject: String,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: MetricsReport,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LosoReport {
    pub folds: Vec<FoldReport>,
    /// Metrics of all folds' predictions pooled together.
    pub aggregate: MetricsReport,
    /// Pooled training accuracy over every fold's training set.
    pub train_accuracy: f64,
    pub per_source: BTreeMap<String, MetricsReport>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

struct FoldRun {
    report: FoldReport,
    predictions: Vec<Prediction>,
    train_correct: usize,
    train_total: usize,
}

fn fold_seed(seed: u64, subject: &str) -> u64 {
    subject
        .bytes()
        .fold(seed ^ 0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

fn run_fold(samples: &[SampleFeatures], fold: &Fold, settings: &Settings) -> Result<FoldRun> {
    let test_subject = &fold.subject;
    let train: Vec<&SampleFeatures> = samples.iter().filter(|s| &s.subject != test_subject).collect();
    let test: Vec<&SampleFeatures> = fold.test.iter().map(|&i| &samples[i]).collect();
    let (model, stats) = train_model(&train, settings, fold_seed(settings.seed, test_subject))?;
    let predictions = predict(&model, &test, 32)?;
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let preds: Vec<usize> = predictions.iter().map(|p| p.prediction).collect();
    let metrics = compute_metrics(&labels, &preds, settings.model.num_classes)?;
    info!(
        "fold {test_subject}: test acc {:.3} ({} samples), train acc {:.3}",
        metrics.acc,
        test.len(),
        stats.train_accuracy
    );
    Ok(FoldRun {
        report: FoldReport {
            subject: test_subject.clone(),
            train_size: train.len(),
            test_size: test.len(),
            metrics,
            train_accuracy: stats.train_accuracy,
            final_loss: stats.epochs.last().map_or(f64::NAN, |e| e.loss),
        },
        predictions,
        train_correct: stats.train_correct,
        train_total: stats.train_total,
    })
}

/// Leave-one-subject-out training and evaluation. Folds run in parallel on
/// a pool of `workers` threads; `only` restricts the run to one test subject.
pub fn run_loso(samples: &[SampleFeatures], settings: &Settings, only: Option<&str>, workers: usize) -> Result<LosoReport> {
    settings.validate()?;
    let originals: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].augmented).collect();
    let subjects: Vec<&str> = originals.iter().map(|&i| samples[i].subject.as_str()).collect();
    let mut plan = loso_split(&subjects)?;
    for f in &mut plan.folds {
        f.test = f.test.iter().map(|&k| originals[k]).collect();
        f.train = (0..samples.len()).filter(|&i| samples[i].subject != f.subject).collect();
    }
    let folds: Vec<Fold> = match only {
        Some(s) => vec![plan
            .fold(s)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no fold for subject {s}")))?],
        None => plan.folds,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let runs: Vec<FoldRun> = pool.install(|| {
        folds
            .par_iter()
            .map(|f| run_fold(samples, f, settings))
            .collect::<Result<Vec<_>>>()
    })?;

    let predictions: Vec<Prediction> = runs.iter().flat_map(|r| r.predictions.clone()).collect();
    let c = settings.model.num_classes;
    let pooled = |ps: &[&Prediction]| {
        let l: Vec<usize> = ps.iter().map(|p| p.label).collect();
        let p: Vec<usize> = ps.iter().map(|p| p.prediction).collect();
        compute_metrics(&l, &p, c)
    };
    let all: Vec<&Prediction> = predictions.iter().collect();
    let aggregate = pooled(&all)?;
    let mut per_source = BTreeMap::new();
    let mut sources: Vec<&str> = predictions.iter().map(|p| p.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    for src in sources {
        let ps: Vec<&Prediction> = predictions.iter().filter(|p| p.source == src).collect();
        per_source.insert(src.to_string(), pooled(&ps)?);
    }
    let (tc, tt) = runs
        .iter()
        .fold((0, 0), |(c, t), r| (c + r.train_correct, t + r.train_total));
    Ok(LosoReport {
        folds: runs.into_iter().map(|r| r.report).collect(),
        aggregate,
        train_accuracy: tc as f64 / tt.max(1) as f64,
        per_source,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub acc: f64,
    pub uar: f64,
    pub uf1: f64,
}

/// Default α grid `0.0, 0.1, ..., 0.9`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// One full LOSO run per α value.
pub fn alpha_sweep(samples: &[SampleFeatures], settings: &Settings, alphas: &[f64], workers: usize) -> Result<Vec<SweepRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut s = settings.clone();
            s.loss.alpha = alpha;
            let r = run_loso(samples, &s, None, workers)?;
            info!("alpha {alpha:.1}: uf1 {:.4} uar {:.4}", r.aggregate.uf1, r.aggregate.uar);
            Ok(SweepRow {
                alpha,
                acc: r.aggregate.acc,
                uar: r.aggregate.uar,
                uf1: r.aggregate.uf1,
            })
        })
        .collect()
}
