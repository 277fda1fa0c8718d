//! Dataset-level steps: synthetic generation, preprocessing, feature
//! extraction with a content-hash cache, and loading model inputs.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::clip::{load_frames, sidecar_path, ClipMeta, VideoClip};
use crate::config::RunConfig;
use crate::diffmath::msmt;
use crate::dynimg::dynamic_image;
use crate::error::{Error, Result};
use crate::evalharness::{gen_synthetic, CdeMap, SampleFeatures, SyntheticSpec};
use crate::flow::flow_os;
use crate::imaging::Image;
use crate::manifest::{Label, Manifest, ManifestEntry};
use crate::msmmt::PatchInput;
use crate::prep::{align_and_crop, augment, evm_magnify, read_landmarks_csv};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLIP_DIR: &str = "clips";
pub const FEATURE_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClipFailure {
    pub id: String,
    pub error: String,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// Writes every synthetic clip under `out/clips` and the manifest to
/// `out/manifest.json`.
pub fn write_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Manifest> {
    let clips = gen_synthetic(spec)?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in &clips {
        let rel = Path::new(CLIP_DIR).join(format!("{}.msmt", c.id));
        c.clip.save(&out.join(&rel))?;
        entries.push(ManifestEntry {
            clip_path: rel,
            landmarks_path: None,
            subject_id: c.clip.subject_id.clone(),
            label: Label::Index(c.clip.label),
            source: "synthetic".into(),
            onset: c.clip.onset,
            apex: c.clip.apex,
            offset: c.clip.offset,
            fps: Some(c.clip.fps),
            augmented: false,
        });
    }
    let m = Manifest::new(entries, out.to_path_buf())?;
    m.save(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

pub fn label_map(cfg: &RunConfig) -> Result<CdeMap> {
    match &cfg.data.label_map {
        Some(p) => CdeMap::load(p),
        None => Ok(CdeMap::default()),
    }
}

/// Loads an entry's frames with the manifest's indices and resolved label.
pub fn load_entry(manifest: &Manifest, e: &ManifestEntry, cfg: &RunConfig, map: &CdeMap) -> Result<VideoClip> {
    let path = manifest.resolve(&e.clip_path);
    let frames = load_frames(&path)?;
    let side = sidecar_path(&path);
    let fps = match e.fps {
        Some(f) => f,
        None if path.is_file() && side.is_file() => {
            let bytes = fs::read(&side).map_err(|err| Error::io(&side, err))?;
            let meta: ClipMeta = serde_json::from_slice(&bytes).map_err(|err| Error::Format {
                path: side.clone(),
                msg: err.to_string(),
            })?;
            meta.fps
        }
        None => cfg.data.fps,
    };
    VideoClip::new(
        frames,
        ClipMeta {
            subject_id: e.subject_id.clone(),
            label: e.class_index(cfg.model.num_classes, map)?,
            fps,
            onset: e.onset,
            apex: e.apex,
            offset: e.offset,
        },
    )
}

fn augment_seed(seed: u64, id: &str, k: usize) -> u64 {
    let h = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .chain_update((k as u64).to_le_bytes())
        .finalize();
    u64::from_le_bytes(h[..8].try_into().expect("digest length"))
}

fn preprocess_one(cfg: &RunConfig, manifest: &Manifest, e: &ManifestEntry, out: &Path, map: &CdeMap) -> Result<Vec<ManifestEntry>> {
    let id = e.id();
    let mut clip = load_entry(manifest, e, cfg, map)?;
    if cfg.prep.align {
        let lp = e
            .landmarks_path
            .as_ref()
            .ok_or_else(|| Error::Invalid("alignment enabled but no landmarks file given".into()))?;
        let lms = read_landmarks_csv(&manifest.resolve(lp))?;
        let s = cfg.prep.crop_size;
        clip = align_and_crop(&clip, &lms, (s, s))?.clip;
    }
    if cfg.prep.evm.enabled {
        clip = evm_magnify(&clip, &cfg.prep.evm)?;
    }
    let entry = |name: String, augmented: bool| {
        let rel = Path::new(CLIP_DIR).join(format!("{name}.msmt"));
        ManifestEntry {
            clip_path: rel,
            landmarks_path: None,
            subject_id: e.subject_id.clone(),
            label: e.label.clone(),
            source: e.source.clone(),
            onset: e.onset,
            apex: e.apex,
            offset: e.offset,
            fps: Some(clip.fps),
            augmented,
        }
    };
    let base = entry(id.clone(), e.augmented);
    clip.save(&out.join(&base.clip_path))?;
    let mut written = vec![base];
    if !e.augmented {
        for k in 0..cfg.prep.augment.copies {
            let aug = augment(&clip, &cfg.prep.augment, augment_seed(cfg.seed, &id, k));
            let a = entry(format!("{id}_aug{k}"), true);
            aug.save(&out.join(&a.clip_path))?;
            written.push(a);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct PreprocessReport {
    pub manifest: Manifest,
    pub failures: Vec<ClipFailure>,
}

/// Aligns, magnifies and augments every clip into `out/clips` and writes
/// the resulting manifest. Failed clips are reported and left out.
pub fn preprocess(cfg: &RunConfig, manifest: &Manifest, out: &Path, workers: usize) -> Result<PreprocessReport> {
    let map = label_map(cfg)?;
    let results: Vec<(String, Result<Vec<ManifestEntry>>)> = pool(workers)?.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| (e.id(), preprocess_one(cfg, manifest, e, out, &map)))
            .collect()
    });
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(es) => entries.extend(es),
            Err(err) => {
                warn!("preprocess {id}: {err}");
                failures.push(ClipFailure {
                    id,
                    error: err.to_string(),
                });
            }
        }
    }
    let m = Manifest::new(entries, out.to_path_buf())?;
    m.save(&out.join(MANIFEST_FILE))?;
    info!("preprocessed {} clips, {} failed", m.entries.len(), failures.len());
    Ok(PreprocessReport { manifest: m, failures })
}

pub fn dyn_path(out: &Path, id: &str) -> PathBuf {
    out.join(FEATURE_DIR).join(format!("{id}.dyn.msmt"))
}

pub fn flowos_path(out: &Path, id: &str) -> PathBuf {
    out.join(FEATURE_DIR).join(format!("{id}.flowos.msmt"))
}

fn key_path(p: &Path) -> PathBuf {
    p.with_extension("msmt.key")
}

fn cache_key(clip_digest: &[u8], kind: &str, params: &impl Serialize) -> Result<String> {
    let p = serde_json::to_vec(params)?;
    Ok(hex::encode(
        Sha256::new()
            .chain_update(clip_digest)
            .chain_update(kind.as_bytes())
            .chain_update(&p)
            .finalize(),
    ))
}

fn cached(path: &Path, key: &str) -> bool {
    path.is_file() && fs::read_to_string(key_path(path)).is_ok_and(|k| k.trim() == key)
}

fn store(path: &Path, img: &Image, key: &str) -> Result<()> {
    msmt::save(&img.to_tensor::<f32>(), path)?;
    msmt::write_atomic(&key_path(path), key.as_bytes())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FeatureCounts {
    pub dyn_computed: usize,
    pub flow_computed: usize,
    pub reused: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FeatureReport {
    pub counts: FeatureCounts,
    pub failures: Vec<ClipFailure>,
}

impl FeatureReport {
    pub fn recomputed(&self) -> usize {
        self.counts.dyn_computed + self.counts.flow_computed
    }
}

fn features_one(cfg: &RunConfig, manifest: &Manifest, e: &ManifestEntry, out: &Path, map: &CdeMap) -> Result<FeatureCounts> {
    let id = e.id();
    let clip = load_entry(manifest, e, cfg, map)?;
    let digest = Sha256::new()
        .chain_update(msmt::encode(&clip.to_tensor())?)
        .chain_update(serde_json::to_vec(&clip.meta())?)
        .finalize();
    let mut counts = FeatureCounts::default();
    let dp = dyn_path(out, &id);
    let dk = cache_key(&digest, "dyn", &cfg.dynimg)?;
    if cached(&dp, &dk) {
        counts.reused += 1;
    } else {
        store(&dp, &dynamic_image(&clip, &cfg.dynimg)?.image, &dk)?;
        counts.dyn_computed += 1;
    }
    let fp = flowos_path(out, &id);
    let fk = cache_key(&digest, "flowos", &cfg.flow)?;
    if cached(&fp, &fk) {
        counts.reused += 1;
    } else {
        store(&fp, &flow_os(&clip, &cfg.flow)?.2, &fk)?;
        counts.flow_computed += 1;
    }
    Ok(counts)
}

/// Computes the dynamic and flow-OS images of every clip into
/// `out/features`, reusing files whose input hash is unchanged.
pub fn extract_features(cfg: &RunConfig, manifest: &Manifest, out: &Path, workers: usize) -> Result<FeatureReport> {
    let map = label_map(cfg)?;
    let results: Vec<(String, Result<FeatureCounts>)> = pool(workers)?.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| (e.id(), features_one(cfg, manifest, e, out, &map)))
            .collect()
    });
    let mut report = FeatureReport::default();
    for (id, r) in results {
        match r {
            Ok(c) => {
                report.counts.dyn_computed += c.dyn_computed;
                report.counts.flow_computed += c.flow_computed;
                report.counts.reused += c.reused;
            }
            Err(err) => {
                warn!("features {id}: {err}");
                report.failures.push(ClipFailure {
                    id,
                    error: err.to_string(),
                });
            }
        }
    }
    info!(
        "features: {} dynamic and {} flow-OS images computed, {} reused",
        report.counts.dyn_computed, report.counts.flow_computed, report.counts.reused
    );
    Ok(report)
}

fn model_image(path: &Path, size: usize) -> Result<Image> {
    let img = Image::from_tensor(&msmt::load::<f32>(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(if img.height() == size && img.width() == size {
        img
    } else {
        img.resize(size, size)
    })
}

/// Reads cached modality images as model inputs.
pub fn load_samples(cfg: &RunConfig, manifest: &Manifest, out: &Path) -> Result<Vec<SampleFeatures>> {
    let map = label_map(cfg)?;
    let m = &cfg.model;
    manifest
        .entries
        .iter()
        .map(|e| {
            let id = e.id();
            let dy = model_image(&dyn_path(out, &id), m.image_size)?;
            let fo = model_image(&flowos_path(out, &id), m.image_size)?;
            Ok(SampleFeatures {
                label: e.class_index(m.num_classes, &map)?,
                subject: e.subject_id.clone(),
                source: e.source.clone(),
                augmented: e.augmented,
                dy: PatchInput::from_image(m, &dy)?,
                flow: PatchInput::from_image(m, &fo)?,
                id,
            })
        })
        .collect()
}
