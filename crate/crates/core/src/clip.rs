//! Video clips and their on-disk form: an MSMT `T x H x W x C` tensor plus a
//! JSON sidecar carrying the clip metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffmath::{msmt, Tensor};
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub fps: f64,
    pub subject_id: String,
    pub label: usize,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
}

/// JSON sidecar written next to a clip tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub subject_id: String,
    pub label: usize,
    pub fps: f64,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
}

/// Apex index when a dataset does not annotate one: the middle of
/// `[onset, offset]`.
pub fn midpoint_apex(onset: usize, offset: usize) -> usize {
    onset + (offset - onset) / 2
}

impl VideoClip {
    pub fn new(frames: Vec<Image>, meta: ClipMeta) -> Result<Self> {
        let clip = VideoClip {
            frames,
            fps: meta.fps,
            subject_id: meta.subject_id,
            label: meta.label,
            onset: meta.onset,
            apex: meta.apex,
            offset: meta.offset,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t < 2 {
            return Err(Error::Invalid(format!("clip has {t} frames, need at least 2")));
        }
        if !(self.onset <= self.apex && self.apex <= self.offset && self.offset < t) {
            return Err(Error::Invalid(format!(
                "frame indices onset={} apex={} offset={} invalid for {t} frames",
                self.onset, self.apex, self.offset
            )));
        }
        let dims = self.frames[0].dims();
        if self.frames.iter().any(|f| f.dims() != dims) {
            return Err(Error::Invalid("frames differ in size".into()));
        }
        if self
            .frames
            .iter()
            .any(|f| f.data().iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Invalid("pixel values must lie in [0, 1]".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dims()
    }

    pub fn meta(&self) -> ClipMeta {
        ClipMeta {
            subject_id: self.subject_id.clone(),
            label: self.label,
            fps: self.fps,
            onset: self.onset,
            apex: self.apex,
            offset: self.offset,
        }
    }

    /// Same metadata, new frames.
    pub fn with_frames(&self, frames: Vec<Image>) -> VideoClip {
        VideoClip {
            frames,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> VideoClip {
        VideoClip {
            frames: Vec::new(),
            fps: self.fps,
            subject_id: self.subject_id.clone(),
            label: self.label,
            onset: self.onset,
            apex: self.apex,
            offset: self.offset,
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w, c) = self.dims();
        let per = h * w * c;
        Tensor::from_fn(&[self.frames.len(), h, w, c], |i| {
            self.frames[i / per].data()[i % per] as f32
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        msmt::save(&self.to_tensor(), path)?;
        let meta = serde_json::to_vec_pretty(&self.meta())?;
        msmt::write_atomic(&sidecar_path(path), &meta)
    }

    /// Loads a clip tensor and its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let frames = load_frames(path)?;
        let side = sidecar_path(path);
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ClipMeta = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: side.clone(),
            msg: e.to_string(),
        })?;
        VideoClip::new(frames, meta)
    }
}

pub fn sidecar_path(clip: &Path) -> PathBuf {
    clip.with_extension("json")
}

/// Reads frames from an MSMT `T x H x W x C` tensor or a directory of
/// numbered PNG files.
pub fn load_frames(path: &Path) -> Result<Vec<Image>> {
    if path.is_dir() {
        return load_png_dir(path);
    }
    let t: Tensor<f32> = msmt::load(path)?;
    frames_from_tensor(&t).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn frames_from_tensor(t: &Tensor<f32>) -> Result<Vec<Image>> {
    let [n, h, w, c] = *t.shape() else {
        return Err(Error::Invalid(format!(
            "clip tensor must be T x H x W x C, got {:?}",
            t.shape()
        )));
    };
    let per = h * w * c;
    (0..n)
        .map(|i| {
            Image::new(
                h,
                w,
                c,
                t.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

fn load_png_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
            Some((digits.parse().ok()?, p))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: "no numbered PNG frames".into(),
        });
    }
    files
        .iter()
        .map(|(_, p)| {
            let img = image::open(p)
                .map_err(|e| Error::Format {
                    path: p.clone(),
                    msg: e.to_string(),
                })?
                .to_rgb8();
            let (w, h) = img.dimensions();
            Image::new(
                h as usize,
                w as usize,
                3,
                img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            )
        })
        .collect()
}
