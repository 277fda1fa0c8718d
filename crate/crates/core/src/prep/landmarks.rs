use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;
/// Inner corner of the eye on the image-left side (0-based 68-point index).
pub const INNER_EYE_LEFT: usize = 39;
/// Inner corner of the eye on the image-right side.
pub const INNER_EYE_RIGHT: usize = 42;

/// Fraction of the frame size a landmark may fall outside the frame.
pub const BOUNDS_MARGIN: f64 = 0.1;

/// 68 `(x, y)` pixel positions for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Invalid(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Invalid("non-finite landmark coordinate".into()));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        self.points[i]
    }

    /// Checks every point lies within the frame, give or take
    /// [`BOUNDS_MARGIN`] of its size.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        let (mw, mh) = (BOUNDS_MARGIN * width as f64, BOUNDS_MARGIN * height as f64);
        for (i, &(x, y)) in self.points.iter().enumerate() {
            if x < -mw || x > width as f64 + mw || y < -mh || y > height as f64 + mh {
                return Err(Error::Invalid(format!(
                    "landmark {i} at ({x:.1}, {y:.1}) outside {width}x{height} frame"
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|&(x, y)| f(x, y)).collect(),
        }
    }
}

/// Parses one landmark row per frame: 136 comma-separated values
/// `x0,y0,x1,y1,...`. Blank lines and a non-numeric header row are skipped.
pub fn parse_landmarks_csv(text: &str) -> Result<Vec<LandmarkSet>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if lineno == 0 => continue,
            Err(e) => {
                return Err(Error::Invalid(format!("landmark row {}: {e}", lineno + 1)));
            }
        };
        if values.len() != 2 * LANDMARK_COUNT {
            return Err(Error::Invalid(format!(
                "landmark row {} has {} columns, expected {}",
                lineno + 1,
                values.len(),
                2 * LANDMARK_COUNT
            )));
        }
        out.push(LandmarkSet::new(
            values.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
        )?);
    }
    Ok(out)
}

pub fn read_landmarks_csv(path: &Path) -> Result<Vec<LandmarkSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks_csv(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
