use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

pub const STROKE_SIZE_RANGE: (f32, f32) = (1.0, 8.0);
pub const INTENSITY_RANGE: (f32, f32) = (0.0, 4.0);

/// The control triple: stroke size `λS` (downsampling factor of the dynamic
/// branch), style intensity `λI`, and stroke rotation `τ` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeParams {
    pub lambda_s: f32,
    pub lambda_i: f32,
    pub tau: f32,
}

impl Default for StrokeParams {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_i: 1.0,
            tau: 0.0,
        }
    }
}

impl StrokeParams {
    /// Validates ranges and normalizes `tau` into `[0, 360)`.
    pub fn new(lambda_s: f32, lambda_i: f32, tau: f32) -> Result<Self> {
        let mut violations = Vec::new();
        if let Some(v) = check_stroke_size(lambda_s) {
            violations.push(v);
        }
        if let Some(v) = check_intensity(lambda_i) {
            violations.push(v);
        }
        if !tau.is_finite() {
            violations.push(Violation::new("tau", format!("{tau} is not a finite angle")));
        }
        if !violations.is_empty() {
            return Err(Error::Parameter(violations));
        }
        Ok(Self {
            lambda_s,
            lambda_i,
            tau: normalize_degrees(tau),
        })
    }
}

pub(crate) fn check_stroke_size(v: f32) -> Option<Violation> {
    let (lo, hi) = STROKE_SIZE_RANGE;
    (!(lo..=hi).contains(&v)).then(|| Violation::new("lambda_s", format!("{v} outside the range [{lo}, {hi}]")))
}

pub(crate) fn check_intensity(v: f32) -> Option<Violation> {
    let (lo, hi) = INTENSITY_RANGE;
    (!(lo..=hi).contains(&v)).then(|| Violation::new("lambda_i", format!("{v} outside the range [{lo}, {hi}]")))
}

pub fn normalize_degrees(tau: f32) -> f32 {
    let t = tau.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if t >= 360.0 {
        0.0
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_boundaries() {
        assert!(StrokeParams::new(1.0, 0.0, 0.0).is_ok());
        assert!(StrokeParams::new(8.0, 4.0, 359.9).is_ok());
    }

    #[test]
    fn collects_all_violations() {
        let Err(Error::Parameter(v)) = StrokeParams::new(12.0, -1.0, f32::NAN) else {
            panic!("expected parameter error");
        };
        let fields: Vec<_> = v.iter().map(|v| v.field.as_str()).collect();
        assert_eq!(fields, ["lambda_s", "lambda_i", "tau"]);
        assert!(v[0].message.contains("[1, 8]"));
    }

    #[test]
    fn tau_is_normalized() {
        assert_eq!(StrokeParams::new(1.0, 1.0, 360.0).unwrap().tau, 0.0);
        assert_eq!(StrokeParams::new(1.0, 1.0, -90.0).unwrap().tau, 270.0);
        assert_eq!(StrokeParams::new(1.0, 1.0, 725.0).unwrap().tau, 5.0);
        assert_eq!(normalize_degrees(-1e-9), 0.0);
    }
}
