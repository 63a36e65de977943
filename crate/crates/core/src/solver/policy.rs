//! Regression representation of `(y, z, k)` as functions of `(step, x)`.

use serde::{Deserialize, Serialize};

use super::basis::{dot, BasisSpec, StepBasis, INLINE_FEATURES};
use crate::pathsim::{Feedback, TimeGrid};

/// Coefficients of one grid step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub basis: StepBasis,
    pub y: Vec<f64>,
    /// One coefficient vector per Brownian component.
    pub z: Vec<Vec<f64>>,
    /// One coefficient vector per atom.
    pub k: Vec<Vec<f64>>,
}

impl StepPolicy {
    fn with_features<R>(&self, x: &[f64], f: impl FnOnce(&[f64]) -> R) -> R {
        let p = self.basis.n_features();
        if p <= INLINE_FEATURES {
            let mut buf = [0.0; INLINE_FEATURES];
            self.basis.features(x, &mut buf[..p]);
            f(&buf[..p])
        } else {
            let mut buf = vec![0.0; p];
            self.basis.features(x, &mut buf);
            f(&buf)
        }
    }

    pub fn y_at(&self, x: &[f64]) -> f64 {
        self.with_features(x, |phi| dot(&self.y, phi))
    }

    /// Evaluate all outputs at `x`.
    pub fn eval(&self, x: &[f64], z: &mut [f64], k: &mut [f64]) -> f64 {
        self.with_features(x, |phi| {
            for (o, c) in z.iter_mut().zip(&self.z) {
                *o = dot(c, phi);
            }
            for (o, c) in k.iter_mut().zip(&self.k) {
                *o = dot(c, phi);
            }
            dot(&self.y, phi)
        })
    }
}

/// A window's policy: one `StepPolicy` per grid step `0..n_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFunction {
    pub grid: TimeGrid,
    pub n: usize,
    pub d: usize,
    pub n_atoms: usize,
    pub spec: BasisSpec,
    pub steps: Vec<StepPolicy>,
}

impl PolicyFunction {
    pub fn y_at(&self, step: usize, x: &[f64]) -> f64 {
        self.steps[step].y_at(x)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

impl Feedback for PolicyFunction {
    fn feedback(&self, step: usize, x: &[f64], z: &mut [f64], k: &mut [f64]) -> f64 {
        self.steps[step].eval(x, z, k)
    }
}
