//! Regression bases fitted per time step.

use serde::{Deserialize, Serialize};

/// Stack capacity for feature vectors; larger bases spill to the heap.
pub(crate) const INLINE_FEATURES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    /// All monomials of total degree ≤ `degree` in the standardized state.
    Polynomial { degree: usize },
    /// `1, u, (u − κ_1)_+, …` with `knots` equally spaced interior knots (n = 1).
    PiecewiseLinear { knots: usize },
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec::Polynomial { degree: 2 }
    }
}

impl BasisSpec {
    pub fn n_features(&self, n: usize) -> usize {
        match self {
            BasisSpec::Polynomial { degree } => exponents(n, *degree).len(),
            BasisSpec::PiecewiseLinear { knots } => 2 + knots,
        }
    }
}

/// Monomial exponents of total degree ≤ `degree`, constant first, then by degree.
pub fn exponents(n: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0u32; n];
        fill(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    if cur.is_empty() {
        if left == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for v in (0..=left).rev() {
        cur[pos] = v;
        fill(out, cur, pos + 1, left - v);
    }
    cur[pos] = 0;
}

/// A basis standardized on one step's training cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBasis {
    pub spec: BasisSpec,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Bounding box of the training cloud (for extrapolation flags).
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exponents: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knots: Vec<f64>,
}

impl StepBasis {
    /// Standardize on `xs` (row-major, `n` columns).
    pub fn fit(spec: &BasisSpec, xs: &[f64], n: usize) -> Self {
        let m = (xs.len() / n.max(1)).max(1);
        let mut mean = vec![0.0; n];
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for row in xs.chunks(n) {
            for c in 0..n {
                mean[c] += row[c];
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        for v in &mut mean {
            *v /= m as f64;
        }
        let mut var = vec![0.0; n];
        for row in xs.chunks(n) {
            for c in 0..n {
                var[c] += (row[c] - mean[c]).powi(2);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .zip(&mean)
            .map(|(v, mu)| {
                let sd = (v / m as f64).sqrt();
                // degenerate clouds keep unit scale; the design then rank-drops
                if sd > 1e-12 * (1.0 + mu.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let (exps, knots) = match spec {
            BasisSpec::Polynomial { degree } => (exponents(n, *degree), Vec::new()),
            BasisSpec::PiecewiseLinear { knots } => {
                let ulo = (lo[0] - mean[0]) / scale[0];
                let uhi = (hi[0] - mean[0]) / scale[0];
                let k = *knots;
                let ks = (1..=k)
                    .map(|i| ulo + (uhi - ulo) * i as f64 / (k + 1) as f64)
                    .collect();
                (Vec::new(), ks)
            }
        };
        StepBasis {
            spec: spec.clone(),
            mean,
            scale,
            lo,
            hi,
            exponents: exps,
            knots,
        }
    }

    pub fn n_features(&self) -> usize {
        match self.spec {
            BasisSpec::Polynomial { .. } => self.exponents.len(),
            BasisSpec::PiecewiseLinear { .. } => 2 + self.knots.len(),
        }
    }

    /// Write the features of `x` into `out` (length `n_features()`).
    pub fn features(&self, x: &[f64], out: &mut [f64]) {
        let n = self.mean.len();
        let mut ubuf = [0.0; INLINE_FEATURES];
        let mut uheap;
        let u: &mut [f64] = if n <= INLINE_FEATURES {
            &mut ubuf[..n]
        } else {
            uheap = vec![0.0; n];
            &mut uheap
        };
        for c in 0..n {
            u[c] = (x[c] - self.mean[c]) / self.scale[c];
        }
        match self.spec {
            BasisSpec::Polynomial { .. } => {
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    let mut v = 1.0;
                    for (uc, p) in u.iter().zip(e) {
                        for _ in 0..*p {
                            v *= uc;
                        }
                    }
                    *o = v;
                }
            }
            BasisSpec::PiecewiseLinear { .. } => {
                out[0] = 1.0;
                out[1] = u[0];
                for (o, k) in out[2..].iter_mut().zip(&self.knots) {
                    *o = (u[0] - k).max(0.0);
                }
            }
        }
    }

    /// Whether `x` lies inside the training cloud's bounding box (with slack).
    pub fn covers(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(c, v)| {
            let slack = 1e-9 * (1.0 + self.lo[c].abs().max(self.hi[c].abs()));
            *v >= self.lo[c] - slack && *v <= self.hi[c] + slack
        })
    }
}

/// `Σ_k coef_k φ_k`.
#[inline]
pub fn dot(coef: &[f64], phi: &[f64]) -> f64 {
    coef.iter().zip(phi).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_counts() {
        assert_eq!(exponents(1, 2), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(exponents(2, 2).len(), 6);
        assert_eq!(exponents(3, 2).len(), 10);
        assert_eq!(exponents(2, 3).len(), 10);
        assert_eq!(exponents(2, 2)[0], vec![0, 0]);
        assert_eq!(BasisSpec::Polynomial { degree: 2 }.n_features(2), 6);
        assert_eq!(BasisSpec::PiecewiseLinear { knots: 4 }.n_features(1), 6);
    }

    #[test]
    fn standardized_features() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let b = StepBasis::fit(&BasisSpec::Polynomial { degree: 2 }, &xs, 1);
        assert!((b.mean[0] - 1.5).abs() < 1e-15);
        let mut out = [0.0; 3];
        b.features(&[1.5], &mut out);
        assert_eq!(out, [1.0, 0.0, 0.0]);
        assert!(b.covers(&[3.0]) && !b.covers(&[3.1]));
    }

    #[test]
    fn degenerate_cloud_keeps_unit_scale() {
        let xs = [1.5; 5];
        let b = StepBasis::fit(&BasisSpec::Polynomial { degree: 2 }, &xs, 1);
        assert_eq!(b.scale[0], 1.0);
        let mut out = [0.0; 3];
        b.features(&[1.5], &mut out);
        assert_eq!(out, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn hinge_features() {
        let xs: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let b = StepBasis::fit(&BasisSpec::PiecewiseLinear { knots: 1 }, &xs, 1);
        let mut out = [0.0; 3];
        b.features(&[0.0], &mut out);
        assert_eq!(out[2], 0.0);
        b.features(&[10.0], &mut out);
        assert!(out[2] > 0.0);
    }
}
