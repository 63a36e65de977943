//! Least-squares projection onto a step basis via the normal equations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use super::basis::StepBasis;
use crate::stats::{chunked_sum, CHUNK};

/// Relative ridge added to the Gram diagonal when it is rank-deficient.
pub const RIDGE: f64 = 1e-10;

/// Smallest accepted ratio of squared Cholesky pivots before falling back to ridge.
const PIVOT_RATIO: f64 = 1e-13;

/// Feature matrix of one step (row-major, `m × p`) with its factored Gram matrix.
pub struct Design {
    pub m: usize,
    pub p: usize,
    pub features: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Set when the ridge fallback was used.
    pub ridged: bool,
}

impl Design {
    /// Evaluate features of all rows of `xs` (row-major, `n` columns) and factor.
    pub fn build(basis: &StepBasis, xs: &[f64], n: usize) -> Self {
        let p = basis.n_features();
        let m = xs.len() / n.max(1);
        let mut features = vec![0.0; m * p];
        features
            .par_chunks_mut(CHUNK * p)
            .zip(xs.par_chunks(CHUNK * n))
            .for_each(|(fo, xi)| {
                for (f, x) in fo.chunks_mut(p).zip(xi.chunks(n)) {
                    basis.features(x, f);
                }
            });
        let g = chunked_sum(m, p * p, |r, acc| {
            for row in r {
                let f = &features[row * p..(row + 1) * p];
                for a in 0..p {
                    let fa = f[a];
                    for b in a..p {
                        acc[a * p + b] += fa * f[b];
                    }
                }
            }
        });
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] = g[a * p + b];
                gram[(b, a)] = g[a * p + b];
            }
        }
        let (chol, ridged) = factor(gram);
        Design {
            m,
            p,
            features,
            chol,
            ridged,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    /// Regress each target column (length `m`) on the features. Targets are
    /// centered before solving and the mean is restored in the intercept, so a
    /// constant target is reproduced exactly.
    pub fn solve(&self, targets: &[&[f64]]) -> Vec<Vec<f64>> {
        let r = targets.len();
        let p = self.p;
        let m = self.m;
        let sums = chunked_sum(m, r, |rg, acc| {
            for (k, t) in targets.iter().enumerate() {
                acc[k] += t[rg.clone()].iter().sum::<f64>();
            }
        });
        let means: Vec<f64> = sums.iter().map(|s| s / m.max(1) as f64).collect();
        let rhs = chunked_sum(m, p * r, |rg, acc| {
            for i in rg {
                let f = &self.features[i * p..(i + 1) * p];
                for (k, t) in targets.iter().enumerate() {
                    let c = t[i] - means[k];
                    if c != 0.0 {
                        for a in 0..p {
                            acc[k * p + a] += f[a] * c;
                        }
                    }
                }
            }
        });
        (0..r)
            .map(|k| {
                let b = DVector::from_column_slice(&rhs[k * p..(k + 1) * p]);
                let mut coef: Vec<f64> = self.chol.solve(&b).iter().copied().collect();
                coef[0] += means[k];
                coef
            })
            .collect()
    }

    /// Fitted values `Φ β` for every row.
    pub fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut out = vec![0.0; self.m];
        out.par_chunks_mut(CHUNK)
            .zip(self.features.par_chunks(CHUNK * p))
            .for_each(|(o, f)| {
                for (v, row) in o.iter_mut().zip(f.chunks(p)) {
                    *v = super::basis::dot(coef, row);
                }
            });
        out
    }
}

fn factor(gram: DMatrix<f64>) -> (Cholesky<f64, Dyn>, bool) {
    if let Some(ch) = Cholesky::new(gram.clone()) {
        let d: Vec<f64> = (0..gram.nrows())
            .map(|i| ch.l_dirty()[(i, i)].powi(2))
            .collect();
        let max = d.iter().cloned().fold(0.0, f64::max);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        if max > 0.0 && min / max > PIVOT_RATIO {
            return (ch, false);
        }
    }
    let p = gram.nrows();
    let trace: f64 = (0..p).map(|i| gram[(i, i)]).sum();
    let lambda = RIDGE * (trace / p as f64).max(f64::MIN_POSITIVE);
    let mut g = gram;
    for i in 0..p {
        g[(i, i)] += lambda;
    }
    let ch = Cholesky::new(g).expect("ridge-regularized Gram matrix is positive definite");
    (ch, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::basis::BasisSpec;

    fn cloud(m: usize) -> Vec<f64> {
        (0..m)
            .map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / m as f64)
            .collect()
    }

    #[test]
    fn recovers_quadratic_exactly() {
        let xs = cloud(1000);
        let b = StepBasis::fit(&BasisSpec::Polynomial { degree: 2 }, &xs, 1);
        let d = Design::build(&b, &xs, 1);
        assert!(!d.ridged);
        let t: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x).collect();
        let c = d.solve(&[&t]);
        let fit = d.fitted(&c[0]);
        for (u, v) in fit.iter().zip(&t) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn residuals_orthogonal_to_features() {
        let xs = cloud(2000);
        let b = StepBasis::fit(&BasisSpec::Polynomial { degree: 2 }, &xs, 1);
        let d = Design::build(&b, &xs, 1);
        let t: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin() + x.powi(3)).collect();
        let c = d.solve(&[&t]);
        let fit = d.fitted(&c[0]);
        for a in 0..d.p {
            let ip: f64 = (0..d.m).map(|i| d.row(i)[a] * (t[i] - fit[i])).sum();
            assert!(ip.abs() < 1e-8, "feature {a}: {ip}");
        }
    }

    #[test]
    fn constant_target_exact_on_degenerate_cloud() {
        let xs = vec![1.5; 100];
        let b = StepBasis::fit(&BasisSpec::Polynomial { degree: 2 }, &xs, 1);
        let d = Design::build(&b, &xs, 1);
        assert!(d.ridged);
        let t = vec![0.3; 100];
        let c = d.solve(&[&t]);
        assert_eq!(c[0], vec![0.3, 0.0, 0.0]);
        // non-constant target on a degenerate cloud: the mean
        let t2: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let c2 = d.solve(&[&t2]);
        assert!((c2[0][0] - 49.5).abs() < 1e-9);
    }

    #[test]
    fn multiple_targets_and_two_dimensions() {
        let m = 500;
        let xs: Vec<f64> = (0..m)
            .flat_map(|i| {
                let a = i as f64 / m as f64;
                [a, (7.0 * a).fract()]
            })
            .collect();
        let b = StepBasis::fit(&BasisSpec::Polynomial { degree: 2 }, &xs, 2);
        let d = Design::build(&b, &xs, 2);
        let t1: Vec<f64> = xs.chunks(2).map(|r| r[0] * r[1]).collect();
        let t2: Vec<f64> = xs.chunks(2).map(|r| 2.0 - r[1]).collect();
        let c = d.solve(&[&t1, &t2]);
        for (k, t) in [&t1, &t2].iter().enumerate() {
            let fit = d.fitted(&c[k]);
            for (u, v) in fit.iter().zip(t.iter()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn piecewise_linear_fits_kink() {
        let xs = cloud(1001);
        let b = StepBasis::fit(&BasisSpec::PiecewiseLinear { knots: 3 }, &xs, 1);
        let d = Design::build(&b, &xs, 1);
        // knots sit at the quarter points of the cloud; a kink at 0 is representable
        let t: Vec<f64> = xs.iter().map(|x| x.max(0.0)).collect();
        let c = d.solve(&[&t]);
        let fit = d.fitted(&c[0]);
        let err = fit
            .iter()
            .zip(&t)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }
}
