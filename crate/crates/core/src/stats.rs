//! Deterministic parallel reductions and sample statistics.
//!
//! Reductions split the index range into fixed-size chunks, reduce each chunk
//! in parallel and combine the partial results in chunk order, so the result
//! is bit-identical for any worker count.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Chunk length for reductions over paths.
pub const CHUNK: usize = 2048;

/// Sum `width` accumulators over `0..len`; `f` fills the partial sums of one range.
pub fn chunked_sum<F>(len: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = len.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            f(c * CHUNK..((c + 1) * CHUNK).min(len), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MeanStderr {
    /// Studentized distance of the mean from `target`; infinite stderr-free gaps
    /// are reported as ±∞ and exact agreement as 0.
    pub fn z_score(&self, target: f64) -> f64 {
        studentize(self.mean - target, self.stderr)
    }
}

pub fn studentize(gap: f64, stderr: f64) -> f64 {
    if gap == 0.0 {
        0.0
    } else if stderr > 0.0 {
        gap / stderr
    } else {
        gap.signum() * f64::INFINITY
    }
}

/// Mean and standard error of per-path values.
pub fn mean_stderr(values: &[f64]) -> MeanStderr {
    let n = values.len();
    if n == 0 {
        return MeanStderr {
            mean: f64::NAN,
            stderr: f64::NAN,
            count: 0,
        };
    }
    let s = chunked_sum(n, 1, |r, acc| acc[0] += values[r].iter().sum::<f64>());
    let mean = s[0] / n as f64;
    let ss = chunked_sum(n, 1, |r, acc| {
        acc[0] += values[r].iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    });
    let var = if n > 1 { ss[0] / (n - 1) as f64 } else { 0.0 };
    MeanStderr {
        mean,
        stderr: (var / n as f64).sqrt(),
        count: n,
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Ordinary least-squares line `y = a + b x` with the slope's standard error
/// and the coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r2: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2 {
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        slope_stderr,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_serial() {
        let v: Vec<f64> = (0..10_000).map(|i| (i as f64).sin()).collect();
        let s = chunked_sum(v.len(), 2, |r, acc| {
            for i in r {
                acc[0] += v[i];
                acc[1] += v[i] * v[i];
            }
        });
        let serial: f64 = v.iter().sum();
        assert!((s[0] - serial).abs() < 1e-9);
        assert!(s[1] > 0.0);
    }

    #[test]
    fn chunked_sum_independent_of_pool_size() {
        let v: Vec<f64> = (0..50_000)
            .map(|i| ((i * 7919) % 1000) as f64 * 1e-3 + 1e-9)
            .collect();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mean_stderr(&v))
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn line_fit_exact() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14);
        assert!((f.intercept - 1.0).abs() < 1e-14);
        assert!(f.slope_stderr < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn median_and_studentize() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(studentize(0.0, 0.0), 0.0);
        assert_eq!(studentize(1.0, 0.5), 2.0);
        assert!(studentize(-1.0, 0.0).is_infinite());
    }
}
