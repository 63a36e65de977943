//! Property tests of invariants that hold for every admissible input.

use fbsde::audit::scaling::log_grid;
use fbsde::audit::{constant_k_lemma, epsilon_shift, AuditThresholds, StabilityConfig};
use fbsde::mark_space::build_finite;
use fbsde::model::builtin;
use fbsde::pathsim::TimeGrid;
use fbsde::rng::{StreamKey, Substream};
use fbsde::solver::regression::Design;
use fbsde::solver::{BasisSpec, StepBasis};
use fbsde::stats::{fit_line, mean_stderr};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn regression_reproduces_affine_targets(
        xs in prop::collection::vec(-5.0f64..5.0, 40..200),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        degree in 1usize..4,
    ) {
        let basis = StepBasis::fit(&BasisSpec::Polynomial { degree }, &xs, 1);
        let design = Design::build(&basis, &xs, 1);
        let target: Vec<f64> = xs.iter().map(|x| a + b * x).collect();
        let constant = vec![a; xs.len()];
        let coefs = design.solve(&[&target, &constant]);
        for (fit, t) in design.fitted(&coefs[0]).iter().zip(&target) {
            prop_assert!((fit - t).abs() <= 1e-8 * (1.0 + t.abs()));
        }
        for fit in design.fitted(&coefs[1]) {
            prop_assert!((fit - a).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn line_fit_recovers_exact_lines(
        x in prop::collection::vec(-10.0f64..10.0, 3..30),
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let y: Vec<f64> = x.iter().map(|v| a + b * v).collect();
        let fit = fit_line(&x, &y).unwrap();
        prop_assert!((fit.slope - b).abs() < 1e-8);
        prop_assert!((fit.intercept - a).abs() < 1e-7);
    }

    #[test]
    fn log_grid_is_geometric(lo in 1e-5f64..1e-2, ratio in 2.0f64..1e3, n in 2usize..8) {
        let hi = lo * ratio;
        let g = log_grid(lo, hi, n);
        prop_assert_eq!(g.len(), n);
        prop_assert!((g[0] - lo).abs() <= 1e-12 * lo);
        prop_assert!((g[n - 1] - hi).abs() <= 1e-12 * hi);
        let q = g[1] / g[0];
        for w in g.windows(2) {
            prop_assert!((w[1] / w[0] - q).abs() < 1e-9 * q);
        }
    }

    #[test]
    fn constant_sample_has_zero_stderr(c in -1e3f64..1e3, n in 2usize..100) {
        let s = mean_stderr(&vec![c; n]);
        prop_assert!((s.mean - c).abs() <= 1e-12 * (1.0 + c.abs()));
        prop_assert!(s.stderr <= 1e-9 * (1.0 + c.abs()));
    }

    #[test]
    fn streams_are_reproducible_and_separated(seed in any::<u64>(), path in 0u64..1000) {
        let draw = |sub: Substream| {
            let mut s = StreamKey::new(seed, sub).path(path);
            (s.uniform(), s.normal())
        };
        prop_assert_eq!(draw(Substream::BROWNIAN), draw(Substream::BROWNIAN));
        prop_assert_ne!(draw(Substream::BROWNIAN), draw(Substream::JUMPS));
        prop_assert_ne!(draw(Substream::ZETA.indexed(0)), draw(Substream::ZETA.indexed(1)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// With `K ≡ c` the compensator side is deterministic: `c² λ(E) δ` at p = 2.
    #[test]
    fn constant_k_lemma_left_side_is_exact(
        c in -2.0f64..2.0,
        e in 0.1f64..1.0,
        w in 0.2f64..3.0,
        seed in any::<u64>(),
    ) {
        let ms = build_finite(&[(e, w)]).unwrap();
        let grid = TimeGrid::new(0.0, 0.2, 8).unwrap();
        let r = constant_k_lemma(c, &ms, &grid, 400, seed, 2.0, &AuditThresholds::default()).unwrap();
        let exact = c * c * w * 0.2;
        prop_assert!((r.lhs.mean - exact).abs() <= 1e-12 * (1.0 + exact));
        prop_assert!(r.pass);
    }

    /// A terminal shift passes through exactly when nothing depends on `y`.
    #[test]
    fn epsilon_shift_is_exact(eps in 0.001f64..1.0, zeta in -1.0f64..1.0, seed in 0u64..1000) {
        let m = builtin("T3-shift").unwrap();
        let cfg = StabilityConfig::new(0.1, 5, 500, seed, vec![zeta]);
        let r = epsilon_shift(&m.coeffs, &m.marks, eps, &cfg, &AuditThresholds::default()).unwrap();
        prop_assert!((r.gap - eps).abs() < 1e-9, "gap {} eps {}", r.gap, eps);
        prop_assert!(r.pass);
    }
}
