//! Solver behaviour through the public API.

use fbsde::model::builtin;
use fbsde::solver::{
    chain_horizon, decoupling_field, find_delta0, picard_solve, SolverConfig, SolverError,
    ZetaSampler,
};

fn unit_box() -> ZetaSampler {
    ZetaSampler::Uniform {
        lo: vec![-1.0],
        hi: vec![1.0],
    }
}

#[test]
fn zero_model_field_is_the_terminal_function() {
    let m = builtin("T0").unwrap();
    let cfg = SolverConfig::new(0.5, 10, 2_000, unit_box(), 1);
    let sol = picard_solve(&m.coeffs, &m.marks, &cfg).unwrap();
    let xs: Vec<Vec<f64>> = [-0.9, -0.3, 0.0, 0.4, 0.8].iter().map(|x| vec![*x]).collect();
    for (x, v) in xs.iter().zip(decoupling_field(&sol.policy, &xs)) {
        assert!((v.u - x[0]).abs() < 1e-10, "u({}) = {}", x[0], v.u);
        assert!(!v.extrapolated);
    }
}

#[test]
fn coupled_benchmark_contracts_and_is_seed_deterministic() {
    let m = builtin("T3").unwrap();
    let cfg = SolverConfig::new(0.1, 8, 3_000, unit_box(), 5);
    let a = picard_solve(&m.coeffs, &m.marks, &cfg).unwrap();
    let b = picard_solve(&m.coeffs, &m.marks, &cfg).unwrap();
    assert!(a.diagnostics.converged);
    assert!(a.diagnostics.contraction_ratio.unwrap() < 0.5);
    assert_eq!(a.policy.to_json().unwrap(), b.policy.to_json().unwrap());
    let other = picard_solve(&m.coeffs, &m.marks, &SolverConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.policy.to_json().unwrap(), other.policy.to_json().unwrap());
}

#[test]
fn strong_coupling_halves_until_refused() {
    let m = builtin("T3-neg").unwrap();
    let mut cfg = SolverConfig::new(0.5, 20, 5_000, unit_box(), 3);
    cfg.max_iter = 12;
    let (err, attempts) = find_delta0(&m.coeffs, &m.marks, &cfg).unwrap_err();
    assert!(matches!(err, SolverError::Irreducible { .. }), "{err}");
    assert!(attempts.len() >= 2);
    for w in attempts.windows(2) {
        assert!((w[1].delta - w[0].delta / 2.0).abs() < 1e-12);
    }
}

#[test]
fn chained_windows_are_consecutive() {
    let m = builtin("T3").unwrap();
    let cfg = SolverConfig::new(0.1, 5, 2_000, unit_box(), 7);
    let chain = chain_horizon(&m.coeffs, &m.marks, 0.3, 0.1, &cfg).unwrap();
    assert_eq!(chain.windows.len(), 3);
    for (w, pol) in chain.windows.iter().enumerate() {
        assert!((pol.grid.t0 - 0.1 * w as f64).abs() < 1e-12);
    }
    assert!(chain.diagnostics.iter().all(|d| d.converged));
    assert!(chain_horizon(&m.coeffs, &m.marks, 0.25, 0.1, &cfg).is_err());
}
