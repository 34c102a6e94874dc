mod common;

use std::collections::HashSet;
use std::time::Instant;

use common::confounding_partial_corr;
use lipscde::sim::{
    apply_missingness, generate_dataset, simulate_unit, simulate_unit_with_plans, split_indices, CounterfactualPlan,
    SimConfig,
};

fn noise_free() -> SimConfig {
    SimConfig {
        sigma_z: 0.0,
        sigma_x: 0.0,
        sigma_y: 0.0,
        ..SimConfig::default()
    }
}

#[test]
fn confounding_strength_grows_with_gamma() {
    let corr: Vec<f64> = [0.0, 0.2, 0.4, 0.6]
        .iter()
        .map(|&g| confounding_partial_corr(g, 2000, 11))
        .collect();
    assert!(corr[0].abs() < 0.05, "gamma 0 partial correlation {}", corr[0]);
    for w in corr.windows(2) {
        assert!(w[1] > w[0], "{corr:?}");
    }
}

#[test]
fn single_flip_changes_only_the_next_outcome() {
    let cfg = noise_free();
    let base = simulate_unit(&cfg, 5).unwrap();
    let a = base.treatments().clone();
    let j = cfg.treatment_dim as f64;
    for k in [0, 7, cfg.horizon - 2] {
        let mut flipped = a.clone();
        let old = flipped.get(k, 1);
        flipped.set(k, 1, 1.0 - old);
        let plans = vec![
            CounterfactualPlan {
                name: "flip".into(),
                treatments: flipped,
            },
            CounterfactualPlan {
                name: "same".into(),
                treatments: a.clone(),
            },
        ];
        let rec = simulate_unit_with_plans(&cfg, 5, 0, Some(plans)).unwrap();
        assert_eq!(rec.outcomes(), base.outcomes());
        let (y, cf) = (rec.outcomes(), &rec.y_cf()[0]);
        let sign = 1.0 - 2.0 * old;
        for t in 0..cfg.horizon {
            let expect = if t == k + 1 { sign * cfg.beta_a / j } else { 0.0 };
            assert!((cf[t] - y[t] - expect).abs() < 1e-12, "k={k} t={t}");
        }
        assert_eq!(rec.y_cf()[1], y);
    }
}

#[test]
fn noise_free_outcomes_follow_the_recursion() {
    let cfg = noise_free();
    let rec = simulate_unit(&cfg, 8).unwrap();
    let obs = rec.observed();
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    for t in 1..rec.len() {
        let z = rec.z_true().get(t - 1, 0);
        let expect = cfg.beta_a * mean(obs.a.row(t - 1)) + cfg.beta_x * mean(obs.x.row(t - 1)) + cfg.gamma_y * z;
        assert!((rec.outcomes()[t] - expect).abs() < 1e-12);
        assert!((z - cfg.alpha_z.powi(t as i32 - 1) * rec.z_true().get(0, 0)).abs() < 1e-12);
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let cfg = SimConfig {
        n_units: 50,
        missing_rate: 0.3,
        seed: 21,
        ..SimConfig::default()
    };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&SimConfig { seed: 22, ..cfg }).unwrap();
    assert_ne!(a.units, c.units);
}

#[test]
fn missingness_removes_interior_points() {
    let cfg = SimConfig::default();
    let rec = simulate_unit(&cfg, 3).unwrap();
    assert_eq!(apply_missingness(&rec, 0.0, 1).unwrap(), rec);
    let thin = apply_missingness(&rec, 0.15, 1).unwrap();
    assert_eq!(thin.len(), 26);
    assert_eq!(thin.timestamps()[0], rec.timestamps()[0]);
    assert_eq!(thin.timestamps().last(), rec.timestamps().last());
    for (k, t) in thin.timestamps().iter().enumerate() {
        let i = rec.timestamps().iter().position(|s| s == t).unwrap();
        assert_eq!(thin.outcomes()[k], rec.outcomes()[i]);
        assert_eq!(thin.treatments().row(k), rec.treatments().row(i));
    }
    assert_eq!(apply_missingness(&rec, 0.15, 1).unwrap(), thin);
    assert!(apply_missingness(&rec, 1.0, 1).is_err());
}

#[test]
fn missing_patterns_differ_across_units() {
    let ds = generate_dataset(&SimConfig {
        n_units: 20,
        missing_rate: 0.3,
        ..SimConfig::default()
    })
    .unwrap();
    let patterns: HashSet<Vec<u64>> = ds
        .units
        .iter()
        .map(|u| u.timestamps().iter().map(|t| t.to_bits()).collect())
        .collect();
    assert!(patterns.len() > 15);
    assert!(ds.units.iter().all(|u| u.len() == 21));
}

#[test]
fn splits_are_an_exact_partition() {
    let s = split_indices(100, 4);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    let all: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    assert_eq!(all, (0..100).collect());
    assert_eq!(split_indices(100, 4), s);
    let ds = generate_dataset(&SimConfig {
        n_units: 100,
        ..SimConfig::default()
    })
    .unwrap();
    assert_eq!(ds.train().len() + ds.val().len() + ds.test().len(), 100);
}

#[test]
fn two_thousand_units_under_a_minute() {
    let start = Instant::now();
    let ds = generate_dataset(&SimConfig {
        n_units: 2000,
        missing_rate: 0.15,
        ..SimConfig::default()
    })
    .unwrap();
    assert_eq!(ds.units.len(), 2000);
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SimConfig { gamma: 1.5, ..SimConfig::default() },
        SimConfig { missing_rate: 1.0, ..SimConfig::default() },
        SimConfig { horizon: 3, ..SimConfig::default() },
        SimConfig { alpha_z: 1.0, ..SimConfig::default() },
        SimConfig { sigma_y: -0.1, ..SimConfig::default() },
        SimConfig { n_units: 0, ..SimConfig::default() },
    ] {
        assert!(generate_dataset(&cfg).is_err());
    }
}
