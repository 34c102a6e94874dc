mod common;

use common::{micro_model_config, micro_sim, micro_units, prepare_all, random_vec, rng};
use lipscde::baselines::Method;
use lipscde::checkpoint;
use lipscde::config::ExperimentConfig;
use lipscde::grid::{fit_method, run_grid, run_method, RunSeeds, GRID_COLUMNS};
use lipscde::io::{read_dataset, write_dataset};
use lipscde::metrics::{evaluate, rmse_percent, value_range, NeuralEstimator};
use lipscde::model::{Model, ModelConfig};
use lipscde::sim::{generate_dataset, SimConfig};
use lipscde::tensor::Tensor;
use lipscde::train::{train, TrainConfig};

fn values(store: &lipscde::autodiff::ParamStore) -> Vec<Tensor> {
    store.iter().map(|p| p.value.clone()).collect()
}

fn micro_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 11,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let units = micro_units(&micro_sim(5), 4, 1);
    let cfg = ModelConfig {
        diffusion_scale: 0.0,
        ..micro_model_config()
    };
    let mut model = Model::new(cfg, 5, 3, 2).unwrap();
    let before = values(&model.store);
    let prepared = prepare_all(&model, &units);
    let hist = train(
        &mut model,
        &prepared,
        &TrainConfig {
            lr: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(values(&model.store), before);
    let first = hist.records[0].total;
    assert_eq!(hist.records.len(), 30);
    for r in &hist.records {
        assert!((r.total - first).abs() <= 1e-12 * first.abs(), "{} vs {first}", r.total);
    }
}

#[test]
fn micro_problem_loss_decreases_for_every_seed() {
    let units = micro_units(&micro_sim(5), 4, 50);
    for seed in 0..5 {
        let mut model = Model::new(micro_model_config(), 5, 3, seed).unwrap();
        let prepared = prepare_all(&model, &units);
        let means = train(&mut model, &prepared, &micro_train(seed)).unwrap().epoch_means();
        assert!(means[10] < means[0], "seed {seed}: {means:?}");
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let units = micro_units(&micro_sim(6), 4, 70);
    let run = || {
        let mut model = Model::new(micro_model_config(), 5, 3, 3).unwrap();
        let prepared = prepare_all(&model, &units);
        let hist = train(&mut model, &prepared, &micro_train(8)).unwrap();
        (hist, values(&model.store))
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1, h2);
    assert_eq!(s1, s2);
    assert_eq!(h1.to_csv(), h2.to_csv());
}

#[test]
fn rmse_closed_forms_and_oracle() {
    let y = [1.0, 4.0, 2.0, 6.0];
    assert_eq!(rmse_percent(&y, &y, value_range(&y)).unwrap(), 0.0);
    let shifted: Vec<f64> = y.iter().map(|v| v + 0.25).collect();
    let r = rmse_percent(&shifted, &y, value_range(&y)).unwrap();
    assert!((r - 100.0 * 0.25 / 5.0).abs() < 1e-12);
    let mut g = rng(31);
    for _ in 0..20 {
        let p = random_vec(&mut g, 17);
        let t = random_vec(&mut g, 17);
        let mut sq = 0.0;
        for i in 0..17 {
            sq += (p[i] - t[i]) * (p[i] - t[i]);
        }
        let expect = 100.0 * (sq / 17.0).sqrt() / 2.5;
        assert!((rmse_percent(&p, &t, 2.5).unwrap() - expect).abs() < 1e-12);
    }
    assert!(rmse_percent(&y, &y, 0.0).is_err());
    assert!(rmse_percent(&y, &y[..2], 1.0).is_err());
    assert!(rmse_percent(&[], &[], 1.0).is_err());
}

fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sim = SimConfig {
        n_units: 20,
        horizon: 8,
        ..SimConfig::default()
    };
    cfg.train = TrainConfig {
        epochs: 1,
        iterations_per_batch: 2,
        ..TrainConfig::default()
    };
    cfg.model = micro_model_config();
    cfg
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_experiment();
    let ds = generate_dataset(&cfg.sim).unwrap();
    let seeds = RunSeeds::new(4);
    let lipscde::grid::Fitted::Neural { model, .. } = fit_method(Method::Lipscde, &cfg, &ds, seeds).unwrap() else {
        unreachable!()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    checkpoint::save(&path, &model).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(values(&checkpoint::decode(&checkpoint::encode(&model).unwrap()).unwrap().store), values(&model.store));
    let a = evaluate(&NeuralEstimator { model: &model, seed: 5 }, &ds.test(), &cfg.grid.plan, 0).unwrap();
    let b = evaluate(&NeuralEstimator { model: &loaded, seed: 5 }, &ds.test(), &cfg.grid.plan, 0).unwrap();
    assert_eq!(a, b);
    assert!(checkpoint::decode(&[1, 2, 3]).is_err());
}

#[test]
fn metrics_report_is_deterministic() {
    let cfg = small_experiment();
    let ds = generate_dataset(&cfg.sim).unwrap();
    for method in Method::ALL {
        let a = run_method(method, &cfg, &ds, RunSeeds::new(9)).unwrap();
        let b = run_method(method, &cfg, &ds, RunSeeds::new(9)).unwrap();
        assert_eq!(a, b, "{}", method.as_str());
        assert!(a.rmse_pct_factual >= 0.0 && a.rmse_pct_counterfactual >= 0.0);
    }
}

#[test]
fn grid_covers_the_cartesian_product_with_stable_schema() {
    let mut cfg = small_experiment();
    cfg.grid.seeds = 2;
    let report = run_grid(&cfg, 3, 2).unwrap();
    assert_eq!(report.runs.len(), 3 * 3 * 3 * 2);
    let csv = report.to_csv(false);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "missing,gamma,method,seed,rmse_pct_factual,rmse_pct_cf,ate_error,runtime_s"
    );
    assert_eq!(GRID_COLUMNS.len(), 8);
    for line in lines {
        assert_eq!(line.split(',').count(), 8, "{line}");
        assert!(line.ends_with(','));
    }
    for &m in &cfg.grid.missing_rates {
        for &g in &cfg.grid.gammas {
            for method in Method::ALL {
                let cell = report.cell(m, g, method);
                assert_eq!(cell.n + cell.failed, 2);
            }
        }
    }
    let single = run_grid(&cfg, 3, 1).unwrap();
    assert_eq!(single.to_csv(false), csv);
    assert!(report.to_csv(true).lines().skip(1).all(|l| !l.ends_with(',')));
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = generate_dataset(&SimConfig {
        n_units: 12,
        missing_rate: 0.15,
        ..SimConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_experiment();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml("[train]\nlr = -1.0\n").is_err());
    assert!(ExperimentConfig::from_toml("[train]\nunknown = 1\n").is_err());
    let defaults = ExperimentConfig::default();
    assert_eq!((defaults.train.lr, defaults.train.epochs, defaults.train.iterations_per_batch, defaults.train.batch_size), (0.01, 10, 10, 16));
}
