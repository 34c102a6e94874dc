//! The missing-rate × confounding-degree experiment grid.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::baselines::{conf_model, Method, Msm};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{evaluate, Estimator, MetricsReport, NeuralEstimator};
use crate::model::{Model, PreparedUnit};
use crate::plot::{line_chart, Series};
use crate::rng::derive_seed;
use crate::sim::{generate_dataset, Dataset, SimConfig};
use crate::train::{train, LossHistory, TrainConfig};

pub const GRID_FILE: &str = "grid.csv";
pub const SUMMARY_FILE: &str = "grid_summary.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const THREADS_ENV: &str = "LIPSCDE_THREADS";
pub const GRID_COLUMNS: [&str; 8] = [
    "missing",
    "gamma",
    "method",
    "seed",
    "rmse_pct_factual",
    "rmse_pct_cf",
    "ate_error",
    "runtime_s",
];

const TAG_RUN: u64 = 0x5255_4e;
const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_EVAL: u64 = 3;

/// Seeds used by one run, all derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub run: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn new(run: u64) -> Self {
        Self {
            run,
            init: derive_seed(run, &[TAG_INIT]),
            train: derive_seed(run, &[TAG_TRAIN]),
            eval: derive_seed(run, &[TAG_EVAL]),
        }
    }

    /// Seed of repetition `index` under a grid base seed. Every cell uses
    /// the same repetition seeds, so cells differ only in their settings.
    pub fn for_repetition(base: u64, index: usize) -> Self {
        Self::new(derive_seed(base, &[TAG_RUN, index as u64]))
    }
}

pub enum Fitted {
    Neural { model: Model, history: LossHistory },
    Msm(Msm),
}

impl Fitted {
    pub fn estimator(&self, eval_seed: u64) -> Box<dyn Estimator + '_> {
        match self {
            Fitted::Neural { model, .. } => Box::new(NeuralEstimator { model, seed: eval_seed }),
            Fitted::Msm(m) => Box::new(m.clone()),
        }
    }

    pub fn history(&self) -> Option<&LossHistory> {
        match self {
            Fitted::Neural { history, .. } => Some(history),
            Fitted::Msm(_) => None,
        }
    }
}

/// Fits `method` on the training split of `ds`.
pub fn fit_method(method: Method, cfg: &ExperimentConfig, ds: &Dataset, seeds: RunSeeds) -> Result<Fitted> {
    let sim = &ds.manifest.config;
    let train_units = ds.train();
    match method {
        Method::Msm => {
            let obs: Vec<_> = train_units.iter().map(|u| u.observed()).collect();
            Ok(Fitted::Msm(Msm::fit(&obs, sim.dt_obs, cfg.model.weight_clip)?))
        }
        Method::Conf | Method::Lipscde => {
            let (d, j) = (sim.covariate_dim, sim.treatment_dim);
            let mut model = if method == Method::Conf {
                conf_model(&cfg.model, d, j, seeds.init)?
            } else {
                Model::new(cfg.model.clone(), d, j, seeds.init)?
            };
            let prepared = train_units
                .iter()
                .map(|u| model.prepare(&u.observed()))
                .collect::<Result<Vec<PreparedUnit>>>()?;
            let history = train(&mut model, &prepared, &train_config_for(cfg, seeds))?;
            Ok(Fitted::Neural { model, history })
        }
    }
}

/// Fits and scores `method` on the test split.
pub fn run_method(method: Method, cfg: &ExperimentConfig, ds: &Dataset, seeds: RunSeeds) -> Result<MetricsReport> {
    let fitted = fit_method(method, cfg, ds, seeds)?;
    let est = fitted.estimator(seeds.eval);
    evaluate(est.as_ref(), &ds.test(), &cfg.grid.plan, seeds.run)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub missing: f64,
    pub gamma: f64,
    pub method: Method,
    pub seed: u64,
    pub result: std::result::Result<MetricsReport, String>,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridReport {
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub n: usize,
    pub failed: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl GridReport {
    /// Statistics of `[rmse_pct_cf, rmse_pct_factual, ate_error]` over the
    /// successful runs of one cell.
    pub fn cell(&self, missing: f64, gamma: f64, method: Method) -> CellStats {
        let runs: Vec<&RunRecord> = self
            .runs
            .iter()
            .filter(|r| r.missing == missing && r.gamma == gamma && r.method == method)
            .collect();
        let ok: Vec<&MetricsReport> = runs.iter().filter_map(|r| r.result.as_ref().ok()).collect();
        let pick = |f: fn(&MetricsReport) -> f64| mean_std(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
        let stats = [
            pick(|m| m.rmse_pct_counterfactual),
            pick(|m| m.rmse_pct_factual),
            pick(|m| m.ate_error),
        ];
        CellStats {
            n: ok.len(),
            failed: runs.len() - ok.len(),
            mean: stats.map(|s| s.0),
            std: stats.map(|s| s.1),
        }
    }

    /// One row per run with the fixed column set. Failed runs keep empty
    /// metric fields.
    pub fn to_csv(&self, record_runtime: bool) -> String {
        let mut out = GRID_COLUMNS.join(",");
        out.push('\n');
        for r in &self.runs {
            let _ = write!(out, "{},{},{},{},", r.missing, r.gamma, r.method.as_str(), r.seed);
            match &r.result {
                Ok(m) => {
                    let _ = write!(out, "{},{},{},", m.rmse_pct_factual, m.rmse_pct_counterfactual, m.ate_error);
                }
                Err(_) => out.push_str(",,,"),
            }
            if record_runtime {
                let _ = write!(out, "{}", r.runtime_s);
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self, cfg: &ExperimentConfig) -> String {
        let mut out = String::from(
            "missing,gamma,method,n_ok,n_failed,rmse_pct_cf_mean,rmse_pct_cf_std,rmse_pct_factual_mean,rmse_pct_factual_std,ate_error_mean,ate_error_std\n",
        );
        for &missing in &cfg.grid.missing_rates {
            for &gamma in &cfg.grid.gammas {
                for &method in &cfg.grid.methods {
                    let c = self.cell(missing, gamma, method);
                    let _ = writeln!(
                        out,
                        "{missing},{gamma},{},{},{},{},{},{},{},{},{}",
                        method.as_str(),
                        c.n,
                        c.failed,
                        c.mean[0],
                        c.std[0],
                        c.mean[1],
                        c.std[1],
                        c.mean[2],
                        c.std[2]
                    );
                }
            }
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("missing,gamma,method,seed,runtime_s,error\n");
        for r in &self.runs {
            let err = r.result.as_ref().err().map(|e| e.replace([',', '\n'], ";")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.missing,
                r.gamma,
                r.method.as_str(),
                r.seed,
                r.runtime_s,
                err
            );
        }
        out
    }

    /// Mean counterfactual error against `γ`, one chart per missing rate.
    pub fn plots(&self, cfg: &ExperimentConfig) -> Vec<(String, String)> {
        cfg.grid
            .missing_rates
            .iter()
            .map(|&missing| {
                let series: Vec<Series> = cfg
                    .grid
                    .methods
                    .iter()
                    .map(|&method| Series {
                        name: method.as_str().into(),
                        points: cfg
                            .grid
                            .gammas
                            .iter()
                            .map(|&g| (g, self.cell(missing, g, method).mean[0]))
                            .collect(),
                    })
                    .collect();
                let pct = (missing * 100.0).round() as i64;
                (
                    format!("cf_error_missing_{pct}.svg"),
                    line_chart(
                        &format!("Counterfactual RMSE (%), {pct}% missing"),
                        "confounding degree gamma",
                        "RMSE (%)",
                        &series,
                    ),
                )
            })
            .collect()
    }

    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(dir.join("plots"))?;
        write_atomic(&dir.join(GRID_FILE), self.to_csv(cfg.grid.record_runtime).as_bytes())?;
        write_atomic(&dir.join(SUMMARY_FILE), self.summary_csv(cfg).as_bytes())?;
        write_atomic(&dir.join(TIMINGS_FILE), self.timings_csv().as_bytes())?;
        for (name, svg) in self.plots(cfg) {
            write_atomic(&dir.join("plots").join(name), svg.as_bytes())?;
        }
        Ok(())
    }
}

/// Parallel cells: `LIPSCDE_THREADS` if set, else the core count.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

struct Job {
    missing: f64,
    gamma: f64,
    seeds: RunSeeds,
}

fn run_job(cfg: &ExperimentConfig, job: &Job) -> Vec<RunRecord> {
    let sim = SimConfig {
        gamma: job.gamma,
        missing_rate: job.missing,
        seed: job.seeds.run,
        ..cfg.sim.clone()
    };
    let dataset = generate_dataset(&sim);
    cfg.grid
        .methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let result = match &dataset {
                Ok(ds) => run_method(method, cfg, ds, job.seeds).map_err(|e| e.to_string()),
                Err(e) => Err(format!("simulation failed: {e}")),
            };
            RunRecord {
                missing: job.missing,
                gamma: job.gamma,
                method,
                seed: job.seeds.run,
                result,
                runtime_s: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// Runs every (missing rate, γ, repetition, method) combination. Failures
/// are recorded and the grid continues. Output order is independent of
/// `threads`.
pub fn run_grid(cfg: &ExperimentConfig, base_seed: u64, threads: usize) -> Result<GridReport> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &missing in &cfg.grid.missing_rates {
        for &gamma in &cfg.grid.gammas {
            for s in 0..cfg.grid.seeds {
                jobs.push(Job {
                    missing,
                    gamma,
                    seeds: RunSeeds::for_repetition(base_seed, s),
                });
            }
        }
    }
    let slots: Vec<Mutex<Option<Vec<RunRecord>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let records = run_job(cfg, &jobs[i]);
                *slots[i].lock().expect("slot lock") = Some(records);
            });
        }
    });
    let mut runs = Vec::new();
    for slot in slots {
        let records = slot
            .into_inner()
            .map_err(|_| Error::contract("grid worker panicked"))?
            .ok_or_else(|| Error::contract("grid job did not run"))?;
        runs.extend(records);
    }
    Ok(GridReport { runs })
}

/// Training settings of one run.
pub fn train_config_for(cfg: &ExperimentConfig, seeds: RunSeeds) -> TrainConfig {
    TrainConfig {
        seed: seeds.train,
        ..cfg.train.clone()
    }
}
