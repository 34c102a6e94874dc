use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lipscde::baselines::{Method, Msm};
use lipscde::checkpoint;
use lipscde::config::ExperimentConfig;
use lipscde::grid::{fit_method, run_grid, thread_count, Fitted, RunSeeds};
use lipscde::io::{read_dataset, write_atomic, write_dataset};
use lipscde::metrics::{evaluate, NeuralEstimator};
use lipscde::plot::{line_chart, Series};
use lipscde::sim::{generate_dataset, Dataset};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const MSM_FILE: &str = "msm.json";

#[derive(Parser, Debug)]
#[command(name = "lipscde", about = "Counterfactual outcome estimation on irregular time series")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth counterfactuals.
    Simulate(Common),
    /// Fit one method and save it with its loss history.
    Train(RunArgs),
    /// Score a saved method on the test split.
    Evaluate(RunArgs),
    /// Run the missing-rate x confounding-degree grid.
    Grid(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file; missing sections and fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "lipscde")]
    method: Method,
    /// Dataset directory from `simulate`; simulated afresh when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.sim.seed = s;
    }
    if let Some(m) = c.missing_rate {
        cfg.sim.missing_rate = m;
    }
    if let Some(g) = c.gamma {
        cfg.sim.gamma = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn dataset_for(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => Ok(read_dataset(dir).with_context(|| format!("reading dataset in {}", dir.display()))?),
        None => Ok(generate_dataset(&cfg.sim)?),
    }
}

fn simulate(c: Common) -> Result<()> {
    let cfg = load_config(&c)?;
    std::fs::create_dir_all(&c.out_dir)?;
    let ds = generate_dataset(&cfg.sim)?;
    write_dataset(&c.out_dir, &ds)?;
    println!(
        "wrote {} units ({} train / {} val / {} test) to {}",
        ds.units.len(),
        ds.manifest.splits.train.len(),
        ds.manifest.splits.val.len(),
        ds.manifest.splits.test.len(),
        c.out_dir.display()
    );
    Ok(())
}

fn train_cmd(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = &args.common.out_dir;
    std::fs::create_dir_all(out.join("plots"))?;
    save_config(out, &cfg)?;
    let ds = dataset_for(&cfg, args.data.as_deref())?;
    let seeds = RunSeeds::new(ds.manifest.config.seed);
    let start = Instant::now();
    let fitted = fit_method(args.method, &cfg, &ds, seeds)?;
    match &fitted {
        Fitted::Neural { model, history } => {
            checkpoint::save(&out.join(CHECKPOINT_FILE), model)?;
            write_atomic(&out.join("loss_history.csv"), history.to_csv().as_bytes())?;
            let series = Series {
                name: "total".into(),
                points: history.records.iter().map(|r| (r.iteration as f64, r.total)).collect(),
            };
            let svg = line_chart("Training loss", "iteration", "loss", &[series]);
            write_atomic(&out.join("plots").join("loss_history.svg"), svg.as_bytes())?;
            let epochs = history.epoch_means();
            println!(
                "trained {} ({} parameters) in {:.1}s; epoch loss {:.4} -> {:.4}",
                args.method.as_str(),
                model.num_parameters(),
                start.elapsed().as_secs_f64(),
                epochs.first().copied().unwrap_or(f64::NAN),
                epochs.last().copied().unwrap_or(f64::NAN)
            );
        }
        Fitted::Msm(msm) => {
            write_atomic(&out.join(MSM_FILE), &serde_json::to_vec_pretty(msm)?)?;
            println!(
                "fitted msm; treatment effect {:.4}{}",
                msm.treatment_effect(),
                if msm.ridge_fallback { " (ridge fallback)" } else { "" }
            );
        }
    }
    Ok(())
}

fn evaluate_cmd(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = &args.common.out_dir;
    let ds = dataset_for(&cfg, args.data.as_deref())?;
    let seeds = RunSeeds::new(ds.manifest.config.seed);
    let report = match args.method {
        Method::Msm => {
            let path = out.join(MSM_FILE);
            let msm: Msm = serde_json::from_slice(&std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?;
            evaluate(&msm, &ds.test(), &cfg.grid.plan, seeds.run)?
        }
        Method::Conf | Method::Lipscde => {
            let path = out.join(CHECKPOINT_FILE);
            let model = checkpoint::load(&path).with_context(|| format!("reading {}", path.display()))?;
            if model.branch.is_some() != (args.method == Method::Lipscde) {
                bail!("{} holds a different method than {}", path.display(), args.method.as_str());
            }
            let est = NeuralEstimator {
                model: &model,
                seed: seeds.eval,
            };
            evaluate(&est, &ds.test(), &cfg.grid.plan, seeds.run)?
        }
    };
    write_atomic(&out.join("metrics.json"), &serde_json::to_vec_pretty(&report)?)?;
    println!(
        "{}: rmse_pct_factual {:.4}  rmse_pct_cf {:.4}  ate_error {:.4}",
        args.method.as_str(),
        report.rmse_pct_factual,
        report.rmse_pct_counterfactual,
        report.ate_error
    );
    Ok(())
}

fn grid_cmd(c: Common) -> Result<()> {
    let mut cfg = load_config(&c)?;
    if let Some(m) = c.missing_rate {
        cfg.grid.missing_rates = vec![m];
    }
    if let Some(g) = c.gamma {
        cfg.grid.gammas = vec![g];
    }
    std::fs::create_dir_all(&c.out_dir)?;
    save_config(&c.out_dir, &cfg)?;
    let threads = thread_count();
    let start = Instant::now();
    let report = run_grid(&cfg, cfg.sim.seed, threads)?;
    report.write(&c.out_dir, &cfg)?;
    let failed = report.runs.iter().filter(|r| r.result.is_err()).count();
    println!(
        "{} runs ({failed} failed) on {threads} thread(s) in {:.1}s",
        report.runs.len(),
        start.elapsed().as_secs_f64()
    );
    print!("{}", report.summary_csv(&cfg));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(c) => simulate(c),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Grid(c) => grid_cmd(c),
    }
}
