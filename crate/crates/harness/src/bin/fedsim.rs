use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fedsim_harness::compare::{compare_runs, RunMetrics};
use fedsim_harness::sweep::{run_sweep, Axis};
use fedsim_harness::{make_partition, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulations at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every key is optional.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set fraction=0.4`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(self.config.as_deref(), &self.sets)?)
    }

    fn load_unchecked(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(ExperimentConfig::load_unchecked(self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output root; the run goes to `<out>/<run-id>/`.
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
        /// Defaults to `run-<config hash>`.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Run a grid of experiments in parallel.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Swept key and values, e.g. `--grid fraction=0.1,0.4,1.0`. Repeatable.
        #[arg(short, long, value_name = "KEY=V1,V2,...", required = true)]
        grid: Vec<String>,
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value = "sweep")]
        prefix: String,
        /// Worker threads; defaults to the number of cores.
        #[arg(short, long)]
        jobs: Option<usize>,
    },
    /// Align metrics.csv files and report final-metric deltas.
    Compare {
        /// metrics.csv files or run directories; the first is the reference.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Write the aligned per-round table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Show how the configured partition splits the pool.
    PartitionReport {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, out, run_id } => {
            let cfg = config.load()?;
            let id = run_id.unwrap_or_else(|| format!("run-{:016x}", cfg.hash()));
            let outcome = run_experiment(&cfg)?;
            let dir = out.join(&id);
            outcome
                .write_to(&dir)
                .with_context(|| format!("writing {}", dir.display()))?;
            let s = &outcome.summary;
            println!(
                "{id}: {} {:.6} after {} rounds (start {:.6}, best {:.6} at round {}) in {:.2}s",
                s.metric,
                s.last.metric,
                s.rounds_completed,
                s.initial.metric,
                s.best.metric,
                s.best.round,
                s.wall_time_s
            );
            println!("wrote {}", dir.display());
        }
        Command::Sweep {
            config,
            grid,
            out,
            prefix,
            jobs,
        } => {
            let cfg = config.load_unchecked()?;
            let axes = grid.iter().map(|g| g.parse()).collect::<Result<Vec<Axis>, _>>()?;
            if let Some(n) = jobs {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            }
            std::fs::create_dir_all(&out)?;
            let runs = run_sweep(&cfg, &prefix, &axes, Some(&out))?;
            for r in &runs {
                let s = &r.outcome.summary;
                println!(
                    "{:40}  {} {:.6}  released {}",
                    r.point.run_id, s.metric, s.last.metric, s.released_params_total
                );
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Compare { runs, table } => {
            let metrics = runs
                .iter()
                .map(|p| {
                    let file = if p.is_dir() { p.join("metrics.csv") } else { p.clone() };
                    RunMetrics::read(&file)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let cmp = compare_runs(&metrics)?;
            print!("{}", cmp.render());
            if let Some(path) = table {
                std::fs::write(&path, cmp.to_csv())?;
                println!("wrote {}", path.display());
            }
        }
        Command::PartitionReport { config } => {
            let cfg = config.load()?;
            if cfg.centralized {
                bail!("centralized runs use a single client; nothing to partition");
            }
            let p = make_partition(cfg.n_examples, cfg.clients, &cfg.partition_spec(), cfg.seed)?;
            println!(
                "{} examples over {} clients ({})",
                p.total(),
                p.clients(),
                cfg.partition
            );
            println!("{:>6}  {:>6}  {:>7}", "client", "share", "percent");
            for (k, s) in p.client_shares.iter().enumerate() {
                println!("{k:>6}  {s:>6}  {:>6.2}%", 100.0 * *s as f64 / p.total() as f64);
            }
            let min = p.client_shares.iter().min().copied().unwrap_or(0);
            let max = p.client_shares.iter().max().copied().unwrap_or(0);
            println!(
                "largest {:.1}% of the pool, max/min ratio {:.1}",
                100.0 * p.max_fraction(),
                max as f64 / min as f64
            );
        }
    }
    Ok(())
}
