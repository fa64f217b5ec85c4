use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pirl::datagen;
use pirl::harness::{self, ExperimentConfig, RunRecord};
use pirl::metrics;
use pirl::models::ModelParams;
use pirl::training::Mode;
use pirl::Error;

#[derive(Parser)]
#[command(name = "pirl", version, about = "Practice-invariant representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (flat TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the held-out environment.
    #[arg(long)]
    holdout: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Export the synthetic environments as CSV.
    Generate(Common),
    /// Train and evaluate one mode on one seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        mode: String,
    },
    /// Run erm, adversarial_only, irm_only and full on shared data.
    Ablate(Common),
    /// Run the full objective over the lambda × gamma grid.
    Sweep(Common),
    /// Render tables from the run records under --out.
    Report(Common),
    /// Environment leakage of a saved checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.master_seed = s;
    }
    if let Some(h) = common.holdout {
        config.holdout = Some(h);
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn summarize(records: &[RunRecord], out: &Path) -> Result<(), Error> {
    let failed = records.iter().filter(|r| r.failure.is_some()).count();
    println!("{} run(s) written to {} ({failed} failed)", records.len(), out.display());
    if failed < records.len() {
        for path in harness::render_tables(out)? {
            if path.extension().is_some_and(|e| e == "txt") {
                print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
                println!();
            }
        }
    }
    if failed > 0 {
        for r in records.iter().filter(|r| r.failure.is_some()) {
            eprintln!("{} seed {}: {}", r.spec.label, r.spec.seed_index, r.failure.as_deref().unwrap_or(""));
        }
        return Err(Error::InvalidArgument(format!("{failed} run(s) failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(common) => {
            let config = load_config(&common)?;
            let out = &config.output_dir;
            std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let suite = datagen::env_suite(&config.suite_profile(), config.num_envs, config.master_seed)?;
            for spec in &suite {
                let ds = datagen::generate(spec, config.n_per_env)?;
                let path = out.join(format!("env{}.csv", spec.env_id));
                ds.save_csv(&path)?;
                let role = if spec.env_id == config.holdout_env() { "holdout" } else { "train" };
                println!("{} ({} rows, {role})", path.display(), ds.len());
            }
            Ok(())
        }
        Command::Train { common, mode } => {
            let mode: Mode = mode.parse()?;
            let mut config = load_config(&common)?;
            config.num_seeds = 1;
            let records = harness::run_plan(&config, &harness::plan_modes(&config, &[mode]), &config.output_dir)?;
            summarize(&records, &config.output_dir)
        }
        Command::Ablate(common) => {
            let config = load_config(&common)?;
            let records = harness::run_plan(&config, &harness::plan_modes(&config, &Mode::ALL), &config.output_dir)?;
            summarize(&records, &config.output_dir)
        }
        Command::Sweep(common) => {
            let config = load_config(&common)?;
            let records = harness::run_plan(&config, &harness::plan_sweep(&config), &config.output_dir)?;
            summarize(&records, &config.output_dir)
        }
        Command::Report(common) => {
            let config = load_config(&common)?;
            for path in harness::render_tables(&config.output_dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Probe { common, checkpoint } => {
            let config = load_config(&common)?;
            let params = ModelParams::load(&checkpoint)?;
            let seeds = harness::SeedSet::new(config.master_seed, 0);
            let data = harness::prepare_data(&config, seeds)?;
            let (x, ids) = data.train.pooled_valid()?;
            let h = params.embed(&x)?;
            let r = metrics::leakage_probe(&h, &ids, config.probe_train_frac, seeds.probe)?;
            println!("env_acc,chance\n{},{}", r.env_accuracy, r.chance_level);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
