use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use misa::harness::{
    self, compare, write_atomic, Alpha, ExperimentConfig, ExperimentResult, COMPARISON_FILE, RESULTS_FILE,
};
use misa::missingness::Mechanism;
use misa::models::ModelKind;

#[derive(Parser)]
#[command(name = "misa", version, about = "Imputation experiments with missingness augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated run; writes results.json and losses.csv.
    Run(Overrides),
    /// Two-row table from a baseline and an augmented results.json.
    Compare {
        baseline: PathBuf,
        augmented: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Baseline plus one augmented run per alpha.
    SweepAlpha {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = [10.0, 50.0, 100.0, 200.0])]
        alphas: Vec<f64>,
    },
    /// Baseline and augmented runs per missing rate.
    SweepRate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8])]
        rates: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Overrides {
    /// Flat JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    mechanism: Option<Mechanism>,
    #[arg(long)]
    rate: Option<f64>,
    /// A number or `auto`.
    #[arg(long)]
    alpha: Option<Alpha>,
    #[arg(long, value_enum)]
    misa: Option<Switch>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = v.clone();
            if self.schema.is_none() && self.config.is_none() {
                c.schema = v.with_extension("schema.json");
            }
        }
        if let Some(v) = &self.schema {
            c.schema = v.clone();
        }
        if let Some(v) = self.model {
            c.model = v;
        }
        if let Some(v) = self.mechanism {
            c.mechanism = v;
        }
        if let Some(v) = self.rate {
            c.missing_rate = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = Some(v);
        }
        if let Some(v) = self.misa {
            c.misa = matches!(v, Switch::On);
        }
        if let Some(v) = self.repeats {
            c.repeats = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = Some(v);
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if c.dataset.as_os_str().is_empty() {
            bail!("no dataset given; pass --dataset or --config");
        }
        Ok(c)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(o) => {
            let config = o.resolve()?;
            let result = harness::run(&config)?;
            println!(
                "{} on {}: RMSE {:.4} ± {:.4} over {} repeat(s), {:.3} s",
                config.label(),
                config.dataset.display(),
                result.rmse.mean,
                result.rmse.std,
                config.repeats,
                result.timing.seconds
            );
            if let Some(acc) = &result.accuracy {
                println!("accuracy {:.4} ± {:.4}", acc.mean, acc.std);
            }
            println!("wrote {}", config.out.join(RESULTS_FILE).display());
        }
        Command::Compare { baseline, augmented, out } => {
            let load = |p: &PathBuf| {
                let file = if p.is_dir() { p.join(RESULTS_FILE) } else { p.clone() };
                ExperimentResult::load(&file).with_context(|| format!("reading {}", file.display()))
            };
            let table = compare(&load(&baseline)?, &load(&augmented)?);
            print!("{table}");
            std::fs::create_dir_all(&out)?;
            write_atomic(&out.join(COMPARISON_FILE), table.to_csv()?.as_bytes())?;
        }
        Command::SweepAlpha { overrides, alphas } => {
            let config = overrides.resolve()?;
            let table = harness::sweep_alpha(&config, &alphas)?;
            print!("{table}");
            std::fs::create_dir_all(&config.out)?;
            write_atomic(&config.out.join("sweep_alpha.csv"), table.to_csv()?.as_bytes())?;
        }
        Command::SweepRate { overrides, rates } => {
            let config = overrides.resolve()?;
            let table = harness::sweep_missing_rate(&config, &rates)?;
            print!("{table}");
            if let Some(rises) = table.baseline_rises_with_rate() {
                println!("baseline RMSE at highest rate >= lowest rate: {rises}");
            }
            std::fs::create_dir_all(&config.out)?;
            write_atomic(&config.out.join("sweep_rate.csv"), table.to_csv()?.as_bytes())?;
        }
    }
    Ok(())
}
