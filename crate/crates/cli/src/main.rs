use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use h2t_core::experiment::{
    cmd_ablate_sampler, cmd_ablate_selection, cmd_diagnose, cmd_gen_data, cmd_sweep_p, cmd_train,
    ExperimentConfig, SweepResult,
};
use h2t_core::fusion::SelectionStrategy;
use h2t_core::sampling::SamplerKind;
use h2t_core::{Error, Result};

/// Head-to-tail feature fusion experiments on synthetic long-tailed data.
#[derive(Parser)]
#[command(name = "h2t", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). The bundled default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed for stage I and stage II; the dataset seed is unaffected.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweep points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        let out = cfg.output.dir.clone();
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stage I and stage II end to end.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip stage I and fine-tune the checkpoint given by --from.
        #[arg(long, requires = "from")]
        stage2_only: bool,
        /// Stage-I checkpoint to resume from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Stage-II accuracy across fusion ratios, sharing one stage-I model.
    SweepP {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0])]
        p: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Fusing-branch sampler ablation with the fused branch class-balanced.
    AblateSampler {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = ["reverse".to_string(), "class_balanced".to_string(), "instance_wise".to_string()])]
        kinds: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Channel-selection strategy ablation at the configured ratio.
    AblateSelection {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = ["first".to_string(), "middle".to_string(), "last".to_string(), "random".to_string()])]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Histograms, boundary grid, force table and embeddings for a finished run.
    Diagnose {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Write the configured synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn print_sweep(result: &SweepResult, out: &Path) {
    print!("{}", result.to_csv());
    println!("wrote {}", out.join("sweep.csv").display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            stage2_only,
            from,
        } => {
            let (cfg, out) = common.load()?;
            let from = if stage2_only { from.as_deref() } else { None };
            let summary = cmd_train(&cfg, &out, from)?;
            print!("{}", summary.stage2.to_csv());
            println!("wrote {}", out.display());
        }
        Command::SweepP { common, p, seeds } => {
            let (cfg, out) = common.load()?;
            let result = cmd_sweep_p(&cfg, &p, &seeds, &out, common.jobs)?;
            print_sweep(&result, &out);
        }
        Command::AblateSampler {
            common,
            kinds,
            seeds,
        } => {
            let (cfg, out) = common.load()?;
            let kinds = kinds
                .iter()
                .map(|k| SamplerKind::parse(k))
                .collect::<Result<Vec<_>>>()
                .map_err(as_config)?;
            let result = cmd_ablate_sampler(&cfg, &kinds, &seeds, &out, common.jobs)?;
            print_sweep(&result, &out);
        }
        Command::AblateSelection {
            common,
            strategies,
            seeds,
        } => {
            let (cfg, out) = common.load()?;
            let strategies = strategies
                .iter()
                .map(|s| SelectionStrategy::parse(s))
                .collect::<Result<Vec<_>>>()
                .map_err(as_config)?;
            let result = cmd_ablate_selection(&cfg, &strategies, &seeds, &out, common.jobs)?;
            print_sweep(&result, &out);
        }
        Command::Diagnose { run } => {
            let summary = cmd_diagnose(&run)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if !summary.boundary_written {
                println!("boundary grid skipped: inputs are not 2-D");
            }
            println!("wrote {}", run.join("diagnostics").display());
        }
        Command::GenData { common } => {
            let (cfg, out) = common.load()?;
            let prep = cmd_gen_data(&cfg, &out)?;
            println!(
                "{} train / {} test samples, counts {:?}",
                prep.data.train.len(),
                prep.data.test.len(),
                prep.data.train.counts.counts()
            );
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Validation { field, reason } => Error::Config(format!("{field}: {reason}")),
        other => other,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("H2T_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
