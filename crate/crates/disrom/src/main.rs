use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disrom::commands::{self, CliError, ModesRequest, SplitChoice};
use disrom::config::ScheduleConfig;
use disrom::RunConfig;
use disrom_core::analysis::{Criterion, ModeBase, PruneSchedule};
use disrom_core::data::{NormPolicy, SyntheticFlowParams};
use disrom_core::models::{Preset, Variant};

#[derive(Parser)]
#[command(name = "disrom", version, about = "Disentangled autoencoders for reduced-order flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic periodic flow.
    Synth(SynthArgs),
    /// Train one model.
    Train(RunArgs),
    /// Train over several penalty weights and seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma separated penalty weights.
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Latent statistics, ranking and top-k det(R) of a trained model.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "std")]
        criterion: Criterion,
        #[arg(long, value_enum, default_value_t = SplitChoice::Train)]
        split: SplitChoice,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode sweeps along single latent variables.
    Modes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Variables to sweep; defaults to the two with the largest std.
        #[arg(long, value_delimiter = ',')]
        indices: Option<Vec<usize>>,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value = "snapshot")]
        base: ModeBase,
        /// Validation snapshot used as the base code.
        #[arg(long, default_value_t = 0)]
        snapshot: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synthetic-flow parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; built-in example settings when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// λ, ν or β.
    #[arg(long)]
    weight: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Constant learning rate instead of the configured schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Enable pruning from this epoch on.
    #[arg(long)]
    prune_from: Option<usize>,
    #[arg(long, default_value_t = 0.07)]
    prune_threshold: f64,
    /// DISROM1 input instead of the synthetic flow.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    normalization: Option<NormPolicy>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
            None => RunConfig::example(),
        };
        if let Some(v) = self.preset {
            cfg.model.preset = v;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.model.latent_dim = v;
        }
        if let Some(v) = self.weight {
            cfg.loss.weight = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(lr) = self.lr {
            cfg.train.schedule = ScheduleConfig::Constant { lr };
        }
        if let Some(start_epoch) = self.prune_from {
            cfg.prune = Some(PruneSchedule { start_epoch, threshold: self.prune_threshold });
        }
        if let Some(v) = &self.data {
            cfg.data.path = Some(v.clone());
        }
        if let Some(v) = self.train_fraction {
            cfg.data.train_fraction = v;
        }
        if let Some(v) = self.normalization {
            cfg.data.normalization = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.train.checkpoint_every = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let mut p = match &a.config {
                Some(path) => toml::from_str::<SyntheticFlowParams>(&fs::read_to_string(path)?)
                    .map_err(|e| CliError::Config(format!("config: {e}")))?,
                None => SyntheticFlowParams::default(),
            };
            p.height = a.height.unwrap_or(p.height);
            p.width = a.width.unwrap_or(p.width);
            p.period = a.period.unwrap_or(p.period);
            p.steps = a.steps.unwrap_or(p.steps);
            p.seed = a.seed.unwrap_or(p.seed);
            let data = commands::cmd_synth(&p, &a.out)?;
            println!(
                "wrote {} snapshots of {}x{}x{} to {}",
                data.len(),
                data.channels(),
                data.height(),
                data.width(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let out = commands::cmd_train(&cfg)?;
            let last = out.metrics.last().expect("at least one epoch");
            println!(
                "val_mse {:.6} correlation {:.6} pruned {} -> {}",
                last.val_mse,
                last.val_correlation,
                last.pruned,
                cfg.output_dir.display()
            );
        }
        Command::Sweep { run, weights, repeats } => {
            let cfg = run.resolve()?;
            let rows = commands::cmd_sweep(&cfg, &weights, repeats)?;
            for r in rows.iter().filter(|r| r.kind == "aggregate") {
                println!(
                    "weight {:e}: val_mse {:.6} [{:.6}, {:.6}]  {} {:.4} [{:.4}, {:.4}]",
                    r.weight,
                    r.val_mse,
                    r.val_mse_min.unwrap_or(f64::NAN),
                    r.val_mse_max.unwrap_or(f64::NAN),
                    r.metric,
                    r.correlation,
                    r.correlation_min.unwrap_or(f64::NAN),
                    r.correlation_max.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Analyze { checkpoint, dataset, criterion, split, threshold, out } => {
            let report = commands::cmd_analyze(&checkpoint, &dataset, criterion, split, threshold, &out)?;
            println!("ranking {:?}", report.ranking);
            for (k, d) in &report.top_k_det {
                println!("top-{k} det(R) {d:.6}");
            }
        }
        Command::Modes { checkpoint, dataset, indices, steps, base, snapshot, out } => {
            let req = ModesRequest { indices: indices.as_deref(), steps, base, snapshot };
            let report = commands::cmd_modes(&checkpoint, &dataset, &req, &out)?;
            for (i, values, variation) in &report.sweeps {
                println!(
                    "z{i}: [{:.4}, {:.4}] variation {variation:.6}",
                    values.first().copied().unwrap_or(f64::NAN),
                    values.last().copied().unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
