use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use escape::correction::TrainConfig;
use escape::harness::dataset::read_dataset;
use escape::harness::experiments::{
    bench_csv, cmd_bench, cmd_correlation, cmd_eval, cmd_synth, cmd_train, load_dependency, loss_log_csv,
    EvalConfig, EvalMode, NetworkRole, SynthConfig,
};
use escape::pose::KeypointSchema;
use escape::selector::{OodDirection, SelectorConfig, SelectorKind, DEFAULT_ENERGY_THRESHOLD};
use escape::tinynet::{load_checkpoint, save_checkpoint, Network, NetworkConfig};
use escape::tta::TtaConfig;
use escape::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "escape", version, about = "Energy-gated selective correction of 3D pose predictions")]
struct Cli {
    /// Seed for data generation, training and random selection.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Keypoint schema name.
    #[arg(long, global = true, default_value = "h36m17")]
    schema: String,
    /// Size of the global worker pool (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test datasets.
    Synth(SynthArgs),
    /// Train CNet or RCNet.
    Train(TrainArgs),
    /// Run one evaluation arm and write a report.
    Eval(EvalArgs),
    /// Self-consistency loss versus ground-truth distal error.
    Correlation(CorrelationArgs),
    /// Per-sample latency of several arms.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    train_size: usize,
    #[arg(long, default_value_t = 4_000)]
    test_size: usize,
    #[arg(long, default_value_t = 8.0)]
    sigma_proximal: f64,
    #[arg(long, default_value_t = 35.0)]
    sigma_distal: f64,
    /// OOD share of the test split.
    #[arg(long, default_value_t = 0.2)]
    ood_fraction: f64,
    /// OOD share of the training split.
    #[arg(long, default_value_t = 0.0)]
    train_ood_fraction: f64,
    /// Degrees.
    #[arg(long, default_value_t = 25.0)]
    limb_rotation_sigma: f64,
    /// Degrees.
    #[arg(long, default_value_t = 3.0)]
    torso_sigma: f64,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `cnet` or `rcnet`.
    #[arg(long)]
    which: NetworkRole,
    #[arg(long)]
    out: PathBuf,
    /// CNet checkpoint; required for rcnet.
    #[arg(long)]
    cnet: Option<PathBuf>,
    /// Per-epoch loss CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2: f64,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, default_value_t = DEFAULT_ENERGY_THRESHOLD)]
    energy_threshold: f64,
    /// `below` or `above`.
    #[arg(long, default_value = "below")]
    ood_direction: OodDirection,
    /// Selection rate of the random arm.
    #[arg(long, default_value_t = 0.2)]
    random_rate: f64,
    #[arg(long, default_value_t = 2)]
    tta_steps: usize,
    #[arg(long, default_value_t = 5e-4)]
    tta_lr: f64,
    /// Carry adapted weights across samples instead of resetting.
    #[arg(long, conflicts_with = "episodic")]
    continual: bool,
    /// Reset to the pretrained weights for every sample (default).
    #[arg(long)]
    episodic: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cnet: PathBuf,
    #[arg(long)]
    rcnet: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// baseline, cnet_only, tta_all, escape or random_select.
    #[arg(long, default_value = "escape")]
    mode: EvalMode,
    /// Override the policy implied by the mode: energy, random, all, none.
    #[arg(long)]
    selector: Option<SelectorKind>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct CorrelationArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "baseline,cnet_only,tta_all,escape,random_select")]
    arms: Vec<EvalMode>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

impl PipelineArgs {
    fn eval_config(&self, mode: EvalMode, seed: u64) -> EvalConfig {
        EvalConfig {
            mode,
            selector: SelectorConfig {
                kind: SelectorKind::Energy,
                threshold: self.energy_threshold,
                direction: self.ood_direction,
                random_rate: self.random_rate,
                seed,
            },
            tta: TtaConfig {
                steps: self.tta_steps,
                learning_rate: self.tta_lr,
                episodic: !self.continual,
                workers: self.workers,
                ..TtaConfig::default()
            },
        }
    }
}

fn load_net(path: &Path, schema: &KeypointSchema) -> Result<Network> {
    if !path.exists() {
        return Err(Error::Dependency(format!("checkpoint {} not found", path.display())));
    }
    let net = load_checkpoint(path)?;
    let cfg = net.config();
    if cfg.input_dim != schema.flat_dim() || cfg.output_dim != 12 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} maps {} -> {}, schema '{}' needs {} -> 12",
            path.display(),
            cfg.input_dim,
            cfg.output_dim,
            schema.name,
            schema.flat_dim()
        )));
    }
    Ok(net)
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }
    let schema = KeypointSchema::by_name(&cli.schema)?;
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = SynthConfig::with_seed(cli.seed);
            cfg.train_size = a.train_size;
            cfg.test_size = a.test_size;
            cfg.train_ood_fraction = a.train_ood_fraction;
            cfg.corruption.sigma_proximal = a.sigma_proximal;
            cfg.corruption.sigma_distal = a.sigma_distal;
            cfg.corruption.ood_fraction = a.ood_fraction;
            cfg.corruption.ood_limb_rotation_sigma = a.limb_rotation_sigma;
            cfg.corruption.torso_misalignment_sigma = a.torso_sigma;
            let out = cmd_synth(&cfg, &a.out_dir, &schema)?;
            println!(
                "train: {} records -> {}\ntest: {} records -> {}",
                out.train_count,
                out.train_path.display(),
                out.test_count,
                out.test_path.display()
            );
        }
        Command::Train(a) => {
            let records = read_dataset(&a.data, &schema)?;
            let net_cfg = NetworkConfig {
                input_dim: schema.flat_dim(),
                hidden_dim: a.net.hidden,
                residual_blocks: a.net.blocks,
                dropout_rate: a.net.dropout,
                seed: cli.seed,
                ..NetworkConfig::default()
            };
            let cfg = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                lambda1: a.lambda1,
                lambda2: a.lambda2,
                seed: cli.seed,
            };
            let cnet = match a.which {
                NetworkRole::Rcnet => Some(load_dependency(a.cnet.as_deref(), &net_cfg)?),
                NetworkRole::Cnet => None,
            };
            let trained = match cmd_train(&records, a.which, cnet.as_ref(), &cfg, &net_cfg, &schema) {
                Err(Error::TrainingDiverged { epoch, last_good }) => {
                    let fallback = a.out.with_extension("last_good");
                    save_checkpoint(&last_good, &fallback)?;
                    error!("last good weights saved to {}", fallback.display());
                    return Err(Error::TrainingDiverged { epoch, last_good });
                }
                other => other?,
            };
            save_checkpoint(&trained.network, &a.out)?;
            let log_path = a.log.unwrap_or_else(|| a.out.with_extension("loss.csv"));
            fs::write(&log_path, loss_log_csv(&trained.history))?;
            info!("checkpoint {} and loss log {}", a.out.display(), log_path.display());
            if let (Some(first), Some(last)) = (trained.history.first(), trained.history.last()) {
                println!("epochs {}: loss {:.4} -> {:.4}", trained.history.len(), first.loss, last.loss);
            }
        }
        Command::Eval(a) => {
            let records = read_dataset(&a.model.data, &schema)?;
            let cnet = load_net(&a.model.cnet, &schema)?;
            let rcnet = load_net(&a.model.rcnet, &schema)?;
            let mut cfg = a.pipeline.eval_config(a.mode, cli.seed);
            if let Some(kind) = a.selector {
                cfg.selector.kind = kind;
            }
            let report = cmd_eval(&records, &cnet, &rcnet, &cfg, &schema)?;
            report.write(&a.model.out)?;
            print!("{}", report.aggregates);
        }
        Command::Correlation(a) => {
            let records = read_dataset(&a.model.data, &schema)?;
            let cnet = load_net(&a.model.cnet, &schema)?;
            let rcnet = load_net(&a.model.rcnet, &schema)?;
            let report = cmd_correlation(&records, &cnet, &rcnet, &schema)?;
            fs::write(&a.model.out, report.to_csv())?;
            match report.pearson_r {
                Some(r) => println!("pearson_r: {r:.4}"),
                None => println!("pearson_r: NA (constant input)"),
            }
        }
        Command::Bench(a) => {
            let records = read_dataset(&a.model.data, &schema)?;
            let cnet = load_net(&a.model.cnet, &schema)?;
            let rcnet = load_net(&a.model.rcnet, &schema)?;
            let base = a.pipeline.eval_config(EvalMode::Escape, cli.seed);
            let rows = cmd_bench(&records, &cnet, &rcnet, &a.arms, &base, &schema)?;
            let csv = bench_csv(&rows);
            fs::write(&a.model.out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
