//! Command-line driver: data preparation, synthetic generation, training,
//! evaluation, and decomposition dumps.
//!
//! Every command is deterministic given (config, seed). Config keys come from
//! a TOML file with `--set section.key=value` overrides and
//! `THREADREC_SECTION__KEY` environment overrides; the resolved config is
//! written into the run directory for provenance.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use threadrec_core::allocator;
use threadrec_core::checkpoint::{load_checkpoint, peek_width, save_checkpoint, CheckpointMeta};
use threadrec_core::config::{Precision, RunConfig};
use threadrec_core::data::{self, synthetic};
use threadrec_core::error::{Error, Result};
use threadrec_core::metrics::{self, Partition};
use threadrec_core::model::{dims_from_bank, lookup_model, ModelDims};
use threadrec_core::scalar::Scalar;
use threadrec_core::training::{train, TrainMode, TrainSettings, TrainState};

#[derive(Parser)]
#[command(
    name = "threadrec",
    about = "Sequential recommendation with evolving-preference decomposition",
    version
)]
struct Cli {
    /// Config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.learning_rate=0.01
    /// (repeatable; keys use section.key addressing).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Cap worker threads for parallel sections (overrides the config key).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a delimited interaction log and write a leave-one-out split.
    Prepare(PrepareArgs),
    /// Generate a synthetic dataset with planted preference threads.
    Synth(SynthArgs),
    /// Train a model into a run directory (checkpoint + epoch log).
    Train(TrainArgs),
    /// Score a checkpoint on the validation or test partition.
    Evaluate(EvaluateArgs),
    /// Dump argmax decompositions for selected users.
    Decompose(DecomposeArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Input file with user<delim>item<delim>timestamp rows.
    #[arg(long)]
    input: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name used in printed statistics.
    #[arg(long, default_value = "dataset")]
    name: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory (labels sidecar goes next to the split).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `prepare` or `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, resolved config, and epoch log.
    #[arg(long)]
    run: PathBuf,
    /// Continue from the run directory's checkpoint, extending the epoch log.
    #[arg(long)]
    resume: bool,
    /// Disable a component (repeatable).
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    /// Train the undecomposed single-sequence comparator instead.
    #[arg(long)]
    single_sequence: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    FitReward,
    CoherenceReward,
    OrthogonalityReward,
    NewThreadReward,
    TimeDecay,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    partition: PartitionArg,
    #[arg(long, default_value = "dataset")]
    name: String,
    /// Evaluate as the single-sequence comparator (no decomposition).
    #[arg(long)]
    single_sequence: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PartitionArg {
    Valid,
    Test,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Valid => Partition::Valid,
            PartitionArg::Test => Partition::Test,
        }
    }
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated raw user ids; all users when omitted.
    #[arg(long, value_delimiter = ',')]
    users: Vec<String>,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))
        })
        .collect()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let overrides = parse_overrides(&cli.overrides)?;
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::from_overrides(&overrides)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn init_thread_pool(cli: &Cli, cfg: &RunConfig) {
    let threads = cli.threads.unwrap_or(cfg.threads);
    if threads > 0 {
        // Ignore the error if a pool already exists (tests call run twice).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    init_thread_pool(&cli, &cfg);
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(&cfg, args),
        Command::Synth(args) => cmd_synth(&cfg, args),
        Command::Train(args) => {
            apply_ablations(&mut cfg, &args.ablate);
            match cfg.model.precision {
                Precision::F64 => cmd_train::<f64>(&cfg, args),
                Precision::F32 => cmd_train::<f32>(&cfg, args),
            }
        }
        Command::Evaluate(args) => match checkpoint_precision(&args.checkpoint)? {
            Precision::F64 => cmd_evaluate::<f64>(&cfg, args),
            Precision::F32 => cmd_evaluate::<f32>(&cfg, args),
        },
        Command::Decompose(args) => match checkpoint_precision(&args.checkpoint)? {
            Precision::F64 => cmd_decompose::<f64>(&cfg, args),
            Precision::F32 => cmd_decompose::<f32>(&cfg, args),
        },
    }
}

fn apply_ablations(cfg: &mut RunConfig, ablations: &[Ablation]) {
    for a in ablations {
        match a {
            Ablation::FitReward => cfg.rewards.fit = false,
            Ablation::CoherenceReward => cfg.rewards.coherence = false,
            Ablation::OrthogonalityReward => cfg.rewards.orthogonality = false,
            Ablation::NewThreadReward => cfg.rewards.new_thread = false,
            Ablation::TimeDecay => cfg.agent.time_decay_enabled = false,
        }
    }
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    match peek_width(path)? {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        w => Err(Error::Checkpoint(format!("unknown element width {w}"))),
    }
}

fn cmd_prepare(cfg: &RunConfig, args: &PrepareArgs) -> Result<()> {
    let options = data::LoadOptions {
        delimiter: cfg.data.delimiter,
        ..Default::default()
    };
    let report = data::load_interactions(&args.input, &options)?;
    if report.interactions.is_empty() {
        return Err(Error::Data(format!(
            "{}: no interactions parsed",
            args.input.display()
        )));
    }
    if report.malformed > 0 {
        eprintln!(
            "skipped {} malformed rows; samples: {:?}",
            report.malformed, report.malformed_samples
        );
    }
    let sequences = data::build_sequences(&report.interactions, cfg.data.min_length)?;
    let split = data::leave_one_out(&sequences)?;
    data::save_split(&split, &args.out)?;
    print!("{}", data::format_stats(&args.name, &split));
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    let generated = synthetic::generate(&cfg.synthetic)?;
    let split = data::leave_one_out(&generated.sequences)?;
    data::save_split(&split, &args.out)?;
    synthetic::save_labels(&generated.labels, &args.out.join("labels.tsv"))?;
    let spec_text = threadrec_core::config::section_to_toml(&cfg.synthetic)?;
    fs::write(args.out.join("synthetic.toml"), spec_text)
        .map_err(|e| Error::io(args.out.join("synthetic.toml"), e))?;
    print!("{}", data::format_stats("synthetic", &split));
    Ok(())
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let split = data::load_split(&args.data)?;
    fs::create_dir_all(&args.run).map_err(|e| Error::io(&args.run, e))?;
    let ckpt_path = args.run.join("checkpoint.ckpt");
    let log_path = args.run.join("train_log.jsonl");

    let mut state: TrainState<T> = if args.resume {
        let (bank, meta) = load_checkpoint::<T>(&ckpt_path)?;
        let model = lookup_model(&bank)?;
        TrainState {
            bank,
            model,
            epoch: meta.epoch,
            baseline: meta.baseline,
            best: None,
        }
    } else {
        let dims = ModelDims::new(cfg.model.embedding_dim, split.n_users(), split.n_items())?;
        TrainState::fresh(&dims, cfg.seed)?
    };

    // Resolved config snapshot for reproducibility.
    fs::write(args.run.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(args.run.join("config.toml"), e))?;

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let agent = cfg.agent.to_agent_config();
    let rewards = cfg.rewards.to_reward_config();
    let train_cfg = cfg.train.to_train_config();
    let settings = TrainSettings {
        agent: &agent,
        rewards: &rewards,
        train: &train_cfg,
        mode: if args.single_sequence {
            TrainMode::SingleSequence
        } else {
            TrainMode::Decomposed
        },
        eval_k: cfg.eval.top_k,
        seed: cfg.seed,
    };

    let outcome = train(&mut state, &split, &settings, cfg.train.epochs, |record| {
        let line = serde_json::to_string(record).expect("serializable record");
        let _ = writeln!(log, "{line}");
        println!(
            "epoch {:>4}  combined {:>9.4}  policy {:>9.4}  modeler {:>8.4}  return {:>8.4}  threads {:>5.2}  valid_ndcg {:.4}",
            record.epoch,
            record.combined_loss,
            record.policy_loss,
            record.modeler_loss,
            record.mean_return,
            record.mean_threads,
            record.valid_ndcg
        );
    });

    // Always leave a checkpoint behind, including on numerical aborts.
    let meta = CheckpointMeta {
        epoch: state.epoch,
        baseline: state.baseline,
    };
    save_checkpoint(&ckpt_path, &state.bank, &meta)?;
    println!("checkpoint written to {}", ckpt_path.display());
    if let Some(best) = &state.best {
        let best_path = args.run.join("best.ckpt");
        let best_meta = CheckpointMeta {
            epoch: best.epoch,
            baseline: state.baseline,
        };
        save_checkpoint(&best_path, &best.bank, &best_meta)?;
        println!(
            "best validation checkpoint (epoch {}, ndcg {:.4}) written to {}",
            best.epoch,
            best.valid_ndcg,
            best_path.display()
        );
    }
    outcome
}

fn cmd_evaluate<T: Scalar>(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let split = data::load_split(&args.data)?;
    let (bank, _) = load_checkpoint::<T>(&args.checkpoint)?;
    let model = lookup_model(&bank)?;
    check_vocab(&bank, &split)?;
    let agent = cfg.agent.to_agent_config();
    let partition: Partition = args.partition.into();
    let report = if args.single_sequence {
        metrics::evaluate_single(&bank, &model, &split, partition, cfg.eval.top_k)?
    } else {
        metrics::evaluate(&bank, &model, &agent, &split, partition, cfg.eval.top_k)?
    };
    let partition_name = match partition {
        Partition::Valid => "valid",
        Partition::Test => "test",
    };
    print!(
        "{}",
        metrics::render_table(&[(args.name.clone(), partition_name.to_string(), &report)])
    );
    let m = report.mean;
    println!(
        "fractions: precision {:.6} recall {:.6} ndcg {:.6} mrr {:.6} ({} users, k={})",
        m.precision, m.recall, m.ndcg, m.mrr, report.users, report.k
    );
    Ok(())
}

fn check_vocab<T: Scalar>(bank: &threadrec_core::params::ParamBank<T>, split: &data::SplitDataset) -> Result<()> {
    let dims = dims_from_bank(bank)?;
    if dims.n_users != split.n_users() || dims.n_items != split.n_items() {
        return Err(Error::Data(format!(
            "checkpoint was trained on {}x{} (users x items) but the dataset has {}x{}",
            dims.n_users,
            dims.n_items,
            split.n_users(),
            split.n_items()
        )));
    }
    Ok(())
}

fn cmd_decompose<T: Scalar>(cfg: &RunConfig, args: &DecomposeArgs) -> Result<()> {
    let split = data::load_split(&args.data)?;
    let (bank, _) = load_checkpoint::<T>(&args.checkpoint)?;
    let model = lookup_model(&bank)?;
    check_vocab(&bank, &split)?;
    let agent = cfg.agent.to_agent_config();

    let selected: Vec<usize> = if args.users.is_empty() {
        (0..split.n_users()).collect()
    } else {
        args.users
            .iter()
            .map(|u| {
                split
                    .user_vocab
                    .index_of(u)
                    .ok_or_else(|| Error::Data(format!("unknown user id {u:?}")))
            })
            .collect::<Result<_>>()?
    };

    let mut out = String::new();
    for user in selected {
        // Case studies decompose the complete sequence, held-out events included.
        let history: Vec<(usize, f64)> = split.users[user]
            .events
            .iter()
            .map(|e| (e.item, e.time))
            .collect();
        let trajectory = allocator::decompose(&bank, &model, &agent, user, &history)?;
        out.push_str(&allocator::format_decomposition(
            split.user_vocab.id(user),
            |i| split.item_vocab.id(i).to_string(),
            &trajectory,
        ));
    }
    match &args.out {
        Some(path) => fs::write(path, out).map_err(|e| Error::io(path, e))?,
        None => print!("{out}"),
    }
    Ok(())
}
