//! Command-line surface: gen-data, train, eval, bench-decode, sweep-beam.
//! Exit codes: 0 success, 1 usage error (bad flag, unknown config key),
//! 2 data/checkpoint/runtime error.

use crate::config::{ConfigError, RunConfig};
use crate::data::{gen_corpus, Corpus, Generator, Split};
use crate::eval::{bench_csv, bench_decode, eval_bucketed, sweep_beam, EvalOptions, Strategy};
use crate::model::{Modality, ModelParams};
use crate::train::Trainer;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "seqlab",
    about = "Semi-supervised sequence-transduction lab: synthetic corpus, CTC+attention model, self-training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (overrides the config's seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 guarantees the determinism contract; any value
    /// reproduces the single-thread results bit for bit here because
    /// reductions are order-stable)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus file
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (corpus.bin and config.txt are written here)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train student and teacher on a corpus
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus file from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Run directory (config echo, metrics.csv, checkpoints/)
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: bucketed WER report
    Eval {
        /// Checkpoint file
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus file
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate
        #[arg(long, default_value = "id")]
        split: String,
        /// Modality view: a, v, or av
        #[arg(long, default_value = "av")]
        modality: String,
        /// Decoding strategy: ctc-greedy, att-greedy, joint-beam
        #[arg(long, default_value = "joint-beam")]
        strategy: String,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f32,
        #[arg(long, default_value_t = 0.0)]
        length_penalty: f32,
        /// Audio noise sigma multiplier (evaluation-time sweep)
        #[arg(long, default_value_t = 1.0)]
        noise_mult: f64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Suppress wall-time columns for byte-identical reports
        #[arg(long, default_value_t = false)]
        no_timing: bool,
        /// Report directory (default: the checkpoint's run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark pseudo-label decoding throughput
    BenchDecode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Target reference lengths, comma separated
        #[arg(long, default_value = "8,16,24,32")]
        lengths: String,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Timed repetitions (one extra warmup is excluded)
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// WER versus beam size under joint decoding
    SweepBeam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "id")]
        split: String,
        #[arg(long, default_value = "av")]
        modality: String,
        /// Beam sizes, comma separated, ascending
        #[arg(long, default_value = "1,2,4,8,16")]
        beams: String,
        #[arg(long, default_value_t = 0.1)]
        alpha: f32,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = false)]
        no_timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Usage-class errors exit 1; data/runtime errors exit 2.
enum CliError {
    Usage(String),
    Data(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => CliError::Data(format!("config: {io}")),
            other => CliError::Usage(other.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    crate::data::CorpusError,
    crate::model::CheckpointError,
    crate::model::ModelError,
    crate::train::TrainError,
    std::io::Error
);

fn build_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for kv in &args.set {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(threads) = args.threads {
        cfg.set("threads", &threads.to_string())?;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::parse(s).ok_or_else(|| CliError::Usage(format!("unknown split: {s}")))
}

fn parse_modality(s: &str) -> Result<Modality, CliError> {
    Modality::parse(s).ok_or_else(|| CliError::Usage(format!("unknown modality: {s}")))
}

fn parse_strategy(s: &str) -> Result<Strategy, CliError> {
    Strategy::parse(s).ok_or_else(|| CliError::Usage(format!("unknown strategy: {s}")))
}

fn parse_usize_list(s: &str, flag: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad {flag} entry: {p}")))
        })
        .collect()
}

/// The run directory a checkpoint belongs to: the parent of its
/// checkpoints/ directory, or its own directory otherwise.
fn run_dir_of(ckpt: &Path) -> PathBuf {
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    if parent.file_name().and_then(|n| n.to_str()) == Some("checkpoints") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn cmd_gen_data(args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let corpus = gen_corpus(&cfg.corpus)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.echo())?;
    let path = out.join("corpus.bin");
    corpus.save(&path)?;
    println!(
        "wrote {} ({} labelled / {} unlabelled / {} id / {} ood samples)",
        path.display(),
        corpus.labelled.len(),
        corpus.unlabelled.len(),
        corpus.test_id.len(),
        corpus.test_ood.len()
    );
    Ok(())
}

fn cmd_train(args: &ConfigArgs, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let corpus = Corpus::load(data)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.echo())?;
    let student = ModelParams::<f32>::init(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(student, &corpus, cfg.train.clone())?;
    let artifacts = trainer.run(out)?;
    println!(
        "trained {} steps; metrics {}; student {}",
        trainer.total_steps(),
        artifacts.metrics_path.display(),
        artifacts.student_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    split: &str,
    modality: &str,
    strategy: &str,
    beam: usize,
    alpha: f32,
    length_penalty: f32,
    noise_mult: f64,
    threads: usize,
    no_timing: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let split = parse_split(split)?;
    let opts = EvalOptions {
        strategy: parse_strategy(strategy)?,
        modality: parse_modality(modality)?,
        beam,
        alpha,
        length_penalty,
        noise_multiplier: noise_mult,
        threads,
        timing: !no_timing,
    };
    let params = ModelParams::<f32>::load(ckpt)?;
    let corpus = Corpus::load(data)?;
    let report = eval_bucketed(&params, &corpus, split, &opts)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir_of(ckpt))
        .join("reports");
    std::fs::create_dir_all(&out_dir)?;
    let name = format!(
        "eval-{}-{}-{}.csv",
        split.key(),
        opts.modality.key(),
        opts.strategy.key()
    );
    let path = out_dir.join(name);
    std::fs::write(&path, report.to_csv())?;
    println!(
        "{} overall WER {:.4} over {} samples -> {}",
        split.key(),
        report.overall.wer,
        report.overall.samples,
        path.display()
    );
    Ok(())
}

fn cmd_bench(
    ckpt: &Path,
    data: &Path,
    lengths: &str,
    batch: usize,
    reps: usize,
    beam: usize,
    alpha: f32,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let lengths = parse_usize_list(lengths, "--lengths")?;
    let params = ModelParams::<f32>::load(ckpt)?;
    let corpus = Corpus::load(data)?;
    let generator = Generator::new(corpus.config.clone())?;
    let rows = bench_decode(&params, &generator, &lengths, batch, reps, beam, alpha)?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir_of(ckpt))
        .join("reports");
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("bench-decode.csv"), csv)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    ckpt: &Path,
    data: &Path,
    split: &str,
    modality: &str,
    beams: &str,
    alpha: f32,
    threads: usize,
    no_timing: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let beams = parse_usize_list(beams, "--beams")?;
    if beams.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Usage("--beams must be ascending".into()));
    }
    let split = parse_split(split)?;
    let base = EvalOptions {
        modality: parse_modality(modality)?,
        alpha,
        threads,
        timing: !no_timing,
        ..EvalOptions::default()
    };
    let params = ModelParams::<f32>::load(ckpt)?;
    let corpus = Corpus::load(data)?;
    let csv = sweep_beam(&params, &corpus, split, &beams, &base)?;
    print!("{csv}");
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir_of(ckpt))
        .join("reports");
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("sweep-beam.csv"), csv)?;
    Ok(())
}

/// Entry point behind `main`; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the same error path
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::GenData { cfg, out } => cmd_gen_data(cfg, out),
        Cmd::Train { cfg, data, out } => cmd_train(cfg, data, out),
        Cmd::Eval {
            ckpt,
            data,
            split,
            modality,
            strategy,
            beam,
            alpha,
            length_penalty,
            noise_mult,
            threads,
            no_timing,
            out,
        } => cmd_eval(
            ckpt,
            data,
            split,
            modality,
            strategy,
            *beam,
            *alpha,
            *length_penalty,
            *noise_mult,
            *threads,
            *no_timing,
            out.as_deref(),
        ),
        Cmd::BenchDecode {
            ckpt,
            data,
            lengths,
            batch,
            reps,
            beam,
            alpha,
            out,
        } => cmd_bench(ckpt, data, lengths, *batch, *reps, *beam, *alpha, out.as_deref()),
        Cmd::SweepBeam {
            ckpt,
            data,
            split,
            modality,
            beams,
            alpha,
            threads,
            no_timing,
            out,
        } => cmd_sweep(
            ckpt,
            data,
            split,
            modality,
            beams,
            *alpha,
            *threads,
            *no_timing,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
