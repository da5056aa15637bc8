//! `tfkl`: synthesize signals, compute and smooth time-frequency
//! distributions, train and apply the learned kernel, evaluate, render.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tfkl_core::dataset::{gen_dataset, Dataset};
use tfkl_core::io::{decode_tfd, read_signal, read_tfd, render_tfd, write_tfd, TFD_MAGIC};
use tfkl_core::metrics::{l1_distance, renyi_entropy};
use tfkl_core::nn::{infer, load_checkpoint};
use tfkl_core::tfd::{cohen_tfd, wvd_with_status};
use tfkl_core::train::{evaluate_model, train_model, Optimizer, TrainOutputs};
use tfkl_core::{Error, KernelSpec, Result, Snr, TfMatrix};

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "tfkl", version, about = "Time-frequency distributions with classical and learned kernels")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of (WVD, model TFD) pairs.
    Gen(GenArgs),
    /// Wigner-Ville distribution of a signal file.
    Wvd(IoArgs),
    /// Cohen's-class TFD of a signal file with a classical kernel.
    Smooth(SmoothArgs),
    /// Train the learned kernel network.
    Train(TrainArgs),
    /// Apply a trained checkpoint to a signal (or a TFD1 file holding a WVD).
    Infer(InferArgs),
    /// Score baselines and a trained checkpoint on a test dataset.
    Eval(EvalArgs),
    /// l1 distance to a reference and Renyi entropy of a TFD1 file.
    Metrics(MetricsArgs),
    /// Render a TFD1 file as a binary PGM image.
    Render(IoArgs),
}

#[derive(Args, Debug)]
struct IoArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// Signal length N.
    #[arg(long)]
    n: Option<usize>,
    /// Noise level in dB; omit for the configured value.
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum KernelKind {
    Allpass,
    Cwd,
    Ckd,
    Bd,
}

#[derive(Args, Debug)]
struct SmoothArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long, value_enum)]
    kernel: Option<KernelKind>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long = "D")]
    d: Option<f64>,
    #[arg(long = "E")]
    e: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Loss CSV path; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Test dataset directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Trained checkpoint; without it only the classical kernels are scored.
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// SNR grid in dB, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    snr: Vec<f64>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Reference TFD for the l1 distance, typically a model TFD.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Print JSON instead of `l1=<value> renyi=<value>`.
    #[arg(long)]
    json: bool,
}

fn kernel_from(args: &SmoothArgs, configured: KernelSpec) -> Result<KernelSpec> {
    let kind = match args.kernel {
        Some(k) => k,
        None => match configured {
            KernelSpec::AllPass => KernelKind::Allpass,
            KernelSpec::Cwd { .. } => KernelKind::Cwd,
            KernelSpec::Ckd { .. } => KernelKind::Ckd,
            KernelSpec::Bd { .. } => KernelKind::Bd,
        },
    };
    // start from the configured parameters when the kind matches, else defaults
    let base = match (kind, configured) {
        (KernelKind::Allpass, _) => KernelSpec::AllPass,
        (KernelKind::Cwd, c @ KernelSpec::Cwd { .. }) => c,
        (KernelKind::Ckd, c @ KernelSpec::Ckd { .. }) => c,
        (KernelKind::Bd, c @ KernelSpec::Bd { .. }) => c,
        (KernelKind::Cwd, _) => KernelSpec::cwd(),
        (KernelKind::Ckd, _) => KernelSpec::ckd(),
        (KernelKind::Bd, _) => KernelSpec::bd(),
    };
    let unused = |flag: &str| Err(Error::invalid("arguments", format!("--{flag} does not apply to the {} kernel", base.name())));
    let spec = match base {
        KernelSpec::AllPass => KernelSpec::AllPass,
        KernelSpec::Cwd { sigma } => KernelSpec::Cwd {
            sigma: args.sigma.unwrap_or(sigma),
        },
        KernelSpec::Ckd { c, d, e } => KernelSpec::Ckd {
            c: args.c.unwrap_or(c),
            d: args.d.unwrap_or(d),
            e: args.e.unwrap_or(e),
        },
        KernelSpec::Bd { beta } => KernelSpec::Bd {
            beta: args.beta.unwrap_or(beta),
        },
    };
    let given = [
        ("sigma", args.sigma.is_some(), matches!(spec, KernelSpec::Cwd { .. })),
        ("c", args.c.is_some(), matches!(spec, KernelSpec::Ckd { .. })),
        ("D", args.d.is_some(), matches!(spec, KernelSpec::Ckd { .. })),
        ("E", args.e.is_some(), matches!(spec, KernelSpec::Ckd { .. })),
        ("beta", args.beta.is_some(), matches!(spec, KernelSpec::Bd { .. })),
    ];
    if let Some((flag, _, _)) = given.iter().find(|(_, set, applies)| *set && !applies) {
        return unused(flag);
    }
    spec.validate()?;
    Ok(spec)
}

/// Reads a signal file, or a TFD1 file that already holds a WVD.
fn read_wvd(path: &Path) -> Result<TfMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TFD_MAGIC) {
        return decode_tfd(&bytes);
    }
    let signal = read_signal(path)?;
    Ok(wvd_with_status(&signal)?.0)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(args) => {
            let d = &mut cfg.dataset;
            if let Some(seed) = args.seed {
                d.seed = seed;
            }
            if let Some(count) = args.count {
                d.count = count;
            }
            if let Some(n) = args.n {
                d.n = n;
            }
            if let Some(snr) = args.snr {
                d.snr = Snr::from_db(snr);
            }
            let manifest = gen_dataset(d, &args.out)?;
            log::info!("wrote {} pairs to {}", manifest.pairs.len(), args.out.display());
        }
        Command::Wvd(io) => {
            let signal = read_signal(&io.input)?;
            write_tfd(&io.out, &wvd_with_status(&signal)?.0)?;
        }
        Command::Smooth(args) => {
            let kernel = kernel_from(&args, cfg.kernel)?;
            let signal = read_signal(&args.io.input)?;
            write_tfd(&args.io.out, &cohen_tfd(&signal, &kernel)?)?;
        }
        Command::Train(args) => {
            let t = &mut cfg.training;
            if let Some(dir) = args.input {
                t.dataset = dir;
            }
            if let Some(dir) = args.validation {
                t.validation = Some(dir);
            }
            if let Some(seed) = args.seed {
                t.seed = seed;
            }
            if let Some(epochs) = args.epochs {
                t.epochs = epochs;
            }
            if let Some(b) = args.batch_size {
                t.batch_size = b;
            }
            if let Some(lr) = args.lr {
                t.learning_rate = lr;
            }
            match args.optimizer {
                Some(OptimizerKind::Adam) if !matches!(t.optimizer, Optimizer::Adam { .. }) => {
                    t.optimizer = Optimizer::adam();
                }
                Some(OptimizerKind::Sgd) if !matches!(t.optimizer, Optimizer::Sgd { .. }) => {
                    t.optimizer = Optimizer::default();
                }
                _ => {}
            }
            if let Some(m) = args.momentum {
                match &mut t.optimizer {
                    Optimizer::Sgd { momentum } => *momentum = m,
                    Optimizer::Adam { .. } => {
                        return Err(Error::invalid("arguments", "--momentum applies to the SGD optimizer only"));
                    }
                }
            }
            if let Some(every) = args.checkpoint_every {
                t.checkpoint_every = every;
            }
            let loss_log = args.loss_log.unwrap_or_else(|| args.out.with_extension("loss.csv"));
            let outputs = TrainOutputs {
                checkpoint: Some(args.out),
                loss_log: Some(loss_log),
            };
            let report = train_model(t, &cfg.network, &outputs)?;
            if let Some(last) = report.log.last() {
                log::info!("final train loss {:.6e}", last.train);
            }
        }
        Command::Infer(args) => {
            let ckpt = load_checkpoint(&args.model)?;
            let w = read_wvd(&args.io.input)?;
            write_tfd(&args.io.out, &infer(&ckpt, &w)?)?;
        }
        Command::Eval(args) => {
            let e = &mut cfg.evaluation;
            if let Some(seed) = args.seed {
                e.seed = seed;
            }
            if !args.snr.is_empty() {
                e.snrs = args.snr;
            }
            if let Some(trials) = args.trials {
                e.trials = trials;
            }
            e.validate()?;
            let ckpt = args.model.as_deref().map(load_checkpoint).transpose()?;
            let testset = Dataset::open(&args.input)?.manifest.mixtures();
            let report = evaluate_model(ckpt.as_ref(), &testset, e)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            write_output(args.out.as_deref(), &json)?;
        }
        Command::Metrics(args) => {
            let m = read_tfd(&args.input)?;
            let alpha = args.alpha.unwrap_or(cfg.evaluation.renyi_order);
            let renyi = renyi_entropy(&m, alpha)?;
            let l1 = match &args.reference {
                Some(path) => Some(l1_distance(&m, &read_tfd(path)?)?),
                None => None,
            };
            let text = if args.json {
                let mut obj = serde_json::Map::new();
                if let Some(l1) = l1 {
                    obj.insert("l1".into(), l1.into());
                }
                obj.insert("renyi".into(), renyi.into());
                serde_json::to_string(&obj)? + "\n"
            } else {
                match l1 {
                    Some(l1) => format!("l1={l1} renyi={renyi}\n"),
                    None => format!("renyi={renyi}\n"),
                }
            };
            write_output(None, &text)?;
        }
        Command::Render(io) => {
            render_tfd(&read_tfd(&io.input)?, &io.out)?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("TFKL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| Error::invalid("TFKL_THREADS", format!("expected a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::invalid("TFKL_THREADS", e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
