//! `sadcl` command-line interface.
//!
//! Exit statuses: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 data error (unreadable or mismatched dataset or checkpoint), 4 numeric
//! abort (non-finite loss), 5 gradient check failure.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sadcl::checkpoint::{self, CheckpointError};
use sadcl::config::{ConfigError, RunConfig};
use sadcl::data::{self, DataError, Dataset, Split};
use sadcl::export;
use sadcl::metrics::{write_reports, MetricReport};
use sadcl::objective::NonFiniteLoss;
use sadcl::train::{loss_log_line, EpochSummary, TrainError, Trainer, LOSS_LOG_HEADER};
use sadcl::verify::{gradient_suite, TOLERANCE};
use sadcl::{Precision, Scalar};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_GRAD_CHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "sadcl", version, about = "Multi-label training with label-level dual contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (for gen-data: the dataset seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Single-threaded fixed-order execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Disable the sample-to-sample contrastive term.
    #[arg(long, global = true)]
    no_sscl: bool,
    /// Disable the prototype-to-sample contrastive term.
    #[arg(long, global = true)]
    no_pscl: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Train,
    High,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the checkpoint, loss log and metric reports.
    Train {
        /// Dataset file (overrides the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long, value_name = "EPOCHS")]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on the test split in all and top-3 modes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Check loss gradients against central differences in high precision.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Perturb analytic gradients to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Generate a synthetic dataset file from the data_* config keys.
    GenData {
        /// Destination file [default: <out>/dataset.bin].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write projected vectors of activated pairs and the class prototypes.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write head-averaged final cross-attention maps per image.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

/// Marker error for a failed gradient check.
#[derive(Debug)]
struct GradCheckFailed(String);

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for {}", self.0)
    }
}

impl std::error::Error for GradCheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<DataError>() || cause.is::<CheckpointError>() {
            return EXIT_DATA;
        }
        if cause.is::<NonFiniteLoss>() {
            return EXIT_NUMERIC;
        }
        if cause.is::<GradCheckFailed>() {
            return EXIT_GRAD_CHECK;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            match t {
                TrainError::NonFinite(_) => return EXIT_NUMERIC,
                TrainError::Mismatch(_) => return EXIT_DATA,
                _ => {}
            }
        }
    }
    EXIT_OTHER
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = resolve_config(&cli.common)?;
    match cli.command {
        Command::Train {
            dataset,
            resume,
            stop_after,
        } => train(&config, dataset.as_deref(), resume.as_deref(), stop_after),
        Command::Eval { checkpoint, dataset } => eval(&config, &checkpoint, dataset.as_deref()),
        Command::GradCheck {
            instances,
            corrupt_gradient,
        } => grad_check(&config, instances, corrupt_gradient),
        Command::GenData { output } => {
            if let Some(seed) = cli.common.seed {
                config.data_seed = seed;
            }
            gen_data(&config, output)
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            split,
        } => with_checkpoint(&checkpoint, |p| match p {
            Precision::Train => export_embeddings::<f32>(&config, &checkpoint, dataset.as_deref(), split),
            Precision::High => export_embeddings::<f64>(&config, &checkpoint, dataset.as_deref(), split),
        }),
        Command::ExportAttention {
            checkpoint,
            dataset,
            split,
        } => with_checkpoint(&checkpoint, |p| match p {
            Precision::Train => export_attention::<f32>(&config, &checkpoint, dataset.as_deref(), split),
            Precision::High => export_attention::<f64>(&config, &checkpoint, dataset.as_deref(), split),
        }),
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    if let Some(out) = &common.out {
        c.out_dir = out.clone();
    }
    if common.deterministic {
        c.deterministic = true;
    }
    match common.precision {
        Some(PrecisionArg::Train) => c.precision = Precision::Train,
        Some(PrecisionArg::High) => c.precision = Precision::High,
        None => {}
    }
    if common.no_sscl {
        c.sscl_on = false;
    }
    if common.no_pscl {
        c.pscl_on = false;
    }
    c.validate()?;
    Ok(c)
}

fn out_dir(config: &RunConfig) -> Result<&Path> {
    let dir = config.out_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_dataset(config: &RunConfig, flag: Option<&Path>) -> Result<Dataset> {
    match flag.or(config.dataset.as_deref()) {
        Some(p) => Ok(data::load(p)?),
        None => Ok(data::generate(&config.synthetic_spec())?),
    }
}

fn pick(data: &Dataset, split: SplitArg) -> &Split {
    match split {
        SplitArg::Train => &data.train,
        SplitArg::Test => &data.test,
    }
}

fn with_checkpoint(path: &Path, f: impl FnOnce(Precision) -> Result<()>) -> Result<()> {
    let name = checkpoint::scalar_name(path)?;
    match name.as_str() {
        "f32" => f(Precision::Train),
        "f64" => f(Precision::High),
        other => Err(CheckpointError::Format {
            line: 2,
            reason: format!("unknown scalar type `{other}`"),
        }
        .into()),
    }
}

fn print_reports(reports: &[MetricReport]) {
    println!("{:<6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "mode", "mAP", "CP", "CR", "CF1", "OP", "OR", "OF1");
    for r in reports {
        println!(
            "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.mode.to_string(),
            r.map,
            r.cp,
            r.cr,
            r.cf1,
            r.op,
            r.or,
            r.of1
        );
    }
}

fn train(config: &RunConfig, dataset: Option<&Path>, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let precision = match resume {
        Some(p) => match checkpoint::scalar_name(p)?.as_str() {
            "f64" => Precision::High,
            _ => Precision::Train,
        },
        None => config.precision,
    };
    match precision {
        Precision::Train => train_as::<f32>(config, dataset, resume, stop_after),
        Precision::High => train_as::<f64>(config, dataset, resume, stop_after),
    }
}

fn train_as<T: Scalar>(config: &RunConfig, dataset: Option<&Path>, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let out = out_dir(config)?;
    let (mut trainer, data) = match resume {
        Some(p) => {
            let trainer = checkpoint::load::<T>(p)?;
            let data = load_dataset(&trainer.config, dataset)?;
            (trainer, data)
        }
        None => {
            let data = load_dataset(config, dataset)?;
            (Trainer::<T>::new(config.clone(), &data)?, data)
        }
    };
    trainer.config.out_dir = config.out_dir.clone();
    trainer.config.save(&out.join("config.txt"))?;

    let log_path = out.join("loss_log.csv");
    let fresh = resume.is_none() || !log_path.exists();
    let file = if fresh {
        File::create(&log_path)
    } else {
        OpenOptions::new().append(true).open(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{LOSS_LOG_HEADER}")?;
    }
    let mut io_error = None;
    let until = stop_after.unwrap_or(usize::MAX);
    let mut summaries: Vec<EpochSummary> = Vec::new();
    while trainer.epoch < until.min(trainer.config.epochs) {
        let summary = trainer.run_epoch(&data, &mut |r| {
            if let Err(e) = writeln!(log, "{}", loss_log_line(r)) {
                io_error.get_or_insert(e);
            }
        })?;
        eprintln!(
            "epoch {:>3}  loss {:.4}  test mAP {:.4}  OF1 {:.4}",
            summary.epoch, summary.mean_loss, summary.reports[0].map, summary.reports[0].of1
        );
        summaries.push(summary);
    }
    if let Some(e) = io_error {
        return Err(e).context("writing the loss log");
    }
    log.flush()?;

    let epochs_path = out.join("epochs.csv");
    let mut epochs = String::new();
    if resume.is_none() || !epochs_path.exists() {
        epochs.push_str("epoch,mean_loss,mAP,OF1,CF1,top3_OF1\n");
    }
    for s in &summaries {
        epochs.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.epoch, s.mean_loss, s.reports[0].map, s.reports[0].of1, s.reports[0].cf1, s.reports[1].of1
        ));
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&epochs_path)
        .and_then(|mut f| f.write_all(epochs.as_bytes()))
        .with_context(|| format!("writing {}", epochs_path.display()))?;

    checkpoint::save(&trainer, &out.join("checkpoint.txt"))?;
    let reports = trainer.evaluate(&data)?;
    write_reports(&reports, &out.join("metrics.csv"))?;
    print_reports(&reports);
    Ok(())
}

fn eval(config: &RunConfig, path: &Path, dataset: Option<&Path>) -> Result<()> {
    with_checkpoint(path, |p| match p {
        Precision::Train => eval_as::<f32>(config, path, dataset),
        Precision::High => eval_as::<f64>(config, path, dataset),
    })
}

fn eval_as<T: Scalar>(config: &RunConfig, path: &Path, dataset: Option<&Path>) -> Result<()> {
    let trainer = checkpoint::load::<T>(path)?;
    let data = load_dataset(&trainer.config, dataset)?;
    let reports = trainer.evaluate(&data)?;
    write_reports(&reports, &out_dir(config)?.join("eval_metrics.csv"))?;
    print_reports(&reports);
    Ok(())
}

fn grad_check(config: &RunConfig, instances: usize, corrupt: bool) -> Result<()> {
    let reports = gradient_suite(config.seed, instances, corrupt)?;
    println!("{:<8} {:>14} {:>10}  status", "component", "max_rel_error", "instances");
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<8} {:>14.3e} {:>10}  {status}", r.name, r.max_rel_error, r.instances);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    println!("tolerance {TOLERANCE:e}");
    if !failed.is_empty() {
        bail!(GradCheckFailed(failed.join(", ")));
    }
    Ok(())
}

fn gen_data(config: &RunConfig, output: Option<PathBuf>) -> Result<()> {
    let path = match output {
        Some(p) => p,
        None => out_dir(config)?.join("dataset.bin"),
    };
    let dataset = data::generate(&config.synthetic_spec())?;
    let checksum = data::save(&dataset, &path)?;
    println!("{} {}", checksum, path.display());
    Ok(())
}

fn export_embeddings<T: Scalar>(config: &RunConfig, path: &Path, dataset: Option<&Path>, split: SplitArg) -> Result<()> {
    let trainer = checkpoint::load::<T>(path)?;
    let data = load_dataset(&trainer.config, dataset)?;
    let out = out_dir(config)?;
    let rows = export::embeddings(&trainer, pick(&data, split))?;
    export::write_embeddings(&rows, &out.join("embeddings.txt"))?;
    let protos = export::prototypes(&trainer)?;
    export::write_prototypes(&protos, &out.join("prototypes.txt"))?;
    println!("{} embeddings, {} prototypes", rows.len(), protos.len());
    Ok(())
}

fn export_attention<T: Scalar>(config: &RunConfig, path: &Path, dataset: Option<&Path>, split: SplitArg) -> Result<()> {
    let trainer = checkpoint::load::<T>(path)?;
    let data = load_dataset(&trainer.config, dataset)?;
    let records = export::attention_records(&trainer, pick(&data, split))?;
    export::write_attention(&records, &out_dir(config)?.join("attention.txt"))?;
    println!("{} attention records", records.len());
    Ok(())
}
