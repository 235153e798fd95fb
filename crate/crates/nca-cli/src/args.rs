//! Flag definitions and config-file merging.
//!
//! Every tunable is an `Option` so resolution order is explicit: command-line
//! flag, then config file (`--config`, key=value lines), then default. The
//! resolved values are echoed into checkpoints so a run can be reproduced
//! from its artifact alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::CliError;

#[derive(Parser)]
#[command(name = "nca", version, about = "Scalable NCA embedding training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train an embedding (NCA, exact NCA, or the softmax baseline).
    Train(TrainArgs),
    /// Weighted kNN evaluation of a checkpoint, plus support-set statistics.
    Eval(EvalArgs),
    /// Fine-grained induction accuracy of coarse-trained checkpoints.
    Induction(InductionArgs),
    /// Episodic few-shot evaluation on unseen classes.
    Fewshot(FewshotArgs),
    /// Finite-difference verification of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic datasets (IDX images or hierarchical features).
    Synth(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Nca,
    NcaExact,
    SoftmaxBaseline,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BankInitArg {
    /// Random unit rows, seeded.
    Random,
    /// One forward pass of the untrained encoder.
    Warmup,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DelimiterArg {
    Comma,
    Whitespace,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    None,
    SignFlip,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKindArg {
    Images,
    Hierarchy,
}

/// One labeled dataset, either an IDX image/label pair or a delimited file.
#[derive(Args, Clone, Default)]
pub struct DataArgs {
    /// IDX image file (use together with the matching labels file).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Delimited feature file (features then one integer label per row).
    #[arg(long)]
    pub file: Option<PathBuf>,
    /// Field separator for delimited files.
    #[arg(long, value_enum)]
    pub delimiter: Option<DelimiterArg>,
    /// Delimited file has a header row.
    #[arg(long)]
    pub header: bool,
}

/// Same shape with `train-`/`test-` prefixes, for commands that take both.
macro_rules! prefixed_data_args {
    ($name:ident, $prefix:literal) => {
        #[derive(Args, Clone, Default)]
        pub struct $name {
            #[arg(long = concat!($prefix, "-images"))]
            pub images: Option<PathBuf>,
            #[arg(long = concat!($prefix, "-labels"))]
            pub labels: Option<PathBuf>,
            #[arg(long = concat!($prefix, "-file"))]
            pub file: Option<PathBuf>,
            #[arg(long = concat!($prefix, "-delimiter"), value_enum)]
            pub delimiter: Option<DelimiterArg>,
            #[arg(long = concat!($prefix, "-header"))]
            pub header: bool,
        }

        impl $name {
            pub fn as_data_args(&self) -> DataArgs {
                DataArgs {
                    images: self.images.clone(),
                    labels: self.labels.clone(),
                    file: self.file.clone(),
                    delimiter: self.delimiter,
                    header: self.header,
                }
            }
        }
    };
}

prefixed_data_args!(TrainDataArgs, "train");
prefixed_data_args!(TestDataArgs, "test");

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub train_data: TrainDataArgs,
    /// key=value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Temperature of the similarity softmax.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Numerical floor for log arguments.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub lr_interval: Option<usize>,
    #[arg(long)]
    pub sgd_momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub memory_momentum_start: Option<f64>,
    #[arg(long)]
    pub memory_momentum_end: Option<f64>,
    #[arg(long, value_enum)]
    pub bank_init: Option<BankInitArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker cap. The implementation is single-threaded, so any value is
    /// bitwise reproducible; 1 is the documented guarantee.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub log_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub train_data: TrainDataArgs,
    #[command(flatten)]
    pub test_data: TestDataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Vote temperature; defaults to the training sigma from the checkpoint.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Comma-separated support density thresholds, e.g. 0.5,0.7,0.9.
    #[arg(long)]
    pub support_thresholds: Option<String>,
    /// Cap on queries used for support statistics (0 = all).
    #[arg(long)]
    pub support_sample: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct InductionArgs {
    #[arg(long)]
    pub nca_checkpoint: PathBuf,
    #[arg(long)]
    pub baseline_checkpoint: Option<PathBuf>,
    /// fine_id coarse_id lines.
    #[arg(long)]
    pub hierarchy: PathBuf,
    #[command(flatten)]
    pub train_data: TrainDataArgs,
    #[command(flatten)]
    pub test_data: TestDataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pool of unseen-class samples.
    #[command(flatten)]
    pub pool: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Classes per episode; omit to run the default 5/20-way settings.
    #[arg(long)]
    pub way: Option<usize>,
    /// Observations per class; omit to run the default 1/5-shot settings.
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Query items per episode.
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub instances: Option<usize>,
    /// Test hook: inject a sign flip so every check must fail.
    #[arg(long, value_enum)]
    pub fault: Option<FaultArg>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKindArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    // Image benchmark dials.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub modes_per_class: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    // Hierarchy generator dials.
    #[arg(long)]
    pub coarse: Option<usize>,
    #[arg(long)]
    pub fine_per_coarse: Option<usize>,
    #[arg(long)]
    pub samples_per_fine: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub intra_stddev: Option<f64>,
    #[arg(long)]
    pub inter_fine: Option<f64>,
    #[arg(long)]
    pub inter_coarse: Option<f64>,
    /// Fraction of each class written to the train split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

/// A parsed key=value config file.
#[derive(Default)]
pub struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    pub fn load(path: Option<&std::path::Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let Some((key, value)) = t.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected key=value, got {t:?}",
                    path.display(),
                    idx + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("config key {key}: bad value {raw:?}"))),
        }
    }
}

/// Resolves flag/config/default precedence and records the resolved values
/// for the checkpoint echo.
pub struct Resolver {
    file: FileConfig,
    echo: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: FileConfig) -> Self {
        Resolver { file, echo: BTreeMap::new() }
    }

    pub fn value<T: FromStr + Display>(
        &mut self,
        key: &str,
        cli: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        let resolved = match cli {
            Some(v) => v,
            None => self.file.get(key)?.unwrap_or(default),
        };
        self.echo.insert(key.to_string(), resolved.to_string());
        Ok(resolved)
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.echo.insert(key.to_string(), value.to_string());
    }

    /// The resolved configuration as sorted key=value lines.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.echo {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Parse "256,256" style width lists.
pub fn parse_widths(raw: &str) -> Result<Vec<usize>, CliError> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad layer width {p:?}")))
        })
        .collect()
}

/// Parse "0.5,0.7,0.9" style threshold lists.
pub fn parse_thresholds(raw: &str) -> Result<Vec<f64>, CliError> {
    let list: Result<Vec<f64>, CliError> = raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad threshold {p:?}")))
        })
        .collect();
    let list = list?;
    for &t in &list {
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::Config(format!("threshold {t} outside (0, 1]")));
        }
    }
    Ok(list)
}
