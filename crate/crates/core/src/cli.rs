//! The `edp` command-line driver.
//!
//! Every failure prints exactly one line `edp: error[<kind>]: <message>` on
//! stderr and exits with the code of its kind (see [`ExitKind`]).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Overrides};
use crate::data::{self, PartitionIndices};
use crate::error::Error;
use crate::federation::{self, EnsembleModel};
use crate::io;
use crate::nn::Model;
use crate::privacy;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Contract = 6,
    Numeric = 7,
}

impl ExitKind {
    pub fn name(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Config => "config",
            ExitKind::Io => "io",
            ExitKind::Format => "format",
            ExitKind::Contract => "contract",
            ExitKind::Numeric => "numeric",
        }
    }

    pub fn of(err: &Error) -> Self {
        match err.root() {
            Error::Config(_) => ExitKind::Config,
            Error::Io { .. } => ExitKind::Io,
            Error::IdxMagic { .. }
            | Error::IdxTruncated { .. }
            | Error::IdxCountMismatch { .. }
            | Error::ModelMagic
            | Error::UnsupportedVersion(_)
            | Error::Checksum { .. }
            | Error::PayloadShape { .. }
            | Error::Malformed(_) => ExitKind::Format,
            Error::NonFinite { .. } | Error::NonFiniteInput(_) => ExitKind::Numeric,
            _ => ExitKind::Contract,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "edp", version, about = "Private transfer learning with an averaged-feature ensemble")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise multiplier.
    #[arg(long, allow_negative_numbers = true)]
    pub nm: Option<f64>,
    /// Clipping threshold.
    #[arg(long, allow_negative_numbers = true)]
    pub nc: Option<f64>,
    /// Private training epochs.
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Private mini-batch size.
    #[arg(long)]
    pub batch: Option<u32>,
    #[arg(long)]
    pub participants: Option<u32>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the slice index files of the data partition.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// Train the initial model on the public slice.
    TrainInitial {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune one participant's private backbone.
    TrainPrivate {
        #[command(flatten)]
        common: Common,
        /// Initial model file.
        #[arg(long)]
        initial: PathBuf,
        /// 1-based participant id.
        #[arg(long)]
        participant: u32,
    },
    /// Ensemble private backbones with the initial model's head and evaluate
    /// on the validation slice.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        initial: PathBuf,
        #[arg(long = "backbone", required = true, num_args = 1..)]
        backbones: Vec<PathBuf>,
    },
    /// Accuracy of a model file on a slice of the partition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Head to stack on a backbone file (the initial model).
        #[arg(long)]
        initial: Option<PathBuf>,
        /// `validation`, `public`, or `train:<i>` / `test:<i>`.
        #[arg(long, default_value = "validation")]
        slice: String,
    },
    /// Print the (ε, δ) guarantee of a DP-SGD run.
    Accountant {
        #[arg(long, allow_negative_numbers = true)]
        nm: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        nc: f64,
        /// Mini-batch size.
        #[arg(long)]
        mb: usize,
        /// Training set size.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        epochs: usize,
        #[arg(long, allow_negative_numbers = true)]
        delta: f64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the whole pipeline and write metrics.csv (and curves.csv).
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

type CliResult = Result<(), (ExitKind, String)>;

fn fail(e: Error) -> (ExitKind, String) {
    (ExitKind::of(&e), e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig, (ExitKind, String)> {
    let path = common
        .config
        .as_deref()
        .ok_or((ExitKind::Usage, "--config <path> is required".to_string()))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => (ExitKind::Config, format!("cannot read config: {e}")),
        e => fail(e),
    })?;
    cfg.apply(&Overrides {
        seed: common.seed,
        noise_multiplier: common.nm,
        clip_threshold: common.nc,
        epochs: common.epochs.map(|v| v as usize),
        batch: common.batch.map(|v| v as usize),
        participants: common.participants.map(|v| v as usize),
        output_dir: common.out.clone(),
    });
    cfg.validate().map_err(fail)?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, (ExitKind, String)> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| fail(Error::io(&cfg.output_dir, e)))?;
    Ok(&cfg.output_dir)
}

struct Prepared {
    cfg: ExperimentConfig,
    dataset: data::LabeledDataset,
    indices: PartitionIndices,
    parts: data::Partition,
}

fn prepare(common: &Common) -> Result<Prepared, (ExitKind, String)> {
    let cfg = load_config(common)?;
    let dataset = cfg.load_dataset().map_err(fail)?;
    let indices = data::partition_indices(dataset.len(), &cfg.partition_plan()).map_err(fail)?;
    let parts = data::apply_partition(&dataset, &indices);
    Ok(Prepared { cfg, dataset, indices, parts })
}

fn write_index_file(path: &Path, idx: &[usize]) -> Result<(), (ExitKind, String)> {
    let mut s = String::with_capacity(idx.len() * 6);
    for i in idx {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| fail(Error::io(path, e)))
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Partition { common } => {
            let p = prepare(&common)?;
            let dir = out_dir(&p.cfg)?;
            write_index_file(&dir.join("validation.txt"), &p.indices.validation)?;
            write_index_file(&dir.join("public.txt"), &p.indices.public)?;
            for (i, part) in p.indices.participants.iter().enumerate() {
                write_index_file(&dir.join(format!("participant-{}-train.txt", i + 1)), &part.train)?;
                write_index_file(&dir.join(format!("participant-{}-test.txt", i + 1)), &part.test)?;
            }
            println!("partitioned {} examples into {}", p.dataset.len(), dir.display());
        }
        Command::TrainInitial { common } => {
            let p = prepare(&common)?;
            let (specs, shape) = p.cfg.architecture(&p.dataset).map_err(fail)?;
            let master = RngStream::new(p.cfg.seed);
            let (model, history) =
                federation::train_initial(&p.parts.public, &specs, &shape, &p.cfg.initial, &master.derive("initial", 0))
                    .map_err(|e| fail(e.in_stage("train-initial")))?;
            let acc = federation::evaluate(|x| model.predict(x), &p.parts.validation).map_err(fail)?;
            let path = out_dir(&p.cfg)?.join("initial.edpm");
            io::save_model(&model, false, None, &path).map_err(fail)?;
            let last = history.last().map_or(f64::NAN, |m| m.mean_loss);
            println!("initial model: final loss {} validation accuracy {} -> {}", io::fmt_sig6(last), io::fmt_sig6(acc), path.display());
        }
        Command::TrainPrivate { common, initial, participant } => {
            let p = prepare(&common)?;
            let initial = io::load_model(&initial).map_err(fail)?.model;
            let master = RngStream::new(p.cfg.seed);
            let all = p.cfg.participants_from(&p.parts, &master);
            let who = all
                .iter()
                .find(|x| x.id == participant as usize)
                .ok_or_else(|| (ExitKind::Contract, format!("no participant {participant} (have {})", all.len())))?;
            let private = federation::train_private(&initial, who).map_err(|e| fail(e.in_stage("train-private")))?;
            let path = out_dir(&p.cfg)?.join(format!("private-{participant}.edpm"));
            io::save_private(&private, &path).map_err(fail)?;
            println!("participant {participant}: epsilon {} -> {}", io::fmt_sig6(private.provenance.epsilon), path.display());
        }
        Command::Ensemble { common, initial, backbones } => {
            let p = prepare(&common)?;
            let initial = io::load_model(&initial).map_err(fail)?.model;
            let members = backbones
                .iter()
                .map(|b| io::load_model(b).and_then(|f| f.into_private()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(fail)?;
            let ens = EnsembleModel::from_initial(members, &initial, p.cfg.ensemble_weights.clone()).map_err(fail)?;
            let acc = federation::evaluate(|x| ens.forward(x), &p.parts.validation).map_err(fail)?;
            println!("ensemble of {}: validation accuracy {}", ens.members().len(), io::fmt_sig6(acc));
        }
        Command::Evaluate { common, model, initial, slice } => {
            let p = prepare(&common)?;
            let file = io::load_model(&model).map_err(fail)?;
            let model = match (file.is_backbone, initial) {
                (false, _) => file.model,
                (true, Some(init)) => {
                    let init = io::load_model(&init).map_err(fail)?.model;
                    let (_, head) = init.split().map_err(fail)?;
                    Model::compose(&file.model, &head).map_err(fail)?
                }
                (true, None) => return Err((ExitKind::Usage, "a backbone needs --initial to supply the head".into())),
            };
            let ds = pick_slice(&p.parts, &slice)?;
            let acc = federation::evaluate(|x| model.predict(x), ds).map_err(fail)?;
            println!("{slice}: accuracy {}", io::fmt_sig6(acc));
        }
        Command::Accountant { nm, nc, mb, n, epochs, delta, json } => {
            if !(nc > 0.0) {
                return Err((ExitKind::Contract, format!("clip threshold must be > 0, got {nc}")));
            }
            let report = privacy::account_training(nm, mb, n, epochs, delta).map_err(fail)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                println!(
                    "epsilon {} delta {} q {} steps {} order {}",
                    io::fmt_sig6(report.epsilon),
                    io::fmt_sig6(report.delta),
                    io::fmt_sig6(report.sampling_rate),
                    report.steps,
                    io::fmt_sig6(report.optimal_order)
                );
            }
        }
        Command::Experiment { common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?.to_path_buf();
            let report = federation::run_pipeline(&cfg).map_err(fail)?;
            io::write_metrics(std::slice::from_ref(&report), &dir.join("metrics.csv")).map_err(fail)?;
            if cfg.record_curves {
                io::write_curves(&report.curves, &dir.join("curves.csv")).map_err(fail)?;
            }
            print!("{}", io::metrics_csv(std::slice::from_ref(&report)));
        }
    }
    Ok(())
}

fn pick_slice<'a>(parts: &'a data::Partition, name: &str) -> Result<&'a data::LabeledDataset, (ExitKind, String)> {
    let bad = || (ExitKind::Usage, format!("unknown slice {name:?}"));
    match name {
        "validation" => Ok(&parts.validation),
        "public" => Ok(&parts.public),
        _ => {
            let (kind, i) = name.split_once(':').ok_or_else(bad)?;
            let i: usize = i.parse().map_err(|_| bad())?;
            let (train, test) = parts.participants.get(i.wrapping_sub(1)).ok_or_else(bad)?;
            match kind {
                "train" => Ok(train),
                "test" => Ok(test),
                _ => Err(bad()),
            }
        }
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("edp: error[{}]: {first}", ExitKind::Usage.name());
            return ExitKind::Usage as i32;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err((kind, msg)) => {
            eprintln!("edp: error[{}]: {}", kind.name(), msg.replace('\n', " "));
            kind as i32
        }
    }
}
