//! Command-line front end. Flags override values from `--config`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use actguard_core::evaluation::EvalReport;
use actguard_core::flow::{Coupling, Mixing, Subnet};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{require_path, RunConfig};
use crate::container::{read_bytes, write_bytes};
use crate::error::{exit, Error, Result};
use crate::files::{content_id, load_key, load_model, save_key, save_model, to_json_pretty, ManifestFile};
use crate::pipeline::{self, EvalOptions, SynthOptions};

#[derive(Debug, Parser)]
#[command(name = "actguard", version, about = "Activation-based anomaly detection for neural networks")]
pub struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a blue-noise sampling key over the activation volume.
    Mask(MaskArgs),
    /// Write a synthetic dataset (records, optional predictions, manifest).
    Synth(SynthArgs),
    /// Train a normalizing flow on the clean training split.
    Train(TrainArgs),
    /// Score every test record with the selected heads.
    Score(ScoreArgs),
    /// Compute detection and attack metrics from a score table.
    Eval(EvalArgs),
    /// Render an evaluation report as text tables.
    Report(ReportArgs),
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected H,W,L, got '{s}'"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad dimension '{p}'"))?;
    }
    Ok(out)
}

fn parse_subnet(s: &str) -> std::result::Result<Subnet, String> {
    match s.split_once(':') {
        None if s == "linear" => Ok(Subnet::Linear),
        Some(("mlp", w)) => w
            .parse()
            .map(|width| Subnet::Mlp { width })
            .map_err(|_| format!("bad MLP width '{w}'")),
        _ => Err(format!("expected 'linear' or 'mlp:<width>', got '{s}'")),
    }
}

fn parse_theta(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got '{s}'"))?;
    let v: f64 = v.parse().map_err(|_| format!("bad threshold '{v}'"))?;
    Ok((k.to_string(), v))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CouplingArg {
    Affine,
    Gin,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MixingArg {
    Permutation,
    Linear,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Volume size H,W,L; defaults to the manifest's volume.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    /// Manifest whose volume size to use when --dims is absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Minimum distance between sampled voxels.
    #[arg(long = "min-dist", visible_alias = "r")]
    pub min_dist: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Candidate attempts per active point.
    #[arg(long)]
    pub k_attempts: Option<usize>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_dims, default_value = "16,16,4")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_test: usize,
    #[arg(long, default_value_t = 200)]
    pub n_anomalous: usize,
    /// Mean shift of the anomalous records.
    #[arg(long, default_value_t = 3.0)]
    pub shift: f32,
    /// Neighbour correlation of the regular field, in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    pub corr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Forward passes per prediction record (0 writes none).
    #[arg(long, default_value_t = 0)]
    pub predictions: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Model output file.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Per-epoch history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long, value_enum)]
    pub coupling: Option<CouplingArg>,
    #[arg(long, value_enum)]
    pub mixing: Option<MixingArg>,
    /// `linear` or `mlp:<width>`.
    #[arg(long, value_parser = parse_subnet)]
    pub subnet: Option<Subnet>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated heads: euclidean, harmonic, mahalanobis, hbos<k>.
    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<String>,
    /// Directory with previously saved head fits.
    #[arg(long)]
    pub fits: Option<PathBuf>,
    /// Directory to save the head fits to.
    #[arg(long)]
    pub fits_out: Option<PathBuf>,
    /// Score table CSV.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Manifest with prediction records, for attack strength.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Key and model, recorded in the report by id.
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Pick thresholds with this false-positive rate on clean scores.
    #[arg(long)]
    pub fpr_budget: Option<f64>,
    /// Fixed threshold `HEAD=VALUE` or `PERTURBATION/HEAD=VALUE`; repeatable.
    #[arg(long, value_parser = parse_theta)]
    pub theta: Vec<(String, f64)>,
    /// ROC and PR curve points CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Report JSON.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON written by `eval`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Text output; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match execute(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Mask(a) => mask(cfg, a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(cfg, a),
        Command::Score(a) => score(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Report(a) => report(cfg, a),
    }
}

fn mask(cfg: RunConfig, a: MaskArgs) -> Result<()> {
    let out = require_path(a.out, &cfg.paths.key, "key")?;
    let dims = match a.dims {
        Some(d) => d,
        None => {
            let path = require_path(a.manifest, &cfg.paths.manifest, "manifest")?;
            ManifestFile::load(&path)?.manifest.volume_dims
        }
    };
    let r = a
        .min_dist
        .or(cfg.sampling.r)
        .ok_or_else(|| Error::Config("no minimum distance given (--min-dist or sampling.r)".into()))?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Config(format!("--min-dist must be positive, got {r}")));
    }
    let seed = a.seed.unwrap_or(cfg.sampling.seed);
    let k = a.k_attempts.unwrap_or(cfg.sampling.k_attempts);
    let key = pipeline::make_key(dims, r, seed, k)?;
    save_key(&key, &out)?;
    eprintln!("key {} with {} points written to {}", key.key_id(), key.dim(), out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let opts = SynthOptions {
        dims: a.dims,
        n_train: a.n_train,
        n_test: a.n_test,
        n_anomalous: a.n_anomalous,
        shift: a.shift,
        corr: a.corr,
        seed: a.seed,
        predictions: a.predictions,
        classes: a.classes,
        dropout: a.dropout,
    };
    let m = pipeline::synth(&a.out, &opts)?;
    eprintln!("{} records written to {}", m.records.len(), a.out.display());
    Ok(())
}

fn load_manifest(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<ManifestFile> {
    ManifestFile::load(&require_path(flag, &cfg.paths.manifest, "manifest")?)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let mf = load_manifest(a.manifest, &cfg)?;
    let key = load_key(&require_path(a.key, &cfg.paths.key, "key")?)?;
    let out = require_path(a.out, &cfg.paths.model, "model")?;
    let history = a.history.or(cfg.paths.history.clone());
    if let Some(n) = a.blocks {
        cfg.flow.n_blocks = n;
    }
    if let Some(c) = a.coupling {
        cfg.flow.coupling = match c {
            CouplingArg::Affine => Coupling::Affine,
            CouplingArg::Gin => Coupling::Gin,
        };
    }
    if let Some(m) = a.mixing {
        cfg.flow.mixing = match m {
            MixingArg::Permutation => Mixing::RandomPermutation,
            MixingArg::Linear => Mixing::InvertibleLinear,
        };
    }
    if let Some(s) = a.subnet {
        cfg.flow.subnet = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.max_epochs.is_some() {
        cfg.train.max_epochs = a.max_epochs;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(p) = a.patience {
        cfg.train.early_stop_patience = p;
    }
    cfg.validate()?;
    let spec = cfg.flow.spec(key.dim())?;
    let (params, hist) = pipeline::train_flow(&mf, &key, spec, &cfg.train)?;
    save_model(&params, &key.key_id(), &out)?;
    if let Some(h) = history {
        pipeline::write_history(&hist, &h)?;
    }
    eprintln!(
        "trained {} epochs, best validation NLL {:.4} at epoch {}; model written to {}",
        hist.epochs.len(),
        hist.best_val_nll(),
        hist.best_epoch,
        out.display()
    );
    Ok(())
}

fn score(mut cfg: RunConfig, a: ScoreArgs) -> Result<()> {
    let mf = load_manifest(a.manifest, &cfg)?;
    let key = load_key(&require_path(a.key, &cfg.paths.key, "key")?)?;
    let model = load_model(&require_path(a.model, &cfg.paths.model, "model")?)?;
    let out = require_path(a.out, &cfg.paths.scores, "scores")?;
    if !a.heads.is_empty() {
        cfg.scoring.heads = a.heads;
    }
    let heads = cfg.scoring.parsed_heads()?;
    let fits = pipeline::fit_heads(&mf, &key, &model, &heads, a.fits.as_deref())?;
    if let Some(dir) = &a.fits_out {
        pipeline::save_fits(&fits, &model.key_id, dir)?;
    }
    let table = pipeline::score(&mf, &key, &model, &fits)?;
    pipeline::write_scores(&table, &out)?;
    eprintln!("{} rows x {} scores written to {}", table.rows.len(), table.columns.len(), out.display());
    Ok(())
}

fn file_id(path: &Path) -> Result<String> {
    Ok(content_id(&read_bytes(path)?))
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let scores = require_path(a.scores, &cfg.paths.scores, "scores")?;
    let out = require_path(a.out, &cfg.paths.report, "report")?;
    let fpr_budget = a.fpr_budget.or(cfg.scoring.fpr_budget);
    if let Some(b) = fpr_budget {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Config(format!("--fpr-budget must lie in [0, 1], got {b}")));
        }
    }
    let mut theta: BTreeMap<String, f64> = cfg.scoring.theta.clone();
    theta.extend(a.theta);
    let key_id = match a.key.or(cfg.paths.key.clone()) {
        Some(p) => load_key(&p)?.key_id(),
        None => String::new(),
    };
    let model_id = match a.model.or(cfg.paths.model.clone()) {
        Some(p) => file_id(&p)?,
        None => String::new(),
    };
    let table = pipeline::read_scores(&scores)?;
    let attacks = match a.manifest.or(cfg.paths.manifest.clone()) {
        Some(p) => pipeline::attack_rows(&ManifestFile::load(&p)?)?,
        None => Vec::new(),
    };
    let opts = EvalOptions {
        fpr_budget,
        theta,
        key_id,
        model_id,
    };
    let rep = pipeline::evaluate(&table, &opts, attacks)?;
    write_bytes(&out, &to_json_pretty(&rep))?;
    if let Some(c) = a.curves {
        pipeline::write_curves(&table, &c)?;
    }
    eprintln!("report with {} detector rows written to {}", rep.detectors.len(), out.display());
    Ok(())
}

fn report(cfg: RunConfig, a: ReportArgs) -> Result<()> {
    let path = require_path(a.report, &cfg.paths.report, "report")?;
    let rep: EvalReport = serde_json::from_slice(&read_bytes(&path)?).map_err(|e| Error::json(&path, e))?;
    let text = pipeline::render_report(&rep);
    match a.out {
        Some(p) => write_bytes(&p, text.as_bytes()),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_parsers() {
        assert_eq!(parse_dims("16, 16,4").unwrap(), [16, 16, 4]);
        assert!(parse_dims("16,16").is_err());
        assert_eq!(parse_subnet("mlp:32").unwrap(), Subnet::Mlp { width: 32 });
        assert_eq!(parse_subnet("linear").unwrap(), Subnet::Linear);
        assert!(parse_subnet("mlp").is_err());
        assert_eq!(parse_theta("fog/hbos30=1.5").unwrap(), ("fog/hbos30".into(), 1.5));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["actguard", "mask", "--bogus"]), exit::CONFIG);
        assert_eq!(run(["actguard", "frobnicate"]), exit::CONFIG);
        assert_eq!(run(["actguard", "--help"]), exit::OK);
    }
}
