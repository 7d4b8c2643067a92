//! The detection pipeline behind each subcommand, usable as a library.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use actguard_core::dataset::{build_manifest, Manifest, ManifestEntry, Split, SplitRule};
use actguard_core::evaluation::{
    attack_metrics, evaluate_detector, mcd_score, msp_score, pr_curve, roc_curve, AttackRow, DetectorRow,
    EvalReport, ScoredSet,
};
use actguard_core::flow::{FlowParams, FlowSpec};
use actguard_core::record::{ActivationRecord, LayerSelection, PredictionRecord, CLEAN};
use actguard_core::sampling::{bridson_sample, extract_from_record, SamplingKey};
use actguard_core::scoring::{FittedHead, Head};
use actguard_core::synth::{synth_generate, synth_layout, SynthReadout};
use actguard_core::trainer::{train, TrainConfig, TrainHistory};
use actguard_core::SeededRng;
use rayon::prelude::*;

use crate::container::{read_prediction, read_record, write_prediction, write_record};
use crate::error::{Error, Result};
use crate::files::{load_fit, save_fit, ManifestFile, ModelFile};

/// Draws a blue-noise sampling key.
pub fn make_key(dims: [usize; 3], r: f64, seed: u64, k_attempts: usize) -> Result<SamplingKey> {
    Ok(bridson_sample(dims, r, seed, k_attempts)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub dims: [usize; 3],
    pub n_train: usize,
    pub n_test: usize,
    pub n_anomalous: usize,
    pub shift: f32,
    pub corr: f64,
    pub seed: u64,
    /// Forward passes per prediction record; `0` writes none.
    pub predictions: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            dims: [16, 16, 4],
            n_train: 200,
            n_test: 200,
            n_anomalous: 200,
            shift: 3.0,
            corr: 0.5,
            seed: 0,
            predictions: 0,
            classes: 4,
            dropout: 0.1,
        }
    }
}

fn record_file(dir: &str, input_id: &str, perturbation: &str) -> String {
    format!("{dir}/{input_id}.{perturbation}.daac")
}

/// Writes a synthetic dataset under `out_dir` and returns its manifest
/// (also written as `out_dir/manifest.json`). The first `n_train` regular
/// records train the detector; the rest join the anomalies in the test split.
pub fn synth(out_dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    let mut rng = SeededRng::new(opts.seed);
    let data = synth_generate(
        &mut rng,
        opts.n_train + opts.n_test,
        opts.n_anomalous,
        opts.dims,
        opts.shift,
        opts.corr,
    )?;
    let test_ids: BTreeSet<String> = data.records[opts.n_train..]
        .iter()
        .filter(|r| r.perturbation == CLEAN)
        .map(|r| r.input_id.clone())
        .collect();
    let paths: Vec<String> = data
        .records
        .iter()
        .map(|r| record_file("records", &r.input_id, &r.perturbation))
        .collect();
    data.records
        .par_iter()
        .zip(&paths)
        .try_for_each(|(r, p)| write_record(r, &out_dir.join(p)))?;
    let pairs: Vec<(String, &ActivationRecord)> = paths.iter().cloned().zip(data.records.iter()).collect();
    let mut manifest = build_manifest(
        &pairs,
        &SplitRule::TestIds(test_ids),
        LayerSelection::Everywhere,
        Some((opts.dims[0], opts.dims[1])),
    )?;
    if opts.predictions > 0 {
        let mut head_rng = rng.fork(7);
        let channels = synth_layout(opts.dims)[0].1;
        let readout = SynthReadout::new(&mut head_rng, opts.classes, channels)?;
        for (entry, record) in manifest.records.iter_mut().zip(&data.records) {
            let pred = readout.predict(record, opts.predictions, opts.dropout, &mut head_rng)?;
            let rel = record_file("predictions", &record.input_id, &record.perturbation);
            write_prediction(&pred, &record.perturbation, &out_dir.join(&rel))?;
            entry.prediction = Some(rel);
        }
    }
    crate::files::save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Entries of one split, ordered by `(input_id, perturbation)` so results
/// do not depend on manifest order.
pub fn sorted_entries(manifest: &Manifest, split: Split) -> Vec<&ManifestEntry> {
    let mut v: Vec<&ManifestEntry> = manifest.split(split).collect();
    v.sort_by(|a, b| (&a.input_id, &a.perturbation).cmp(&(&b.input_id, &b.perturbation)));
    v
}

pub fn check_key(manifest: &Manifest, key: &SamplingKey) -> Result<()> {
    if key.dims != manifest.volume_dims {
        return Err(Error::Data(format!(
            "key drawn for volume {:?} but the manifest volume is {:?}",
            key.dims, manifest.volume_dims
        )));
    }
    Ok(())
}

fn load_checked(mf: &ManifestFile, entry: &ManifestEntry) -> Result<ActivationRecord> {
    let record = read_record(&mf.record_path(entry))?;
    if record.input_id != entry.input_id || record.perturbation != entry.perturbation {
        return Err(Error::Data(format!(
            "{} holds {} ({}), manifest expects {} ({})",
            entry.path, record.input_id, record.perturbation, entry.input_id, entry.perturbation
        )));
    }
    mf.manifest.check_record(&record)?;
    if !record.all_finite() {
        return Err(Error::Data(format!("{} contains non-finite values", entry.path)));
    }
    Ok(record)
}

/// Sampled feature vectors of `entries`, read in parallel, in entry order.
pub fn load_features(mf: &ManifestFile, entries: &[&ManifestEntry], key: &SamplingKey) -> Result<Vec<Vec<f64>>> {
    check_key(&mf.manifest, key)?;
    entries
        .par_iter()
        .map(|e| {
            let record = load_checked(mf, e)?;
            let f = extract_from_record(&record, key, mf.manifest.layer_selection)?;
            Ok(f.into_iter().map(f64::from).collect())
        })
        .collect()
}

/// Trains a flow on the clean training split.
pub fn train_flow(
    mf: &ManifestFile,
    key: &SamplingKey,
    spec: FlowSpec,
    config: &TrainConfig,
) -> Result<(FlowParams, TrainHistory)> {
    let entries = sorted_entries(&mf.manifest, Split::Train);
    let features = load_features(mf, &entries, key)?;
    let start = Instant::now();
    let mut clock = move || start.elapsed().as_secs_f64();
    Ok(train(&features, spec, config, &mut clock)?)
}

pub fn write_history(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["epoch", "train_nll", "val_nll", "seconds"]).map_err(err)?;
    for r in &history.epochs {
        w.write_record([
            r.epoch.to_string(),
            r.train_nll.to_string(),
            r.val_nll.to_string(),
            format!("{:.3}", r.seconds),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

/// Per-input scores; one column per detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub columns: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub input_id: String,
    pub perturbation: String,
    pub values: Vec<f64>,
}

pub const MSP_COLUMN: &str = "msp";
pub const MCD_COLUMN: &str = "mcd";

fn fit_file(dir: &Path, head: Head) -> std::path::PathBuf {
    dir.join(format!("{head}.daaf"))
}

/// Fits (or loads from `fits_in`) every head that needs training latents.
pub fn fit_heads(
    mf: &ManifestFile,
    key: &SamplingKey,
    model: &ModelFile,
    heads: &[Head],
    fits_in: Option<&Path>,
) -> Result<Vec<FittedHead>> {
    let needs_latents = fits_in.is_none() && heads.iter().any(|h| h.needs_fit());
    let latents = if needs_latents {
        let entries = sorted_entries(&mf.manifest, Split::Train);
        let features = load_features(mf, &entries, key)?;
        let chunks = features
            .par_chunks(64)
            .map(|c| model.params.forward_batch(c))
            .collect::<core::result::Result<Vec<_>, _>>()?;
        chunks.into_iter().flatten().map(|code| code.z).collect()
    } else {
        Vec::new()
    };
    heads
        .iter()
        .map(|&h| match (fits_in, h.needs_fit()) {
            (Some(dir), true) => {
                let (fit, key_id) = load_fit(&fit_file(dir, h))?;
                if key_id != model.key_id || fit.head() != h {
                    return Err(Error::Data(format!("fit for {h} does not match the model")));
                }
                Ok(fit)
            }
            _ => Ok(FittedHead::fit(h, &latents)?),
        })
        .collect()
}

pub fn save_fits(fits: &[FittedHead], key_id: &str, dir: &Path) -> Result<()> {
    for f in fits {
        save_fit(f, key_id, &fit_file(dir, f.head()))?;
    }
    Ok(())
}

/// Scores every test record with each head, plus the softmax baselines
/// when every test record carries a prediction.
pub fn score(mf: &ManifestFile, key: &SamplingKey, model: &ModelFile, fits: &[FittedHead]) -> Result<ScoreTable> {
    if model.key_id != key.key_id() {
        return Err(Error::Data(format!(
            "model was trained with key {} but key {} was given",
            model.key_id,
            key.key_id()
        )));
    }
    if model.params.dim() != key.dim() {
        return Err(Error::Data(format!(
            "model dimension {} differs from key dimension {}",
            model.params.dim(),
            key.dim()
        )));
    }
    let entries = sorted_entries(&mf.manifest, Split::Test);
    if entries.is_empty() {
        return Err(Error::Data("manifest has no test records".into()));
    }
    let with_pred = entries.iter().all(|e| e.prediction.is_some());
    let rows: Vec<(ScoreRow, Option<PredictionRecord>)> = entries
        .par_iter()
        .map(|e| {
            let record = load_checked(mf, e)?;
            let x: Vec<f64> = extract_from_record(&record, key, mf.manifest.layer_selection)?
                .into_iter()
                .map(f64::from)
                .collect();
            let z = model.params.forward(&x)?.z;
            let values = fits.iter().map(|f| f.tau(&z)).collect();
            let pred = match (&e.prediction, with_pred) {
                (Some(p), true) => Some(read_prediction(&mf.resolve(p))?),
                _ => None,
            };
            Ok((
                ScoreRow {
                    input_id: e.input_id.clone(),
                    perturbation: e.perturbation.clone(),
                    values,
                },
                pred,
            ))
        })
        .collect::<Result<_>>()?;
    let mut columns: Vec<String> = fits.iter().map(|f| f.head().to_string()).collect();
    let with_mcd = with_pred && rows.iter().all(|(_, p)| p.as_ref().is_some_and(|p| p.passes.len() >= 2));
    if with_pred {
        columns.push(MSP_COLUMN.into());
        if with_mcd {
            columns.push(MCD_COLUMN.into());
        }
    }
    let rows = rows
        .into_iter()
        .map(|(mut row, pred)| {
            if let Some(p) = pred {
                row.values.push(msp_score(&p)?);
                if with_mcd {
                    row.values.push(mcd_score(&p)?);
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(ScoreTable { columns, rows })
}

pub fn write_scores(table: &ScoreTable, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    let mut header = vec!["input_id".to_string(), "perturbation".to_string()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for r in &table.rows {
        let mut rec = vec![r.input_id.clone(), r.perturbation.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<ScoreTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.len() < 3 || &header[0] != "input_id" || &header[1] != "perturbation" {
        return Err(Error::Format(format!(
            "{}: expected columns input_id, perturbation, then scores",
            path.display()
        )));
    }
    let columns: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let values = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: bad score '{v}'", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(ScoreRow {
            input_id: rec[0].to_string(),
            perturbation: rec[1].to_string(),
            values,
        });
    }
    Ok(ScoreTable { columns, rows })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub fpr_budget: Option<f64>,
    /// Thresholds keyed by `detector` or `perturbation/detector`.
    pub theta: BTreeMap<String, f64>,
    pub key_id: String,
    pub model_id: String,
}

fn column_scores(table: &ScoreTable, col: usize, perturbation: &str) -> Vec<f64> {
    table
        .rows
        .iter()
        .filter(|r| r.perturbation == perturbation)
        .map(|r| r.values[col])
        .collect()
}

/// One perturbation at a time against all clean test scores.
pub fn evaluate(table: &ScoreTable, opts: &EvalOptions, attacks: Vec<AttackRow>) -> Result<EvalReport> {
    let perturbations: BTreeSet<&str> = table
        .rows
        .iter()
        .map(|r| r.perturbation.as_str())
        .filter(|p| *p != CLEAN)
        .collect();
    if perturbations.is_empty() {
        return Err(Error::Data("score table has no perturbed inputs".into()));
    }
    let jobs: Vec<(&str, usize)> = perturbations
        .iter()
        .flat_map(|&p| (0..table.columns.len()).map(move |c| (p, c)))
        .collect();
    let detectors = jobs
        .par_iter()
        .map(|&(pert, col)| {
            let name = &table.columns[col];
            let regular = column_scores(table, col, CLEAN);
            let anomalous = column_scores(table, col, pert);
            let mut row = evaluate_detector(pert, name, &regular, &anomalous, opts.fpr_budget)?;
            let fixed = opts
                .theta
                .get(&format!("{pert}/{name}"))
                .or_else(|| opts.theta.get(name.as_str()));
            if let Some(&t) = fixed {
                let rate = |xs: &[f64]| xs.iter().filter(|&&s| s >= t).count() as f64 / xs.len() as f64;
                row.theta = Some(t);
                row.fpr_at_theta = Some(rate(&regular));
                row.tpr_at_theta = Some(rate(&anomalous));
            }
            Ok(row)
        })
        .collect::<Result<Vec<DetectorRow>>>()?;
    Ok(EvalReport {
        key_id: opts.key_id.clone(),
        model_id: opts.model_id.clone(),
        detectors,
        attacks,
    })
}

/// Attack strength per perturbation, comparing the arg-max maps of each
/// perturbed test prediction with the clean prediction of the same input.
pub fn attack_rows(mf: &ManifestFile) -> Result<Vec<AttackRow>> {
    let entries = sorted_entries(&mf.manifest, Split::Test);
    let clean: BTreeMap<&str, &ManifestEntry> = entries
        .iter()
        .filter(|e| e.perturbation == CLEAN && e.prediction.is_some())
        .map(|e| (e.input_id.as_str(), *e))
        .collect();
    let pairs: Vec<(&ManifestEntry, &ManifestEntry)> = entries
        .iter()
        .filter(|e| e.perturbation != CLEAN && e.prediction.is_some())
        .filter_map(|e| clean.get(e.input_id.as_str()).map(|c| (*c, *e)))
        .collect();
    let metrics = pairs
        .par_iter()
        .map(|(c, p)| {
            let load = |e: &ManifestEntry| read_prediction(&mf.resolve(e.prediction.as_deref().unwrap_or_default()));
            let (cp, pp) = (load(c)?, load(p)?);
            let classes = cp.passes[0].classes.max(pp.passes[0].classes);
            let m = attack_metrics(&cp.passes[0].argmax(), &pp.passes[0].argmax(), classes)?;
            Ok((p.perturbation.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grouped: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for (pert, m) in metrics {
        let g = grouped.entry(pert).or_default();
        g.0 += 1;
        g.1 += m.aacc;
        g.2 += m.aiou;
    }
    Ok(grouped
        .into_iter()
        .map(|(perturbation, (n, a, i))| AttackRow {
            perturbation,
            n,
            aacc: a / n as f64,
            aiou: i / n as f64,
        })
        .collect())
}

/// ROC and PR points of every `(perturbation, detector)` pair.
pub fn write_curves(table: &ScoreTable, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["perturbation", "detector", "curve", "x", "y"]).map_err(err)?;
    let perturbations: BTreeSet<&str> = table
        .rows
        .iter()
        .map(|r| r.perturbation.as_str())
        .filter(|p| *p != CLEAN)
        .collect();
    for pert in perturbations {
        for (col, name) in table.columns.iter().enumerate() {
            let set = ScoredSet::from_groups(&column_scores(table, col, CLEAN), &column_scores(table, col, pert))?;
            for (curve, pts) in [("roc", roc_curve(&set)?), ("pr", pr_curve(&set)?)] {
                for (x, y) in pts {
                    w.write_record([pert, name, curve, &x.to_string(), &y.to_string()])
                        .map_err(err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(line(header).trim_end());
    out.push('\n');
    for r in rows {
        out.push_str(line(r).trim_end());
        out.push('\n');
    }
}

/// Plain-text rendering: one block per metric with detectors as rows and
/// perturbations (plus their mean) as columns.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = format!("key {}  model {}\n", report.key_id, report.model_id);
    let mut perts: Vec<&str> = report.detectors.iter().map(|d| d.perturbation.as_str()).collect();
    perts.sort_unstable();
    perts.dedup();
    let mut dets: Vec<&str> = Vec::new();
    for d in &report.detectors {
        if !dets.contains(&d.detector.as_str()) {
            dets.push(&d.detector);
        }
    }
    let metrics: [(&str, fn(&DetectorRow) -> f64); 3] =
        [("AUROC", |d| d.auroc), ("AUPR", |d| d.aupr), ("FPR95", |d| d.fpr95)];
    for (name, get) in metrics {
        let mut header = vec![name.to_string()];
        header.extend(perts.iter().map(|p| p.to_string()));
        header.push("mean".into());
        let rows: Vec<Vec<String>> = dets
            .iter()
            .map(|&det| {
                let vals: Vec<Option<f64>> = perts
                    .iter()
                    .map(|&p| {
                        report
                            .detectors
                            .iter()
                            .find(|d| d.detector == det && d.perturbation == p)
                            .map(get)
                    })
                    .collect();
                let present: Vec<f64> = vals.iter().flatten().copied().collect();
                let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
                let mut row = vec![det.to_string()];
                row.extend(vals.into_iter().map(fmt_metric));
                row.push(fmt_metric(mean));
                row
            })
            .collect();
        out.push('\n');
        table(&mut out, &header, &rows);
    }
    let thresholds: Vec<Vec<String>> = report
        .detectors
        .iter()
        .filter_map(|d| {
            d.theta.map(|t| {
                vec![
                    d.perturbation.clone(),
                    d.detector.clone(),
                    format!("{t:.6}"),
                    fmt_metric(d.fpr_at_theta),
                    fmt_metric(d.tpr_at_theta),
                ]
            })
        })
        .collect();
    if !thresholds.is_empty() {
        out.push('\n');
        let header = ["perturbation", "detector", "theta", "FPR", "TPR"].map(String::from);
        table(&mut out, &header, &thresholds);
    }
    if !report.attacks.is_empty() {
        out.push('\n');
        let header = ["perturbation", "n", "AAcc", "AIoU"].map(String::from);
        let rows: Vec<Vec<String>> = report
            .attacks
            .iter()
            .map(|a| vec![a.perturbation.clone(), a.n.to_string(), format!("{:.3}", a.aacc), format!("{:.3}", a.aiou)])
            .collect();
        table(&mut out, &header, &rows);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_of(rows: &[(&str, &str, f64)]) -> ScoreTable {
        ScoreTable {
            columns: vec!["euclidean".into()],
            rows: rows
                .iter()
                .map(|&(i, p, v)| ScoreRow {
                    input_id: i.into(),
                    perturbation: p.into(),
                    values: vec![v],
                })
                .collect(),
        }
    }

    #[test]
    fn evaluate_per_perturbation() {
        let t = table_of(&[
            ("a", "none", 0.1),
            ("b", "none", 0.2),
            ("a", "fog", 0.9),
            ("b", "fog", 0.15),
            ("a", "flip", 0.05),
        ]);
        let mut opts = EvalOptions::default();
        opts.theta.insert("fog/euclidean".into(), 0.5);
        let r = evaluate(&t, &opts, Vec::new()).unwrap();
        assert_eq!(r.detectors.len(), 2);
        assert_eq!(r.detectors[0].perturbation, "flip");
        assert_eq!(r.detectors[0].auroc, 0.0);
        assert_eq!(r.detectors[1].auroc, 0.75);
        assert_eq!(r.detectors[1].theta, Some(0.5));
        assert_eq!(r.detectors[1].tpr_at_theta, Some(0.5));
        assert_eq!(r.detectors[0].theta, None);
        let text = render_report(&r);
        assert!(text.contains("AUROC"));
        assert!(text.lines().any(|l| l.starts_with("euclidean") && l.contains("0.750")));
    }

    #[test]
    fn evaluate_needs_perturbations() {
        let t = table_of(&[("a", "none", 0.1)]);
        assert!(matches!(evaluate(&t, &EvalOptions::default(), Vec::new()), Err(Error::Data(_))));
    }
}
