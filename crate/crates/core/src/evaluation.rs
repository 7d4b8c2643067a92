//! Detection metrics, attack strength, softmax baselines and the
//! coactivation diagnostic.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::record::{LabelMap, PredictionRecord};

/// Scores with binary labels; higher scores mean more anomalous and
/// `true` marks the anomalous (positive) class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }

    /// Builds a set from separate regular and anomalous scores.
    pub fn from_groups(regular: &[f64], anomalous: &[f64]) -> Result<Self> {
        let mut scores = regular.to_vec();
        scores.extend_from_slice(anomalous);
        let mut labels = vec![false; regular.len()];
        labels.resize(scores.len(), true);
        Self::new(scores, labels)
    }

    pub fn push(&mut self, score: f64, anomalous: bool) -> Result<()> {
        if score.is_nan() {
            return Err(Error::InvalidArgument("NaN score".into()));
        }
        self.scores.push(score);
        self.labels.push(anomalous);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// `(positives, negatives)`.
    pub fn counts(&self) -> (usize, usize) {
        let p = self.labels.iter().filter(|&&l| l).count();
        (p, self.labels.len() - p)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return Err(Error::SingleClass);
        }
        Ok((p, n))
    }

    /// Indices sorted by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }

    /// Cumulative `(tp, fp)` after admitting every score `>=` each unique
    /// threshold, from the highest threshold down.
    fn sweep(&self) -> Vec<(usize, usize)> {
        let idx = self.descending();
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < idx.len() {
            let s = self.scores[idx[i]];
            while i < idx.len() && self.scores[idx[i]] == s {
                if self.labels[idx[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            out.push((tp, fp));
        }
        out
    }
}

/// Mann–Whitney statistic via rank sums with average ranks for ties.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (p, n) = set.require_both()?;
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && set.scores[idx[j]] == set.scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos = idx[i..j].iter().filter(|&&k| set.labels[k]).count();
        rank_sum += avg * pos as f64;
        i = j;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Average precision `Σ (R_n − R_{n−1}) P_n` over descending unique thresholds.
pub fn aupr(set: &ScoredSet) -> Result<f64> {
    let (p, _) = set.counts();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in set.sweep() {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (tp - prev_tp) as f64 / p as f64 * precision;
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Lowest false-positive rate over thresholds whose true-positive rate is
/// at least `n_percent / 100`. The sweep covers every observed score and
/// `+∞`.
pub fn fpr_at_tpr(set: &ScoredSet, n_percent: f64) -> Result<f64> {
    let (p, n) = set.require_both()?;
    if !(0.0..=100.0).contains(&n_percent) {
        return Err(Error::InvalidArgument(format!("TPR level {n_percent}% outside [0, 100]")));
    }
    let meets = |tp: usize| tp as f64 * 100.0 >= n_percent * p as f64;
    let mut best = if meets(0) { 0.0 } else { f64::INFINITY };
    for (tp, fp) in set.sweep() {
        if meets(tp) {
            best = best.min(fp as f64 / n as f64);
        }
    }
    Ok(best)
}

/// ROC points `(fpr, tpr)` from threshold `+∞` down to the lowest score.
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (p, n) = set.require_both()?;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(set.sweep().into_iter().map(|(tp, fp)| (fp as f64 / n as f64, tp as f64 / p as f64)));
    Ok(pts)
}

/// Precision–recall points `(recall, precision)` per unique threshold.
pub fn pr_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (p, _) = set.counts();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    Ok(set
        .sweep()
        .into_iter()
        .map(|(tp, fp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

pub fn detection_metrics(set: &ScoredSet) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        auroc: auroc(set)?,
        aupr: aupr(set)?,
        fpr95: fpr_at_tpr(set, 95.0)?,
    })
}

/// Attack strength between the original and the perturbed prediction:
/// changed-pixel fraction and one minus the mean IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackMetrics {
    pub aacc: f64,
    pub aiou: f64,
}

pub fn attack_metrics(orig: &LabelMap, pert: &LabelMap, n_classes: usize) -> Result<AttackMetrics> {
    if (orig.height, orig.width) != (pert.height, pert.width) || orig.labels.len() != pert.labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "label maps {}x{} and {}x{}",
            orig.height, orig.width, pert.height, pert.width
        )));
    }
    if orig.labels.is_empty() {
        return Err(Error::InvalidArgument("empty label maps".into()));
    }
    if let Some(&l) = orig.labels.iter().chain(&pert.labels).find(|&&l| l as usize >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} >= {n_classes} classes")));
    }
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    let mut changed = 0usize;
    for (&a, &b) in orig.labels.iter().zip(&pert.labels) {
        let (a, b) = (a as usize, b as usize);
        if a == b {
            inter[a] += 1;
            union[a] += 1;
        } else {
            changed += 1;
            union[a] += 1;
            union[b] += 1;
        }
    }
    let present: Vec<f64> = (0..n_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(AttackMetrics {
        aacc: changed as f64 / orig.labels.len() as f64,
        aiou: 1.0 - miou,
    })
}

/// Negated maximum over pixels of the max-class softmax of the first pass.
pub fn msp_score(pred: &PredictionRecord) -> Result<f64> {
    pred.validate()?;
    let map = &pred.passes[0];
    let raw = (0..map.pixels())
        .map(|p| map.max_prob(p) as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(-raw)
}

/// Maximum over pixels of the population variance, across passes, of the
/// per-pixel max-class softmax.
pub fn mcd_score(pred: &PredictionRecord) -> Result<f64> {
    if pred.passes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "dropout score needs at least 2 passes, got {}",
            pred.passes.len()
        )));
    }
    pred.validate()?;
    let t = pred.passes.len() as f64;
    let pixels = pred.passes[0].pixels();
    let mut best = 0.0f64;
    for p in 0..pixels {
        let vals: Vec<f64> = pred.passes.iter().map(|m| m.max_prob(p) as f64).collect();
        let mean = vals.iter().sum::<f64>() / t;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
        best = best.max(var);
    }
    Ok(best)
}

pub const COACTIVATION_EPSILON: f64 = 1e-9;

/// `M(pert) − M(clean)` with `M[i][j] = ln(|a_i a_j| + ε)`, rows and columns
/// ordered by descending clean row sum (stable).
#[derive(Debug, Clone, PartialEq)]
pub struct CoactivationDiff {
    pub order: Vec<usize>,
    pub n: usize,
    pub values: Vec<f64>,
}

impl CoactivationDiff {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

fn coactivation(a: &[f32]) -> Vec<f64> {
    let n = a.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = libm::log(libm::fabs(a[i] as f64 * a[j] as f64) + COACTIVATION_EPSILON);
        }
    }
    m
}

pub fn coactivation_diff(pert: &[f32], clean: &[f32]) -> Result<CoactivationDiff> {
    if pert.len() != clean.len() {
        return Err(Error::ShapeMismatch(format!(
            "feature vectors of length {} and {}",
            pert.len(),
            clean.len()
        )));
    }
    let n = clean.len();
    let mc = coactivation(clean);
    let mp = coactivation(pert);
    let sums: Vec<f64> = mc.chunks(n.max(1)).map(|r| r.iter().sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]));
    let mut values = vec![0.0; n * n];
    for (oi, &i) in order.iter().enumerate() {
        for (oj, &j) in order.iter().enumerate() {
            values[oi * n + oj] = mp[i * n + j] - mc[i * n + j];
        }
    }
    Ok(CoactivationDiff { order, n, values })
}

/// One detector evaluated on one perturbation against the clean test set.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectorRow {
    pub perturbation: String,
    pub detector: String,
    pub n_regular: usize,
    pub n_anomalous: usize,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    /// Threshold chosen on the clean scores, when a budget was requested.
    pub theta: Option<f64>,
    /// Observed false/true positive rates at `theta`.
    pub fpr_at_theta: Option<f64>,
    pub tpr_at_theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackRow {
    pub perturbation: String,
    pub n: usize,
    pub aacc: f64,
    pub aiou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub key_id: String,
    pub model_id: String,
    pub detectors: Vec<DetectorRow>,
    pub attacks: Vec<AttackRow>,
}

/// Evaluates one detector for one perturbation; `fpr_budget` additionally
/// picks a threshold on the regular scores and reports its rates.
pub fn evaluate_detector(
    perturbation: &str,
    detector: &str,
    regular: &[f64],
    anomalous: &[f64],
    fpr_budget: Option<f64>,
) -> Result<DetectorRow> {
    let set = ScoredSet::from_groups(regular, anomalous)?;
    let m = detection_metrics(&set)?;
    let (theta, fpr, tpr) = match fpr_budget {
        Some(b) => {
            let t = crate::scoring::choose_threshold(regular, b)?;
            let rate = |xs: &[f64]| xs.iter().filter(|&&s| s >= t).count() as f64 / xs.len() as f64;
            (Some(t), Some(rate(regular)), Some(rate(anomalous)))
        }
        None => (None, None, None),
    };
    Ok(DetectorRow {
        perturbation: perturbation.into(),
        detector: detector.into(),
        n_regular: regular.len(),
        n_anomalous: anomalous.len(),
        auroc: m.auroc,
        aupr: m.aupr,
        fpr95: m.fpr95,
        theta,
        fpr_at_theta: fpr,
        tpr_at_theta: tpr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::record::SoftmaxMap;
    use proptest::prelude::*;

    fn set(pos: &[f64], neg: &[f64]) -> ScoredSet {
        ScoredSet::from_groups(neg, pos).unwrap()
    }

    /// Pairwise oracle: P(s+ > s-) + P(tie)/2.
    fn auroc_pairs(s: &ScoredSet) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &a) in s.scores().iter().enumerate() {
            for (j, &b) in s.scores().iter().enumerate() {
                if s.labels()[i] && !s.labels()[j] {
                    den += 1.0;
                    if a > b {
                        num += 1.0;
                    } else if a == b {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    /// Classifier at every candidate threshold (observed scores and +∞).
    fn rates_at(s: &ScoredSet, t: f64) -> (usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        for (&x, &l) in s.scores().iter().zip(s.labels()) {
            if x >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (tp, fp)
    }

    fn fpr_oracle(s: &ScoredSet, n_pct: f64) -> f64 {
        let (p, n) = s.counts();
        let mut cands: Vec<f64> = s.scores().to_vec();
        cands.push(f64::INFINITY);
        cands
            .iter()
            .map(|&t| rates_at(s, t))
            .filter(|&(tp, _)| tp as f64 / p as f64 >= n_pct / 100.0)
            .map(|(_, fp)| fp as f64 / n as f64)
            .fold(f64::INFINITY, f64::min)
    }

    fn ap_oracle(s: &ScoredSet) -> f64 {
        let (p, _) = s.counts();
        let mut ts: Vec<f64> = s.scores().to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for t in ts {
            let (tp, fp) = rates_at(s, t);
            let r = tp as f64 / p as f64;
            let prec = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            ap += (r - prev_r) * prec;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8], &[0.7, 0.1])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.8, 0.5], &[0.5, 0.2])).unwrap(), 0.875);
        let swapped = auroc(&set(&[0.5, 0.2], &[0.8, 0.5])).unwrap();
        assert_eq!(swapped, 0.125);
        assert_eq!(auroc(&set(&[1.0], &[])), Err(Error::SingleClass));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&set(&[0.9], &[0.1])).unwrap(), 1.0);
        assert_eq!(aupr(&set(&[0.1], &[0.9])).unwrap(), 0.5);
        let flat = set(&[0.3, 0.3], &[0.3, 0.3, 0.3]);
        assert!((aupr(&flat).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(aupr(&set(&[], &[0.1])), Err(Error::NoPositives));
    }

    #[test]
    fn fpr_examples() {
        let s = set(&[0.9, 0.3], &[0.5, 0.1]);
        assert_eq!(fpr_at_tpr(&s, 95.0).unwrap(), 0.5);
        assert_eq!(fpr_at_tpr(&set(&[0.9, 0.8], &[0.2, 0.1]), 95.0).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&s, 0.0).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&s, 100.0).unwrap(), 0.5);
    }

    #[test]
    fn attack_examples() {
        let a = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let b = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let m = attack_metrics(&a, &b, 3).unwrap();
        assert_eq!(m.aacc, 0.25);
        let want = 1.0 - (0.5 + 2.0 / 3.0) / 2.0;
        assert!((m.aiou - want).abs() < 1e-15);
        assert!((m.aiou - 0.4167).abs() < 1e-4);
        assert_eq!(attack_metrics(&a, &a, 2).unwrap(), AttackMetrics { aacc: 0.0, aiou: 0.0 });
        let c = LabelMap::new(2, 2, vec![2, 2, 2, 2]).unwrap();
        assert_eq!(attack_metrics(&a, &c, 3).unwrap(), AttackMetrics { aacc: 1.0, aiou: 1.0 });
        let small = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        assert!(matches!(attack_metrics(&a, &small, 3), Err(Error::ShapeMismatch(_))));
        assert!(attack_metrics(&a, &c, 2).is_err());
    }

    fn pred(passes: Vec<Vec<f32>>, classes: usize, pixels: usize) -> PredictionRecord {
        PredictionRecord {
            input_id: "x".into(),
            passes: passes
                .into_iter()
                .map(|p| SoftmaxMap::new(classes, 1, pixels, p).unwrap())
                .collect(),
        }
    }

    #[test]
    fn msp_examples() {
        // class-major layout: class 0 then class 1 across both pixels
        let p = pred(vec![vec![0.6, 0.9, 0.4, 0.1]], 2, 2);
        assert!((msp_score(&p).unwrap() + 0.9).abs() < 1e-7);
        let u = pred(vec![vec![0.25; 8]], 4, 2);
        assert_eq!(msp_score(&u).unwrap(), -0.25);
        let one_hot = pred(vec![vec![0.0, 0.5, 1.0, 0.5]], 2, 2);
        assert_eq!(msp_score(&one_hot).unwrap(), -1.0);
        let bad = pred(vec![vec![0.6, 0.5, 0.6, 0.5]], 2, 2);
        assert!(matches!(msp_score(&bad), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn mcd_examples() {
        // pixel 0 MSPs {0.6, 0.8}; pixel 1 {0.5, 0.5}
        let p = pred(vec![vec![0.6, 0.5, 0.4, 0.5], vec![0.8, 0.5, 0.2, 0.5]], 2, 2);
        assert!((mcd_score(&p).unwrap() - 0.01).abs() < 1e-7);
        let same = pred(vec![vec![0.7, 0.3], vec![0.7, 0.3]], 2, 1);
        assert_eq!(mcd_score(&same).unwrap(), 0.0);
        let single = pred(vec![vec![0.7, 0.3]], 2, 1);
        assert!(mcd_score(&single).is_err());
    }

    #[test]
    fn coactivation_examples() {
        let d = coactivation_diff(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let l = |v: f64| libm::log(v + COACTIVATION_EPSILON);
        assert_eq!(d.order, vec![0, 1]);
        assert!((d.get(0, 0) - (l(1.0) - l(1.0))).abs() < 1e-15);
        assert!((d.get(0, 1) - (l(2.0) - l(1.0))).abs() < 1e-15);
        assert!((d.get(1, 1) - (l(4.0) - l(1.0))).abs() < 1e-15);
        assert!((d.get(1, 1) - libm::log(4.0)).abs() < 1e-8);
        let z = coactivation_diff(&[0.5, -3.0, 0.0], &[0.5, -3.0, 0.0]).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        // strongest clean row first
        assert_eq!(z.order, vec![1, 0, 2]);
        assert!(coactivation_diff(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn detector_row_with_budget() {
        let regular: Vec<f64> = (1..=100).map(f64::from).collect();
        let anomalous = [200.0, 300.0];
        let row = evaluate_detector("shift", "hbos30", &regular, &anomalous, Some(0.05)).unwrap();
        assert_eq!(row.theta, Some(95.5));
        assert_eq!(row.fpr_at_theta, Some(0.05));
        assert_eq!(row.tpr_at_theta, Some(1.0));
        assert_eq!(row.auroc, 1.0);
    }

    #[test]
    fn auroc_matches_pairwise_oracle_on_500_sets() {
        let mut rng = SeededRng::new(11);
        for _ in 0..500 {
            let n = 2 + rng.below(40) as usize;
            let mut s = ScoredSet::default();
            for i in 0..n {
                // coarse scores force ties; first two cover both classes
                let label = if i < 2 { i == 0 } else { rng.below(2) == 1 };
                s.push(rng.below(6) as f64 * 0.5, label).unwrap();
            }
            assert!((auroc(&s).unwrap() - auroc_pairs(&s)).abs() <= 1e-12);
        }
    }

    #[test]
    fn exhaustive_small_sets() {
        // every labelling of every score pattern over a 3-level alphabet, n <= 6
        for n in 2..=6usize {
            let patterns = 3usize.pow(n as u32);
            for pat in 0..patterns {
                let scores: Vec<f64> = (0..n).map(|i| ((pat / 3usize.pow(i as u32)) % 3) as f64).collect();
                for mask in 1..(1u32 << n) - 1 {
                    let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                    let s = ScoredSet::new(scores.clone(), labels).unwrap();
                    assert!((aupr(&s).unwrap() - ap_oracle(&s)).abs() < 1e-12);
                    for pct in [0.0, 50.0, 95.0, 100.0] {
                        assert_eq!(fpr_at_tpr(&s, pct).unwrap(), fpr_oracle(&s, pct));
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            raw in prop::collection::vec((0i32..20, any::<bool>()), 2..30),
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
            let t = ScoredSet::new(scores.iter().map(|v| libm::exp(0.3 * v) - 7.0).collect(), labels).unwrap();
            prop_assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());
            prop_assert_eq!(aupr(&s).unwrap(), aupr(&t).unwrap());
            prop_assert_eq!(fpr_at_tpr(&s, 95.0).unwrap(), fpr_at_tpr(&t, 95.0).unwrap());
        }

        #[test]
        fn fpr_monotone_in_level(
            raw in prop::collection::vec((0i32..10, any::<bool>()), 2..30),
            a in 0.0f64..100.0, b in 0.0f64..100.0,
        ) {
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ScoredSet::new(raw.iter().map(|r| r.0 as f64).collect(), labels).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fpr_at_tpr(&s, lo).unwrap() <= fpr_at_tpr(&s, hi).unwrap());
        }

        #[test]
        fn attack_symmetry(a in prop::collection::vec(0u32..4, 12), b in prop::collection::vec(0u32..4, 12)) {
            let ma = LabelMap::new(3, 4, a).unwrap();
            let mb = LabelMap::new(3, 4, b).unwrap();
            let x = attack_metrics(&ma, &mb, 4).unwrap();
            let y = attack_metrics(&mb, &ma, 4).unwrap();
            prop_assert_eq!(x.aacc, y.aacc);
            prop_assert!((x.aiou - y.aiou).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&x.aiou));
        }

        #[test]
        fn coactivation_symmetric(a in prop::collection::vec(-5.0f32..5.0, 1..8), seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let b: Vec<f32> = a.iter().map(|_| rng.normal() as f32).collect();
            let d = coactivation_diff(&a, &b).unwrap();
            for i in 0..d.n {
                for j in 0..d.n {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                }
            }
        }
    }
}
