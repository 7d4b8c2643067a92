//! Distance heads over latent codes and the threshold classifier.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::numerics::next_up;

/// Floor used for empty or out-of-range histogram bins.
pub const HBOS_EPSILON: f64 = 1e-9;

/// Relative ridge added to the covariance diagonal, scaled by `trace(S)/D`.
pub const MAHALANOBIS_RIDGE: f64 = 1e-6;

/// Mean of squares.
pub fn tau_euclidean(z: &[f64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64
}

/// Harmonic mean of the squared coordinates, plus a flag raised when some
/// coordinate is exactly zero (the value is then the limit 0).
pub fn tau_harmonic_flagged(z: &[f64]) -> (f64, bool) {
    if z.iter().any(|&v| v == 0.0) {
        return (0.0, true);
    }
    let inv: f64 = z.iter().map(|v| 1.0 / (v * v)).sum();
    (z.len() as f64 / inv, false)
}

pub fn tau_harmonic(z: &[f64]) -> f64 {
    tau_harmonic_flagged(z).0
}

/// Gaussian fit of the training latents.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisFit {
    mean: Vec<f64>,
    cov: Vec<f64>,
    ridge: f64,
    chol: Cholesky,
}

impl MahalanobisFit {
    /// Population mean and covariance of `latents`, with the default ridge.
    pub fn fit(latents: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = latents.first() else {
            return Err(Error::InsufficientData("no training latents".into()));
        };
        let dim = first.len();
        if let Some(z) = latents.iter().find(|z| z.len() != dim) {
            return Err(Error::ShapeMismatch(format!("latent of length {} in a {dim}-dim fit", z.len())));
        }
        let n = latents.len() as f64;
        let mut mean = vec![0.0; dim];
        for z in latents {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; dim * dim];
        let mut centred = vec![0.0; dim];
        for z in latents {
            for i in 0..dim {
                centred[i] = z[i] - mean[i];
            }
            for i in 0..dim {
                for j in 0..=i {
                    cov[i * dim + j] += centred[i] * centred[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..=i {
                let v = cov[i * dim + j] / n;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Self::from_moments(mean, cov, None)
    }

    /// Builds a fit from given moments. `ridge = None` selects
    /// `1e-6 * trace(S) / D`.
    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>, ridge: Option<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "covariance has {} entries for dim {dim}",
                cov.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if cov[i * dim + j] != cov[j * dim + i] {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        let ridge = match ridge {
            Some(r) => r,
            None => {
                let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
                MAHALANOBIS_RIDGE * trace / dim.max(1) as f64
            }
        };
        let mut reg = cov.clone();
        for i in 0..dim {
            reg[i * dim + i] += ridge;
        }
        let chol = Cholesky::new(&reg, dim)?;
        Ok(Self { mean, cov, ridge, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn tau(&self, z: &[f64]) -> f64 {
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        libm::sqrt(self.chol.inv_quadratic_form(&diff))
    }
}

/// Per-dimension equal-width histograms over the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct HbosFit {
    k: usize,
    min: Vec<f64>,
    max: Vec<f64>,
    /// `dim * k` heights, max-normalized per dimension; empty bins hold 0.
    heights: Vec<f64>,
}

impl HbosFit {
    pub fn fit(latents: &[Vec<f64>], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("HBOS needs at least 2 bins, got {k}")));
        }
        let Some(first) = latents.first() else {
            return Err(Error::InsufficientData("no training latents".into()));
        };
        let dim = first.len();
        if let Some(z) = latents.iter().find(|z| z.len() != dim) {
            return Err(Error::ShapeMismatch(format!("latent of length {} in a {dim}-dim fit", z.len())));
        }
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for z in latents {
            for i in 0..dim {
                min[i] = min[i].min(z[i]);
                max[i] = max[i].max(z[i]);
            }
        }
        let mut fit = Self {
            k,
            min,
            max,
            heights: vec![0.0; dim * k],
        };
        for z in latents {
            for (i, &v) in z.iter().enumerate() {
                if let Some(bin) = fit.bin(i, v) {
                    fit.heights[i * k + bin] += 1.0;
                }
            }
        }
        for row in fit.heights.chunks_mut(k) {
            let top = row.iter().cloned().fold(0.0, f64::max);
            if top > 0.0 {
                row.iter_mut().for_each(|h| *h /= top);
            }
        }
        Ok(fit)
    }

    /// Rebuilds a fit from stored parts.
    pub fn from_parts(k: usize, min: Vec<f64>, max: Vec<f64>, heights: Vec<f64>) -> Result<Self> {
        if k < 2 || min.len() != max.len() || heights.len() != min.len() * k {
            return Err(Error::ShapeMismatch("inconsistent HBOS parts".into()));
        }
        Ok(Self { k, min, max, heights })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Bin of `v` in dimension `i`; `None` outside the training range.
    /// A degenerate (constant) dimension has a single bin at index 0.
    fn bin(&self, i: usize, v: f64) -> Option<usize> {
        let (lo, hi) = (self.min[i], self.max[i]);
        if !(v >= lo && v <= hi) {
            return None;
        }
        if hi == lo {
            return Some(0);
        }
        let pos = (v - lo) / (hi - lo) * self.k as f64;
        Some((libm::floor(pos) as usize).min(self.k - 1))
    }

    /// Normalized height of the bin holding `v` in dimension `i`, floored at ε.
    pub fn height(&self, i: usize, v: f64) -> f64 {
        match self.bin(i, v) {
            Some(b) if self.heights[i * self.k + b] > 0.0 => self.heights[i * self.k + b],
            _ => HBOS_EPSILON,
        }
    }

    pub fn tau(&self, z: &[f64]) -> f64 {
        z.iter().enumerate().map(|(i, &v)| -libm::log(self.height(i, v))).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "type"))]
pub enum Head {
    Euclidean,
    Harmonic,
    Mahalanobis,
    Hbos { k: usize },
}

impl Head {
    /// Parses `euclidean`, `harmonic`, `mahalanobis` or `hbos<k>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Head::Euclidean),
            "harmonic" => Ok(Head::Harmonic),
            "mahalanobis" => Ok(Head::Mahalanobis),
            _ => s
                .strip_prefix("hbos")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 2)
                .map(|k| Head::Hbos { k })
                .ok_or_else(|| Error::InvalidArgument(format!("unknown head '{s}'"))),
        }
    }

    pub fn needs_fit(self) -> bool {
        matches!(self, Head::Mahalanobis | Head::Hbos { .. })
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Euclidean => f.write_str("euclidean"),
            Head::Harmonic => f.write_str("harmonic"),
            Head::Mahalanobis => f.write_str("mahalanobis"),
            Head::Hbos { k } => write!(f, "hbos{k}"),
        }
    }
}

/// A head ready to score latent codes.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedHead {
    Euclidean,
    Harmonic,
    Mahalanobis(MahalanobisFit),
    Hbos(HbosFit),
}

impl FittedHead {
    pub fn fit(head: Head, train_latents: &[Vec<f64>]) -> Result<Self> {
        Ok(match head {
            Head::Euclidean => FittedHead::Euclidean,
            Head::Harmonic => FittedHead::Harmonic,
            Head::Mahalanobis => FittedHead::Mahalanobis(MahalanobisFit::fit(train_latents)?),
            Head::Hbos { k } => FittedHead::Hbos(HbosFit::fit(train_latents, k)?),
        })
    }

    pub fn head(&self) -> Head {
        match self {
            FittedHead::Euclidean => Head::Euclidean,
            FittedHead::Harmonic => Head::Harmonic,
            FittedHead::Mahalanobis(_) => Head::Mahalanobis,
            FittedHead::Hbos(h) => Head::Hbos { k: h.k() },
        }
    }

    pub fn tau(&self, z: &[f64]) -> f64 {
        match self {
            FittedHead::Euclidean => tau_euclidean(z),
            FittedHead::Harmonic => tau_harmonic(z),
            FittedHead::Mahalanobis(m) => m.tau(z),
            FittedHead::Hbos(h) => h.tau(z),
        }
    }
}

/// `true` (anomalous) iff `tau >= theta`.
pub fn classify(tau: f64, theta: f64) -> bool {
    tau >= theta
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThresholdClassifier {
    pub head: String,
    pub theta: f64,
}

impl ThresholdClassifier {
    pub fn classify(&self, tau: f64) -> bool {
        classify(tau, self.theta)
    }
}

/// Threshold flagging at most `floor(fpr_budget * n)` of the regular
/// scores. Between two sorted neighbours it sits at the lower midpoint;
/// on a tie it moves just above the tied value.
pub fn choose_threshold(scores_regular: &[f64], fpr_budget: f64) -> Result<f64> {
    if scores_regular.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(0.0..=1.0).contains(&fpr_budget) {
        return Err(Error::InvalidArgument(format!("fpr budget {fpr_budget} outside [0, 1]")));
    }
    if scores_regular.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut s = scores_regular.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let m = libm::floor(fpr_budget * n as f64 + 1e-9) as usize;
    if m == 0 {
        return Ok(next_up(s[n - 1]));
    }
    if m >= n {
        return Ok(f64::NEG_INFINITY);
    }
    let (lo, hi) = (s[n - m - 1], s[n - m]);
    if lo == hi {
        Ok(next_up(lo))
    } else {
        Ok(lo + (hi - lo) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn euclidean_and_harmonic_values() {
        assert_eq!(tau_euclidean(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(tau_euclidean(&[3.0, 4.0]), 12.5);
        assert_eq!(tau_harmonic(&[1.0, 1.0]), 1.0);
        assert_eq!(tau_harmonic(&[1.0, 2.0]), 1.6);
        assert_eq!(tau_harmonic_flagged(&[1.0, 0.0]), (0.0, true));
        assert!(!tau_harmonic_flagged(&[1.0, 2.0]).1);
    }

    #[test]
    fn euclidean_matches_log_prior() {
        let z = [0.3, -1.2, 2.0, 0.5];
        let d = z.len() as f64;
        let lp = crate::flow::log_normal(&z);
        let want = d / 2.0 * crate::flow::LN_2PI + d / 2.0 * tau_euclidean(&z);
        assert!((-lp - want).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_closed_forms() {
        let fit = MahalanobisFit::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], Some(0.0)).unwrap();
        assert_eq!(fit.tau(&[1.0, 1.0]), libm::sqrt(2.0));
        let fit = MahalanobisFit::from_moments(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0], Some(0.0)).unwrap();
        assert_eq!(fit.tau(&[2.0, 1.0]), libm::sqrt(2.0));
        let ident = MahalanobisFit::from_moments(vec![0.0; 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], Some(0.0))
            .unwrap();
        let z = [0.5, -2.0, 1.5];
        let want = libm::sqrt(3.0 * tau_euclidean(&z));
        assert!((ident.tau(&z) - want).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_fit_moments_and_ridge() {
        let latents = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 5.0], vec![2.0, -1.0]];
        let fit = MahalanobisFit::fit(&latents).unwrap();
        assert_eq!(fit.mean(), &[2.0, 2.0]);
        // population covariance: var x = 0.5, var y = 4.5, cov = 0
        assert_eq!(fit.covariance(), &[0.5, 0.0, 0.0, 4.5]);
        assert!((fit.ridge() - 1e-6 * 5.0 / 2.0).abs() < 1e-18);
        // rank-deficient data is still solvable thanks to the ridge
        let flat = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        assert!(MahalanobisFit::fit(&flat).unwrap().tau(&[1.0, -1.0]).is_finite());
        assert_eq!(
            MahalanobisFit::from_moments(vec![0.0], vec![-1.0], Some(0.0)),
            Err(Error::NotPositiveDefinite)
        );
    }

    #[test]
    fn hbos_hand_built_histogram() {
        let latents: Vec<Vec<f64>> = [0.0, 0.0, 0.0, 1.0].iter().map(|&v| vec![v]).collect();
        let fit = HbosFit::fit(&latents, 2).unwrap();
        assert_eq!(fit.heights(), &[1.0, 1.0 / 3.0]);
        assert_eq!(fit.tau(&[0.0]), 0.0);
        assert!((fit.tau(&[1.0]) - libm::log(3.0)).abs() < 1e-15);
        let floor = fit.tau(&[1.5]);
        assert!((floor - 20.723265836946411).abs() < 1e-9, "{floor}");
        assert!((fit.tau(&[-0.1]) - floor).abs() < 1e-12);
    }

    #[test]
    fn hbos_empty_and_degenerate_bins() {
        let latents = vec![vec![0.0, 5.0], vec![0.1, 5.0], vec![1.0, 5.0]];
        let fit = HbosFit::fit(&latents, 4).unwrap();
        // dim 0: bins [0,.25) holds 2, [.75,1] holds 1, middle two empty
        assert_eq!(fit.height(0, 0.5), HBOS_EPSILON);
        assert_eq!(fit.height(0, 0.05), 1.0);
        assert_eq!(fit.height(1, 5.0), 1.0);
        assert_eq!(fit.height(1, 5.1), HBOS_EPSILON);
        assert_eq!(fit.tau(&[0.05, 5.0]), 0.0);
        assert!(HbosFit::fit(&latents, 1).is_err());
    }

    #[test]
    fn head_names_roundtrip() {
        for h in [Head::Euclidean, Head::Harmonic, Head::Mahalanobis, Head::Hbos { k: 30 }] {
            assert_eq!(Head::parse(&alloc::string::ToString::to_string(&h)).unwrap(), h);
        }
        assert!(Head::parse("hbos1").is_err());
        assert!(Head::parse("cosine").is_err());
    }

    #[test]
    fn classify_boundary() {
        assert!(classify(1.0, 0.5));
        assert!(classify(0.5, 0.5));
        assert!(!classify(0.49, 0.5));
    }

    #[test]
    fn threshold_conventions() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let theta = choose_threshold(&scores, 0.05).unwrap();
        assert_eq!(theta, 95.5);
        assert_eq!(scores.iter().filter(|&&s| classify(s, theta)).count(), 5);
        assert_eq!(choose_threshold(&scores, 0.0).unwrap(), next_up(100.0));
        assert_eq!(choose_threshold(&scores, 1.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(choose_threshold(&[], 0.05), Err(Error::EmptyScores));
        // tie at the cut: stay strictly above it
        let tied = [1.0, 2.0, 2.0, 2.0];
        let theta = choose_threshold(&tied, 0.5).unwrap();
        assert_eq!(theta, next_up(2.0));
    }

    proptest! {
        #[test]
        fn threshold_respects_budget(
            scores in prop::collection::vec(-50i32..50, 1..60),
            budget in 0.0f64..=1.0,
        ) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let theta = choose_threshold(&s, budget).unwrap();
            let flagged = s.iter().filter(|&&v| classify(v, theta)).count();
            prop_assert!(flagged as f64 <= budget * s.len() as f64 + 1e-6);
        }

        #[test]
        fn permutation_and_scale(z in prop::collection::vec(0.1f64..5.0, 1..12), c in 0.1f64..4.0, seed in any::<u64>()) {
            let mut p = z.clone();
            crate::numerics::SeededRng::new(seed).shuffle(&mut p);
            prop_assert!((tau_euclidean(&z) - tau_euclidean(&p)).abs() <= 1e-12 * tau_euclidean(&z).max(1.0));
            prop_assert!((tau_harmonic(&z) - tau_harmonic(&p)).abs() <= 1e-12 * tau_harmonic(&z).max(1.0));
            let cz: Vec<f64> = z.iter().map(|v| c * v).collect();
            prop_assert!((tau_euclidean(&cz) - c * c * tau_euclidean(&z)).abs() <= 1e-10 * tau_euclidean(&cz).max(1.0));
            prop_assert!((tau_harmonic(&cz) - c * c * tau_harmonic(&z)).abs() <= 1e-10 * tau_harmonic(&cz).max(1.0));
        }

        #[test]
        fn fitted_heads_permute_consistently(seed in any::<u64>()) {
            let mut rng = crate::numerics::SeededRng::new(seed);
            let dim = 3;
            let latents: Vec<Vec<f64>> = (0..40).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
            let perm = rng.permutation(dim);
            let permuted: Vec<Vec<f64>> = latents.iter().map(|z| perm.iter().map(|&p| z[p]).collect()).collect();
            let z: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let zp: Vec<f64> = perm.iter().map(|&p| z[p]).collect();
            for head in [Head::Mahalanobis, Head::Hbos { k: 7 }] {
                let a = FittedHead::fit(head, &latents).unwrap().tau(&z);
                let b = FittedHead::fit(head, &permuted).unwrap().tau(&zp);
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{head}: {a} vs {b}");
            }
        }

        #[test]
        fn hbos_non_increasing_in_height(seed in any::<u64>()) {
            let mut rng = crate::numerics::SeededRng::new(seed);
            let latents: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.normal()]).collect();
            let fit = HbosFit::fit(&latents, 10).unwrap();
            let a = rng.uniform_range(-3.0, 3.0);
            let b = rng.uniform_range(-3.0, 3.0);
            if fit.height(0, a) <= fit.height(0, b) {
                prop_assert!(fit.tau(&[a]) >= fit.tau(&[b]));
            }
        }
    }
}
