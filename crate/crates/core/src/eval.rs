//! Decisions, score bands and evaluation metrics.
//!
//! Scores are `f64` here regardless of the model's scalar type. Positive
//! labels are `accept`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryClass, Consensus};
use crate::error::{Error, Result};

/// Three-way triage verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Reject,
    Ambiguous,
    Accept,
}

/// Score cut points: reject below `reject_below`, accept at or above
/// `accept_at_or_above`, ambiguous in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandThresholds {
    pub reject_below: f64,
    pub accept_at_or_above: f64,
}

impl Default for BandThresholds {
    /// Midpoints of the gaps between the published per-category score ranges.
    fn default() -> Self {
        Self {
            reject_below: -2.2,
            accept_at_or_above: -0.5,
        }
    }
}

impl BandThresholds {
    pub fn new(reject_below: f64, accept_at_or_above: f64) -> Result<Self> {
        let t = Self {
            reject_below,
            accept_at_or_above,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reject_below.is_finite() && self.accept_at_or_above.is_finite())
            || self.reject_below >= self.accept_at_or_above
        {
            return Err(Error::Config(format!(
                "band thresholds must satisfy reject_below < accept_at_or_above, got {} / {}",
                self.reject_below, self.accept_at_or_above
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for BandThresholds {
    type Err = Error;

    /// Parses `"lo,hi"`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad threshold {p:?}: {e}")))
        };
        match s.split_once(',') {
            Some((lo, hi)) => Self::new(parse(lo)?, parse(hi)?),
            None => Err(Error::Config(format!("thresholds must be \"lo,hi\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub score: f64,
    pub band: Band,
    pub thresholds: BandThresholds,
}

fn finite(score: f64) -> Result<f64> {
    if score.is_finite() {
        Ok(score)
    } else {
        Err(Error::NonFinite(format!("score {score}")))
    }
}

/// Sign rule: accept iff `score >= 0`.
pub fn binary_decision(score: f64) -> Result<BinaryClass> {
    Ok(if finite(score)? >= 0.0 {
        BinaryClass::Accept
    } else {
        BinaryClass::Reject
    })
}

pub fn band(score: f64, thresholds: &BandThresholds) -> Result<QualityVerdict> {
    thresholds.validate()?;
    let score = finite(score)?;
    let band = if score < thresholds.reject_below {
        Band::Reject
    } else if score < thresholds.accept_at_or_above {
        Band::Ambiguous
    } else {
        Band::Accept
    };
    Ok(QualityVerdict {
        score,
        band,
        thresholds: *thresholds,
    })
}

/// Fraction of positions where decision and label agree.
pub fn accuracy(decisions: &[BinaryClass], labels: &[BinaryClass]) -> Result<f64> {
    if decisions.is_empty() || decisions.len() != labels.len() {
        return Err(Error::Input(format!(
            "accuracy needs equal non-empty lists, got {} decisions and {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let hits = decisions.iter().zip(labels).filter(|(d, l)| d == l).count();
    Ok(hits as f64 / decisions.len() as f64)
}

fn class_counts(scores: &[f64], labels: &[BinaryClass]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == BinaryClass::Accept).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input(
            "ROC analysis needs both accept and reject examples".into(),
        ));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// ROC points `(false-positive fraction, true-positive fraction)` from a
/// threshold sweeping from +∞ down past the lowest score. Tied scores enter
/// together, so each distinct score contributes one point.
pub fn roc_curve(scores: &[f64], labels: &[BinaryClass]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let order = descending(scores);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            match labels[order[i]] {
                BinaryClass::Accept => tp += 1,
                BinaryClass::Reject => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Probability that a random accept outscores a random reject, ties
/// counting one half. Computed exactly in integer half-units.
pub fn auc(scores: &[f64], labels: &[BinaryClass]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let order = descending(scores);
    // Twice the number of (pos, neg) pairs won by the positive.
    let mut twice_wins: u128 = 0;
    let mut negs_above: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            match labels[order[i]] {
                BinaryClass::Accept => p += 1,
                BinaryClass::Reject => n += 1,
            }
            i += 1;
        }
        // Positives here beat every negative below this group and tie with
        // the negatives inside it.
        let below = neg as u128 - negs_above - n;
        twice_wins += p * (2 * below + n);
        negs_above += n;
    }
    Ok(twice_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Trapezoidal area under [`roc_curve`]; agrees with [`auc`] up to rounding.
pub fn auc_trapezoid(scores: &[f64], labels: &[BinaryClass]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for a single score).
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
}

impl CategoryStats {
    fn of(scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = if scores.len() > 1 {
            scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self {
            count: scores.len(),
            mean,
            std_dev: var.sqrt(),
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Over accept/reject images only.
    pub accuracy: f64,
    /// Accept is the positive class; ambiguous images are excluded.
    pub auc: f64,
    pub roc_points: Vec<(f64, f64)>,
    /// Keyed by consensus category (`accept`, `reject`, `ambiguous`).
    pub category_stats: BTreeMap<String, CategoryStats>,
    /// How many scores fell into each band under `thresholds`.
    pub band_counts: BTreeMap<String, usize>,
    pub thresholds: BandThresholds,
}

impl EvalReport {
    /// ROC points as `fpr,tpr` lines with a header.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc_points {
            s.push_str(&format!("{f},{t}\n"));
        }
        s
    }
}

fn category_key(c: Consensus) -> &'static str {
    match c {
        Consensus::Accept => "accept",
        Consensus::Reject => "reject",
        Consensus::Ambiguous => "ambiguous",
        Consensus::Ungraded => "ungraded",
    }
}

/// Builds the full report. Accuracy, ROC and AUC use accept/reject images
/// only; per-category statistics include every category present.
pub fn eval_report(scores: &[f64], categories: &[Consensus], thresholds: &BandThresholds) -> Result<EvalReport> {
    if scores.is_empty() || scores.len() != categories.len() {
        return Err(Error::Input(format!(
            "eval needs equal non-empty lists, got {} scores and {} categories",
            scores.len(),
            categories.len()
        )));
    }
    let mut bin_scores = Vec::new();
    let mut bin_labels = Vec::new();
    let mut per_cat: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut band_counts = BTreeMap::new();
    for (&s, &c) in scores.iter().zip(categories) {
        let v = band(s, thresholds)?;
        let key = match v.band {
            Band::Accept => "accept",
            Band::Ambiguous => "ambiguous",
            Band::Reject => "reject",
        };
        *band_counts.entry(key.to_string()).or_insert(0) += 1;
        per_cat.entry(category_key(c)).or_default().push(s);
        if let Some(label) = c.binary() {
            bin_scores.push(s);
            bin_labels.push(label);
        }
    }
    let decisions = bin_scores
        .iter()
        .map(|&s| binary_decision(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        accuracy: accuracy(&decisions, &bin_labels)?,
        auc: auc(&bin_scores, &bin_labels)?,
        roc_points: roc_curve(&bin_scores, &bin_labels)?,
        category_stats: per_cat
            .into_iter()
            .filter_map(|(k, v)| CategoryStats::of(&v).map(|s| (k.to_string(), s)))
            .collect(),
        band_counts,
        thresholds: *thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use BinaryClass::{Accept as A, Reject as R};

    #[test]
    fn decision_examples() {
        assert_eq!(binary_decision(0.7).unwrap(), A);
        assert_eq!(binary_decision(-2.4).unwrap(), R);
        assert_eq!(binary_decision(0.0).unwrap(), A);
        assert_eq!(binary_decision(-0.0).unwrap(), A);
        assert!(binary_decision(f64::NAN).is_err());
    }

    #[test]
    fn band_examples() {
        let t = BandThresholds::default();
        assert_eq!(band(0.7, &t).unwrap().band, Band::Accept);
        assert_eq!(band(-2.4, &t).unwrap().band, Band::Reject);
        assert_eq!(band(-1.8, &t).unwrap().band, Band::Ambiguous);
        assert_eq!(band(-2.2, &t).unwrap().band, Band::Ambiguous);
        assert_eq!(band(-0.5, &t).unwrap().band, Band::Accept);
        assert!(band(f64::INFINITY, &t).is_err());
        assert!(BandThresholds::new(1.0, 1.0).is_err());
        assert_eq!("-2.2,-0.5".parse::<BandThresholds>().unwrap(), t);
    }

    #[test]
    fn accuracy_examples() {
        let labels = vec![A; 10];
        let mut d = labels.clone();
        d[0] = R;
        d[1] = R;
        assert_eq!(accuracy(&d, &labels).unwrap(), 0.8);
        assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(accuracy(&[R, A], &[A, R]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[A], &[A, R]).is_err());
    }

    #[test]
    fn roc_examples() {
        let pts = roc_curve(&[0.9, 0.4, 0.6, 0.1], &[A, A, R, R]).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);

        let pts = roc_curve(&[2.0, 3.0, 0.0, 1.0], &[A, A, R, R]).unwrap();
        assert!(pts.contains(&(0.0, 1.0)));

        assert!(roc_curve(&[1.0, 2.0], &[A, A]).is_err());
    }

    #[test]
    fn inverted_labels_reflect_curve() {
        let scores = [0.3, 0.9, 0.1, 0.5, 0.5, 0.7];
        let labels = [A, A, R, R, A, R];
        let inv: Vec<_> = labels.iter().map(|l| l.flip()).collect();
        let a = roc_curve(&scores, &labels).unwrap();
        // Swapping the classes swaps TPR and FPR at every threshold.
        let swapped: Vec<_> = a.iter().map(|&(x, y)| (y, x)).collect();
        assert_eq!(roc_curve(&scores, &inv).unwrap(), swapped);
        // Inverting labels and negating scores reflects through the
        // anti-diagonal: (x, y) -> (1 - y, 1 - x), in reverse order.
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let reflected: Vec<_> = a.iter().rev().map(|&(x, y)| (1.0 - y, 1.0 - x)).collect();
        let b = roc_curve(&neg, &inv).unwrap();
        for (p, q) in b.iter().zip(&reflected) {
            assert!((p.0 - q.0).abs() < 1e-15 && (p.1 - q.1).abs() < 1e-15, "{b:?} vs {reflected:?}");
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &[A, A, R, R]).unwrap(), 0.75);
        assert_eq!(auc(&[2.0, 3.0, 0.0, 1.0], &[A, A, R, R]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0; 5], &[A, R, A, R, R]).unwrap(), 0.5);
        assert!(auc(&[1.0], &[R]).is_err());
    }

    #[test]
    fn report_excludes_ambiguous_from_binary_metrics() {
        use Consensus as C;
        let scores = [1.0, 0.8, -2.5, -2.4, -1.9, 5.0];
        let cats = [C::Accept, C::Accept, C::Reject, C::Reject, C::Ambiguous, C::Ambiguous];
        let r = eval_report(&scores, &cats, &BandThresholds::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.category_stats["ambiguous"].count, 2);
        assert_eq!(r.band_counts["ambiguous"], 1);

        let r = eval_report(&scores[..4], &cats[..4], &BandThresholds::default()).unwrap();
        assert!(!r.category_stats.contains_key("ambiguous"));
        assert_eq!(r.roc_points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.roc_points.last(), Some(&(1.0, 1.0)));
        assert!(r.roc_csv().starts_with("fpr,tpr\n0,0\n"));
    }
}
