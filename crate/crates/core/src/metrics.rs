// SPDX-License-Identifier: Apache-2.0

//! Segmentation metrics: confusion matrices, mIoU and its harmonic mean over
//! seen and unseen classes, precision / recall / F1, reliability diagrams and
//! calibration sweeps. All ratios are fractions in [0, 1].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrated_prediction, ProbabilityVector};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion matrix",
                left: (truth.len(), 1),
                right: (predicted.len(), 1),
            });
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for l in [truth, predicted] {
            if l >= self.n {
                return Err(Error::InvalidLabel {
                    label: l,
                    reason: "class id out of range",
                });
            }
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::ShapeMismatch {
                op: "confusion merge",
                left: (self.n, self.n),
                right: (other.n, other.n),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    pub fn fp(&self, k: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, k)).sum::<u64>() - self.tp(k)
    }

    pub fn fn_(&self, k: usize) -> u64 {
        (0..self.n).map(|p| self.get(k, p)).sum::<u64>() - self.tp(k)
    }

    pub fn support(&self, k: usize) -> u64 {
        self.tp(k) + self.fn_(k)
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs in
    /// either ground truth or predictions.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let denom = self.tp(k) + self.fp(k) + self.fn_(k);
        (denom > 0).then(|| self.tp(k) as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub per_class: Vec<(usize, f64)>,
    /// Classes dropped for a zero denominator.
    pub excluded: Vec<usize>,
}

pub fn miou(cm: &ConfusionMatrix, subset: &[usize]) -> Result<MiouResult> {
    if subset.is_empty() {
        return Err(Error::Empty("mIoU class subset"));
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for &k in subset {
        if k >= cm.n_classes() {
            return Err(Error::InvalidLabel {
                label: k,
                reason: "class id out of range",
            });
        }
        match cm.iou(k) {
            Some(v) => per_class.push((k, v)),
            None => excluded.push(k),
        }
    }
    if per_class.is_empty() {
        return Err(Error::Empty("mIoU: every class in the subset has a zero denominator"));
    }
    let miou = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
    Ok(MiouResult {
        miou,
        per_class,
        excluded,
    })
}

/// Unweighted class mean over both groups, from the group means.
pub fn all_miou(seen: f64, n_seen: usize, unseen: f64, n_unseen: usize) -> f64 {
    (n_seen as f64 * seen + n_unseen as f64 * unseen) / (n_seen + n_unseen) as f64
}

/// Harmonic mean `2su/(s+u)`; 0 when either side is 0.
pub fn hmiou(seen: f64, unseen: f64) -> f64 {
    if seen <= 0.0 || unseen <= 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Precision, recall and F1 for a class group, pooling TP/FP/FN over its
/// members; a single-class group gives that class's scores.
pub fn precision_recall_f1(cm: &ConfusionMatrix, group: &[usize]) -> Result<Prf> {
    if group.is_empty() {
        return Err(Error::Empty("precision/recall class group"));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &k in group {
        if k >= cm.n_classes() {
            return Err(Error::InvalidLabel {
                label: k,
                reason: "class id out of range",
            });
        }
        tp += cm.tp(k);
        fp += cm.fp(k);
        fn_ += cm.fn_(k);
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Mean per-class F1 over classes that occur in ground truth or predictions.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let scores: Vec<f64> = (0..cm.n_classes())
        .filter(|&k| cm.iou(k).is_some())
        .map(|k| Prf::from_counts(cm.tp(k), cm.fp(k), cm.fn_(k)).f1)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub correct: u64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub total: u64,
    /// Share of points per bin: the confidence histogram.
    pub histogram: Vec<f64>,
    /// Count-weighted mean gap.
    pub expected_calibration_error: f64,
}

/// Bin index of `confidence` among `n_bins` uniform bins on [0, 1]; the last
/// bin is closed.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    (1..n_bins).filter(|&k| confidence >= k as f64 / n_bins as f64).count()
}

pub fn reliability(probs: &[ProbabilityVector], labels: &[usize], n_bins: usize) -> Result<ReliabilityReport> {
    if probs.is_empty() {
        return Err(Error::Empty("reliability batch"));
    }
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "reliability",
            left: (probs.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if n_bins == 0 {
        return Err(Error::Config("reliability needs at least one bin".into()));
    }
    let mut count = vec![0u64; n_bins];
    let mut correct = vec![0u64; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let c = p.confidence();
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        if p.argmax() == y {
            correct[b] += 1;
        }
    }
    let total = probs.len() as u64;
    let bins: Vec<ReliabilityBin> = (0..n_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                correct: correct[b],
                mean_confidence,
                accuracy,
                gap: (accuracy - mean_confidence).abs(),
            }
        })
        .collect();
    let histogram = count.iter().map(|&c| c as f64 / total as f64).collect();
    let expected_calibration_error = bins.iter().map(|b| b.count as f64 * b.gap).sum::<f64>() / total as f64;
    Ok(ReliabilityReport {
        bins,
        total,
        histogram,
        expected_calibration_error,
    })
}

/// Seen/unseen summary of one confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub miou_all: f64,
    pub hmiou: f64,
    pub f1: f64,
    pub seen: Prf,
    pub unseen: Prf,
    pub excluded: Vec<usize>,
}

pub fn group_scores(cm: &ConfusionMatrix, seen_mask: &[bool]) -> Result<GroupScores> {
    let seen_ids: Vec<usize> = (0..seen_mask.len()).filter(|&k| seen_mask[k]).collect();
    let unseen_ids: Vec<usize> = (0..seen_mask.len()).filter(|&k| !seen_mask[k]).collect();
    let all: Vec<usize> = (0..seen_mask.len()).collect();
    let s = miou(cm, &seen_ids)?;
    let u = miou(cm, &unseen_ids)?;
    let a = miou(cm, &all)?;
    Ok(GroupScores {
        miou_seen: s.miou,
        miou_unseen: u.miou,
        miou_all: a.miou,
        hmiou: hmiou(s.miou, u.miou),
        f1: macro_f1(cm),
        seen: precision_recall_f1(cm, &seen_ids)?,
        unseen: precision_recall_f1(cm, &unseen_ids)?,
        excluded: a.excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` marks the dynamic-calibration reference row.
    pub eta: Option<f64>,
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub hmiou: f64,
    pub f1: f64,
    pub seen_recall: f64,
    pub unseen_recall: f64,
}

impl SweepRow {
    pub fn from_scores(eta: Option<f64>, s: &GroupScores) -> Self {
        SweepRow {
            eta,
            miou_seen: s.miou_seen,
            miou_unseen: s.miou_unseen,
            hmiou: s.hmiou,
            f1: s.f1,
            seen_recall: s.seen.recall,
            unseen_recall: s.unseen.recall,
        }
    }
}

/// Grid `start, start+step, …` up to and including `stop` (within 1e-9),
/// with each value rounded to 12 decimals.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("grid must be START:STOP:STEP within [0,1], got {spec:?}"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&stop) || stop < start || !(step > 0.0) {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Static-η sweep over precomputed posteriors.
pub fn eta_sweep(
    probs: &[ProbabilityVector],
    labels: &[usize],
    seen_mask: &[bool],
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&eta| {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::Config(format!("η grid value {eta} outside [0,1]")));
            }
            let pred: Vec<usize> = probs
                .iter()
                .map(|p| calibrated_prediction(p.as_slice(), eta, seen_mask))
                .collect();
            let cm = ConfusionMatrix::from_predictions(labels, &pred, seen_mask.len())?;
            Ok(SweepRow::from_scores(Some(eta), &group_scores(&cm, seen_mask)?))
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "eta",
        "miou_seen",
        "miou_unseen",
        "hmiou",
        "f1",
        "seen_recall",
        "unseen_recall",
    ])
    .map_err(|e| Error::malformed("sweep csv", e.to_string()))?;
    for r in rows {
        let eta = r.eta.map_or_else(|| "dynamic".to_string(), |e| e.to_string());
        w.write_record([
            eta,
            r.miou_seen.to_string(),
            r.miou_unseen.to_string(),
            r.hmiou.to_string(),
            r.f1.to_string(),
            r.seen_recall.to_string(),
            r.unseen_recall.to_string(),
        ])
        .map_err(|e| Error::malformed("sweep csv", e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::malformed("sweep csv", e.to_string()))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_atomic(path, &sweep_csv(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        let n = rows.len();
        let mut m = ConfusionMatrix::new(n);
        for (t, r) in rows.iter().enumerate() {
            for (p, &c) in r.iter().enumerate() {
                for _ in 0..c {
                    m.add(t, p).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn miou_examples() {
        let m = cm(&[&[5, 5], &[0, 10]]);
        let r = miou(&m, &[0, 1]).unwrap();
        assert!((r.per_class[0].1 - 0.5).abs() < 1e-15);
        assert!((r.per_class[1].1 - 10.0 / 15.0).abs() < 1e-15);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);

        let perfect = cm(&[&[3, 0, 0], &[0, 4, 0], &[0, 0, 0]]);
        let r = miou(&perfect, &[0, 1, 2]).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.excluded, vec![2]);
        assert!(miou(&perfect, &[2]).is_err());
        assert!(miou(&perfect, &[]).is_err());
    }

    #[test]
    fn harmonic_mean() {
        assert_eq!(hmiou(0.5, 0.0), 0.0);
        assert_eq!(hmiou(0.0, 0.5), 0.0);
        assert!((hmiou(0.3, 0.3) - 0.3).abs() < 1e-15);
        assert_eq!(hmiou(0.2, 0.7), hmiou(0.7, 0.2));
    }

    #[test]
    fn prf_examples() {
        let p = Prf::from_counts(4, 0, 0);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = Prf::from_counts(2, 0, 2);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Prf::from_counts(0, 3, 3).f1, 0.0);
    }

    #[test]
    fn confident_correct_lands_in_last_bin() {
        let p = vec![ProbabilityVector::new(vec![1.0, 0.0]).unwrap(); 5];
        let r = reliability(&p, &[0; 5], 10).unwrap();
        assert_eq!(r.bins[9].count, 5);
        assert_eq!(r.bins[9].accuracy, 1.0);
        assert_eq!(r.bins[9].gap, 0.0);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<u64>(), 5);
        assert!(reliability(&[], &[], 10).is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:1:0.02").unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[50], 1.0);
        assert_eq!(g[7], 0.14);
        assert!(parse_grid("0:2:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let row = SweepRow {
            eta: Some(0.5),
            miou_seen: 0.25,
            miou_unseen: 0.5,
            hmiou: 1.0 / 3.0,
            f1: 0.1,
            seen_recall: 0.2,
            unseen_recall: 0.3,
        };
        let dynamic = SweepRow {
            eta: None,
            ..row.clone()
        };
        let text = String::from_utf8(sweep_csv(&[row, dynamic]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "eta,miou_seen,miou_unseen,hmiou,f1,seen_recall,unseen_recall");
        assert!(lines[1].starts_with("0.5,0.25,0.5,"));
        assert!(lines[2].starts_with("dynamic,"));
    }

    proptest! {
        #[test]
        fn merge_is_associative_and_additive(
            a in proptest::collection::vec((0usize..4, 0usize..4), 0..50),
            b in proptest::collection::vec((0usize..4, 0usize..4), 0..50),
        ) {
            let build = |v: &[(usize, usize)]| {
                let (t, p): (Vec<usize>, Vec<usize>) = v.iter().copied().unzip();
                ConfusionMatrix::from_predictions(&t, &p, 4).unwrap()
            };
            let mut merged = build(&a);
            merged.merge(&build(&b)).unwrap();
            let both: Vec<_> = a.iter().chain(&b).copied().collect();
            prop_assert_eq!(merged.clone(), build(&both));
            prop_assert_eq!(merged.total(), both.len() as u64);
        }

        #[test]
        fn hmiou_symmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assert_eq!(hmiou(a, b), hmiou(b, a));
        }
    }
}
