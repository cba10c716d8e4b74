// SPDX-License-Identifier: Apache-2.0

//! Class posteriors, the cross-entropy loss, and calibrated stacking.
//!
//! Calibrated stacking subtracts a factor η from every seen-class posterior
//! before the argmax. With a static η the same factor applies to every
//! point; with dynamic calibration each point gets `η = clamp(u − ū, 0, 1)`
//! where `u` comes from the evidential head and `ū` is the mean uncertainty
//! of points the uncalibrated classifier already assigns to unseen classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{argmax, Tape, Var};
use crate::error::{Error, Result};

/// Floor applied to the target probability inside [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    p: Vec<f64>,
}

impl ProbabilityVector {
    /// Wraps an already normalized vector.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let s: f64 = p.iter().sum();
        if p.is_empty() || (s - 1.0).abs() > 1e-9 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::malformed("probability vector", format!("sum {s}")));
        }
        Ok(ProbabilityVector { p })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }

    /// Max probability, used as the confidence of the prediction.
    pub fn confidence(&self) -> f64 {
        self.p[self.argmax()]
    }
}

/// Max-shifted softmax.
pub fn softmax_posterior(logits: &[f64]) -> ProbabilityVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    ProbabilityVector {
        p: exps.into_iter().map(|e| e / z).collect(),
    }
}

/// `−mean_j log max(p_{j,y_j}, 1e-12)`.
pub fn cross_entropy(p_batch: &[ProbabilityVector], labels: &[usize]) -> Result<f64> {
    if p_batch.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    if p_batch.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: (p_batch.len(), 1),
            right: (labels.len(), 1),
        });
    }
    let mut total = 0.0;
    for (p, &y) in p_batch.iter().zip(labels) {
        let py = *p.p.get(y).ok_or(Error::InvalidLabel {
            label: y,
            reason: "label outside the class set",
        })?;
        total -= py.max(PROB_FLOOR).ln();
    }
    Ok(total / p_batch.len() as f64)
}

/// Cross-entropy of `softmax(logits)` computed through log-softmax, for
/// training.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.gather(ls, labels)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibrated {
    pub p_prime: Vec<f64>,
    pub predicted: usize,
}

/// `p′_k = p_k − η·1(k seen)`, then argmax with ties to the lowest index.
/// `p′` is neither clamped nor renormalized.
pub fn calibrated_stack(p: &ProbabilityVector, eta: f64, seen_mask: &[bool]) -> Result<Calibrated> {
    if seen_mask.len() != p.len() {
        return Err(Error::ShapeMismatch {
            op: "calibrated_stack",
            left: (1, p.len()),
            right: (1, seen_mask.len()),
        });
    }
    let eta = clamp_eta(eta);
    let p_prime: Vec<f64> =
        p.p.iter()
            .zip(seen_mask)
            .map(|(&v, &seen)| if seen { v - eta } else { v })
            .collect();
    let predicted = argmax(&p_prime);
    Ok(Calibrated { p_prime, predicted })
}

/// Allocation-free equivalent of `calibrated_stack(..).predicted`.
pub fn calibrated_prediction(p: &[f64], eta: f64, seen_mask: &[bool]) -> usize {
    let eta = clamp_eta(eta);
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, (&v, &seen)) in p.iter().zip(seen_mask).enumerate() {
        let v = if seen { v - eta } else { v };
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

fn clamp_eta(eta: f64) -> f64 {
    if eta.is_nan() {
        0.0
    } else {
        eta.clamp(0.0, 1.0)
    }
}

/// `η = clamp(u − ū, 0, 1)`.
pub fn dynamic_eta(u: f64, u_bar: f64) -> f64 {
    clamp_eta(u - u_bar)
}

/// Mean `u` over points whose uncalibrated prediction is an unseen class,
/// falling back to the mean over all points when there are none.
pub fn estimate_u_bar(p_batch: &[ProbabilityVector], u: &[f64], seen_mask: &[bool]) -> Result<f64> {
    if p_batch.is_empty() {
        return Err(Error::Empty("u-bar estimation batch"));
    }
    if p_batch.len() != u.len() {
        return Err(Error::ShapeMismatch {
            op: "estimate_u_bar",
            left: (p_batch.len(), 1),
            right: (u.len(), 1),
        });
    }
    let predicted_unseen = p_batch.iter().map(|p| !seen_mask[p.argmax()]);
    Ok(u_bar_from_predictions(predicted_unseen, u))
}

pub(crate) fn u_bar_from_predictions(predicted_unseen: impl Iterator<Item = bool>, u: &[f64]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (unseen, &ui) in predicted_unseen.zip(u) {
        if unseen {
            sum += ui;
            n += 1;
        }
    }
    if n > 0 {
        sum / n as f64
    } else {
        u.iter().sum::<f64>() / u.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFactor {
    pub eta: f64,
    pub mode: CalibrationMode,
    pub u_bar: Option<f64>,
}

impl CalibrationFactor {
    pub fn fixed(eta: f64) -> Self {
        CalibrationFactor {
            eta: clamp_eta(eta),
            mode: CalibrationMode::Static,
            u_bar: None,
        }
    }

    pub fn dynamic(u: f64, u_bar: f64) -> Self {
        CalibrationFactor {
            eta: dynamic_eta(u, u_bar),
            mode: CalibrationMode::Dynamic,
            u_bar: Some(u_bar),
        }
    }
}

/// How evaluation turns posteriors into predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Calibration {
    None,
    Static { eta: f64 },
    Dynamic,
}

impl fmt::Display for Calibration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Calibration::None => write!(f, "none"),
            Calibration::Static { eta } => write!(f, "static:{eta}"),
            Calibration::Dynamic => write!(f, "dynamic"),
        }
    }
}

impl FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Calibration::None),
            "dynamic" => Ok(Calibration::Dynamic),
            _ => {
                let eta = s
                    .strip_prefix("static:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| (0.0..=1.0).contains(v))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "calibration must be none, dynamic or static:ETA with ETA in [0,1], got {s:?}"
                        ))
                    })?;
                Ok(Calibration::Static { eta })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradients, Tensor2, FD_REL_TOL, FD_STEP};
    use proptest::prelude::*;

    fn pv(p: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_posterior(&[0.0, 0.0, 0.0]);
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_posterior(&[2f64.ln(), 0.0]);
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax_posterior(&[1000.0, 0.0]);
        assert_eq!(p.as_slice()[0], 1.0);
        assert!(p.as_slice()[1] >= 0.0 && p.as_slice()[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[pv(&[0.0, 1.0])], &[1]).unwrap(), 0.0);
        let v = cross_entropy(&[pv(&[0.25; 4])], &[2]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let v = cross_entropy(&[pv(&[0.5, 0.5]), pv(&[0.25, 0.75])], &[0, 0]).unwrap();
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        // floor keeps a zero probability finite
        assert!(cross_entropy(&[pv(&[1.0, 0.0])], &[1]).unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_var_agrees_and_differentiates() {
        let logits = Tensor2::from_rows(&[[0.3, -1.0, 2.0], [1.5, 0.2, -0.7]]).unwrap();
        let labels = [2, 1];
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let ce = cross_entropy_var(&mut tape, l, &labels).unwrap();
        let ps: Vec<_> = logits.iter_rows().map(softmax_posterior).collect();
        assert!((tape.value(ce).item() - cross_entropy(&ps, &labels).unwrap()).abs() < 1e-14);
        let check = check_gradients(|t, v| cross_entropy_var(t, v[0], &labels), &[logits], FD_STEP).unwrap();
        assert!(check.passes(FD_REL_TOL));
    }

    #[test]
    fn calibrated_stack_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let seen = [true, true, false];
        let c = calibrated_stack(&p, 0.0, &seen).unwrap();
        assert_eq!(c.p_prime, p.as_slice());
        assert_eq!(c.predicted, 0);

        let c = calibrated_stack(&p, 0.25, &seen).unwrap();
        assert!((c.p_prime[0] - 0.25).abs() < 1e-15);
        assert!((c.p_prime[1] - 0.05).abs() < 1e-15);
        assert_eq!(c.p_prime[2], 0.2);
        assert_eq!(c.predicted, 0);

        let c = calibrated_stack(&p, 0.35, &seen).unwrap();
        assert!((c.p_prime[1] + 0.05).abs() < 1e-15);
        assert_eq!(c.predicted, 2);
        assert_eq!(calibrated_prediction(p.as_slice(), 0.35, &seen), 2);
    }

    #[test]
    fn dynamic_eta_examples() {
        assert_eq!(dynamic_eta(0.4, 0.4), 0.0);
        assert!((dynamic_eta(0.9, 0.4) - 0.5).abs() < 1e-15);
        assert_eq!(dynamic_eta(0.2, 0.4), 0.0);
    }

    #[test]
    fn u_bar_examples() {
        let seen = [true, false];
        let all_seen = [pv(&[0.9, 0.1]), pv(&[0.6, 0.4])];
        assert!((estimate_u_bar(&all_seen, &[0.2, 0.6], &seen).unwrap() - 0.4).abs() < 1e-15);
        let two_unseen = [pv(&[0.1, 0.9]), pv(&[0.3, 0.7]), pv(&[0.8, 0.2])];
        let ub = estimate_u_bar(&two_unseen, &[0.2, 0.6, 0.9], &seen).unwrap();
        assert!((ub - 0.4).abs() < 1e-15);
        let ub = estimate_u_bar(&[pv(&[0.0, 1.0])], &[0.7], &seen).unwrap();
        assert_eq!(ub, 0.7);
        assert!(matches!(estimate_u_bar(&[], &[], &seen), Err(Error::Empty(_))));
    }

    #[test]
    fn calibration_parsing() {
        assert_eq!("none".parse::<Calibration>().unwrap(), Calibration::None);
        assert_eq!("dynamic".parse::<Calibration>().unwrap(), Calibration::Dynamic);
        assert_eq!(
            "static:0.25".parse::<Calibration>().unwrap(),
            Calibration::Static { eta: 0.25 }
        );
        assert!("static:1.5".parse::<Calibration>().is_err());
        assert!("static".parse::<Calibration>().is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..1.0, n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn unseen_flip_is_monotone((raw, seen) in arb_case(), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / s).collect();
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let at_lo = calibrated_prediction(&p, lo, &seen);
            let at_hi = calibrated_prediction(&p, hi, &seen);
            if !seen[at_lo] {
                prop_assert_eq!(at_lo, at_hi);
            }
            // The argmax among unseen classes ignores η.
            let best_unseen = |q: &[f64]| (0..q.len()).filter(|&i| !seen[i]).fold(None, |b: Option<usize>, i| match b {
                Some(j) if q[j] >= q[i] => Some(j),
                _ => Some(i),
            });
            let c = calibrated_stack(&ProbabilityVector { p: p.clone() }, hi, &seen).unwrap();
            prop_assert_eq!(best_unseen(&c.p_prime), best_unseen(&p));
        }

        #[test]
        fn dynamic_eta_zero_below_mean(u in 0.0f64..1.0, ub in 0.0f64..1.0) {
            let eta = dynamic_eta(u, ub);
            if u <= ub {
                prop_assert_eq!(eta, 0.0);
            }
            prop_assert!((0.0..=1.0).contains(&eta));
        }
    }
}
