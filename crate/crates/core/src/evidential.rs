// SPDX-License-Identifier: Apache-2.0

//! Dirichlet evidence and the evidential losses that train the uncertainty
//! head.
//!
//! The head emits one logit per seen class. Evidence is `exp(logit)` and the
//! Dirichlet concentration is `α = evidence + 1`, so `α_k ≥ 1` and the
//! uncertainty `u = N_s / α₀` lies in `(0, 1]`. Three losses shape α:
//!
//! * the expected cross-entropy under `Dir(α)` ([`loss_sl`]), averaged over
//!   seen samples only;
//! * the KL divergence of `Dir(α̃)` from the uniform Dirichlet
//!   ([`loss_dl`]), where α̃ ([`modify_alpha`]) removes the target-class
//!   evidence of seen samples;
//! * a binary loss on `u` itself ([`loss_bl`]) that pushes seen samples
//!   toward `u → 0` and unseen samples toward `u → 1`.
//!
//! Every loss exists twice: a tape builder (`*_var`) used for training and
//! gradient checks, and a value function that runs the builder on a
//! throwaway tape.

use serde::{Deserialize, Serialize};

use crate::diffcore::{special, Tape, Tensor2, Var};
use crate::error::{Error, Result};

/// Logits are clamped to this magnitude before `exp`.
pub const LOGIT_CLAMP: f64 = 40.0;
/// `u` is clamped into `[U_EPS, 1 − U_EPS]` before taking logs.
pub const U_EPS: f64 = 1e-7;

/// Dirichlet parameters over the seen classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationVector {
    alpha: Vec<f64>,
}

impl ConcentrationVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Empty("concentration vector"));
        }
        if let Some(&bad) = alpha.iter().find(|&&a| !(a >= 1.0) || !a.is_finite()) {
            return Err(Error::Domain {
                func: "concentration (alpha >= 1)",
                value: bad,
            });
        }
        Ok(ConcentrationVector { alpha })
    }

    /// `α = evidence + 1` for nonnegative evidence.
    pub fn from_evidence(evidence: &[f64]) -> Result<Self> {
        Self::new(evidence.iter().map(|e| e + 1.0).collect())
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn n_seen(&self) -> usize {
        self.alpha.len()
    }

    pub fn uncertainty(&self) -> UncertaintyScore {
        uncertainty(self)
    }
}

/// `u = N_s / α₀ ∈ (0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct UncertaintyScore(f64);

impl UncertaintyScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlOrientation {
    /// Seen samples minimize `−log(1 − u)`, unseen samples `−log u`.
    #[default]
    TextualIntent,
    /// Indicators swapped: seen samples minimize `−log u`.
    AsPrinted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidentialLossWeights {
    pub lambda_dl: f64,
    pub lambda_bl: f64,
    #[serde(default)]
    pub bl_orientation: BlOrientation,
}

impl Default for EvidentialLossWeights {
    fn default() -> Self {
        EvidentialLossWeights {
            lambda_dl: 0.005,
            lambda_bl: 0.01,
            bl_orientation: BlOrientation::TextualIntent,
        }
    }
}

impl EvidentialLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_dl", self.lambda_dl), ("lambda_bl", self.lambda_bl)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of the composite evidential loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidentialBreakdown {
    pub total: f64,
    pub sl: f64,
    pub dl: f64,
    pub bl: f64,
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// `α = exp(clamp(logits, ±40)) + 1`.
pub fn alpha_from_logits_var(tape: &mut Tape, logits: Var) -> Result<Var> {
    let c = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let e = tape.exp(c)?;
    tape.offset(e, 1.0)
}

/// Per-row uncertainty `N_s / α₀` as an n×1 column.
pub fn uncertainty_var(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let n_seen = tape.value(alpha).cols() as f64;
    let a0 = tape.sum_cols(alpha)?;
    let inv = tape.recip(a0)?;
    tape.scale(inv, n_seen)
}

/// `−mean_j (ψ(α_{j,y_j}) − ψ(α_{j,0}))`; every row is a seen sample.
pub fn loss_sl_var(tape: &mut Tape, alpha: Var, labels: &[usize]) -> Result<Var> {
    let n_seen = tape.value(alpha).cols();
    check_labels(labels, n_seen)?;
    let dig = tape.digamma(alpha)?;
    let picked = tape.gather(dig, labels)?;
    let a0 = tape.sum_cols(alpha)?;
    let dig0 = tape.digamma(a0)?;
    let diff = tape.sub(picked, dig0)?;
    let m = tape.mean(diff)?;
    tape.scale(m, -1.0)
}

/// α̃: for a seen row with target k, `1 + 1/√α_k` at k and `√α_j` elsewhere;
/// unseen rows (`None`) pass through unchanged.
pub fn modify_alpha_var(tape: &mut Tape, alpha: Var, targets: &[Option<usize>]) -> Result<Var> {
    let (rows, n_seen) = tape.value(alpha).shape();
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "modify_alpha",
            left: (rows, n_seen),
            right: (targets.len(), 1),
        });
    }
    let mut onehot = Tensor2::zeros(rows, n_seen);
    let mut others = Tensor2::zeros(rows, n_seen);
    let mut keep = Tensor2::zeros(rows, n_seen);
    for (r, t) in targets.iter().enumerate() {
        match *t {
            Some(k) => {
                if k >= n_seen {
                    return Err(Error::InvalidLabel {
                        label: k,
                        reason: "target outside the seen set",
                    });
                }
                others.row_mut(r).fill(1.0);
                others.set(r, k, 0.0);
                onehot.set(r, k, 1.0);
            }
            None => keep.row_mut(r).fill(1.0),
        }
    }
    let onehot = tape.leaf(onehot);
    let others = tape.leaf(others);
    let keep = tape.leaf(keep);

    let root = tape.sqrt(alpha)?;
    let inv_root = tape.recip(root)?;
    let target_val = tape.offset(inv_root, 1.0)?;
    let a = tape.mul(onehot, target_val)?;
    let b = tape.mul(others, root)?;
    let c = tape.mul(keep, alpha)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// `mean_j KL(Dir(α̃_j) ‖ Dir(1))`.
pub fn loss_dl_var(tape: &mut Tape, alpha_tilde: Var) -> Result<Var> {
    let n_seen = tape.value(alpha_tilde).cols();
    let ln_gamma_ns = special::ln_gamma_raw(n_seen as f64);

    let a0 = tape.sum_cols(alpha_tilde)?;
    let lg0 = tape.ln_gamma(a0)?;
    let lgk = tape.ln_gamma(alpha_tilde)?;
    let lgk_sum = tape.sum_cols(lgk)?;
    let log_norm = tape.sub(lg0, lgk_sum)?;

    let dig_k = tape.digamma(alpha_tilde)?;
    let dig_0 = tape.digamma(a0)?;
    let neg_dig_0 = tape.scale(dig_0, -1.0)?;
    let diff = tape.add_col(dig_k, neg_dig_0)?;
    let excess = tape.offset(alpha_tilde, -1.0)?;
    let prod = tape.mul(excess, diff)?;
    let expect = tape.sum_cols(prod)?;

    let per = tape.add(log_norm, expect)?;
    let m = tape.mean(per)?;
    tape.offset(m, -ln_gamma_ns)
}

/// Binary loss on an n×1 column of uncertainties.
pub fn loss_bl_var(tape: &mut Tape, u: Var, seen: &[bool], orientation: BlOrientation) -> Result<Var> {
    let rows = tape.value(u).rows();
    if seen.len() != rows || tape.value(u).cols() != 1 {
        return Err(Error::ShapeMismatch {
            op: "loss_bl",
            left: tape.value(u).shape(),
            right: (seen.len(), 1),
        });
    }
    // Column weights for the log(1 − u) and log(u) terms.
    let toward_zero: Vec<f64> = seen
        .iter()
        .map(|&s| match orientation {
            BlOrientation::TextualIntent => f64::from(u8::from(s)),
            BlOrientation::AsPrinted => f64::from(u8::from(!s)),
        })
        .collect();
    let toward_one: Vec<f64> = toward_zero.iter().map(|w| 1.0 - w).collect();
    let w0 = tape.leaf(Tensor2::column_vector(&toward_zero));
    let w1 = tape.leaf(Tensor2::column_vector(&toward_one));

    let uc = tape.clamp(u, U_EPS, 1.0 - U_EPS)?;
    let log_u = tape.ln(uc)?;
    let neg = tape.scale(uc, -1.0)?;
    let one_minus = tape.offset(neg, 1.0)?;
    let log_1mu = tape.ln(one_minus)?;
    let a = tape.mul(w0, log_1mu)?;
    let b = tape.mul(w1, log_u)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

/// Tape output of [`loss_ev_var`]: the differentiable total plus the
/// component values for logging.
#[derive(Clone, Copy, Debug)]
pub struct EvidentialTerms {
    pub total: Var,
    pub breakdown: EvidentialBreakdown,
}

/// `L_SL + λ_DL·L_DL + λ_BL·L_BL` over a batch where `targets[j]` is the
/// seen-class slot of a seen sample or `None` for an unseen one.
pub fn loss_ev_var(
    tape: &mut Tape,
    alpha: Var,
    targets: &[Option<usize>],
    weights: &EvidentialLossWeights,
) -> Result<EvidentialTerms> {
    weights.validate()?;
    let rows = tape.value(alpha).rows();
    if rows == 0 {
        return Err(Error::Empty("evidential batch"));
    }
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "loss_ev",
            left: tape.value(alpha).shape(),
            right: (targets.len(), 1),
        });
    }

    let seen_rows: Vec<usize> = (0..rows).filter(|&r| targets[r].is_some()).collect();
    let seen_labels: Vec<usize> = targets.iter().filter_map(|t| *t).collect();
    let sl = if seen_rows.is_empty() {
        None
    } else {
        let a = tape.select_rows(alpha, &seen_rows)?;
        Some(loss_sl_var(tape, a, &seen_labels)?)
    };

    let at = modify_alpha_var(tape, alpha, targets)?;
    let dl = loss_dl_var(tape, at)?;

    let u = uncertainty_var(tape, alpha)?;
    let seen: Vec<bool> = targets.iter().map(Option::is_some).collect();
    let bl = loss_bl_var(tape, u, &seen, weights.bl_orientation)?;

    let wdl = tape.scale(dl, weights.lambda_dl)?;
    let wbl = tape.scale(bl, weights.lambda_bl)?;
    let mut total = tape.add(wdl, wbl)?;
    if let Some(sl) = sl {
        total = tape.add(total, sl)?;
    }
    let breakdown = EvidentialBreakdown {
        total: tape.value(total).item(),
        sl: sl.map_or(0.0, |v| tape.value(v).item()),
        dl: tape.value(dl).item(),
        bl: tape.value(bl).item(),
    };
    Ok(EvidentialTerms { total, breakdown })
}

fn check_labels(labels: &[usize], n_seen: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= n_seen) {
        Some(&bad) => Err(Error::InvalidLabel {
            label: bad,
            reason: "label outside the seen set",
        }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Value functions
// ---------------------------------------------------------------------------

pub fn evidence_from_logits(logits: &Tensor2) -> Vec<ConcentrationVector> {
    logits
        .iter_rows()
        .map(|row| ConcentrationVector {
            alpha: row
                .iter()
                .map(|&l| l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp() + 1.0)
                .collect(),
        })
        .collect()
}

pub fn uncertainty(alpha: &ConcentrationVector) -> UncertaintyScore {
    UncertaintyScore(alpha.n_seen() as f64 / alpha.alpha0())
}

fn with_tape<T>(build: impl FnOnce(&mut Tape) -> Result<Var>, read: impl FnOnce(f64) -> T) -> Result<T> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(read(tape.value(out).item()))
}

fn positive_batch(func: &'static str, alpha: &Tensor2) -> Result<()> {
    if alpha.rows() == 0 || alpha.cols() == 0 {
        return Err(Error::Empty("concentration batch"));
    }
    match alpha.data().iter().find(|&&a| !(a > 0.0)) {
        Some(&bad) => Err(Error::Domain { func, value: bad }),
        None => Ok(()),
    }
}

/// Expected cross-entropy under `Dir(α)`; one row of `alpha` per seen sample.
pub fn loss_sl(alpha: &Tensor2, labels: &[usize]) -> Result<f64> {
    positive_batch("loss_sl", alpha)?;
    check_labels(labels, alpha.cols())?;
    with_tape(
        |t| {
            let a = t.leaf(alpha.clone());
            loss_sl_var(t, a, labels)
        },
        |v| v,
    )
}

/// α̃ for one sample; `target` is the seen-class slot, or `None` for an
/// unseen sample.
pub fn modify_alpha(alpha: &[f64], target: Option<usize>) -> Result<Vec<f64>> {
    match target {
        None => Ok(alpha.to_vec()),
        Some(k) if k >= alpha.len() => Err(Error::InvalidLabel {
            label: k,
            reason: "target outside the seen set",
        }),
        Some(k) => Ok(alpha
            .iter()
            .enumerate()
            .map(|(j, &a)| if j == k { 1.0 + 1.0 / a.sqrt() } else { a.sqrt() })
            .collect()),
    }
}

/// `mean_j KL(Dir(α̃_j) ‖ Dir(1))`.
pub fn loss_dl(alpha_tilde: &Tensor2) -> Result<f64> {
    positive_batch("loss_dl", alpha_tilde)?;
    with_tape(
        |t| {
            let a = t.leaf(alpha_tilde.clone());
            loss_dl_var(t, a)
        },
        |v| v,
    )
}

pub fn loss_bl(u: &[f64], seen: &[bool], orientation: BlOrientation) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::Empty("uncertainty batch"));
    }
    with_tape(
        |t| {
            let uv = t.leaf(Tensor2::column_vector(u));
            loss_bl_var(t, uv, seen, orientation)
        },
        |v| v,
    )
}

pub fn loss_ev(
    alpha: &Tensor2,
    targets: &[Option<usize>],
    weights: &EvidentialLossWeights,
) -> Result<EvidentialBreakdown> {
    positive_batch("loss_ev", alpha)?;
    let mut tape = Tape::new();
    let a = tape.leaf(alpha.clone());
    Ok(loss_ev_var(&mut tape, a, targets, weights)?.breakdown)
}
