// SPDX-License-Identifier: Apache-2.0

//! Built-in numerical self-test.
//!
//! Three groups: central finite-difference checks for every training loss,
//! digamma reference values and recurrence, and Monte-Carlo estimates of the
//! closed-form Dirichlet losses. Each check carries its own tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::cross_entropy_var;
use crate::diffcore::{
    check_gradients, digamma, ln_gamma, Activation, BoundLinear, Mlp, Tape, Tensor2, Var, EULER_GAMMA, FD_REL_TOL,
    FD_STEP,
};
use crate::error::{Error, Result};
use crate::evidential::{
    alpha_from_logits_var, loss_bl_var, loss_dl, loss_dl_var, loss_ev_var, loss_sl, loss_sl_var, BlOrientation,
    EvidentialLossWeights,
};
use crate::semantics::{tune_var, TuningLayer};
use crate::synthesis::{contrastive_loss_var, mmd2_var, prototype_loss_var, synthesize_var};

/// Tolerance for the digamma identities.
pub const DIGAMMA_TOL: f64 = 1e-10;
/// Tolerance for `ψ(x+1) − ψ(x) − 1/x`, scaled by `max(1, 1/x)`.
pub const RECURRENCE_TOL: f64 = 1e-11;
/// Monte-Carlo agreement bound in standard errors.
pub const MC_SIGMAS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(group: &'static str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            group,
            name: name.into(),
            measured,
            tolerance,
            passed: measured.is_finite() && measured < tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheckOptions {
    pub seed: u64,
    pub gradient_points: usize,
    pub mc_cases: usize,
    pub mc_draws: usize,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            seed: 1,
            gradient_points: 50,
            mc_cases: 20,
            mc_draws: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run(options: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let mut checks = gradient_suite(options.gradient_points, options.seed)?;
    checks.extend(special_function_checks(1000, options.seed)?);
    checks.extend(monte_carlo_checks(options.mc_cases, options.mc_draws, options.seed)?);
    Ok(SelfCheckReport { checks })
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape matches data length")
}

fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// A scalar loss of some tape inputs, with the inputs to evaluate it at.
pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Case = (LossFn, Vec<Tensor2>);

pub struct GradientCase {
    pub loss: &'static str,
    pub f: LossFn,
    pub inputs: Vec<Tensor2>,
}

/// `points` random evaluation points for each training loss, grouped by
/// loss in a fixed order.
pub fn gradient_cases(points: usize, seed: u64) -> Result<Vec<GradientCase>> {
    type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;
    let losses: [(&str, Builder); 9] = [
        ("cross-entropy", |rng| {
            let y = labels(4, 5, rng);
            Ok((
                Box::new(move |t, v| cross_entropy_var(t, v[0], &y)),
                vec![uniform(4, 5, -3.0, 3.0, rng)],
            ))
        }),
        ("subjective-logic", |rng| {
            let y = labels(3, 4, rng);
            Ok((
                Box::new(move |t, v| loss_sl_var(t, v[0], &y)),
                vec![uniform(3, 4, 1.0, 8.0, rng)],
            ))
        }),
        ("dirichlet-kl", |rng| {
            Ok((
                Box::new(|t, v| loss_dl_var(t, v[0])),
                vec![uniform(3, 4, 0.5, 6.0, rng)],
            ))
        }),
        ("belief", |rng| {
            let seen: Vec<bool> = (0..6).map(|_| rng.random_bool(0.5)).collect();
            let orientation = if rng.random_bool(0.5) {
                BlOrientation::TextualIntent
            } else {
                BlOrientation::AsPrinted
            };
            Ok((
                Box::new(move |t, v| loss_bl_var(t, v[0], &seen, orientation)),
                vec![uniform(6, 1, 0.05, 0.95, rng)],
            ))
        }),
        ("evidential", |rng| {
            let targets: Vec<Option<usize>> = (0..5)
                .map(|_| rng.random_bool(0.6).then(|| rng.random_range(0..4)))
                .collect();
            let w = EvidentialLossWeights::default();
            Ok((
                Box::new(move |t, v| {
                    let a = alpha_from_logits_var(t, v[0])?;
                    Ok(loss_ev_var(t, a, &targets, &w)?.total)
                }),
                vec![uniform(5, 4, -2.0, 2.0, rng)],
            ))
        }),
        ("mmd", |rng| {
            Ok((
                Box::new(|t, v| mmd2_var(t, v[0], v[1], &[1.0, 2.0, 4.0, 8.0, 16.0])),
                vec![uniform(4, 3, -2.0, 2.0, rng), uniform(5, 3, -2.0, 2.0, rng)],
            ))
        }),
        ("contrastive", |rng| {
            let ls = labels(4, 3, rng);
            let mut lr = labels(6, 3, rng);
            lr[0] = ls[0];
            Ok((
                Box::new(move |t, v| contrastive_loss_var(t, v[0], v[1], &ls, &lr, 0.1)),
                vec![uniform(4, 3, -1.0, 1.0, rng), uniform(6, 3, -1.0, 1.0, rng)],
            ))
        }),
        ("prototype", |rng| {
            let mut y = labels(6, 3, rng);
            y[0] = 0;
            y[1] = 1;
            Ok((
                Box::new(move |t, v| prototype_loss_var(t, v[0], &y, 1.0)),
                vec![uniform(6, 3, -1.0, 1.0, rng)],
            ))
        }),
        ("tuning-path", |rng| {
            let (n_classes, dim, noise) = (4, 3, 2);
            let layer = TuningLayer::init(n_classes, dim, rng);
            let decoder = Mlp::init(&[noise + dim, 6, 3], Activation::Tanh, rng)?;
            let t = uniform(3, dim, -1.0, 1.0, rng);
            let d = Tensor2::from_vec(
                3,
                n_classes,
                (0..3 * n_classes)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                    .collect(),
            )?;
            let z = uniform(3, noise, 0.0, 1.0, rng);
            let real = uniform(4, 3, -1.0, 1.0, rng);
            Ok((
                Box::new(move |tape, v| {
                    let tv = tape.leaf(t.clone());
                    let dv = tape.leaf(d.clone());
                    let fused = tune_var(
                        tape,
                        tv,
                        dv,
                        &BoundLinear {
                            weight: v[0],
                            bias: v[1],
                        },
                    )?;
                    let zv = tape.leaf(z.clone());
                    let bound = decoder.bind(tape);
                    let synth = synthesize_var(tape, &bound, zv, fused)?;
                    let rv = tape.leaf(real.clone());
                    mmd2_var(tape, synth, rv, &[1.0, 2.0])
                }),
                vec![layer.linear.weight.clone(), layer.linear.bias.clone()],
            ))
        }),
    ];

    let mut out = Vec::with_capacity(losses.len() * points);
    for (i, (loss, build)) in losses.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + i as u64);
        for _ in 0..points {
            let (f, inputs) = build(&mut rng)?;
            out.push(GradientCase { loss, f, inputs });
        }
    }
    Ok(out)
}

/// Worst relative error of each loss over `points` random inputs.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out: Vec<Check> = Vec::new();
    for case in gradient_cases(points, seed)? {
        let g = check_gradients(&case.f, &case.inputs, FD_STEP)?;
        match out.last_mut() {
            Some(c) if c.name == case.loss => {
                c.measured = c.measured.max(g.max_rel_error);
                c.passed = c.measured.is_finite() && c.measured < c.tolerance;
            }
            _ => out.push(Check::new("gradient", case.loss, g.max_rel_error, FD_REL_TOL)),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

pub fn special_function_checks(recurrence_points: usize, seed: u64) -> Result<Vec<Check>> {
    let references = [
        ("psi(1) = -gamma", 1.0, -EULER_GAMMA),
        ("psi(2) = 1 - gamma", 2.0, 1.0 - EULER_GAMMA),
        (
            "psi(1/2) = -gamma - 2 ln 2",
            0.5,
            -EULER_GAMMA - 2.0 * std::f64::consts::LN_2,
        ),
    ];
    let mut out = Vec::new();
    for (name, x, want) in references {
        out.push(Check::new("special", name, (digamma(x)? - want).abs(), DIGAMMA_TOL));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(200);
    let mut worst: f64 = 0.0;
    for _ in 0..recurrence_points {
        let x: f64 = 10f64.powf(rng.random_range(-2.0..3.0));
        let err = (digamma(x + 1.0)? - digamma(x)? - 1.0 / x).abs() / (1.0 / x).max(1.0);
        worst = worst.max(err);
    }
    out.push(Check::new("special", "psi(x+1) = psi(x) + 1/x", worst, RECURRENCE_TOL));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Monte Carlo
// ---------------------------------------------------------------------------

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

fn estimate(draws: usize, rng: &mut ChaCha8Rng, mut sample: impl FnMut(&mut ChaCha8Rng) -> f64) -> Estimate {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let v = sample(rng);
        s += v;
        s2 += v * v;
    }
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Estimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

fn gammas(alpha: &[f64]) -> Result<Vec<Gamma<f64>>> {
    alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::Config(format!("gamma({a}): {e}"))))
        .collect()
}

fn draw_dirichlet(g: &[Gamma<f64>], rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut total = 0.0;
    for (o, d) in out.iter_mut().zip(g) {
        *o = d.sample(rng);
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// MC estimate of `E_{p∼Dir(α)}[−ln p_label]`.
pub fn mc_expected_nll(alpha: &[f64], label: usize, draws: usize, rng: &mut ChaCha8Rng) -> Result<Estimate> {
    if label >= alpha.len() {
        return Err(Error::InvalidLabel {
            label,
            reason: "outside the concentration vector",
        });
    }
    let g = gammas(alpha)?;
    let mut p = vec![0.0; alpha.len()];
    Ok(estimate(draws, rng, |rng| {
        draw_dirichlet(&g, rng, &mut p);
        -p[label].ln()
    }))
}

/// MC estimate of `KL(Dir(α) ‖ Dir(1))` as the mean log density ratio.
pub fn mc_kl_to_uniform(alpha: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> Result<Estimate> {
    let g = gammas(alpha)?;
    let a0: f64 = alpha.iter().sum();
    let mut log_norm = ln_gamma(a0)? - ln_gamma(alpha.len() as f64)?;
    for &a in alpha {
        log_norm -= ln_gamma(a)?;
    }
    let mut p = vec![0.0; alpha.len()];
    Ok(estimate(draws, rng, |rng| {
        draw_dirichlet(&g, rng, &mut p);
        log_norm + alpha.iter().zip(&p).map(|(a, x)| (a - 1.0) * x.ln()).sum::<f64>()
    }))
}

type McCase = dyn Fn(&[f64], usize, &mut ChaCha8Rng) -> Result<f64> + Sync;

/// Worst `|closed − MC| / SE` over `cases` random concentration vectors
/// for each closed-form loss.
pub fn monte_carlo_checks(cases: usize, draws: usize, seed: u64) -> Result<Vec<Check>> {
    let run = |stream: u64, f: &McCase| -> Result<f64> {
        let z: Vec<f64> = (0..cases)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream + c as u64);
                let k = rng.random_range(2..=8);
                let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..10.0)).collect();
                f(&alpha, draws, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(z.into_iter().fold(0.0, f64::max))
    };
    let sl = run(1 << 20, &|alpha, draws, rng| {
        let label = rng.random_range(0..alpha.len());
        let closed = loss_sl(&Tensor2::row_vector(alpha), &[label])?;
        let mc = mc_expected_nll(alpha, label, draws, rng)?;
        Ok((closed - mc.mean).abs() / mc.std_error)
    })?;
    let dl = run(2 << 20, &|alpha, draws, rng| {
        let closed = loss_dl(&Tensor2::row_vector(alpha))?;
        let mc = mc_kl_to_uniform(alpha, draws, rng)?;
        Ok((closed - mc.mean).abs() / mc.std_error)
    })?;
    Ok(vec![
        Check::new("monte-carlo", "subjective-logic vs MC (in SE)", sl, MC_SIGMAS),
        Check::new("monte-carlo", "dirichlet-kl vs MC (in SE)", dl, MC_SIGMAS),
    ])
}
