// SPDX-License-Identifier: Apache-2.0

//! Feature decoder conditioned on fused class semantics, and the three
//! losses it is trained with: multi-kernel MMD, cosine InfoNCE and a
//! prototype separation hinge.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffcore::{Activation, BoundMlp, Mlp, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::pipeline::{
    diverged, phase_rng, points_tensor, poly_lr, Encoder, EpochRecord, LossAccumulator, Optimizer, TrainConfig,
};
use crate::semantics::{scene_descriptor, tune_var, TuningLayer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub bandwidths: Vec<f64>,
    pub temperature: f64,
    pub margin: f64,
    pub w_disc: f64,
    pub w_con: f64,
    pub w_proto: f64,
    /// Real and synthetic samples drawn per class and scene in each step.
    pub samples_per_class: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            noise_dim: 32,
            hidden: vec![128, 128],
            bandwidths: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            temperature: 0.1,
            margin: 1.0,
            w_disc: 1.0,
            w_con: 1.0,
            w_proto: 1.0,
            samples_per_class: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.noise_dim == 0 {
            return fail("decoder noise_dim must be >= 1");
        }
        if self.hidden.contains(&0) {
            return fail("decoder hidden sizes must be positive");
        }
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|&b| !(b > 0.0)) {
            return fail("MMD bandwidths must be positive");
        }
        if !(self.temperature > 0.0) {
            return fail("contrastive temperature must be > 0");
        }
        if !(self.margin >= 0.0) {
            return fail("prototype margin must be >= 0");
        }
        if [self.w_disc, self.w_con, self.w_proto].iter().any(|&w| !(w >= 0.0)) {
            return fail("decoder loss weights must be >= 0");
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be >= 1");
        }
        Ok(())
    }
}

/// `D(z, t ⊗ s)`: an MLP over `[z ; fused]` with a linear output layer.
///
/// `feature_mean` and `feature_std` standardize real and synthetic features
/// before the training losses compare them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub mlp: Mlp,
    pub noise_dim: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(
        config: &DecoderConfig,
        semantic_dim: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![config.noise_dim + semantic_dim];
        sizes.extend(&config.hidden);
        sizes.push(feature_dim);
        Ok(Decoder {
            mlp: Mlp::init(&sizes, Activation::Relu, rng)?,
            noise_dim: config.noise_dim,
            feature_mean: vec![0.0; feature_dim],
            feature_std: vec![1.0; feature_dim],
        })
    }

    pub fn semantic_dim(&self) -> usize {
        self.mlp.inputs() - self.noise_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.outputs()
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        self.mlp.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        self.mlp.tensors_mut()
    }

    fn check_inputs(&self, z: (usize, usize), fused: (usize, usize)) -> Result<()> {
        if z.1 != self.noise_dim || fused.1 != self.semantic_dim() || z.0 != fused.0 {
            return Err(Error::ShapeMismatch {
                op: "synthesize",
                left: z,
                right: fused,
            });
        }
        Ok(())
    }

    /// Generates one feature row per `(z, fused)` row pair.
    pub fn synthesize(&self, z: &Tensor2, fused: &Tensor2) -> Result<Tensor2> {
        self.check_inputs(z.shape(), fused.shape())?;
        let mut tape = Tape::new();
        let bound = self.mlp.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let fv = tape.leaf(fused.clone());
        let out = synthesize_var(&mut tape, &bound, zv, fv)?;
        Ok(tape.value(out).clone())
    }

    pub fn standardize(&self, features: &Tensor2) -> Tensor2 {
        let mut out = features.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.feature_mean[c]) / self.feature_std[c];
            }
        }
        out
    }

    /// Sets the standardization statistics from a sample of real features.
    pub fn fit_standardizer(&mut self, features: &Tensor2) -> Result<()> {
        if features.rows() == 0 {
            return Err(Error::Empty("standardizer features"));
        }
        let n = features.rows() as f64;
        let d = features.cols();
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        self.feature_mean = mean;
        self.feature_std = var.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        Ok(())
    }
}

pub fn synthesize_var(tape: &mut Tape, decoder: &BoundMlp, z: Var, fused: Var) -> Result<Var> {
    let input = tape.concat_cols(&[z, fused])?;
    decoder.forward(tape, input)
}

/// Noise rows drawn from U[0,1)^{dim}.
pub fn sample_noise<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor2 {
    let data = (0..rows * dim).map(|_| rng.random::<f64>()).collect();
    Tensor2::from_vec(rows, dim, data).expect("shape matches data length")
}

/// Squared Euclidean distances between the rows of `x` and the rows of `y`.
fn pairwise_sq_dist(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let xx = tape.square(x)?;
    let xn = tape.sum_cols(xx)?;
    let yy = tape.square(y)?;
    let yn = tape.sum_cols(yy)?;
    let yn = tape.transpose(yn)?;
    let yt = tape.transpose(y)?;
    let cross = tape.matmul(x, yt)?;
    let d = tape.scale(cross, -2.0)?;
    let d = tape.add_col(d, xn)?;
    tape.add_row(d, yn)
}

fn kernel_mean(tape: &mut Tape, sq: Var, bandwidths: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &b in bandwidths {
        let scaled = tape.scale(sq, -1.0 / (2.0 * b * b))?;
        let k = tape.exp(scaled)?;
        let m = tape.mean(k)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or(Error::Empty("bandwidths"))
}

/// Biased multi-kernel MMD²: `mean k(x,x′) + mean k(y,y′) − 2·mean k(x,y)`,
/// with Gaussian kernels summed over `bandwidths`.
pub fn mmd2_var(tape: &mut Tape, x: Var, y: Var, bandwidths: &[f64]) -> Result<Var> {
    let (nx, dx) = tape.value(x).shape();
    let (ny, dy) = tape.value(y).shape();
    if nx == 0 || ny == 0 {
        return Err(Error::Empty("mmd2 sample set"));
    }
    if dx != dy {
        return Err(Error::ShapeMismatch {
            op: "mmd2",
            left: (nx, dx),
            right: (ny, dy),
        });
    }
    let dxx = pairwise_sq_dist(tape, x, x)?;
    let dyy = pairwise_sq_dist(tape, y, y)?;
    let dxy = pairwise_sq_dist(tape, x, y)?;
    let kxx = kernel_mean(tape, dxx, bandwidths)?;
    let kyy = kernel_mean(tape, dyy, bandwidths)?;
    let kxy = kernel_mean(tape, dxy, bandwidths)?;
    let s = tape.add(kxx, kyy)?;
    let c = tape.scale(kxy, -2.0)?;
    tape.add(s, c)
}

pub fn mmd2(x: &Tensor2, y: &Tensor2, bandwidths: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let yv = tape.leaf(y.clone());
    let out = mmd2_var(&mut tape, xv, yv, bandwidths)?;
    Ok(tape.value(out).item())
}

fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let n = tape.sum_cols(sq)?;
    let n = tape.offset(n, 1e-12)?;
    let n = tape.sqrt(n)?;
    let inv = tape.recip(n)?;
    tape.mul_col(x, inv)
}

/// Cosine InfoNCE of each synthetic row against every real row, averaged
/// over that row's same-label positives. Synthetic rows without a positive
/// are skipped; if none remain the loss is 0.
pub fn contrastive_loss_var(
    tape: &mut Tape,
    synth: Var,
    real: Var,
    synth_labels: &[usize],
    real_labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let (ns, ds) = tape.value(synth).shape();
    let (nr, dr) = tape.value(real).shape();
    if ns != synth_labels.len() || nr != real_labels.len() || ds != dr {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            left: (ns, ds),
            right: (nr, dr),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("contrastive temperature must be > 0".into()));
    }
    let mut weights = Tensor2::zeros(ns, nr);
    let mut valid = 0usize;
    for (i, &yi) in synth_labels.iter().enumerate() {
        let positives: Vec<usize> = (0..nr).filter(|&j| real_labels[j] == yi).collect();
        if positives.is_empty() {
            log::debug!("contrastive: synthetic sample {i} (class {yi}) has no positive, skipped");
            continue;
        }
        valid += 1;
        let w = 1.0 / positives.len() as f64;
        for j in positives {
            weights.set(i, j, w);
        }
    }
    if valid == 0 {
        return Ok(tape.scalar(0.0));
    }
    let weights = weights.map(|w| -w / valid as f64);
    let sn = l2_normalize_rows(tape, synth)?;
    let rn = l2_normalize_rows(tape, real)?;
    let rt = tape.transpose(rn)?;
    let sim = tape.matmul(sn, rt)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let log_p = tape.log_softmax(logits)?;
    let w = tape.leaf(weights);
    let weighted = tape.mul(log_p, w)?;
    tape.sum(weighted)
}

pub fn contrastive_loss(
    synth: &Tensor2,
    real: &Tensor2,
    synth_labels: &[usize],
    real_labels: &[usize],
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(synth.clone());
    let r = tape.leaf(real.clone());
    let out = contrastive_loss_var(&mut tape, s, r, synth_labels, real_labels, temperature)?;
    Ok(tape.value(out).item())
}

/// Rows of the per-class averaging matrix, in ascending label order.
fn class_averaging(labels: &[usize]) -> (Vec<usize>, Tensor2) {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let classes: Vec<usize> = members.keys().copied().collect();
    let mut avg = Tensor2::zeros(classes.len(), labels.len());
    for (r, rows) in members.values().enumerate() {
        let w = 1.0 / rows.len() as f64;
        for &i in rows {
            avg.set(r, i, w);
        }
    }
    (classes, avg)
}

/// Mean over class pairs of `max(0, m − ‖μ_a − μ_b‖)`, where μ are the
/// per-class means of `synth`.
pub fn prototype_loss_var(tape: &mut Tape, synth: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let (n, d) = tape.value(synth).shape();
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "prototype_loss",
            left: (n, d),
            right: (labels.len(), 1),
        });
    }
    let (classes, avg) = class_averaging(labels);
    let k = classes.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "prototype loss needs at least 2 classes, batch has {k}"
        )));
    }
    let avg = tape.leaf(avg);
    let protos = tape.matmul(avg, synth)?;
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for a in 0..k {
        for b in a + 1..k {
            left.push(a);
            right.push(b);
        }
    }
    let pa = tape.select_rows(protos, &left)?;
    let pb = tape.select_rows(protos, &right)?;
    let diff = tape.sub(pa, pb)?;
    let sq = tape.square(diff)?;
    let sq = tape.sum_cols(sq)?;
    let dist = tape.sqrt(sq)?;
    let neg = tape.scale(dist, -1.0)?;
    let gap = tape.offset(neg, margin)?;
    let hinge = tape.relu(gap)?;
    tape.mean(hinge)
}

pub fn prototype_loss(synth: &Tensor2, labels: &[usize], margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(synth.clone());
    let out = prototype_loss_var(&mut tape, s, labels, margin)?;
    Ok(tape.value(out).item())
}

/// Result of [`train_decoder`].
#[derive(Clone, Debug)]
pub struct DecoderRun {
    pub decoder: Decoder,
    pub tuning: Option<TuningLayer>,
    pub history: Vec<EpochRecord>,
}

fn standardize_var(tape: &mut Tape, x: Var, mean: &[f64], std: &[f64]) -> Result<Var> {
    let shift = tape.leaf(Tensor2::row_vector(&mean.iter().map(|m| -m).collect::<Vec<_>>()));
    let inv = tape.leaf(Tensor2::row_vector(&std.iter().map(|s| 1.0 / s).collect::<Vec<_>>()));
    let centered = tape.add_row(x, shift)?;
    tape.mul_row(centered, inv)
}

/// Phase-2 training against a frozen encoder. One step per training scene:
/// for every class present, `samples_per_class` real features are matched by
/// as many synthetic ones generated under that scene's descriptor.
pub fn train_decoder(encoder: &Encoder, dataset: &Dataset, config: &TrainConfig) -> Result<DecoderRun> {
    let dc = &config.decoder;
    dc.validate()?;
    let catalog = &dataset.catalog;
    let mut rng = phase_rng(config.seed, 2);
    let mut decoder = Decoder::init(dc, catalog.dim(), encoder.feature_dim(), &mut rng)?;
    let mut tuning = config
        .semantic_tuning
        .then(|| TuningLayer::init(catalog.n_classes(), catalog.dim(), &mut rng));

    let mut features = Vec::with_capacity(dataset.train.len());
    for s in &dataset.train {
        let (pts, _) = points_tensor([s])?;
        features.push(encoder.features(&pts)?);
    }
    let all: Vec<&Tensor2> = features.iter().collect();
    decoder.fit_standardizer(&Tensor2::vstack(&all)?)?;
    let (mean, std) = (decoder.feature_mean.clone(), decoder.feature_std.clone());

    let param_refs = |d: &Decoder, t: &Option<TuningLayer>| -> Vec<Tensor2> {
        let mut v: Vec<Tensor2> = d.tensors().into_iter().cloned().collect();
        if let Some(t) = t {
            v.extend(t.tensors().into_iter().cloned());
        }
        v
    };
    let mut opt = {
        let p = param_refs(&decoder, &tuning);
        Optimizer::for_params(config.phase2.optimizer, &p.iter().collect::<Vec<_>>())
    };

    let total = dataset.train.len() * config.phase2.epochs;
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::with_capacity(config.phase2.epochs);
    let mut step = 0;
    for epoch in 0..config.phase2.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossAccumulator::new();
        let mut lr = 0.0;
        for &si in &order {
            lr = poly_lr(config.phase2.lr, step, total, config.poly_power)?;
            let scene = &dataset.train[si];
            let present = scene.classes_present();
            let descriptor = scene_descriptor(present.iter().copied(), catalog.n_classes())?;

            let mut real_rows = Vec::new();
            let mut labels = Vec::new();
            let mut groups = Vec::new();
            for &c in &present {
                let members: Vec<usize> = (0..scene.len()).filter(|&i| scene.labels[i] == c).collect();
                let start = labels.len();
                for _ in 0..dc.samples_per_class {
                    real_rows.push(*members.choose(&mut rng).expect("class is present"));
                    labels.push(c);
                }
                groups.push((start..labels.len()).collect::<Vec<usize>>());
            }
            let n = labels.len();
            let real = decoder.standardize(&features[si].select_rows(&real_rows));
            let z = sample_noise(n, dc.noise_dim, &mut rng);
            let emb: Vec<&[f64]> = labels.iter().map(|&c| catalog.embedding(c)).collect();
            let emb = Tensor2::from_rows(&emb)?;
            let desc = Tensor2::from_rows(&vec![descriptor.as_slice(); n])?;

            let mut tape = Tape::new();
            let db = decoder.mlp.bind(&mut tape);
            let tb = tuning.as_ref().map(|t| t.bind(&mut tape));
            let run = |tape: &mut Tape| -> Result<[Var; 4]> {
                let e = tape.leaf(emb);
                let fused = match &tb {
                    Some(b) => {
                        let d = tape.leaf(desc);
                        tune_var(tape, e, d, b)?
                    }
                    None => e,
                };
                let zv = tape.leaf(z);
                let out = synthesize_var(tape, &db, zv, fused)?;
                let synth = standardize_var(tape, out, &mean, &std)?;
                let realv = tape.leaf(real);

                let mut disc = tape.scalar(0.0);
                for g in &groups {
                    let a = tape.select_rows(realv, g)?;
                    let b = tape.select_rows(synth, g)?;
                    let m = mmd2_var(tape, a, b, &dc.bandwidths)?;
                    disc = tape.add(disc, m)?;
                }
                let disc = tape.scale(disc, 1.0 / groups.len() as f64)?;
                let con = contrastive_loss_var(tape, synth, realv, &labels, &labels, dc.temperature)?;
                let proto = if groups.len() >= 2 {
                    prototype_loss_var(tape, synth, &labels, dc.margin)?
                } else {
                    tape.scalar(0.0)
                };
                let a = tape.scale(disc, dc.w_disc)?;
                let b = tape.scale(con, dc.w_con)?;
                let c = tape.scale(proto, dc.w_proto)?;
                let ab = tape.add(a, b)?;
                let total = tape.add(ab, c)?;
                Ok([total, disc, con, proto])
            };
            let [loss, disc, con, proto] = run(&mut tape).map_err(diverged("phase2", step))?;
            let grads = tape.backward(loss).map_err(diverged("phase2", step))?;

            let mut vars = db.vars();
            if let Some(b) = &tb {
                vars.extend([b.weight, b.bias]);
            }
            let like = param_refs(&decoder, &tuning);
            let g: Vec<Tensor2> = vars.iter().zip(&like).map(|(v, t)| grads.wrt(*v, t)).collect();
            let mut params = decoder.tensors_mut();
            if let Some(t) = tuning.as_mut() {
                params.extend(t.tensors_mut());
            }
            opt.step(params, &g, lr)?;
            acc.add(&[
                ("total", tape.value(loss).item()),
                ("mmd", tape.value(disc).item()),
                ("contrastive", tape.value(con).item()),
                ("prototype", tape.value(proto).item()),
            ]);
            step += 1;
        }
        history.push(acc.finish(2, epoch, lr));
    }
    Ok(DecoderRun {
        decoder,
        tuning,
        history,
    })
}
