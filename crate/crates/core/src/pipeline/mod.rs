// SPDX-License-Identifier: Apache-2.0

//! Three-phase training.
//!
//! 1. A point-wise encoder `E` is trained with cross-entropy over seen
//!    classes through a throwaway linear head.
//! 2. With `E` frozen, the decoder `D` and the semantic tuning layer learn
//!    to reproduce real seen-class features (see [`crate::synthesis`]).
//! 3. With `E` and `D` frozen, the classifier `C` is trained with
//!    cross-entropy over real seen features plus synthetic unseen features,
//!    and the uncertainty head `U` (same architecture, separate weights) with
//!    the evidential loss over the same batches.
//!
//! Phase `k` draws all of its randomness from `seed + k`.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{tensor_checksum, Checkpoint};
pub use optim::{poly_lr, Optimizer, OptimizerKind, DEFAULT_POLY_POWER};

use crate::calibration::{cross_entropy_var, softmax_posterior, ProbabilityVector};
use crate::dataset::{write_atomic, Dataset, Scene};
use crate::diffcore::{Activation, BoundMlp, Linear, Mlp, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::evidential::{
    alpha_from_logits_var, evidence_from_logits, loss_ev_var, uncertainty, BlOrientation, EvidentialLossWeights,
};
use crate::semantics::{scene_descriptor, tune, ClassCatalog, TuningLayer};
use crate::synthesis::{sample_noise, train_decoder, Decoder, DecoderConfig};

pub const PHASE1_FILE: &str = "phase1.ckpt";
pub const PHASE2_FILE: &str = "phase2.ckpt";
pub const PHASE3_FILE: &str = "phase3.ckpt";

pub fn log_file(phase: u8) -> String {
    format!("phase{phase}.log.jsonl")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    /// Points per optimization step.
    pub batch_points: usize,
    pub poly_power: f64,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub phase3: PhaseConfig,
    pub lambda_dl: f64,
    pub lambda_bl: f64,
    pub bl_orientation: BlOrientation,
    /// Share of each phase-3 batch made of synthetic unseen features.
    pub synth_fraction: f64,
    /// When false the decoder is conditioned on raw class embeddings.
    pub semantic_tuning: bool,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            feature_dim: 32,
            encoder_hidden: vec![64, 64],
            classifier_hidden: vec![64],
            batch_points: 256,
            poly_power: DEFAULT_POLY_POWER,
            phase1: PhaseConfig {
                epochs: 30,
                lr: 3e-3,
                optimizer: OptimizerKind::Adam,
            },
            phase2: PhaseConfig {
                epochs: 100,
                lr: 1e-3,
                optimizer: OptimizerKind::Adam,
            },
            phase3: PhaseConfig {
                epochs: 30,
                lr: 3e-3,
                optimizer: OptimizerKind::Adam,
            },
            lambda_dl: 0.005,
            lambda_bl: 0.01,
            bl_orientation: BlOrientation::TextualIntent,
            synth_fraction: 0.5,
            semantic_tuning: true,
            decoder: DecoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_points == 0 {
            return fail("batch_points must be >= 1".into());
        }
        if self.feature_dim == 0 || self.encoder_hidden.contains(&0) || self.classifier_hidden.contains(&0) {
            return fail("layer sizes must be positive".into());
        }
        for (name, p) in [
            ("phase1", &self.phase1),
            ("phase2", &self.phase2),
            ("phase3", &self.phase3),
        ] {
            if !(p.lr > 0.0) || !p.lr.is_finite() {
                return fail(format!("{name}.lr must be > 0"));
            }
        }
        if !(self.poly_power >= 0.0) {
            return fail("poly_power must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.synth_fraction) {
            return fail("synth_fraction must lie in [0, 1)".into());
        }
        self.evidential_weights().validate()?;
        self.decoder.validate()
    }

    pub fn evidential_weights(&self) -> EvidentialLossWeights {
        EvidentialLossWeights {
            lambda_dl: self.lambda_dl,
            lambda_bl: self.lambda_bl,
            bl_orientation: self.bl_orientation,
        }
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn phase_rng(seed: u64, phase: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(u64::from(phase)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
}

pub(crate) struct LossAccumulator {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl LossAccumulator {
    pub(crate) fn new() -> Self {
        LossAccumulator {
            sums: BTreeMap::new(),
            count: 0,
        }
    }

    pub(crate) fn add(&mut self, terms: &[(&str, f64)]) {
        for (k, v) in terms {
            *self.sums.entry((*k).to_string()).or_default() += v;
        }
        self.count += 1;
    }

    pub(crate) fn finish(self, phase: u8, epoch: usize, lr: f64) -> EpochRecord {
        let n = self.count.max(1) as f64;
        let record = EpochRecord {
            phase,
            epoch,
            steps: self.count,
            lr,
            losses: self.sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        };
        log::info!("phase {phase} epoch {epoch}: {:?}", record.losses);
        record
    }
}

pub fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Turns numerical failures inside a step into a divergence report.
pub(crate) fn diverged(phase: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::Diverged {
            phase,
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

pub fn points_tensor<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Result<(Tensor2, Vec<usize>)> {
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut labels = Vec::new();
    for s in scenes {
        rows.extend(s.points.iter().map(Vec::as_slice));
        labels.extend_from_slice(&s.labels);
    }
    if rows.is_empty() {
        return Err(Error::Empty("scene points"));
    }
    Ok((Tensor2::from_rows(&rows)?, labels))
}

fn seen_slots(catalog: &ClassCatalog, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            catalog.seen_slot(l).ok_or(Error::InvalidLabel {
                label: l,
                reason: "training labels must be seen classes",
            })
        })
        .collect()
}

/// Point-wise feature extractor: an MLP followed by `output` activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mlp: Mlp,
    pub output: Activation,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(point_dim: usize, config: &TrainConfig, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![point_dim];
        sizes.extend(&config.encoder_hidden);
        sizes.push(config.feature_dim);
        Ok(Encoder {
            mlp: Mlp::init(&sizes, Activation::Relu, rng)?,
            output: Activation::Identity,
        })
    }

    pub fn point_dim(&self) -> usize {
        self.mlp.inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.outputs()
    }

    pub fn forward_var(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let h = bound.forward(tape, x)?;
        self.output.apply(tape, h)
    }

    pub fn features(&self, points: &Tensor2) -> Result<Tensor2> {
        if points.cols() != self.point_dim() {
            return Err(Error::ShapeMismatch {
                op: "encoder",
                left: points.shape(),
                right: (self.point_dim(), self.feature_dim()),
            });
        }
        let mut tape = Tape::new();
        let bound = self.mlp.bind(&mut tape);
        let x = tape.leaf(points.clone());
        let f = self.forward_var(&mut tape, &bound, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn checksum(&self) -> String {
        tensor_checksum(self.mlp.tensors())
    }
}

#[derive(Clone, Debug)]
pub struct Phase1Output {
    pub encoder: Encoder,
    pub history: Vec<EpochRecord>,
}

fn require_seen_only(dataset: &Dataset) -> Result<()> {
    let bad: Vec<String> = dataset
        .train
        .iter()
        .filter(|s| {
            s.labels
                .iter()
                .any(|&l| l >= dataset.catalog.n_classes() || !dataset.catalog.is_seen(l))
        })
        .map(|s| format!("unseen-in-train: scene {}", s.scene_id))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(bad))
    }
}

fn gradients_for(grads: &crate::diffcore::Gradients, vars: &[Var], like: &[&Tensor2]) -> Vec<Tensor2> {
    vars.iter().zip(like).map(|(v, t)| grads.wrt(*v, t)).collect()
}

/// Phase 1: encoder plus a temporary seen-class head under cross-entropy.
pub fn phase1_train_encoder(dataset: &Dataset, config: &TrainConfig) -> Result<Phase1Output> {
    config.validate()?;
    require_seen_only(dataset)?;
    let catalog = &dataset.catalog;
    let mut rng = phase_rng(config.seed, 1);
    let (points, labels) = points_tensor(&dataset.train)?;
    let slots = seen_slots(catalog, &labels)?;

    let mut encoder = Encoder::init(points.cols(), config, &mut rng)?;
    let mut head = Linear::init(config.feature_dim, catalog.n_seen(), &mut rng);

    let n = points.rows();
    let per_epoch = n.div_ceil(config.batch_points);
    let total = per_epoch * config.phase1.epochs;
    let mut opt = {
        let mut params = encoder.mlp.tensors();
        params.extend([&head.weight, &head.bias]);
        Optimizer::for_params(config.phase1.optimizer, &params)
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.phase1.epochs);
    let mut step = 0;
    for epoch in 0..config.phase1.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossAccumulator::new();
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_points) {
            lr = poly_lr(config.phase1.lr, step, total, config.poly_power)?;
            let batch_slots: Vec<usize> = chunk.iter().map(|&i| slots[i]).collect();
            let mut tape = Tape::new();
            let enc = encoder.mlp.bind(&mut tape);
            let hb = head.bind(&mut tape);
            let x = tape.leaf(points.select_rows(chunk));
            let run = |tape: &mut Tape| -> Result<(Var, usize)> {
                let f = encoder.forward_var(tape, &enc, x)?;
                let logits = hb.forward(tape, f)?;
                let loss = cross_entropy_var(tape, logits, &batch_slots)?;
                let correct = tape
                    .value(logits)
                    .argmax_rows()
                    .iter()
                    .zip(&batch_slots)
                    .filter(|(a, b)| a == b)
                    .count();
                Ok((loss, correct))
            };
            let (loss, correct) = run(&mut tape).map_err(diverged("phase1", step))?;
            let grads = tape.backward(loss).map_err(diverged("phase1", step))?;
            let mut vars = enc.vars();
            vars.extend([hb.weight, hb.bias]);
            let g = {
                let mut like = encoder.mlp.tensors();
                like.extend([&head.weight, &head.bias]);
                gradients_for(&grads, &vars, &like)
            };
            let mut params = encoder.mlp.tensors_mut();
            params.extend([&mut head.weight, &mut head.bias]);
            opt.step(params, &g, lr)?;
            acc.add(&[
                ("ce", tape.value(loss).item()),
                ("accuracy", correct as f64 / chunk.len() as f64),
            ]);
            step += 1;
        }
        history.push(acc.finish(1, epoch, lr));
    }
    Ok(Phase1Output { encoder, history })
}

#[derive(Clone, Debug)]
pub struct Phase2Output {
    pub decoder: Decoder,
    pub tuning: Option<TuningLayer>,
    pub history: Vec<EpochRecord>,
}

/// Phase 2: decoder and tuning layer against the frozen encoder.
pub fn phase2_train_decoder(encoder: &Encoder, dataset: &Dataset, config: &TrainConfig) -> Result<Phase2Output> {
    config.validate()?;
    require_seen_only(dataset)?;
    let run = train_decoder(encoder, dataset, config)?;
    Ok(Phase2Output {
        decoder: run.decoder,
        tuning: run.tuning,
        history: run.history,
    })
}

/// Fused embedding for class `class` under `descriptor` classes, or the raw
/// embedding when semantic tuning is off.
pub fn fused_embedding(
    catalog: &ClassCatalog,
    tuning: Option<&TuningLayer>,
    class: usize,
    present: &[usize],
) -> Result<Vec<f64>> {
    let t = catalog.embedding(class);
    match tuning {
        Some(layer) => tune(
            t,
            &scene_descriptor(present.iter().copied(), catalog.n_classes())?,
            layer,
        ),
        None => Ok(t.to_vec()),
    }
}

#[derive(Clone, Debug)]
pub struct Phase3Output {
    pub classifier: Mlp,
    pub uncertainty: Mlp,
    pub history: Vec<EpochRecord>,
    pub encoder_checksum: String,
    pub decoder_checksum: String,
}

pub fn head_mlp<R: Rng + ?Sized>(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut R) -> Result<Mlp> {
    let mut sizes = vec![inputs];
    sizes.extend(hidden);
    sizes.push(outputs);
    Mlp::init(&sizes, Activation::Relu, rng)
}

pub fn decoder_checksum(decoder: &Decoder, tuning: Option<&TuningLayer>) -> String {
    let mut tensors = decoder.tensors();
    if let Some(t) = tuning {
        tensors.extend(t.tensors());
    }
    tensor_checksum(tensors)
}

/// Phase 3: classifier `C` and uncertainty head `U` on real seen features
/// mixed with synthetic unseen features.
pub fn phase3_train_classifier(
    encoder: &Encoder,
    decoder: &Decoder,
    tuning: Option<&TuningLayer>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Phase3Output> {
    config.validate()?;
    require_seen_only(dataset)?;
    let catalog = &dataset.catalog;
    let enc_before = encoder.checksum();
    let dec_before = decoder_checksum(decoder, tuning);
    let mut rng = phase_rng(config.seed, 3);

    let (points, labels) = points_tensor(&dataset.train)?;
    let features = encoder.features(&points)?;
    let compositions: Vec<Vec<usize>> = dataset.train.iter().map(Scene::classes_present).collect();

    let mut classifier = head_mlp(
        config.feature_dim,
        &config.classifier_hidden,
        catalog.n_classes(),
        &mut rng,
    )?;
    let mut uhead = head_mlp(
        config.feature_dim,
        &config.classifier_hidden,
        catalog.n_seen(),
        &mut rng,
    )?;

    let n_syn = (config.batch_points as f64 * config.synth_fraction).round() as usize;
    let n_real = (config.batch_points - n_syn).max(1);
    let n = features.rows();
    let per_epoch = n.div_ceil(n_real);
    let total = per_epoch * config.phase3.epochs;
    let weights = config.evidential_weights();
    let unseen = catalog.unseen_ids();

    let mut opt = {
        let mut p = classifier.tensors();
        p.extend(uhead.tensors());
        Optimizer::for_params(config.phase3.optimizer, &p)
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.phase3.epochs);
    let mut step = 0;
    for epoch in 0..config.phase3.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossAccumulator::new();
        let mut lr = 0.0;
        for chunk in order.chunks(n_real) {
            lr = poly_lr(config.phase3.lr, step, total, config.poly_power)?;
            let mut batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut targets: Vec<Option<usize>> = batch_labels.iter().map(|&l| catalog.seen_slot(l)).collect();
            let real = features.select_rows(chunk);
            let x = if n_syn > 0 && !unseen.is_empty() {
                let syn_labels: Vec<usize> = (0..n_syn)
                    .map(|_| *unseen.choose(&mut rng).expect("nonempty"))
                    .collect();
                let mut in_batch = syn_labels.clone();
                in_batch.sort_unstable();
                in_batch.dedup();
                let mut fused = Vec::with_capacity(n_syn);
                for &u in &syn_labels {
                    let mut present = compositions.choose(&mut rng).expect("train scenes").clone();
                    present.extend(&in_batch);
                    fused.push(fused_embedding(catalog, tuning, u, &present)?);
                }
                let z = sample_noise(n_syn, decoder.noise_dim, &mut rng);
                let synth = decoder.synthesize(&z, &Tensor2::from_rows(&fused)?)?;
                batch_labels.extend(&syn_labels);
                targets.extend(std::iter::repeat_n(None, n_syn));
                Tensor2::vstack(&[&real, &synth])?
            } else {
                real
            };

            let mut tape = Tape::new();
            let cb = classifier.bind(&mut tape);
            let ub = uhead.bind(&mut tape);
            let xv = tape.leaf(x);
            let run = |tape: &mut Tape| {
                let logits = cb.forward(tape, xv)?;
                let ce = cross_entropy_var(tape, logits, &batch_labels)?;
                let ulogits = ub.forward(tape, xv)?;
                let alpha = alpha_from_logits_var(tape, ulogits)?;
                let ev = loss_ev_var(tape, alpha, &targets, &weights)?;
                let total = tape.add(ce, ev.total)?;
                Ok::<_, Error>((total, ce, ev.breakdown))
            };
            let (loss, ce, ev) = run(&mut tape).map_err(diverged("phase3", step))?;
            let grads = tape.backward(loss).map_err(diverged("phase3", step))?;
            let mut vars = cb.vars();
            vars.extend(ub.vars());
            let g = {
                let mut like = classifier.tensors();
                like.extend(uhead.tensors());
                gradients_for(&grads, &vars, &like)
            };
            let mut params = classifier.tensors_mut();
            params.extend(uhead.tensors_mut());
            opt.step(params, &g, lr)?;
            acc.add(&[
                ("ce", tape.value(ce).item()),
                ("ev", ev.total),
                ("sl", ev.sl),
                ("dl", ev.dl),
                ("bl", ev.bl),
            ]);
            step += 1;
        }
        history.push(acc.finish(3, epoch, lr));
    }

    let encoder_checksum = encoder.checksum();
    let decoder_checksum = decoder_checksum(decoder, tuning);
    if encoder_checksum != enc_before || decoder_checksum != dec_before {
        return Err(Error::Validation(vec![
            "phase 3 modified frozen encoder or decoder parameters".into(),
        ]));
    }
    Ok(Phase3Output {
        classifier,
        uncertainty: uhead,
        history,
        encoder_checksum,
        decoder_checksum,
    })
}

/// Class posteriors and uncertainty for a batch of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub probs: Vec<ProbabilityVector>,
    pub uncertainty: Vec<f64>,
}

/// Everything inference needs plus the frozen generator, kept so a full
/// parameter set can be checkpointed and checked.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub tuning: Option<TuningLayer>,
    pub classifier: Mlp,
    pub uncertainty: Mlp,
}

impl ModelParameters {
    /// Checks the dimension chain `N_p → N_f → {N_c, N_s}`.
    pub fn check_dims(&self, catalog: &ClassCatalog) -> Result<()> {
        let nf = self.encoder.feature_dim();
        let mut bad = Vec::new();
        if self.classifier.inputs() != nf || self.uncertainty.inputs() != nf || self.decoder.feature_dim() != nf {
            bad.push(format!("feature dimension {nf} does not match every head"));
        }
        if self.classifier.outputs() != catalog.n_classes() {
            bad.push(format!(
                "classifier has {} outputs for {} classes",
                self.classifier.outputs(),
                catalog.n_classes()
            ));
        }
        if self.uncertainty.outputs() != catalog.n_seen() {
            bad.push(format!(
                "uncertainty head has {} outputs for {} seen classes",
                self.uncertainty.outputs(),
                catalog.n_seen()
            ));
        }
        if self.decoder.semantic_dim() != catalog.dim() {
            bad.push("decoder semantic dimension differs from the catalog".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn infer(&self, points: &Tensor2) -> Result<Inference> {
        let f = self.encoder.features(points)?;
        let logits = self.classifier.forward(&f)?;
        let probs = logits.iter_rows().map(softmax_posterior).collect();
        let ulogits = self.uncertainty.forward(&f)?;
        let uncertainty = evidence_from_logits(&ulogits)
            .iter()
            .map(|a| uncertainty(a).value())
            .collect();
        Ok(Inference { probs, uncertainty })
    }
}

/// Runs all three phases in memory.
pub fn train_all(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParameters, Vec<EpochRecord>)> {
    let p1 = phase1_train_encoder(dataset, config)?;
    let p2 = phase2_train_decoder(&p1.encoder, dataset, config)?;
    let p3 = phase3_train_classifier(&p1.encoder, &p2.decoder, p2.tuning.as_ref(), dataset, config)?;
    let mut history = p1.history;
    history.extend(p2.history);
    history.extend(p3.history);
    Ok((
        ModelParameters {
            encoder: p1.encoder,
            decoder: p2.decoder,
            tuning: p2.tuning,
            classifier: p3.classifier,
            uncertainty: p3.uncertainty,
        },
        history,
    ))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn save_phase1(dir: &Path, encoder: &Encoder, config: &TrainConfig) -> Result<()> {
    let mut ck = Checkpoint::new("phase1", &config.hash(), config.seed);
    ck.push_mlp("encoder", &encoder.mlp)?;
    ck.set_meta("encoder.output", encoder.output)?;
    ck.set_meta("encoder.checksum", encoder.checksum())?;
    ck.save(&dir.join(PHASE1_FILE))
}

pub fn load_phase1(dir: &Path) -> Result<Encoder> {
    let mut ck = Checkpoint::load(&dir.join(PHASE1_FILE))?;
    Ok(Encoder {
        mlp: ck.take_mlp("encoder")?,
        output: ck.meta("encoder.output")?,
    })
}

pub fn save_phase2(
    dir: &Path,
    decoder: &Decoder,
    tuning: Option<&TuningLayer>,
    encoder: &Encoder,
    config: &TrainConfig,
) -> Result<()> {
    let mut ck = Checkpoint::new("phase2", &config.hash(), config.seed);
    ck.push_mlp("decoder", &decoder.mlp)?;
    ck.set_meta("decoder.noise_dim", decoder.noise_dim)?;
    ck.push("decoder.feature_mean", &Tensor2::row_vector(&decoder.feature_mean));
    ck.push("decoder.feature_std", &Tensor2::row_vector(&decoder.feature_std));
    ck.set_meta("semantic_tuning", tuning.is_some())?;
    if let Some(t) = tuning {
        ck.push("tuning.weight", &t.linear.weight);
        ck.push("tuning.bias", &t.linear.bias);
    }
    ck.set_meta("encoder.checksum", encoder.checksum())?;
    ck.set_meta("decoder.checksum", decoder_checksum(decoder, tuning))?;
    ck.save(&dir.join(PHASE2_FILE))
}

pub fn load_phase2(dir: &Path) -> Result<(Decoder, Option<TuningLayer>, String)> {
    let mut ck = Checkpoint::load(&dir.join(PHASE2_FILE))?;
    let mlp = ck.take_mlp("decoder")?;
    let decoder = Decoder {
        mlp,
        noise_dim: ck.meta("decoder.noise_dim")?,
        feature_mean: ck.take("decoder.feature_mean")?.into_data(),
        feature_std: ck.take("decoder.feature_std")?.into_data(),
    };
    let tuning = if ck.meta::<bool>("semantic_tuning")? {
        Some(TuningLayer {
            linear: Linear {
                weight: ck.take("tuning.weight")?,
                bias: ck.take("tuning.bias")?,
            },
        })
    } else {
        None
    };
    Ok((decoder, tuning, ck.meta("encoder.checksum")?))
}

pub fn save_phase3(dir: &Path, out: &Phase3Output, config: &TrainConfig) -> Result<()> {
    let mut ck = Checkpoint::new("phase3", &config.hash(), config.seed);
    ck.push_mlp("classifier", &out.classifier)?;
    ck.push_mlp("uncertainty", &out.uncertainty)?;
    ck.set_meta("encoder.checksum", &out.encoder_checksum)?;
    ck.set_meta("decoder.checksum", &out.decoder_checksum)?;
    ck.save(&dir.join(PHASE3_FILE))
}

/// Loads all three checkpoints and verifies that they were trained against
/// each other.
pub fn load_model(dir: &Path) -> Result<ModelParameters> {
    let encoder = load_phase1(dir)?;
    let (decoder, tuning, enc_at_phase2) = load_phase2(dir)?;
    let mut ck = Checkpoint::load(&dir.join(PHASE3_FILE))?;
    let classifier = ck.take_mlp("classifier")?;
    let uncertainty = ck.take_mlp("uncertainty")?;
    let enc_at_phase3: String = ck.meta("encoder.checksum")?;
    let dec_at_phase3: String = ck.meta("decoder.checksum")?;
    let enc = encoder.checksum();
    let mut stale = Vec::new();
    if enc != enc_at_phase2 || enc != enc_at_phase3 {
        stale.push("encoder checkpoint does not match later phases".to_string());
    }
    if decoder_checksum(&decoder, tuning.as_ref()) != dec_at_phase3 {
        stale.push("decoder checkpoint does not match phase 3".to_string());
    }
    if !stale.is_empty() {
        return Err(Error::Validation(stale));
    }
    Ok(ModelParameters {
        encoder,
        decoder,
        tuning,
        classifier,
        uncertainty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{generate, BenchSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            feature_dim: 8,
            encoder_hidden: vec![16],
            classifier_hidden: vec![],
            batch_points: 64,
            phase1: PhaseConfig {
                epochs: 2,
                lr: 1e-2,
                optimizer: OptimizerKind::Adam,
            },
            phase2: PhaseConfig {
                epochs: 2,
                lr: 1e-3,
                optimizer: OptimizerKind::Adam,
            },
            phase3: PhaseConfig {
                epochs: 2,
                lr: 1e-2,
                optimizer: OptimizerKind::SgdMomentum,
            },
            decoder: DecoderConfig {
                noise_dim: 4,
                hidden: vec![16],
                samples_per_class: 8,
                ..DecoderConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate(&BenchSpec {
            n_seen: 3,
            n_unseen: 1,
            points_per_scene: 60,
            train_scenes: 4,
            eval_scenes: 2,
            classes_per_scene: 2,
            embedding_dim: 8,
            ..BenchSpec::acceptance()
        })
        .unwrap()
    }

    #[test]
    fn config_roundtrip_and_hash() {
        let c = TrainConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_ne!(partial.hash(), c.hash());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sed": 9}"#).is_err());
        assert!(TrainConfig {
            batch_points: 0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            synth_fraction: 1.0,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_epochs_return_initial_encoder() {
        let data = tiny_data();
        let cfg = TrainConfig {
            phase1: PhaseConfig {
                epochs: 0,
                ..tiny_config().phase1
            },
            ..tiny_config()
        };
        let out = phase1_train_encoder(&data, &cfg).unwrap();
        let mut rng = phase_rng(cfg.seed, 1);
        let fresh = Encoder::init(data.point_dim(), &cfg, &mut rng).unwrap();
        assert_eq!(out.encoder, fresh);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_isolated() {
        let data = tiny_data();
        let cfg = tiny_config();
        let (a, ha) = train_all(&data, &cfg).unwrap();
        let (b, hb) = train_all(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        a.check_dims(&data.catalog).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_phase1(dir.path(), &a.encoder, &cfg).unwrap();
        save_phase2(dir.path(), &a.decoder, a.tuning.as_ref(), &a.encoder, &cfg).unwrap();
        let p3 = phase3_train_classifier(&a.encoder, &a.decoder, a.tuning.as_ref(), &data, &cfg).unwrap();
        save_phase3(dir.path(), &p3, &cfg).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), a);

        // A retrained encoder invalidates the later checkpoints.
        let other = TrainConfig { seed: 5, ..cfg.clone() };
        let e2 = phase1_train_encoder(&data, &other).unwrap().encoder;
        save_phase1(dir.path(), &e2, &other).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn unseen_training_labels_rejected() {
        let mut data = tiny_data();
        data.train[0].labels[0] = data.catalog.unseen_ids()[0];
        assert!(matches!(
            phase1_train_encoder(&data, &tiny_config()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn separable_toy_is_learned() {
        // Two seen classes far apart along x.
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..200 {
            let c = i % 2;
            let x = if c == 0 { -2.0 } else { 2.0 };
            points.push(vec![x + rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0), 0.0]);
            labels.push(c);
        }
        let catalog = ClassCatalog::new(vec![
            ("a".into(), true, vec![1.0, 0.0]),
            ("b".into(), true, vec![0.0, 1.0]),
            ("c".into(), false, vec![1.0, 1.0]),
        ])
        .unwrap();
        let scene = Scene {
            scene_id: "toy".into(),
            points,
            labels,
        };
        let data = Dataset {
            train: vec![scene.clone()],
            eval: vec![scene],
            catalog,
            spec: None,
        };
        let cfg = TrainConfig {
            phase1: PhaseConfig {
                epochs: 50,
                lr: 1e-2,
                optimizer: OptimizerKind::Adam,
            },
            ..tiny_config()
        };
        let out = phase1_train_encoder(&data, &cfg).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.losses["accuracy"] > 0.99, "{last:?}");
    }
}
