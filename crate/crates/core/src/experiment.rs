// SPDX-License-Identifier: Apache-2.0

//! Evaluation, diagnostics and the on-disk training recipe shared by the
//! command-line tool and the end-to-end tests.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchgen::{self, BenchSpec, ValidationReport};
use crate::calibration::{calibrated_prediction, dynamic_eta, u_bar_from_predictions, Calibration, ProbabilityVector};
use crate::dataset::{write_atomic, Dataset, Scene};
use crate::error::{Error, Result};
use crate::metrics::{
    eta_sweep, group_scores, reliability, ConfusionMatrix, GroupScores, Prf, ReliabilityReport, SweepRow, DEFAULT_BINS,
};
use crate::pipeline::{
    self, load_model, load_phase1, load_phase2, points_tensor, save_phase1, save_phase2, save_phase3, write_log,
    EpochRecord, ModelParameters, TrainConfig, PHASE1_FILE, PHASE2_FILE, PHASE3_FILE,
};
use crate::semantics::ClassCatalog;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// The training config of the most recent phase, kept beside the checkpoints.
pub const CONFIG_FILE: &str = "config.json";

/// Where the mean uncertainty `ū` for dynamic calibration is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UBarScope {
    #[default]
    Dataset,
    Scene,
}

/// Posteriors and uncertainties for every evaluation point, scene by scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub probs: Vec<ProbabilityVector>,
    pub uncertainty: Vec<f64>,
    pub labels: Vec<usize>,
    /// Start offset of each scene; one extra trailing entry holds the total.
    pub scene_offsets: Vec<usize>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn predict(model: &ModelParameters, scenes: &[Scene]) -> Result<Predictions> {
    let per_scene: Vec<pipeline::Inference> = scenes
        .par_iter()
        .map(|s| {
            let (x, _) = points_tensor([s])?;
            model.infer(&x)
        })
        .collect::<Result<_>>()?;
    let mut out = Predictions {
        probs: Vec::new(),
        uncertainty: Vec::new(),
        labels: Vec::new(),
        scene_offsets: vec![0],
    };
    for (s, inf) in scenes.iter().zip(per_scene) {
        out.probs.extend(inf.probs);
        out.uncertainty.extend(inf.uncertainty);
        out.labels.extend_from_slice(&s.labels);
        out.scene_offsets.push(out.labels.len());
    }
    Ok(out)
}

/// Per-point η for `calibration`, plus the `ū` values used.
pub fn point_etas(
    pred: &Predictions,
    calibration: Calibration,
    scope: UBarScope,
    seen_mask: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    match calibration {
        Calibration::None => (vec![0.0; pred.len()], Vec::new()),
        Calibration::Static { eta } => (vec![eta; pred.len()], Vec::new()),
        Calibration::Dynamic => {
            let predicted_unseen = |p: &ProbabilityVector| !seen_mask[p.argmax()];
            let ranges: Vec<(usize, usize)> = match scope {
                UBarScope::Dataset => vec![(0, pred.len())],
                UBarScope::Scene => pred.scene_offsets.windows(2).map(|w| (w[0], w[1])).collect(),
            };
            let mut etas = Vec::with_capacity(pred.len());
            let mut u_bars = Vec::with_capacity(ranges.len());
            for (a, b) in ranges {
                let u = &pred.uncertainty[a..b];
                let ub = u_bar_from_predictions(pred.probs[a..b].iter().map(predicted_unseen), u);
                etas.extend(u.iter().map(|&v| dynamic_eta(v, ub)));
                u_bars.push(ub);
            }
            (etas, u_bars)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub seen: bool,
    pub support: u64,
    pub iou: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_uncertainty: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub calibration: String,
    pub u_bar_scope: Option<UBarScope>,
    pub u_bar: Vec<f64>,
    pub mean_eta: f64,
    pub n_points: usize,
    pub scores: GroupScores,
    pub classes: Vec<ClassReport>,
    pub confusion: Vec<Vec<u64>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// A zero static factor is the uncalibrated model.
fn normalize(calibration: Calibration) -> Calibration {
    match calibration {
        Calibration::Static { eta: 0.0 } => Calibration::None,
        other => other,
    }
}

pub fn evaluate_predictions(
    pred: &Predictions,
    catalog: &ClassCatalog,
    calibration: Calibration,
    scope: UBarScope,
) -> Result<EvalReport> {
    if pred.is_empty() {
        return Err(Error::Empty("evaluation points"));
    }
    let calibration = normalize(calibration);
    let mask = catalog.seen_mask();
    let (etas, u_bar) = point_etas(pred, calibration, scope, &mask);
    let predicted: Vec<usize> = pred
        .probs
        .iter()
        .zip(&etas)
        .map(|(p, &eta)| calibrated_prediction(p.as_slice(), eta, &mask))
        .collect();
    let cm = ConfusionMatrix::from_predictions(&pred.labels, &predicted, catalog.n_classes())?;
    let scores = group_scores(&cm, &mask)?;
    let classes = catalog
        .classes()
        .iter()
        .map(|c| {
            let k = c.id;
            let prf = Prf::from_counts(cm.tp(k), cm.fp(k), cm.fn_(k));
            ClassReport {
                name: c.name.clone(),
                seen: c.seen,
                support: cm.support(k),
                iou: cm.iou(k),
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                mean_uncertainty: mean(
                    pred.labels
                        .iter()
                        .zip(&pred.uncertainty)
                        .filter(|(&l, _)| l == k)
                        .map(|(_, &u)| u),
                ),
            }
        })
        .collect();
    Ok(EvalReport {
        calibration: calibration.to_string(),
        u_bar_scope: (calibration == Calibration::Dynamic).then_some(scope),
        u_bar,
        mean_eta: mean(etas.iter().copied()).unwrap_or(0.0),
        n_points: pred.len(),
        scores,
        classes,
        confusion: cm.rows(),
    })
}

pub fn evaluate(
    model: &ModelParameters,
    dataset: &Dataset,
    calibration: Calibration,
    scope: UBarScope,
) -> Result<EvalReport> {
    let pred = predict(model, &dataset.eval)?;
    evaluate_predictions(&pred, &dataset.catalog, calibration, scope)
}

/// Static grid rows followed by the dynamic reference row.
pub fn sweep(pred: &Predictions, catalog: &ClassCatalog, grid: &[f64], scope: UBarScope) -> Result<Vec<SweepRow>> {
    let mask = catalog.seen_mask();
    let mut rows = eta_sweep(&pred.probs, &pred.labels, &mask, grid)?;
    let dynamic = evaluate_predictions(pred, catalog, Calibration::Dynamic, scope)?;
    rows.push(SweepRow::from_scores(None, &dynamic.scores));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassUncertainty {
    pub name: String,
    pub seen: bool,
    pub mean_uncertainty: Option<f64>,
    pub iou_uncalibrated: Option<f64>,
    pub iou_dynamic: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub reliability: ReliabilityReport,
    pub mean_uncertainty_seen: f64,
    pub mean_uncertainty_unseen: f64,
    pub classes: Vec<ClassUncertainty>,
}

pub fn diagnose(pred: &Predictions, catalog: &ClassCatalog, scope: UBarScope) -> Result<Diagnosis> {
    let rel = reliability(&pred.probs, &pred.labels, DEFAULT_BINS)?;
    let plain = evaluate_predictions(pred, catalog, Calibration::None, scope)?;
    let dynamic = evaluate_predictions(pred, catalog, Calibration::Dynamic, scope)?;
    let group_mean = |seen: bool| {
        mean(
            pred.labels
                .iter()
                .zip(&pred.uncertainty)
                .filter(|(&l, _)| catalog.is_seen(l) == seen)
                .map(|(_, &u)| u),
        )
        .unwrap_or(f64::NAN)
    };
    let classes = plain
        .classes
        .iter()
        .zip(&dynamic.classes)
        .map(|(a, b)| ClassUncertainty {
            name: a.name.clone(),
            seen: a.seen,
            mean_uncertainty: a.mean_uncertainty,
            iou_uncalibrated: a.iou,
            iou_dynamic: b.iou,
        })
        .collect();
    Ok(Diagnosis {
        reliability: rel,
        mean_uncertainty_seen: group_mean(true),
        mean_uncertainty_unseen: group_mean(false),
        classes,
    })
}

// ---------------------------------------------------------------------------
// On-disk workflow
// ---------------------------------------------------------------------------

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

/// Generates, validates and writes a benchmark dataset.
pub fn generate_dataset(spec: &BenchSpec, out: &Path) -> Result<(Dataset, ValidationReport)> {
    let dataset = benchgen::generate(spec)?;
    let report = benchgen::validate(&dataset).into_result()?;
    dataset.save(out)?;
    Ok((dataset, report))
}

/// Loads a dataset directory and rejects it if validation fails.
pub fn load_validated(dir: &Path) -> Result<Dataset> {
    let dataset = Dataset::load(dir)?;
    benchgen::validate(&dataset).into_result()?;
    Ok(dataset)
}

/// Runs one training phase against the checkpoints already in `model_dir`.
pub fn train_phase(phase: u8, config: &TrainConfig, dataset: &Dataset, model_dir: &Path) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let history = match phase {
        1 => {
            let out = pipeline::phase1_train_encoder(dataset, config)?;
            save_phase1(model_dir, &out.encoder, config)?;
            out.history
        }
        2 => {
            let encoder = load_phase1(model_dir)?;
            let out = pipeline::phase2_train_decoder(&encoder, dataset, config)?;
            save_phase2(model_dir, &out.decoder, out.tuning.as_ref(), &encoder, config)?;
            out.history
        }
        3 => {
            let encoder = load_phase1(model_dir)?;
            let (decoder, tuning, enc_at_phase2) = load_phase2(model_dir)?;
            if enc_at_phase2 != encoder.checksum() {
                return Err(Error::Validation(vec![
                    "phase 2 checkpoint was trained against a different encoder".into(),
                ]));
            }
            let out = pipeline::phase3_train_classifier(&encoder, &decoder, tuning.as_ref(), dataset, config)?;
            save_phase3(model_dir, &out, config)?;
            out.history
        }
        other => return Err(Error::Config(format!("phase must be 1, 2 or 3, got {other}"))),
    };
    write_log(&model_dir.join(pipeline::log_file(phase)), &history)?;
    write_json(&model_dir.join(CONFIG_FILE), config)?;
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path.to_path_buf()));
        }
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSeeds {
    pub root: u64,
    pub phase1: u64,
    pub phase2: u64,
    pub phase3: u64,
}

impl PhaseSeeds {
    pub fn from_root(root: u64) -> Self {
        PhaseSeeds {
            root,
            phase1: root.wrapping_add(1),
            phase2: root.wrapping_add(2),
            phase3: root.wrapping_add(3),
        }
    }
}

/// Record of what produced a set of artifacts. Every referenced file is
/// hashed when the manifest is built, so a missing file is an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: PhaseSeeds,
    pub dataset: PathBuf,
    pub checkpoints: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
}

impl ExperimentManifest {
    pub fn build(config: &TrainConfig, dataset: &Path, checkpoints: &[PathBuf], artifacts: &[PathBuf]) -> Result<Self> {
        Ok(ExperimentManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config.hash(),
            seeds: PhaseSeeds::from_root(config.seed),
            dataset: dataset.to_path_buf(),
            checkpoints: checkpoints.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            artifacts: artifacts.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        })
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }
}

pub fn checkpoint_paths(model_dir: &Path) -> Vec<PathBuf> {
    [PHASE1_FILE, PHASE2_FILE, PHASE3_FILE]
        .iter()
        .map(|f| model_dir.join(f))
        .collect()
}

/// Output locations of [`run_recipe`].
#[derive(Clone, Debug)]
pub struct RecipeOutputs {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report: EvalReport,
    pub report_path: PathBuf,
}

/// gen-data → train 1, 2, 3 → eval with dynamic calibration, all on disk
/// under `root`.
pub fn run_recipe(spec: &BenchSpec, config: &TrainConfig, root: &Path) -> Result<RecipeOutputs> {
    let data_dir = root.join("data");
    let model_dir = root.join("model");
    generate_dataset(spec, &data_dir)?;
    let dataset = load_validated(&data_dir)?;
    for phase in 1..=3 {
        train_phase(phase, config, &dataset, &model_dir)?;
    }
    let model = load_model(&model_dir)?;
    let report = evaluate(&model, &dataset, Calibration::Dynamic, UBarScope::Dataset)?;
    let report_path = root.join("report.json");
    write_json(&report_path, &report)?;
    Ok(RecipeOutputs {
        data_dir,
        model_dir,
        report,
        report_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::softmax_posterior;

    fn catalog() -> ClassCatalog {
        ClassCatalog::new(vec![
            ("a".into(), true, vec![1.0]),
            ("b".into(), true, vec![2.0]),
            ("c".into(), false, vec![3.0]),
        ])
        .unwrap()
    }

    fn preds() -> Predictions {
        let logits = [[2.0, 0.0, 1.5], [0.0, 2.0, 0.1], [0.0, 0.0, 3.0], [1.0, 0.9, 0.95]];
        Predictions {
            probs: logits.iter().map(|l| softmax_posterior(l)).collect(),
            uncertainty: vec![0.9, 0.1, 0.6, 0.8],
            labels: vec![2, 1, 2, 0],
            scene_offsets: vec![0, 2, 4],
        }
    }

    #[test]
    fn static_zero_matches_uncalibrated() {
        let c = catalog();
        let a = evaluate_predictions(&preds(), &c, Calibration::None, UBarScope::Dataset).unwrap();
        let b = evaluate_predictions(&preds(), &c, Calibration::Static { eta: 0.0 }, UBarScope::Dataset).unwrap();
        assert_eq!(to_json_bytes(&a).unwrap(), to_json_bytes(&b).unwrap());
    }

    #[test]
    fn dynamic_calibration_uses_u_bar_of_predicted_unseen() {
        let c = catalog();
        let p = preds();
        let (etas, ub) = point_etas(&p, Calibration::Dynamic, UBarScope::Dataset, &c.seen_mask());
        // Only the third point is predicted unseen before calibration.
        assert_eq!(ub, vec![0.6]);
        assert!((etas[0] - 0.3).abs() < 1e-12);
        assert_eq!(etas[1], 0.0);
        let r = evaluate_predictions(&p, &c, Calibration::Dynamic, UBarScope::Dataset).unwrap();
        // Point 0: p ≈ (0.53, 0.07, 0.39) minus 0.3 on seen → class 2.
        assert_eq!(r.confusion[2][2], 2);

        let (_, per_scene) = point_etas(&p, Calibration::Dynamic, UBarScope::Scene, &c.seen_mask());
        // Scene 0 has no predicted-unseen point and falls back to its mean.
        assert_eq!(per_scene, vec![0.5, 0.6]);
    }

    #[test]
    fn manifest_requires_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.json");
        std::fs::write(&f, b"{}").unwrap();
        let cfg = TrainConfig::default();
        let m = ExperimentManifest::build(&cfg, dir.path(), &[], std::slice::from_ref(&f)).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: ExperimentManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.hash(), m.hash());
        assert_eq!(m.seeds.phase2, cfg.seed + 2);
        let missing = dir.path().join("nope");
        assert!(matches!(
            ExperimentManifest::build(&cfg, dir.path(), &[missing], &[]),
            Err(Error::MissingPrerequisite(_))
        ));
    }
}
