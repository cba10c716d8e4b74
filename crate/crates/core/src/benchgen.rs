// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic benchmark for generalized zero-shot segmentation.
//!
//! Every class is an anisotropic Gaussian blob in ℝ³. Each unseen class is
//! placed next to a seen "relative" at distance `(1 − ρ)·RELATIVE_SPAN`, and
//! its description vector is built to have cosine similarity exactly `ρ` with
//! the relative's. Description vectors lead with the class's geometric
//! statistics (mean, per-axis spread, and color when enabled) followed by
//! random noise dimensions, so the semantic-to-geometric transfer a decoder
//! has to learn is real but imperfect.
//!
//! Training scenes contain seen classes only. Evaluation scenes always
//! contain at least one unseen class, and the evaluation split covers every
//! class.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scene};
use crate::error::{Error, Result};
use crate::semantics::ClassCatalog;

const LAYOUT_RADIUS: f64 = 3.0;
const MIN_SEEN_SEPARATION: f64 = 2.0;
const MIN_UNSEEN_SEPARATION: f64 = 1.2;
const RELATIVE_SPAN: f64 = 8.0;
const NOISE_STD: f64 = 1.0;
const COLOR_NOISE: f64 = 0.05;
const MAX_TRIES: usize = 10_000;

/// Cosines must land within this distance of ρ.
pub const COSINE_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub points_per_scene: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    #[serde(default = "default_classes_per_scene")]
    pub classes_per_scene: usize,
    pub cluster_std: f64,
    pub embedding_dim: usize,
    /// Target cosine between an unseen class embedding and its relative's.
    pub relatedness: f64,
    /// Magnitude of the per-class displacement every present class applies
    /// to the whole scene.
    #[serde(default)]
    pub context_strength: f64,
    #[serde(default)]
    pub color: bool,
    pub seed: u64,
}

fn default_classes_per_scene() -> usize {
    4
}

impl BenchSpec {
    /// The fixed dataset the end-to-end acceptance run is measured on.
    pub fn acceptance() -> Self {
        BenchSpec {
            n_seen: 6,
            n_unseen: 2,
            points_per_scene: 512,
            train_scenes: 40,
            eval_scenes: 10,
            classes_per_scene: 4,
            cluster_std: 0.35,
            embedding_dim: 16,
            relatedness: 0.8,
            context_strength: 0.0,
            color: false,
            seed: 1,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: BenchSpec =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn point_dim(&self) -> usize {
        if self.color {
            6
        } else {
            3
        }
    }

    fn geometry_len(&self) -> usize {
        if self.color {
            9
        } else {
            6
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_seen < 2 {
            return fail(format!("n_seen must be >= 2, got {}", self.n_seen));
        }
        if self.n_unseen < 1 {
            return fail("n_unseen must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return fail(format!("relatedness must lie in [0,1], got {}", self.relatedness));
        }
        if !(self.cluster_std >= 0.0) || !(self.context_strength >= 0.0) {
            return fail("cluster_std and context_strength must be >= 0".into());
        }
        if self.classes_per_scene < 2 || self.classes_per_scene > self.n_seen {
            return fail(format!(
                "classes_per_scene must lie in [2, n_seen], got {}",
                self.classes_per_scene
            ));
        }
        if self.points_per_scene < self.classes_per_scene {
            return fail("points_per_scene must cover every class in a scene".into());
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return fail("both splits need at least one scene".into());
        }
        if self.embedding_dim < self.geometry_len() {
            return fail(format!(
                "embedding_dim must be >= {} to hold the geometric statistics",
                self.geometry_len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGeometry {
    pub name: String,
    pub seen: bool,
    pub mean: [f64; 3],
    pub spread: [f64; 3],
    pub color: [f64; 3],
    pub context: [f64; 3],
    /// Seen class an unseen class was derived from.
    pub relative: Option<usize>,
}

/// Class geometry and description vectors; a pure function of the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub classes: Vec<ClassGeometry>,
    pub embeddings: Vec<Vec<f64>>,
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

fn unit3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = gaussian3(rng);
        let n = norm(&v);
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn class_name(seen: bool, i: usize) -> String {
    if seen {
        format!("seen-{i}")
    } else {
        format!("unseen-{i}")
    }
}

pub fn layout(spec: &BenchSpec) -> Result<Layout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes: Vec<ClassGeometry> = Vec::with_capacity(spec.n_classes());

    let spread =
        |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| spec.cluster_std * rng.random_range(0.7..1.3)) };
    let context = |rng: &mut ChaCha8Rng| unit3(rng).map(|x| x * spec.context_strength);

    for i in 0..spec.n_seen {
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let m: [f64; 3] = std::array::from_fn(|_| rng.random_range(-LAYOUT_RADIUS..LAYOUT_RADIUS));
            if classes.iter().all(|c| dist3(&c.mean, &m) >= MIN_SEEN_SEPARATION) {
                placed = Some(m);
                break;
            }
        }
        let mean = placed.ok_or_else(|| Error::Config("cannot place seen classes apart".into()))?;
        classes.push(ClassGeometry {
            name: class_name(true, i),
            seen: true,
            mean,
            spread: spread(&mut rng),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            context: context(&mut rng),
            relative: None,
        });
    }

    let mut relatives: Vec<usize> = (0..spec.n_seen).collect();
    relatives.shuffle(&mut rng);
    let offset = (1.0 - spec.relatedness) * RELATIVE_SPAN;
    for u in 0..spec.n_unseen {
        let rel = relatives[u % spec.n_seen];
        let base = classes[rel].mean;
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let dir = unit3(&mut rng);
            let m: [f64; 3] = std::array::from_fn(|k| base[k] + offset * dir[k]);
            let clear = classes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != rel)
                .all(|(_, c)| dist3(&c.mean, &m) >= MIN_UNSEEN_SEPARATION);
            if clear {
                placed = Some(m);
                break;
            }
        }
        let mean = placed.ok_or_else(|| Error::Config("cannot place unseen classes apart".into()))?;
        let rel_color = classes[rel].color;
        let color = rel_color.map(|c| (c + (1.0 - spec.relatedness) * rng.random_range(-0.5..0.5)).clamp(0.0, 1.0));
        classes.push(ClassGeometry {
            name: class_name(false, u),
            seen: false,
            mean,
            spread: spread(&mut rng),
            color,
            context: context(&mut rng),
            relative: Some(rel),
        });
    }

    let noise_dims = spec.embedding_dim - spec.geometry_len();
    let geometry = |c: &ClassGeometry| -> Vec<f64> {
        let mut g: Vec<f64> = c.mean.iter().chain(&c.spread).copied().collect();
        if spec.color {
            g.extend_from_slice(&c.color);
        }
        g
    };
    let mut embeddings = Vec::with_capacity(classes.len());
    let mut noises: Vec<Vec<f64>> = Vec::with_capacity(classes.len());
    for c in &classes {
        let g = geometry(c);
        let noise: Vec<f64> = match c.relative {
            None => (0..noise_dims)
                .map(|_| NOISE_STD * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
            Some(rel) => related_noise(&g, &geometry(&classes[rel]), &noises[rel], spec.relatedness, &mut rng)?,
        };
        let mut t = g;
        t.extend_from_slice(&noise);
        embeddings.push(t);
        noises.push(noise);
    }
    Ok(Layout { classes, embeddings })
}

/// Noise block for an unseen class: a rotation of the relative's noise by
/// the angle that puts the full-vector cosine at `rho`.
fn related_noise(g_u: &[f64], g_r: &[f64], n_r: &[f64], rho: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let infeasible = || Error::Config(format!("relatedness {rho} is not reachable with this embedding_dim"));
    let nn = dot(n_r, n_r);
    if nn < 1e-12 {
        let c = cosine(g_u, g_r);
        return if (c - rho).abs() <= 1e-9 {
            Ok(n_r.to_vec())
        } else {
            Err(infeasible())
        };
    }
    let norm_u = (dot(g_u, g_u) + nn).sqrt();
    let norm_r = (dot(g_r, g_r) + nn).sqrt();
    let cos_theta = (rho * norm_u * norm_r - dot(g_u, g_r)) / nn;
    if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos_theta) {
        return Err(infeasible());
    }
    let cos_theta = cos_theta.clamp(-1.0, 1.0);
    let sin_theta = if 1.0 - cos_theta.abs() < 1e-12 {
        0.0
    } else {
        (1.0 - cos_theta * cos_theta).sqrt()
    };
    if n_r.len() < 2 && sin_theta > 1e-12 {
        return Err(infeasible());
    }
    // Random direction orthogonal to n_r with the same norm.
    let perp = loop {
        let v: Vec<f64> = (0..n_r.len()).map(|_| StandardNormal.sample(rng)).collect();
        let proj = dot(&v, n_r) / nn;
        let p: Vec<f64> = v.iter().zip(n_r).map(|(a, b)| a - proj * b).collect();
        let pn = norm(&p);
        if pn > 1e-6 || sin_theta <= 1e-12 {
            let scale = if pn > 0.0 { nn.sqrt() / pn } else { 0.0 };
            break p.into_iter().map(|x| x * scale).collect::<Vec<f64>>();
        }
    };
    Ok(n_r
        .iter()
        .zip(&perp)
        .map(|(a, b)| cos_theta * a + sin_theta * b)
        .collect())
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn sample_scene(spec: &BenchSpec, layout: &Layout, scene_id: String, present: &[usize], rng: &mut ChaCha8Rng) -> Scene {
    let mut shift = [0.0; 3];
    for &c in present {
        for (s, v) in shift.iter_mut().zip(&layout.classes[c].context) {
            *s += v;
        }
    }
    let k = present.len();
    let base = spec.points_per_scene / k;
    let extra = spec.points_per_scene % k;
    let mut labeled: Vec<(Vec<f64>, usize)> = Vec::with_capacity(spec.points_per_scene);
    for (i, &c) in present.iter().enumerate() {
        let geo = &layout.classes[c];
        let count = base + usize::from(i < extra);
        for _ in 0..count {
            let e = gaussian3(rng);
            let mut p: Vec<f64> = (0..3)
                .map(|a| round6(geo.mean[a] + geo.spread[a] * e[a] + shift[a]))
                .collect();
            if spec.color {
                for a in 0..3 {
                    let n: f64 = StandardNormal.sample(rng);
                    p.push(round6((geo.color[a] + COLOR_NOISE * n).clamp(0.0, 1.0)));
                }
            }
            labeled.push((p, c));
        }
    }
    labeled.shuffle(rng);
    let (points, labels) = labeled.into_iter().unzip();
    Scene {
        scene_id,
        points,
        labels,
    }
}

/// Generates the full dataset; identical specs give identical datasets.
pub fn generate(spec: &BenchSpec) -> Result<Dataset> {
    let layout = layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let seen: Vec<usize> = (0..spec.n_seen).collect();
    let all: Vec<usize> = (0..spec.n_classes()).collect();
    let k = spec.classes_per_scene;

    let train = (0..spec.train_scenes)
        .map(|i| {
            let mut present: Vec<usize> = seen.choose_multiple(&mut rng, k).copied().collect();
            present.sort_unstable();
            sample_scene(spec, &layout, format!("train-{i:04}"), &present, &mut rng)
        })
        .collect();

    let eval = (0..spec.eval_scenes)
        .map(|i| {
            // Round-robin anchors guarantee that every class is evaluated.
            let mut present = BTreeSet::new();
            present.insert(spec.n_seen + i % spec.n_unseen);
            present.insert(i % spec.n_seen);
            let rest: Vec<usize> = all.iter().copied().filter(|c| !present.contains(c)).collect();
            present.extend(rest.choose_multiple(&mut rng, k - 2).copied());
            let present: Vec<usize> = present.into_iter().collect();
            sample_scene(spec, &layout, format!("eval-{i:04}"), &present, &mut rng)
        })
        .collect();

    let catalog = ClassCatalog::new(
        layout
            .classes
            .iter()
            .zip(&layout.embeddings)
            .map(|(c, t)| (c.name.clone(), c.seen, t.iter().map(|&x| round6(x)).collect()))
            .collect(),
    )?;

    Ok(Dataset {
        train,
        eval,
        catalog,
        spec: Some(spec.clone()),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks_run: Vec<String>,
    pub violations: Vec<Violation>,
    /// Cosine between each unseen embedding and its relative's.
    pub relative_cosines: Vec<(String, String, f64)>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_ok() {
            Ok(self)
        } else {
            Err(Error::Validation(
                self.violations
                    .iter()
                    .map(|v| format!("{}: {}", v.code, v.detail))
                    .collect(),
            ))
        }
    }

    fn violate(&mut self, code: &str, detail: String) {
        self.violations.push(Violation {
            code: code.to_string(),
            detail,
        });
    }
}

pub fn validate(dataset: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let catalog = &dataset.catalog;
    let n_classes = catalog.n_classes();
    let dim = dataset.point_dim();

    report.checks_run.push("label-range".into());
    report.checks_run.push("point-dim".into());
    for (split, scenes) in [("train", &dataset.train), ("eval", &dataset.eval)] {
        for s in scenes.iter() {
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= n_classes) {
                report.violate("label-range", format!("{split} scene {} has label {bad}", s.scene_id));
            }
            if s.points.iter().any(|p| p.len() != dim) {
                report.violate(
                    "point-dim",
                    format!("{split} scene {} has mixed point dimensions", s.scene_id),
                );
            }
        }
    }

    report.checks_run.push("unseen-in-train".into());
    for s in &dataset.train {
        let unseen: BTreeSet<usize> = s
            .labels
            .iter()
            .copied()
            .filter(|&l| l < n_classes && !catalog.is_seen(l))
            .collect();
        if !unseen.is_empty() {
            report.violate(
                "unseen-in-train",
                format!("train scene {} contains unseen classes {unseen:?}", s.scene_id),
            );
        }
    }

    report.checks_run.push("eval-coverage".into());
    let mut counts = vec![0usize; n_classes];
    for s in &dataset.eval {
        for &l in &s.labels {
            if l < n_classes {
                counts[l] += 1;
            }
        }
    }
    for (id, &n) in counts.iter().enumerate() {
        if n == 0 {
            report.violate(
                "eval-coverage",
                format!("class {:?} has no evaluation points", catalog.classes()[id].name),
            );
        }
    }

    if let Some(spec) = &dataset.spec {
        report.checks_run.push("cosine-structure".into());
        match layout(spec) {
            Ok(lay) => {
                let index: HashMap<&str, usize> = catalog.classes().iter().map(|c| (c.name.as_str(), c.id)).collect();
                for geo in &lay.classes {
                    let Some(rel) = geo.relative else { continue };
                    let rel_name = &lay.classes[rel].name;
                    match (index.get(geo.name.as_str()), index.get(rel_name.as_str())) {
                        (Some(&u), Some(&r)) => {
                            let c = cosine(catalog.embedding(u), catalog.embedding(r));
                            report.relative_cosines.push((geo.name.clone(), rel_name.clone(), c));
                            if (c - spec.relatedness).abs() > COSINE_TOLERANCE {
                                report.violate(
                                    "cosine-structure",
                                    format!(
                                        "cos({}, {rel_name}) = {c:.4}, expected {} ± {COSINE_TOLERANCE}",
                                        geo.name, spec.relatedness
                                    ),
                                );
                            }
                        }
                        _ => report.violate(
                            "cosine-structure",
                            format!("class {:?} or its relative is missing from the catalog", geo.name),
                        ),
                    }
                }
            }
            Err(e) => report.violate("cosine-structure", format!("cannot rebuild layout: {e}")),
        }
    }
    report
}
