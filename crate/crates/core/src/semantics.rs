// SPDX-License-Identifier: Apache-2.0

//! Class catalogs, scene composition descriptors and the semantic tuning
//! layer.
//!
//! A class description vector `t` is modulated per scene by
//! `s = tanh(W·d + b)`, where `d ∈ {−1, +1}^{N_c}` marks which classes are
//! present. The decoder is conditioned on the elementwise product `t ⊗ s`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{BoundLinear, Linear, Tape, Tensor2, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub seen: bool,
    pub embedding: Vec<f64>,
}

/// Ordered set of classes; ids are positions in the catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
    seen_ids: Vec<usize>,
    unseen_ids: Vec<usize>,
    // class id -> position among seen classes
    seen_slot: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    seen: bool,
    vector: Vec<f64>,
}

impl ClassCatalog {
    /// Builds a catalog from `(name, seen, embedding)` triples in id order.
    pub fn new(entries: Vec<(String, bool, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("class catalog"));
        }
        let dim = entries[0].2.len();
        if dim == 0 {
            return Err(Error::malformed("class catalog", "zero-length embedding"));
        }
        let mut names = HashSet::new();
        let mut classes = Vec::with_capacity(entries.len());
        for (id, (name, seen, embedding)) in entries.into_iter().enumerate() {
            if !names.insert(name.clone()) {
                return Err(Error::DuplicateClass(name));
            }
            if embedding.len() != dim {
                return Err(Error::malformed(
                    "class catalog",
                    format!("class {name:?} has dimension {} but expected {dim}", embedding.len()),
                ));
            }
            if embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::malformed(
                    "class catalog",
                    format!("class {name:?} has a non-finite entry"),
                ));
            }
            classes.push(ClassInfo {
                id,
                name,
                seen,
                embedding,
            });
        }
        let seen_ids: Vec<usize> = classes.iter().filter(|c| c.seen).map(|c| c.id).collect();
        let unseen_ids: Vec<usize> = classes.iter().filter(|c| !c.seen).map(|c| c.id).collect();
        if seen_ids.is_empty() {
            return Err(Error::malformed("class catalog", "no seen classes"));
        }
        let mut seen_slot = vec![None; classes.len()];
        for (slot, &id) in seen_ids.iter().enumerate() {
            seen_slot[id] = Some(slot);
        }
        Ok(ClassCatalog {
            classes,
            seen_ids,
            unseen_ids,
            seen_slot,
        })
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_seen(&self) -> usize {
        self.seen_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].embedding.len()
    }

    pub fn seen_ids(&self) -> &[usize] {
        &self.seen_ids
    }

    pub fn unseen_ids(&self) -> &[usize] {
        &self.unseen_ids
    }

    pub fn is_seen(&self, id: usize) -> bool {
        self.classes[id].seen
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.seen).collect()
    }

    /// Index of a seen class among the seen classes (the uncertainty head's
    /// output slot).
    pub fn seen_slot(&self, id: usize) -> Option<usize> {
        self.seen_slot.get(id).copied().flatten()
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.classes[id].embedding
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Errors with [`Error::MissingClass`] unless every name is present.
    pub fn require(&self, names: &[&str]) -> Result<()> {
        match names.iter().find(|n| self.id_of(n).is_none()) {
            Some(n) => Err(Error::MissingClass((*n).to_string())),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawEntries =
            serde_json::from_str(text).map_err(|e| Error::malformed("embedding file", e.to_string()))?;
        ClassCatalog::new(raw.0)
    }
}

impl Serialize for ClassCatalog {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.classes.len()))?;
        for c in &self.classes {
            map.serialize_entry(
                &c.name,
                &ClassEntry {
                    seen: c.seen,
                    vector: c.embedding.clone(),
                },
            )?;
        }
        map.end()
    }
}

/// File entries in document order, duplicates kept so that validation can
/// report them.
struct RawEntries(Vec<(String, bool, Vec<f64>)>);

impl<'de> Deserialize<'de> for RawEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping class names to {seen, vector}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawEntries, A::Error> {
                let mut entries = Vec::new();
                while let Some((name, entry)) = map.next_entry::<String, ClassEntry>()? {
                    entries.push((name, entry.seen, entry.vector));
                }
                Ok(RawEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

impl<'de> Deserialize<'de> for ClassCatalog {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = RawEntries::deserialize(deserializer)?;
        ClassCatalog::new(raw.0).map_err(serde::de::Error::custom)
    }
}

/// Reads a catalog from the embedding JSON format.
pub fn load_embeddings(path: &Path) -> Result<ClassCatalog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClassCatalog::from_json(&text)
}

/// `{−1, +1}^{N_c}` class-presence vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneComposition {
    descriptor: Vec<f64>,
}

impl SceneComposition {
    pub fn as_slice(&self) -> &[f64] {
        &self.descriptor
    }

    pub fn contains(&self, id: usize) -> bool {
        self.descriptor.get(id).is_some_and(|&v| v > 0.0)
    }

    /// Same descriptor with `id` marked present.
    pub fn with_class(&self, id: usize) -> Result<Self> {
        let mut d = self.clone();
        *d.descriptor.get_mut(id).ok_or(Error::InvalidLabel {
            label: id,
            reason: "class id out of range",
        })? = 1.0;
        Ok(d)
    }
}

pub fn scene_descriptor(present: impl IntoIterator<Item = usize>, n_classes: usize) -> Result<SceneComposition> {
    let mut descriptor = vec![-1.0; n_classes];
    for id in present {
        *descriptor.get_mut(id).ok_or(Error::InvalidLabel {
            label: id,
            reason: "class id out of range",
        })? = 1.0;
    }
    Ok(SceneComposition { descriptor })
}

/// Fully connected `N_c → N_t` layer followed by tanh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningLayer {
    pub linear: Linear,
}

impl TuningLayer {
    /// Uniform ±0.05 weights and bias 1.0, so that `s ≈ tanh(1)` at start.
    pub fn init<R: Rng + ?Sized>(n_classes: usize, dim: usize, rng: &mut R) -> Self {
        let mut linear = Linear::zeros(n_classes, dim);
        for w in linear.weight.data_mut() {
            *w = rng.random_range(-0.05..0.05);
        }
        linear.bias.data_mut().fill(1.0);
        TuningLayer { linear }
    }

    pub fn n_classes(&self) -> usize {
        self.linear.inputs()
    }

    pub fn dim(&self) -> usize {
        self.linear.outputs()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        self.linear.bind(tape)
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        vec![&self.linear.weight, &self.linear.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.linear.weight, &mut self.linear.bias]
    }
}

/// Batched `t ⊗ tanh(W·d + b)`; `embeddings` and `descriptors` hold one row
/// per sample.
pub fn tune_var(tape: &mut Tape, embeddings: Var, descriptors: Var, layer: &BoundLinear) -> Result<Var> {
    let pre = layer.forward(tape, descriptors)?;
    let s = tape.tanh(pre)?;
    tape.mul(embeddings, s)
}

/// Fused embedding `t ⊗ s` for one class in one scene.
pub fn tune(t: &[f64], scene: &SceneComposition, layer: &TuningLayer) -> Result<Vec<f64>> {
    if t.len() != layer.dim() {
        return Err(Error::ShapeMismatch {
            op: "tune",
            left: (1, t.len()),
            right: (1, layer.dim()),
        });
    }
    if scene.descriptor.len() != layer.n_classes() {
        return Err(Error::ShapeMismatch {
            op: "tune",
            left: (1, scene.descriptor.len()),
            right: (1, layer.n_classes()),
        });
    }
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape);
    let tv = tape.leaf(Tensor2::row_vector(t));
    let dv = tape.leaf(Tensor2::row_vector(&scene.descriptor));
    let out = tune_var(&mut tape, tv, dv, &bound)?;
    Ok(tape.value(out).data().to_vec())
}
