// SPDX-License-Identifier: Apache-2.0

//! Scene files on disk.
//!
//! A dataset directory holds `train.jsonl` and `eval.jsonl` (one scene per
//! line), the class catalog `classes.json`, and optionally the generator
//! settings `spec.json`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchgen::BenchSpec;
use crate::error::{Error, Result};
use crate::semantics::{load_embeddings, ClassCatalog};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const CLASSES_FILE: &str = "classes.json";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
    pub catalog: ClassCatalog,
    pub spec: Option<BenchSpec>,
}

impl Dataset {
    /// Per-point input dimension, taken from the first point found.
    pub fn point_dim(&self) -> usize {
        self.train
            .iter()
            .chain(&self.eval)
            .flat_map(|s| s.points.first())
            .map(Vec::len)
            .next()
            .unwrap_or(0)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let catalog = load_embeddings(&dir.join(CLASSES_FILE))?;
        let train = read_scenes(&dir.join(TRAIN_FILE))?;
        let eval = read_scenes(&dir.join(EVAL_FILE))?;
        let spec_path = dir.join(SPEC_FILE);
        let spec = if spec_path.exists() {
            let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Ok(Dataset {
            train,
            eval,
            catalog,
            spec,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(CLASSES_FILE), self.catalog.to_json()?.as_bytes())?;
        write_scenes(&dir.join(TRAIN_FILE), &self.train)?;
        write_scenes(&dir.join(EVAL_FILE), &self.eval)?;
        if let Some(spec) = &self.spec {
            write_atomic(&dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)?.as_bytes())?;
        }
        Ok(())
    }
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scenes = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        if scene.points.len() != scene.labels.len() {
            return Err(Error::malformed(
                format!("{}:{}", path.display(), n + 1),
                "points and labels differ in length",
            ));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut buf = Vec::new();
    for s in scenes {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
