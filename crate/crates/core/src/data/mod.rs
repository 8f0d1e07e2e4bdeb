//! Phantom dataset generation and the on-disk tensor / manifest formats.

mod phantom;
mod tensor_io;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use phantom::{
    compose_case, gaussian_blur, gaussian_kernel, generate_case, generate_latents, min_max_normalize, CaseRecord,
    LatentFields,
};
pub use tensor_io::{decode_tensor, encode_tensor, read_tensor, write_tensor, DTYPE_F32, MAGIC};

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub p1: String,
    pub p2: String,
    pub p3: String,
    pub y: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub seed: u64,
    pub files: CaseFiles,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub image_size: usize,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn count(&self, split: Split) -> usize {
        self.cases.iter().filter(|c| c.split == split).count()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        let mut ids = BTreeSet::new();
        for c in &m.cases {
            if !ids.insert(c.id.as_str()) {
                return Err(Error::format("manifest", format!("duplicate case id {}", c.id)));
            }
            for f in [&c.files.p1, &c.files.p2, &c.files.p3, &c.files.y] {
                if !dir.join(f).is_file() {
                    return Err(Error::format("manifest", format!("case {} references missing file {f}", c.id)));
                }
            }
        }
        Ok(m)
    }
}

/// Number of training cases for a split ratio: round(ratio · cases).
pub fn train_count(cases: usize, ratio: f64) -> usize {
    ((ratio * cases as f64).round() as usize).min(cases)
}

/// Writes `cases` phantom cases under `out` plus `manifest.json`.
pub fn build_dataset(out: &Path, cases: usize, size: usize, seed: u64, split_ratio: f64) -> Result<DatasetManifest> {
    if cases < 5 {
        return Err(Error::config(format!("at least 5 cases are required, got {cases}")));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::config(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut seeds_rng = ChaCha8Rng::seed_from_u64(seed);
    let case_seeds: Vec<u64> = (0..cases).map(|_| seeds_rng.next_u64()).collect();
    let mut order: Vec<usize> = (0..cases).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    order.shuffle(&mut shuffle_rng);
    let n_train = train_count(cases, split_ratio);
    let mut split = vec![Split::Test; cases];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let mut entries = Vec::with_capacity(cases);
    for (i, &case_seed) in case_seeds.iter().enumerate() {
        let id = format!("case_{i:04}");
        let mut record = generate_case(case_seed, size)?;
        record.id = id.clone();
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = |name: &str| format!("{id}/{name}.mpt");
        for (name, img) in [("p1", &record.p1), ("p2", &record.p2), ("p3", &record.p3), ("y", &record.y)] {
            write_tensor(&out.join(rel(name)), img)?;
        }
        entries.push(CaseEntry {
            id: id.clone(),
            seed: case_seed,
            files: CaseFiles {
                p1: rel("p1"),
                p2: rel("p2"),
                p3: rel("p3"),
                y: rel("y"),
            },
            split: split[i],
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        image_size: size,
        cases: entries,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A manifest with its case images loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub cases: Vec<CaseRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for e in &manifest.cases {
            let read = |f: &str| -> Result<Tensor<f32>> {
                let t = read_tensor(&dir.join(f))?;
                let s = manifest.image_size;
                if t.shape() != [1, s, s] {
                    return Err(Error::format(
                        "manifest",
                        format!("{f} has shape {:?}, expected [1, {s}, {s}]", t.shape()),
                    ));
                }
                Ok(t)
            };
            cases.push(CaseRecord {
                id: e.id.clone(),
                seed: e.seed,
                p1: read(&e.files.p1)?,
                p2: read(&e.files.p2)?,
                p3: read(&e.files.p3)?,
                y: read(&e.files.y)?,
            });
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            cases,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&CaseRecord> {
        self.manifest
            .cases
            .iter()
            .zip(&self.cases)
            .filter(|(e, _)| e.split == split)
            .map(|(_, c)| c)
            .collect()
    }
}
