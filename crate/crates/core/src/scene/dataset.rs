//! `CAACDS1` dataset files.
//!
//! Byte layout:
//!
//! ```text
//! "CAACDS1\n"                      8-byte magic
//! {json metadata}\n               one UTF-8 line, see DatasetMeta
//! f32 LE payload                  per scene: tau (H*W values, row-major),
//!                                 then each reflectance field (H*W values)
//! ```
//!
//! Values are quantized to `f32` when a dataset is built, so a write/read
//! cycle reproduces the in-memory dataset exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, generate_cot_field, render_scene, AngleRanges, CotField, RadianceField,
    RenderOptions, SceneParams, ViewGeometry,
};
use crate::config::{config_hash, file_sha256};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"CAACDS1\n";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

const GEOMETRY_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_size_km: f64,
    pub cloud_top_km: f64,
    pub master_seed: u64,
    /// Stored reflectance fields per scene, each at its own sampled geometry.
    pub geometries_per_scene: usize,
    pub angles: AngleRanges,
    pub noise_sigma: f64,
    pub effects_3d: bool,
    pub scene: SceneParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_val: 100,
            n_test: 100,
            height: 32,
            width: 32,
            pixel_size_km: 0.1,
            cloud_top_km: 1.0,
            master_seed: 2024,
            geometries_per_scene: 1,
            angles: AngleRanges::default(),
            noise_sigma: 0.01,
            effects_3d: true,
            scene: SceneParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(Error::config("dataset must contain at least one scene"));
        }
        if self.geometries_per_scene == 0 {
            return Err(Error::config("geometries_per_scene must be at least 1"));
        }
        if !(self.pixel_size_km > 0.0 && self.cloud_top_km > 0.0) {
            return Err(Error::config(
                "pixel_size_km and cloud_top_km must be positive",
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if (self.n_train + self.n_val + self.n_test) as u64 >= 1 << 32 {
            return Err(Error::config("too many scenes"));
        }
        self.angles.validate()?;
        self.scene.validate()?;
        // dimension checks live in generate_cot_field; fail early here too
        if !super::is_power_of_two(self.height)
            || !super::is_power_of_two(self.width)
            || self.height < 8
            || self.width < 8
        {
            return Err(Error::config(format!(
                "scene dimensions must be powers of two >= 8, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Seed of the `index`-th scene counted across train, val, test in order.
    /// Seeds form one contiguous block per split, so splits are disjoint.
    pub fn scene_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_shl(32).wrapping_add(index as u64)
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            effects_3d: self.effects_3d,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub split: String,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_size_km: f64,
    pub field_order: Vec<String>,
    pub geometries_per_scene: usize,
    pub geometries: Vec<Vec<ViewGeometry>>,
    pub seeds: Vec<u64>,
    pub scene_params: SceneParams,
    pub noise_sigma: f64,
    pub effects_3d: bool,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub cot: CotField,
    pub radiances: Vec<RadianceField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: String,
    pub file: String,
    pub sha256: String,
    pub seeds: Vec<u64>,
    pub geometries: Vec<Vec<ViewGeometry>>,
}

/// Sibling JSON record of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: DatasetConfig,
    pub splits: Vec<SplitRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    /// Errors if any seed appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for s in &self.splits {
            for seed in &s.seeds {
                if let Some(prev) = seen.insert(*seed, s.split.clone()) {
                    return Err(Error::Hygiene(format!(
                        "scene seed {seed} appears in both {prev} and {}",
                        s.split
                    )));
                }
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn build_scene(config: &DatasetConfig, seed: u64) -> Result<Scene> {
    let mut cot = generate_cot_field(
        seed,
        config.height,
        config.width,
        config.pixel_size_km,
        &config.scene,
    )?;
    cot.values.iter_mut().for_each(|v| *v = quantize(*v));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, GEOMETRY_STREAM));
    let radiances = (0..config.geometries_per_scene)
        .map(|k| {
            let geom = config.angles.sample(&mut rng, config.cloud_top_km);
            let noise_seed = derive_seed(derive_seed(seed, NOISE_STREAM), k as u64);
            let mut r = render_scene(
                &cot,
                &geom,
                &config.scene,
                config.render_options(),
                noise_seed,
            )?;
            r.values.iter_mut().for_each(|v| *v = quantize(*v));
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        seed,
        cot,
        radiances,
    })
}

/// Builds one split in memory. Scenes are generated in parallel and
/// collected in seed order.
pub fn build_split(config: &DatasetConfig, split: &str) -> Result<Dataset> {
    config.validate()?;
    let (start, n) = match split {
        "train" => (0, config.n_train),
        "val" => (config.n_train, config.n_val),
        "test" => (config.n_train + config.n_val, config.n_test),
        other => return Err(Error::config(format!("unknown split {other:?}"))),
    };
    let seeds: Vec<u64> = (start..start + n).map(|i| config.scene_seed(i)).collect();
    let scenes = seeds
        .par_iter()
        .map(|&s| build_scene(config, s))
        .collect::<Result<Vec<_>>>()?;
    let mut field_order = vec!["tau".to_string()];
    field_order.extend((0..config.geometries_per_scene).map(|k| format!("reflectance[{k}]")));
    let meta = DatasetMeta {
        schema_version: DATASET_SCHEMA_VERSION,
        split: split.to_string(),
        n,
        height: config.height,
        width: config.width,
        pixel_size_km: config.pixel_size_km,
        field_order,
        geometries_per_scene: config.geometries_per_scene,
        geometries: scenes
            .iter()
            .map(|s| s.radiances.iter().map(|r| r.geometry).collect())
            .collect(),
        seeds,
        scene_params: config.scene,
        noise_sigma: config.noise_sigma,
        effects_3d: config.effects_3d,
        config_hash: config_hash(config),
    };
    Ok(Dataset { meta, scenes })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(
        16 + ds.len() * ds.meta.height * ds.meta.width * 4 * (1 + ds.meta.geometries_per_scene),
    );
    buf.extend_from_slice(DATASET_MAGIC);
    let meta =
        serde_json::to_string(&ds.meta).map_err(|e| Error::format("CAACDS1", e.to_string()))?;
    buf.extend_from_slice(meta.as_bytes());
    buf.push(b'\n');
    for scene in &ds.scenes {
        for v in &scene.cot.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for r in &scene.radiances {
            for v in &r.values {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format("CAACDS1", format!("{}: {reason}", path.display()));
    if bytes.len() < DATASET_MAGIC.len() || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("missing magic".into()));
    }
    let rest = &bytes[8..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("unterminated metadata line".into()))?;
    let meta: DatasetMeta = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(e.to_string()))?;
    if meta.schema_version != DATASET_SCHEMA_VERSION {
        return Err(bad(format!(
            "unsupported schema version {}",
            meta.schema_version
        )));
    }
    if meta.seeds.len() != meta.n
        || meta.geometries.len() != meta.n
        || meta
            .geometries
            .iter()
            .any(|g| g.len() != meta.geometries_per_scene)
    {
        return Err(bad("metadata counts are inconsistent".into()));
    }
    let payload = &rest[nl + 1..];
    let per_field = meta.height * meta.width;
    let expected = meta.n * per_field * (1 + meta.geometries_per_scene) * 4;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
    let mut scenes = Vec::with_capacity(meta.n);
    for i in 0..meta.n {
        let cot = CotField::new(meta.height, meta.width, meta.pixel_size_km, take(per_field))?;
        let radiances = meta.geometries[i]
            .iter()
            .map(|g| RadianceField {
                height: meta.height,
                width: meta.width,
                values: take(per_field),
                geometry: *g,
                noise_sigma: meta.noise_sigma,
            })
            .collect();
        scenes.push(Scene {
            seed: meta.seeds[i],
            cot,
            radiances,
        });
    }
    Ok(Dataset { meta, scenes })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_file_name(split: &str) -> String {
    format!("{split}.caacds")
}

/// Generates every split into `out_dir` and writes `manifest.json` next to
/// the split files. Output is a pure function of the config.
pub fn make_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut splits = Vec::new();
    for split in SPLITS {
        let ds = build_split(config, split)?;
        let file = split_file_name(split);
        let path: PathBuf = out_dir.join(&file);
        write_dataset(&path, &ds)?;
        splits.push(SplitRecord {
            split: split.to_string(),
            file,
            sha256: file_sha256(&path)?,
            seeds: ds.meta.seeds.clone(),
            geometries: ds.meta.geometries.clone(),
        });
    }
    let manifest = Manifest {
        config_hash: config_hash(config),
        config: config.clone(),
        splits,
    };
    manifest.check_disjoint()?;
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
