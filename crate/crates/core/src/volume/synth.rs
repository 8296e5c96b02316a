//! Synthetic volumes with a planted, age-dependent region.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_volume, DatasetManifest, ManifestRecord, Split, SplitFractions, Volume};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

/// Mean region intensity as a function of age.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgeLaw {
    /// `intensity = slope * age + intercept`
    Linear { slope: f64, intercept: f64 },
}

impl Default for AgeLaw {
    fn default() -> Self {
        AgeLaw::Linear {
            slope: 0.01,
            intercept: 0.0,
        }
    }
}

impl AgeLaw {
    pub fn intensity(&self, age: f64) -> f64 {
        match *self {
            AgeLaw::Linear { slope, intercept } => slope * age + intercept,
        }
    }

    /// Inverse of [`AgeLaw::intensity`].
    pub fn age(&self, intensity: f64) -> f64 {
        match *self {
            AgeLaw::Linear { slope, intercept } => (intensity - intercept) / slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub dims: [usize; 3],
    pub voxel_mm: f64,
    pub age_min: f64,
    pub age_max: f64,
    pub region_offset: [usize; 3],
    pub region_size: [usize; 3],
    /// Standard deviation of the per-subject Gaussian noise, also added
    /// inside the region.
    pub noise_std: f64,
    /// Peak of a fixed texture shared by every subject outside the region,
    /// drawn uniformly from `[0, template_amplitude]` per voxel. It plays the
    /// part of common anatomy and carries no age information.
    pub template_amplitude: f64,
    pub age_law: AgeLaw,
    pub splits: SplitFractions,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 32,
            dims: [28, 28, 28],
            voxel_mm: 2.0,
            age_min: 20.0,
            age_max: 80.0,
            region_offset: [7, 7, 7],
            region_size: [7, 7, 7],
            noise_std: 0.1,
            template_amplitude: 1.0,
            age_law: AgeLaw::default(),
            splits: SplitFractions::default(),
            seed: 3407,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic dataset size n must be >= 1".into()));
        }
        if self.dims.contains(&0) || self.region_size.contains(&0) {
            return Err(Error::Config(format!(
                "dims {:?} and region size {:?} must be positive",
                self.dims, self.region_size
            )));
        }
        for a in 0..3 {
            if self.region_offset[a] + self.region_size[a] > self.dims[a] {
                return Err(Error::Config(format!(
                    "region at {:?} with size {:?} does not fit in volume {:?}",
                    self.region_offset, self.region_size, self.dims
                )));
            }
        }
        if !(self.age_min.is_finite() && self.age_max >= self.age_min && self.age_min >= 0.0) {
            return Err(Error::Config(format!(
                "age range [{}, {}] is invalid",
                self.age_min, self.age_max
            )));
        }
        for (name, v) in [("noise_std", self.noise_std), ("template_amplitude", self.template_amplitude)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        self.splits.validate()
    }

    pub fn in_region(&self, i: usize, j: usize, k: usize) -> bool {
        let p = [i, j, k];
        (0..3).all(|a| p[a] >= self.region_offset[a] && p[a] < self.region_offset[a] + self.region_size[a])
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub volumes: Vec<Volume>,
}

impl SyntheticDataset {
    /// Volumes and ages of one split, in manifest order.
    pub fn split(&self, split: Split) -> (Vec<Volume>, Vec<f64>) {
        self.manifest
            .records
            .iter()
            .zip(&self.volumes)
            .filter(|(r, _)| r.split == split)
            .map(|(r, v)| (v.clone(), r.age))
            .unzip()
    }

    /// Writes every volume plus `manifest.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (record, volume) in self.manifest.records.iter().zip(&self.volumes) {
            save_volume(volume, dir.join(&record.path))?;
        }
        let mut manifest = self.manifest.clone();
        manifest.root = dir.to_path_buf();
        manifest.save(dir.join("manifest.csv"))
    }
}

/// Generates `cfg.n` noisy volumes whose planted region encodes the age.
/// Identical configs give identical datasets.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut template_rng = stream(cfg.seed, &[purpose::TEMPLATE]);
    let template = Volume::from_fn(cfg.dims, |_, _, _| {
        (template_rng.random::<f64>() * cfg.template_amplitude) as f32
    });
    let mut volumes = Vec::with_capacity(cfg.n);
    let mut ages = Vec::with_capacity(cfg.n);
    for index in 0..cfg.n {
        let mut rng = stream(cfg.seed, &[purpose::SYNTH, index as u64]);
        let age = if cfg.age_max > cfg.age_min {
            rng.random_range(cfg.age_min..cfg.age_max)
        } else {
            cfg.age_min
        };
        let level = cfg.age_law.intensity(age);
        let volume = Volume::from_fn(cfg.dims, |i, j, k| {
            let base = if cfg.in_region(i, j, k) {
                level
            } else {
                f64::from(template.get(i, j, k))
            };
            let jitter = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base + jitter) as f32
        })
        .with_voxel_mm(cfg.voxel_mm);
        volumes.push(volume);
        ages.push(age);
    }

    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut stream(cfg.seed, &[purpose::SPLIT]));
    let [n_train, n_val, _] = cfg.splits.counts(cfg.n);
    let mut splits = vec![Split::Test; cfg.n];
    for (rank, &index) in order.iter().enumerate() {
        splits[index] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let records = (0..cfg.n)
        .map(|i| ManifestRecord {
            path: format!("sub_{i:04}.json"),
            age: ages[i],
            split: splits[i],
        })
        .collect();
    Ok(SyntheticDataset {
        manifest: DatasetManifest::new(records, "")?,
        volumes,
    })
}
