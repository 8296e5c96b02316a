//! Run configuration: one TOML file covering data synthesis, model,
//! training, explanation and ablation, layered over a named preset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{AttentionExtraction, OcclusionConfig, ViewCombine};
use crate::fusion::FusionStrategy;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::volume::{SynthConfig, PRODUCTION_DIMS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size model and hyperparameters.
    #[default]
    Production,
    /// 28³ volumes and a small encoder, trainable on a laptop CPU.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "production" => Ok(Preset::Production),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected production or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Synthetic volumes and `manifest.csv`.
    pub data_dir: PathBuf,
    /// Checkpoints, logs, reports and saliency grids.
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub extraction: AttentionExtraction,
    pub combine: ViewCombine,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            extraction: AttentionExtraction::LastLayer,
            combine: ViewCombine::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub fusions: Vec<FusionStrategy>,
    /// Extra MLP-fused runs, one per width sequence.
    pub mlp_widths: Vec<Vec<usize>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            fusions: vec![
                FusionStrategy::Mlp,
                FusionStrategy::Mean,
                FusionStrategy::Best,
                FusionStrategy::FeatureMap,
            ],
            mlp_widths: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds data synthesis and training.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub occlusion: OcclusionConfig,
    pub explain: ExplainConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train, dims) = match preset {
            Preset::Production => (ModelConfig::default(), TrainConfig::default(), PRODUCTION_DIMS),
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk(), [28, 28, 28]),
        };
        let mut cfg = Self {
            preset,
            seed: 3407,
            paths: Paths {
                data_dir: "data".into(),
                run_dir: "run".into(),
            },
            synth: SynthConfig {
                dims,
                ..SynthConfig::default()
            },
            model,
            train,
            occlusion: OcclusionConfig::default(),
            explain: ExplainConfig::default(),
            ablate: AblateConfig::default(),
        };
        if preset == Preset::Desk {
            cfg.ablate.mlp_widths = vec![vec![3, 3], vec![3, 16, 3], vec![3, 16, 32, 16, 3]];
        }
        cfg.apply_seed(cfg.seed);
        cfg
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn production() -> Self {
        Self::preset(Preset::Production)
    }

    /// Every seed derives from the top-level one.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    /// Parses TOML layered over the preset it names (default `production`).
    /// Unknown keys are rejected with their name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (section, key) in [("train", "seed"), ("synth", "seed")] {
            if user.get(section).and_then(|t| t.get(key)).is_some() {
                return Err(Error::Config(format!(
                    "`{section}.{key}` is derived; set the top-level `seed` instead"
                )));
            }
        }
        let preset = match user.get("preset") {
            None => Preset::Production,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("`preset` must be a string, got {other}"))),
        };
        let mut merged = Self::preset(preset).as_table()?;
        merge(&mut merged, user);
        let mut cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Serialized without the derived nested seeds, so the output loads back.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = self.as_table()?;
        for section in ["train", "synth"] {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove("seed");
            }
        }
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    fn as_table(&self) -> Result<toml::Table> {
        match toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => Ok(t),
            _ => unreachable!("a struct serializes to a table"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.train.augment.validate()?;
        self.occlusion.validate(self.model.volume_dims)?;
        if self.synth.dims != self.model.volume_dims {
            return Err(Error::Config(format!(
                "synth.dims {:?} must equal model.volume_dims {:?}",
                self.synth.dims, self.model.volume_dims
            )));
        }
        for w in &self.ablate.mlp_widths {
            crate::fusion::TriameseMlpConfig {
                widths: w.clone(),
                ..self.model.fusion_mlp.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.data_dir.join("manifest.csv")
    }
}

/// Recursively overlays `over` onto `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
