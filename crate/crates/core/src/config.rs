//! Run configuration: scene presets and the flat dotted-key TOML file.
//!
//! A config file names a preset and overrides any subset of its keys:
//!
//! ```toml
//! preset = "scene-a"
//! sampler.m = 64
//! trainer.lr = 5e-4
//! ```
//!
//! Keys missing from the file keep the preset value; unknown keys are an
//! error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{GenerationConfig, Room, SampleConfig};
use crate::encoding::{self, EncodingConfig, EncodingMode, SceneBounds};
use crate::network::Architecture;
use crate::optim::{AdamConfig, PlateauConfig};
use crate::pipeline::RenderSettings;
use crate::sampling::{SamplerConfig, DEFAULT_CONE_RATIO, T_ORIGIN};
use crate::synthesis::LossWeights;
use crate::vec3::Vec3;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub m: usize,
    pub fine_m: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub epsilon: f64,
    pub cone_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingSection {
    pub d_min: f64,
    /// Per-axis level override; empty means derive from the scene extent.
    pub levels: Vec<usize>,
    pub dir_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub feature_width: usize,
    pub head_width: usize,
    pub skip_at: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub scale_consistent: bool,
    pub use_pe: bool,
    pub use_ipe: bool,
    pub zeta_compensation: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            scale_consistent: true,
            use_pe: true,
            use_ipe: true,
            zeta_compensation: true,
        }
    }
}

impl AblationFlags {
    pub fn describe(&self) -> String {
        format!(
            "scale_consistent={} use_pe={} use_ipe={} zeta_compensation={}",
            self.scale_consistent, self.use_pe, self.use_ipe, self.zeta_compensation
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub receivers_per_iter: usize,
    pub w_c: f64,
    pub w_f: f64,
    pub lr: f64,
    pub clip: f64,
    pub warmup_iters: u64,
    pub block_size: usize,
    pub curriculum_threshold_db: f64,
    pub curriculum_min_gap_iters: u64,
    pub convergence_db: f64,
    pub convergence_patience_iters: u64,
    /// Minimum decrease (dB) that counts as a new best validation score.
    pub improvement_db: f64,
    pub eval_every: u64,
    pub max_iters: u64,
    pub plateau_patience: u32,
    pub plateau_factor: f64,
    /// Validation receivers used per evaluation (0 = whole split).
    pub val_receivers: usize,
    /// Checkpoint cadence in iterations (0 = only at stop).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.w_c, self.w_f)?;
        let positive = [
            ("receivers_per_iter", self.receivers_per_iter as f64),
            ("lr", self.lr),
            ("clip", self.clip),
            ("block_size", self.block_size as f64),
            ("eval_every", self.eval_every as f64),
            ("max_iters", self.max_iters as f64),
            ("plateau_factor", self.plateau_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("trainer.{name} must be > 0, got {v}")));
            }
        }
        if self.plateau_factor >= 1.0 {
            return Err(Error::Config("trainer.plateau_factor must be < 1".into()));
        }
        if self.improvement_db < 0.0 {
            return Err(Error::Config("trainer.improvement_db must be >= 0".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            coarse: self.w_c,
            fine: self.w_f,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            clip: self.clip,
            warmup_steps: self.warmup_iters,
            ..AdamConfig::default()
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            patience: self.plateau_patience,
            factor: self.plateau_factor,
            threshold: self.improvement_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: String,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub sampler: SamplerSection,
    pub encoding: EncodingSection,
    pub model: ModelSection,
    pub trainer: TrainerConfig,
    pub ablation: AblationFlags,
    pub paths: PathsSection,
}

/// Dataset-side parameters of a preset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePreset {
    pub name: &'static str,
    pub room: Vec3,
    pub tx: Vec3,
    pub carrier: f64,
    pub material: &'static str,
    pub n_receivers: usize,
    pub negatives: usize,
}

pub const PRESET_NAMES: [&str; 2] = ["scene-a", "scene-b"];

pub fn scene_preset(name: &str) -> Result<ScenePreset> {
    match name {
        "scene-a" => Ok(ScenePreset {
            name: "scene-a",
            room: [8.0, 5.0, 3.0],
            tx: [2.0, 1.5, 2.0],
            carrier: 2.4e9,
            material: "gypsum",
            n_receivers: 3000,
            negatives: 10,
        }),
        "scene-b" => Ok(ScenePreset {
            name: "scene-b",
            room: [25.0, 25.0, 5.0],
            tx: [6.0, 8.0, 3.0],
            carrier: 5.8e9,
            material: "gypsum",
            n_receivers: 6000,
            negatives: 5,
        }),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (expected one of {PRESET_NAMES:?})"
        ))),
    }
}

impl ScenePreset {
    pub fn generation(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            n_receivers: self.n_receivers,
            seed,
            sample: SampleConfig {
                negatives: self.negatives,
                ..SampleConfig::default()
            },
            ..GenerationConfig::default()
        }
    }

    pub fn room(&self) -> Result<Room> {
        crate::dataset::builtin_room(self.room, self.material, self.carrier)
    }
}

impl RunConfig {
    /// Preset defaults.
    pub fn preset(name: &str) -> Result<RunConfig> {
        scene_preset(name)?;
        let (m, t_far, lr, clip, block) = match name {
            "scene-a" => (128, 15.0, 1e-3, 5e-3, 3000),
            _ => (256, 30.0, 7.5e-4, 5e-4, 2000),
        };
        Ok(RunConfig {
            preset: name.to_string(),
            sampler: SamplerSection {
                m,
                fine_m: m,
                t_near: T_ORIGIN,
                t_far,
                epsilon: 0.01,
                cone_ratio: DEFAULT_CONE_RATIO,
            },
            encoding: EncodingSection {
                d_min: encoding::DEFAULT_D_MIN,
                levels: Vec::new(),
                dir_levels: encoding::DEFAULT_DIR_LEVELS,
            },
            model: ModelSection {
                trunk_layers: 8,
                trunk_width: 128,
                feature_width: 64,
                head_width: 128,
                skip_at: 4,
            },
            trainer: TrainerConfig {
                receivers_per_iter: 128,
                w_c: 0.1,
                w_f: 0.9,
                lr,
                clip,
                warmup_iters: 500,
                block_size: block,
                curriculum_threshold_db: -10.0,
                curriculum_min_gap_iters: 1000,
                convergence_db: -3.0,
                convergence_patience_iters: 1000,
                improvement_db: 0.01,
                eval_every: 100,
                max_iters: 30_000,
                plateau_patience: 3,
                plateau_factor: 0.6,
                val_receivers: 0,
                checkpoint_every: 1000,
                seed: 0,
            },
            ablation: AblationFlags::default(),
            paths: PathsSection {
                dataset: String::new(),
                out: String::new(),
            },
        })
    }

    /// Parses a config file body: preset defaults overlaid with the file's keys.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("config parse: {e}")))?;
        let preset = match user.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => "scene-a".to_string(),
        };
        let base = RunConfig::preset(&preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user, "")?;
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.sampler_config().validate()?;
        if self.sampler.fine_m < 2 {
            return Err(Error::Config("sampler.fine_m must be >= 2".into()));
        }
        if !(self.sampler.cone_ratio > 0.0) {
            return Err(Error::Config("sampler.cone_ratio must be > 0".into()));
        }
        if !self.encoding.levels.is_empty() && self.encoding.levels.len() != 3 {
            return Err(Error::Config("encoding.levels must be empty or have 3 entries".into()));
        }
        if !(self.encoding.d_min > 0.0) || self.encoding.dir_levels == 0 {
            return Err(Error::Config("encoding.d_min and encoding.dir_levels must be > 0".into()));
        }
        EncodingMode::from_flags(self.ablation.use_pe, self.ablation.use_ipe)?;
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            m: self.sampler.m,
            t_near: self.sampler.t_near,
            t_far: self.sampler.t_far,
            epsilon: self.sampler.epsilon,
        }
    }

    /// Encoding for a room spanning `[0, dims]`, with ablations applied.
    pub fn encoding_config(&self, dims: Vec3) -> Result<EncodingConfig> {
        let bounds = SceneBounds::new([0.0; 3], dims)?;
        let mut enc = encoding::make_encoding_config(&bounds, self.encoding.d_min)?
            .with_dir_levels(self.encoding.dir_levels)
            .with_mode(EncodingMode::from_flags(self.ablation.use_pe, self.ablation.use_ipe)?);
        if !self.encoding.levels.is_empty() {
            let l = &self.encoding.levels;
            enc = enc.with_levels([l[0], l[1], l[2]])?;
        }
        if !self.ablation.scale_consistent {
            enc = enc.without_scale_consistency();
        }
        Ok(enc)
    }

    pub fn render_settings(&self, room: &Room) -> Result<RenderSettings> {
        let s = RenderSettings {
            sampler: self.sampler_config(),
            fine_m: self.sampler.fine_m,
            cone_ratio: self.sampler.cone_ratio,
            carrier: room.carrier,
            encoding: self.encoding_config(room.dims)?,
            use_zeta: self.ablation.zeta_compensation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn architecture(&self, enc: &EncodingConfig) -> Architecture {
        Architecture {
            input_width: enc.spatial_len(),
            dir_width: enc.directional_len(),
            trunk_layers: self.model.trunk_layers,
            trunk_width: self.model.trunk_width,
            feature_width: self.model.feature_width,
            head_width: self.model.head_width,
            skip_at: self.model.skip_at,
        }
    }
}

/// Overlays `user` onto `base`, descending into tables. Unknown keys are
/// left for the typed deserializer to reject.
fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(toml::Value::Table(_)), other) => {
                return Err(Error::Config(format!("{path} is a section, got value {other}")));
            }
            (Some(slot), v) => {
                // Integers are accepted where floats are expected.
                *slot = match (&*slot, v) {
                    (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                    (_, v) => v,
                };
            }
            (None, v) => {
                if prefix.is_empty() && !base.is_empty() && !matches!(v, toml::Value::Table(_)) && k != "preset" {
                    return Err(Error::Config(format!("unknown config key {path:?}")));
                }
                base.insert(k, v);
            }
        }
    }
    Ok(())
}
