//! Pipeline configuration: a TOML file whose keys may sit at top level or
//! inside any `[section]`. Sections only group keys; a key may appear once
//! across the whole file. Every key has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stvsr_core::datagen::RandomSceneConfig;
use stvsr_core::degrade::{DegradationConfig, DownsampleKind};
use stvsr_core::flow::{FlowEstimatorConfig, FlowMethod};
use stvsr_core::latent::NoiseSchedule;
use stvsr_core::losses::LossWeights;
use stvsr_core::optim::AdamWConfig;
use stvsr_core::pipeline::{Arm, ArchConfig, Settings, SyntheticCorpus, TrainConfig, VaePretrain, KEYFRAME_FLOW};
use stvsr_core::ScaleFactors;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key `{0}` appears more than once")]
    Duplicate(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A fixed value or an inclusive `[lo, hi]` range to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Range {
    Fixed(f64),
    Span([f64; 2]),
}

impl Range {
    pub fn bounds(self) -> [f64; 2] {
        match self {
            Range::Fixed(v) => [v, v],
            Range::Span(r) => r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub phi_s: usize,
    pub phi_t: usize,

    pub blur_sigma: Range,
    pub noise_sigma: Range,
    /// `area` or `bilinear`.
    pub downsample: String,
    /// 0 disables quantisation.
    pub quantize_bits: u32,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iters: usize,
    /// Training crop; 0 in any field trains on whole clips.
    pub crop_t: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub gamma_consis: f64,

    pub n_k: usize,
    pub timestep: u32,
    pub t_max: u32,
    pub mask_eps: f64,
    pub flow_block: usize,
    pub flow_radius: usize,
    pub flow_levels: usize,
    /// `interp`, `flow2`, `flow_multi`, `no_vrg` or `full`.
    pub arm: String,
    pub feature_seed: u64,

    pub channels: usize,
    pub vel_width: usize,
    pub vel_blocks: usize,
    pub vae_steps: usize,
    pub vae_lr: f64,

    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub max_speed: i32,
    pub texture: f64,
    /// Seed of the evaluation corpus used by `ablate`.
    pub heldout_seed: u64,
    pub heldout_clips: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let deg = DegradationConfig::default();
        let adam = AdamWConfig::default();
        let train = TrainConfig::default();
        let arch = ArchConfig::standard(3);
        let scene = RandomSceneConfig::default();
        let vae = VaePretrain::default();
        let s = Settings::default();
        Self {
            seed: 0,
            phi_s: s.scales.phi_s,
            phi_t: s.scales.phi_t,
            blur_sigma: Range::Span(deg.blur_sigma_range),
            noise_sigma: Range::Span(deg.noise_sigma_range),
            downsample: "area".into(),
            quantize_bits: 0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            batch: train.batch,
            iters: train.iters,
            crop_t: 0,
            crop_h: 0,
            crop_w: 0,
            gamma_consis: s.weights.gamma_consis,
            n_k: arch.vrg.n_k,
            timestep: s.timestep,
            t_max: s.schedule.t_max,
            mask_eps: s.mask_eps,
            flow_block: KEYFRAME_FLOW.block,
            flow_radius: KEYFRAME_FLOW.search_radius,
            flow_levels: KEYFRAME_FLOW.levels,
            arm: s.arm.name().into(),
            feature_seed: s.feature_seed,
            channels: arch.channels,
            vel_width: arch.velocity.width,
            vel_blocks: arch.velocity.blocks,
            vae_steps: vae.steps,
            vae_lr: vae.lr,
            clips: 8,
            frames: 17,
            height: 64,
            width: 64,
            min_shapes: scene.min_shapes,
            max_shapes: scene.max_shapes,
            max_speed: scene.max_speed,
            texture: scene.texture,
            heldout_seed: 99,
            heldout_clips: 8,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut flat = toml::Table::new();
        for (k, v) in table {
            match v {
                toml::Value::Table(section) => {
                    for (k2, v2) in section {
                        if flat.insert(k2.clone(), v2).is_some() {
                            return Err(ConfigError::Duplicate(k2));
                        }
                    }
                }
                v => {
                    if flat.insert(k.clone(), v).is_some() {
                        return Err(ConfigError::Duplicate(k));
                    }
                }
            }
        }
        let cfg: Self = toml::Value::Table(flat).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::parse(&text)
    }

    /// Canonical TOML text; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.settings()?.validate().map_err(invalid)?;
        self.arch()?.validate().map_err(invalid)?;
        self.train_config()?.validate().map_err(invalid)?;
        self.vae_recipe().map(|_| ())?;
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("clip dimensions must be >= 1"));
        }
        if self.min_shapes > self.max_shapes || self.max_speed < 0 || !(0.0..=1.0).contains(&self.texture) {
            return Err(invalid("scene needs min_shapes <= max_shapes, max_speed >= 0, texture in [0, 1]"));
        }
        Ok(())
    }

    pub fn scales(&self) -> Result<ScaleFactors, ConfigError> {
        ScaleFactors::new(self.phi_s, self.phi_t).map_err(invalid)
    }

    pub fn arm(&self) -> Result<Arm, ConfigError> {
        Arm::parse(&self.arm).ok_or_else(|| invalid(format!("unknown arm `{}`", self.arm)))
    }

    pub fn flow(&self) -> FlowEstimatorConfig {
        FlowEstimatorConfig { method: FlowMethod::BlockMatch, block: self.flow_block, search_radius: self.flow_radius, levels: self.flow_levels }
    }

    pub fn degradation(&self) -> Result<DegradationConfig, ConfigError> {
        let downsample = match self.downsample.as_str() {
            "area" => DownsampleKind::Area,
            "bilinear" => DownsampleKind::Bilinear,
            other => return Err(invalid(format!("unknown downsample `{other}`"))),
        };
        let d = DegradationConfig {
            blur_sigma_range: self.blur_sigma.bounds(),
            noise_sigma_range: self.noise_sigma.bounds(),
            downsample,
            quantize_bits: (self.quantize_bits > 0).then_some(self.quantize_bits),
            seed: self.seed,
            scales: self.scales()?,
        };
        d.validate().map_err(invalid)?;
        Ok(d)
    }

    pub fn settings(&self) -> Result<Settings, ConfigError> {
        Ok(Settings {
            scales: self.scales()?,
            timestep: self.timestep,
            schedule: NoiseSchedule { t_max: self.t_max },
            mask_eps: self.mask_eps,
            flow: self.flow(),
            arm: self.arm()?,
            weights: LossWeights { gamma_consis: self.gamma_consis },
            feature_seed: self.feature_seed,
        })
    }

    pub fn arch(&self) -> Result<ArchConfig, ConfigError> {
        let mut a = ArchConfig::standard(self.channels);
        a.vrg.n_k = self.n_k;
        a.velocity.width = self.vel_width;
        a.velocity.blocks = self.vel_blocks;
        a.validate().map_err(invalid)?;
        Ok(a)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let crop = [self.crop_t, self.crop_h, self.crop_w];
        let crop = if crop.contains(&0) { None } else { Some(crop) };
        Ok(TrainConfig {
            adam: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            batch: self.batch,
            iters: self.iters,
            seed: self.seed,
            degradation: self.degradation()?,
            crop,
        })
    }

    pub fn vae_recipe(&self) -> Result<VaePretrain, ConfigError> {
        if !(self.vae_lr > 0.0) {
            return Err(invalid("vae_lr must be positive"));
        }
        Ok(VaePretrain { steps: self.vae_steps, lr: self.vae_lr, seed: self.seed, ..VaePretrain::default() })
    }

    pub fn scene(&self) -> RandomSceneConfig {
        RandomSceneConfig { min_shapes: self.min_shapes, max_shapes: self.max_shapes, max_speed: self.max_speed, texture: self.texture }
    }

    /// Training corpus of random scenes seeded from `seed`.
    pub fn corpus(&self) -> SyntheticCorpus {
        SyntheticCorpus { seed: self.seed, t: self.frames, h: self.height, w: self.width, c: self.channels, scene: self.scene() }
    }
}
