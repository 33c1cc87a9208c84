//! Run configuration, read from TOML. Every section has defaults, so an
//! empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::completeness::{Removal, Thresholds};
use crate::diffusion::{make_schedule, Ablation, ModelConfig, NoiseSchedule, ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::ingest::{CaptionOptions, RemoteConfig, RoadClasses, SplitPolicy, TagAllowlist};
use crate::metrics::GnCountMode;
use crate::raster::RasterStyle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSection {
    pub zoom: u8,
    pub size: u32,
}

impl Default for TileSection {
    fn default() -> Self {
        Self { zoom: 17, size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Tag allowlist file; the built-in list when unset.
    pub allowlist: Option<PathBuf>,
    pub roads: RoadClasses,
    pub caption: CaptionOptions,
    pub remote: RemoteConfig,
    pub eval_fraction: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            allowlist: None,
            roads: RoadClasses::default(),
            caption: CaptionOptions::default(),
            remote: RemoteConfig::default(),
            eval_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Total optimizer steps; a resumed run stops at the same total.
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub phase1_steps: u64,
    /// Cosine learning-rate decay length in steps; 0 keeps it constant.
    pub lr_decay_steps: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: 2000,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            phase1_steps: t.phase1_steps,
            lr_decay_steps: t.lr_decay_steps,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub ddim_steps: usize,
    /// Gray level at or above which a generated pixel counts as building.
    pub threshold: u8,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { ddim_steps: 50, threshold: 128 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletenessSection {
    pub thresholds: Thresholds,
    pub removal: Removal,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub gn_count_mode: GnCountMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub tiles: TileSection,
    pub style: RasterStyle,
    pub ingest: IngestSection,
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub completeness: CompletenessSection,
    pub metrics: MetricsSection,
}

impl Config {
    /// Parses and validates; `None` gives the validated defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Missing(p.to_path_buf()));
                }
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// The effective config as TOML, suitable for logging and re-running.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tiles.zoom > 22 {
            return bad(format!("zoom {} above 22", self.tiles.zoom));
        }
        if self.tiles.size as usize != self.model.image_size {
            return bad(format!(
                "tile size {} differs from model image size {}",
                self.tiles.size, self.model.image_size
            ));
        }
        if self.model.image_channels != 1 || self.model.cond_channels != 6 {
            return bad("model must map a 6-channel condition image to a 1-channel mask".into());
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.style.validate()?;
        self.ingest.caption.validate()?;
        if !(0.0..=1.0).contains(&self.ingest.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1]".into());
        }
        self.completeness.thresholds.validate()?;
        self.noise_schedule().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.epsilon > 0.0) || t.batch_size == 0 {
            return bad("learning rate, epsilon and batch size must be positive".into());
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.sample.ddim_steps == 0 || self.sample.ddim_steps > self.schedule.steps {
            return bad(format!("ddim_steps must lie in 1..={}", self.schedule.steps));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        make_schedule(s.steps, s.beta_start, s.beta_end, s.kind)
    }

    pub fn train_config(&self, ablation: Ablation, jobs: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            seed: self.seed,
            phase1_steps: t.phase1_steps,
            lr_decay_steps: t.lr_decay_steps,
            jobs: jobs.max(1),
            ablation,
        }
    }

    pub fn split_policy(&self) -> SplitPolicy {
        SplitPolicy {
            eval_fraction: self.ingest.eval_fraction,
            seed: self.seed,
        }
    }

    pub fn allowlist(&self) -> Result<TagAllowlist> {
        match &self.ingest.allowlist {
            None => Ok(TagAllowlist::default_list()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                TagAllowlist::parse(&text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        Config::default().validate().unwrap();
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = Config::default();
        c.seed = 7;
        c.completeness.thresholds.mapped_ratio = 1.5;
        c.metrics.gn_count_mode = GnCountMode::RatioOfTotals;
        c.ingest.remote.llm_key = Some("secret".into());
        let text = c.resolved();
        assert!(!text.contains("secret"));
        let back = Config::parse(&text).unwrap();
        c.ingest.remote.llm_key = None;
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_and_overrides() {
        let c = Config::parse("seed = 3\n[train]\nsteps = 10\n[completeness.thresholds]\nmapped_ratio = 1.4\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch_size, TrainSection::default().batch_size);
        assert_eq!(c.completeness.thresholds.mapped_ratio, 1.4);
        assert_eq!(c.completeness.thresholds.partial_ratio, 5.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Config::parse("[train]\nstep = 10\n").is_err());
        let mut c = Config::default();
        c.tiles.size = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = Config::default();
        c.sample.ddim_steps = 5000;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.completeness.thresholds.partial_ratio = 1.0;
        assert!(c.validate().is_err());
        assert!(matches!(Config::load(Some(Path::new("/no/such/config.toml"))), Err(Error::Missing(_))));
    }
}
