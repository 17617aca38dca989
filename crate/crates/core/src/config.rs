//! Run configuration file (TOML).
//!
//! ```toml
//! manifest = "data/manifest.json"
//! fold = 0
//! seed = 7
//!
//! [data]
//! n_per_region = [160, 220, 274, 250]
//! dims = 32
//! spacing_mm = 5.0
//! pair_fraction = 0.3
//! hard_fraction = 0.05
//!
//! [model]
//! variant = "multi_head"
//! repr = "6dxy"
//! conv_channels = [8, 16, 32, 64, 64]
//! fc_widths = [256, 50]
//!
//! [train]
//! lr = 0.00164
//! lr_decay = 0.27291
//! decay_step = 75
//! momentum = 0.957437
//! batch_size = 9
//! epochs = 50
//! augment = true
//!
//! [aug]
//! rot_deg = 45.0
//! scale = [0.95, 1.05]
//! trans_mm = 12.0
//! p = 0.5
//! mirror_p = 0.5
//!
//! [intensity]
//! min_hu = -490.0
//! max_hu = 1040.0
//! f = [0.95, 1.05]
//! y = 0.02
//! ```
//!
//! Every section and key is optional; missing values take the defaults shown.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::rotation::RepresentationKind;
use crate::training::Hyperparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rot_deg: f64,
    pub scale: [f64; 2],
    pub trans_mm: f64,
    pub p: f64,
    pub mirror_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rot_deg: 45.0, scale: [0.95, 1.05], trans_mm: 12.0, p: 0.5, mirror_p: 0.5 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.rot_deg >= 0.0)
            || !(self.trans_mm >= 0.0)
            || !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1])
            || !prob(self.p)
            || !prob(self.mirror_p)
        {
            return Err(Error::Config(format!("invalid [aug] section: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityConfig {
    pub min_hu: f64,
    pub max_hu: f64,
    pub f: [f64; 2],
    pub y: f64,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self { min_hu: -490.0, max_hu: 1040.0, f: [0.95, 1.05], y: 0.02 }
    }
}

impl IntensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_hu < self.max_hu) || !(self.f[0] > 0.0 && self.f[0] <= self.f[1]) || !(self.y > 0.0 && self.y < 0.5)
        {
            return Err(Error::Config(format!("invalid [intensity] section: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Volumes per region in calcaneus, ankle, knee, wrist order.
    pub n_per_region: [usize; 4],
    pub dims: usize,
    pub spacing_mm: f64,
    /// Fraction of patients contributing two volumes.
    pub pair_fraction: f64,
    /// Fraction of poses rotated beyond 90 degrees.
    pub hard_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_per_region: [160, 220, 274, 250], dims: 32, spacing_mm: 5.0, pair_fraction: 0.3, hard_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub repr: RepresentationKind,
    pub conv_channels: Vec<usize>,
    pub fc_widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self { variant: d.variant, repr: d.repr, conv_channels: d.conv_channels, fc_widths: d.fc_widths }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_step: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            lr: h.lr,
            lr_decay: h.lr_decay,
            decay_step: h.decay_step,
            momentum: h.momentum,
            batch_size: h.batch_size,
            epochs: h.epochs,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub fold: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub aug: AugmentConfig,
    pub intensity: IntensityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            fold: 0,
            seed: 0,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            aug: AugmentConfig::default(),
            intensity: IntensityConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative manifest paths are relative to the config file
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.aug.validate()?;
        self.intensity.validate()?;
        self.hyperparams().validate()?;
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        self.model_config([self.data.dims; 3]).validate()?;
        if self.fold >= crate::phantom::N_FOLDS {
            return Err(Error::Config(format!("fold must be < {}", crate::phantom::N_FOLDS)));
        }
        if !(0.0..=1.0).contains(&self.data.pair_fraction) || !(0.0..=1.0).contains(&self.data.hard_fraction) {
            return Err(Error::Config("data fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lr: self.train.lr,
            lr_decay: self.train.lr_decay,
            decay_step: self.train.decay_step,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
        }
    }

    pub fn model_config(&self, input_dims: [usize; 3]) -> ModelConfig {
        ModelConfig {
            variant: self.model.variant,
            repr: self.model.repr,
            input_dims,
            conv_channels: self.model.conv_channels.clone(),
            fc_widths: self.model.fc_widths.clone(),
            n_regions: crate::geometry::BodyRegion::COUNT,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_keys() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.aug.rot_deg, 45.0);
        assert_eq!(cfg.aug.scale, [0.95, 1.05]);
        assert_eq!(cfg.aug.trans_mm, 12.0);
        assert_eq!(cfg.aug.p, 0.5);
        assert_eq!(cfg.aug.mirror_p, 0.5);
        assert_eq!(cfg.intensity.min_hu, -490.0);
        assert_eq!(cfg.intensity.max_hu, 1040.0);
        assert_eq!(cfg.intensity.f, [0.95, 1.05]);
        assert_eq!(cfg.intensity.y, 0.02);
        assert_eq!(cfg.train.lr, 0.00164);
        assert_eq!(cfg.train.batch_size, 9);
    }

    #[test]
    fn parses_sections_and_round_trips() {
        let text = r#"
            manifest = "m.json"
            fold = 2
            seed = 5
            [model]
            variant = "with_class"
            repr = "quat"
            [aug]
            rot_deg = 30.0
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model.variant, Variant::WithClass);
        assert_eq!(cfg.model.repr, RepresentationKind::Quaternion);
        assert_eq!(cfg.aug.rot_deg, 30.0);
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("fold = 5").is_err());
        assert!(RunConfig::from_toml_str("[intensity]\ny = 0.7").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlr = 0.0").is_err());
        assert!(RunConfig::from_toml_str("[aug]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[model]\nrepr = \"6DXY\"").is_err());
    }
}
