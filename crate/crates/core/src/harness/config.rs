use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{SyntheticSpec, Task};
use crate::error::{Error, Result};
use crate::grad::AdamWConfig;
use crate::model::{AdaptorInit, AdaptorSSpec, AdaptorTSpec, BackboneConfig, BlockConfig, Insertion};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise: f64,
    /// Directory of MATD tensors (with `labels.txt`) used instead of the
    /// synthetic task; split into train/test by `train_samples`.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::TwoClassTexture,
            height: 8,
            width: 8,
            channels: 1,
            train_samples: 64,
            test_samples: 64,
            noise: 0.1,
            dir: None,
        }
    }
}

impl DataConfig {
    /// Train and test splits come from disjoint sample streams of `seed`.
    pub fn specs(&self, seed: u64) -> (SyntheticSpec, SyntheticSpec) {
        let spec = |samples, stream| SyntheticSpec {
            task: self.task,
            height: self.height,
            width: self.width,
            channels: self.channels,
            samples,
            seed: derive_seed(seed, stream),
            noise: self.noise,
        };
        (spec(self.train_samples, 1), spec(self.test_samples, 2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Continued training after inserting zero-initialized parallel
    /// adaptors into an adaptor-free model; 0 disables.
    pub booster_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            optimizer: AdamWConfig::default(),
            booster_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Base checkpoint; when absent the base is pretrained on `source`.
    pub base: Option<PathBuf>,
    pub source: DataConfig,
    pub pretrain_steps: usize,
    pub insertion: Insertion,
    pub init: AdaptorInit,
    pub adaptor_t: Option<AdaptorTSpec>,
    pub adaptor_s: Option<AdaptorSSpec>,
    /// Also train a head-only linear probe on the frozen base.
    pub probe: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            base: None,
            source: DataConfig::default(),
            pretrain_steps: 200,
            insertion: Insertion::Parallel,
            init: AdaptorInit::Zero,
            adaptor_t: Some(AdaptorTSpec {
                weight_sharing: true,
                ..AdaptorTSpec::default()
            }),
            adaptor_s: Some(AdaptorSSpec::default()),
            probe: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub state: usize,
    /// Parallel-solver threads; 0 uses every core.
    pub workers: usize,
    pub chunk: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1 << 10, 1 << 12, 1 << 14],
            channels: 8,
            state: 16,
            workers: 1,
            chunk: crate::ssm::DEFAULT_CHUNK,
            repeats: 5,
        }
    }
}

/// One sweep dimension. Supported names: `adaptor_t.mode`,
/// `adaptor_s.scales` (number of default scales kept), `insertion`,
/// `init`, `weight_sharing`, `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axes: Vec<Axis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub block: BlockConfig,
    /// Top-level `[adaptor_t]` / `[adaptor_s]` tables replace the block's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptor_t: Option<AdaptorTSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptor_s: Option<AdaptorSSpec>,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    /// Toy backbone on 8×8 single-channel inputs with both adaptors
    /// inserted sequentially.
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            block: BlockConfig::with_adaptors(8, Insertion::Sequential),
            adaptor_t: None,
            adaptor_s: None,
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            bench: BenchConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = cfg.adaptor_t.take() {
            cfg.block.adaptor_t = Some(t);
        }
        if let Some(s) = cfg.adaptor_s.take() {
            cfg.block.adaptor_s = Some(s);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Shape checks shared by every training command.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.block.validate()?;
        if self.data.dir.is_none() {
            self.data.specs(self.seed).0.validate()?;
        }
        if self.data.channels != self.backbone.in_channels {
            return Err(Error::Config(format!(
                "data has {} channels but the backbone expects {}",
                self.data.channels, self.backbone.in_channels
            )));
        }
        self.backbone
            .check_input(self.data.height, self.data.width)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.train.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Applies one ablation override to a config.
pub fn apply_axis(cfg: &mut RunConfig, name: &str, value: &toml::Value) -> Result<()> {
    let bad = || Error::Config(format!("bad value {value} for axis `{name}`"));
    let text = || value.as_str().ok_or_else(bad);
    match name {
        "adaptor_t.mode" => {
            let mode = text()?.parse()?;
            cfg.block.adaptor_t.get_or_insert_with(AdaptorTSpec::default).mode = mode;
        }
        "adaptor_s.scales" => {
            let n = value.as_integer().filter(|&n| n >= 1).ok_or_else(bad)? as usize;
            let spec = cfg.block.adaptor_s.get_or_insert_with(AdaptorSSpec::default);
            spec.scales = (0..n)
                .map(|i| crate::adaptor_s::Scale {
                    size: 3,
                    dilation: 1 << i,
                })
                .collect();
        }
        "weight_sharing" => {
            let on = value.as_bool().ok_or_else(bad)?;
            cfg.block.adaptor_t.get_or_insert_with(AdaptorTSpec::default).weight_sharing = on;
        }
        "init" => cfg.block.adaptor_init = text()?.parse()?,
        "insertion" => cfg.block.insertion = text()?.parse()?,
        "seed" => cfg.seed = value.as_integer().filter(|&n| n >= 0).ok_or_else(bad)? as u64,
        _ => return Err(Error::Config(format!("unknown ablation axis `{name}`"))),
    }
    Ok(())
}

/// Makes adaptor presence consistent with `insertion` after overrides.
pub fn normalize_block(block: &mut BlockConfig) {
    match block.insertion {
        Insertion::None => {
            block.adaptor_t = None;
            block.adaptor_s = None;
        }
        Insertion::Parallel => {
            let s = block.adaptor_s.get_or_insert_with(AdaptorSSpec::default);
            s.residual = None;
        }
        Insertion::Sequential => {
            if !block.has_adaptors() {
                block.adaptor_t = Some(AdaptorTSpec::default());
                block.adaptor_s = Some(AdaptorSSpec::default());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptor_t::SelectionMode;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 9\n[train]\nsteps = 3\n[block]\ninsertion = \"none\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.batch, 8);
        assert!(cfg.block.adaptor_t.is_none());
    }

    #[test]
    fn top_level_adaptor_tables_fill_the_block() {
        let cfg = RunConfig::from_toml(
            "[block]\ninsertion = \"sequential\"\n[adaptor_t]\nk = 2\nmode = \"static\"\n",
        )
        .unwrap();
        let t = cfg.block.adaptor_t.as_ref().unwrap();
        assert_eq!((t.k, t.mode), (2, SelectionMode::Static));
        assert!(cfg.block.adaptor_s.is_none());
        cfg.block.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train]\nstep = 1").is_err());
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.data.channels = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn axes_override_the_block() {
        let mut cfg = RunConfig::default();
        apply_axis(&mut cfg, "adaptor_t.mode", &"static".into()).unwrap();
        apply_axis(&mut cfg, "adaptor_s.scales", &toml::Value::Integer(1)).unwrap();
        apply_axis(&mut cfg, "insertion", &"parallel".into()).unwrap();
        normalize_block(&mut cfg.block);
        cfg.block.validate().unwrap();
        assert_eq!(cfg.block.adaptor_t.as_ref().unwrap().mode, SelectionMode::Static);
        assert_eq!(cfg.block.adaptor_s.as_ref().unwrap().scales.len(), 1);
        assert!(apply_axis(&mut cfg, "depth", &toml::Value::Integer(1)).is_err());
        assert!(apply_axis(&mut cfg, "init", &toml::Value::Integer(1)).is_err());
    }
}
