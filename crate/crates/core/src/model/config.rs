use serde::{Deserialize, Serialize};

use crate::adaptor_s::{default_scales, Combine, Scale};
use crate::adaptor_t::{default_offsets, AdaptorTConfig, SelectionMode, DEFAULT_K};
use crate::error::{Error, Result};
use crate::routes::{MergeRule, RouteKind};
use crate::ssm::Discretization;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    /// Adaptors run inside the solver, between its two phases.
    #[default]
    Sequential,
    /// Adaptors form a zero-initialized side branch added to the block output.
    Parallel,
    None,
}

impl std::str::FromStr for Insertion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Insertion::Sequential),
            "parallel" => Ok(Insertion::Parallel),
            "none" => Ok(Insertion::None),
            o => Err(Error::Config(format!("unknown insertion form `{o}`"))),
        }
    }
}

/// Initialization of adaptor weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorInit {
    /// All weights zero; position biases spread the K samples over the past.
    #[default]
    Zero,
    /// Uniform predictor weights and Kaiming-uniform kernels.
    Random,
}

impl std::str::FromStr for AdaptorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(AdaptorInit::Zero),
            "random" => Ok(AdaptorInit::Random),
            o => Err(Error::Config(format!("unknown init `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptorTSpec {
    pub k: usize,
    pub mode: SelectionMode,
    pub causal: bool,
    pub weight_sharing: bool,
    /// Static-mode offsets; defaults to −1, −2, −4, …
    pub offsets: Option<Vec<i64>>,
}

impl Default for AdaptorTSpec {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            mode: SelectionMode::Learnable,
            causal: true,
            weight_sharing: false,
            offsets: None,
        }
    }
}

impl AdaptorTSpec {
    pub fn to_config(&self, sequences: usize) -> AdaptorTConfig {
        AdaptorTConfig {
            k: self.k,
            sequences,
            mode: self.mode,
            causal: self.causal,
            weight_sharing: self.weight_sharing,
            static_offsets: self.offsets.clone().unwrap_or_else(|| default_offsets(self.k)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptorSSpec {
    pub scales: Vec<Scale>,
    pub combine: Combine,
    /// Defaults to on for sequential insertion and off for parallel.
    pub residual: Option<bool>,
}

impl Default for AdaptorSSpec {
    fn default() -> Self {
        Self {
            scales: default_scales(),
            combine: Combine::Sum,
            residual: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub dim: usize,
    pub state: usize,
    pub routes: Vec<RouteKind>,
    pub merge: MergeRule,
    pub adaptor_t: Option<AdaptorTSpec>,
    pub adaptor_s: Option<AdaptorSSpec>,
    pub insertion: Insertion,
    pub ffn_ratio: usize,
    pub norm_eps: f64,
    pub discretization: Discretization,
    pub per_channel_c: bool,
    pub adaptor_init: AdaptorInit,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            state: 4,
            routes: vec![RouteKind::RowForward, RouteKind::RowBackward],
            merge: MergeRule::Mean,
            adaptor_t: None,
            adaptor_s: None,
            insertion: Insertion::None,
            ffn_ratio: 4,
            norm_eps: 1e-5,
            discretization: Discretization::Zoh,
            per_channel_c: false,
            adaptor_init: AdaptorInit::Zero,
        }
    }
}

impl BlockConfig {
    /// Toy block with both adaptors inserted in `form`.
    pub fn with_adaptors(dim: usize, form: Insertion) -> Self {
        Self {
            dim,
            adaptor_t: Some(AdaptorTSpec::default()),
            adaptor_s: Some(AdaptorSSpec::default()),
            insertion: form,
            ..Self::default()
        }
    }

    pub fn has_adaptors(&self) -> bool {
        self.adaptor_t.is_some() || self.adaptor_s.is_some()
    }

    pub fn s_residual(&self) -> bool {
        self.adaptor_s
            .as_ref()
            .and_then(|s| s.residual)
            .unwrap_or(self.insertion == Insertion::Sequential)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.state == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("dim, state and ffn_ratio must be positive".into()));
        }
        if self.routes.is_empty() {
            return Err(Error::Config("at least one scan route is required".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        match (self.insertion, self.has_adaptors()) {
            (Insertion::None, true) => {
                return Err(Error::Config("adaptors configured but insertion is none".into()))
            }
            (Insertion::Sequential | Insertion::Parallel, false) => {
                return Err(Error::Config(format!(
                    "insertion {:?} needs at least one adaptor",
                    self.insertion
                )))
            }
            _ => {}
        }
        if self.insertion == Insertion::Parallel {
            if self.adaptor_s.is_none() {
                return Err(Error::Config(
                    "parallel insertion needs an adaptor-s bank to close the branch".into(),
                ));
            }
            if self.s_residual() {
                return Err(Error::Config(
                    "parallel insertion cannot use a residual adaptor-s bank".into(),
                ));
            }
        }
        if let Some(t) = &self.adaptor_t {
            t.to_config(self.routes.len()).validate()?;
        }
        if let Some(s) = &self.adaptor_s {
            if s.scales.is_empty() {
                return Err(Error::Config("adaptor-s needs at least one scale".into()));
            }
            for sc in &s.scales {
                sc.validate()?;
            }
        }
        Ok(())
    }
}

/// Defaults to the toy shape: single-channel `8×8` inputs, one cell per
/// pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub patch_size: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_dims: vec![8, 16, 32, 64],
            stage_depths: vec![1, 1, 1, 1],
            patch_size: 1,
            num_classes: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.len() != 4 || self.stage_depths.len() != 4 {
            return Err(Error::Config("the backbone has exactly four stages".into()));
        }
        for w in self.stage_dims.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::Config(format!(
                    "each stage must double the channels, got {:?}",
                    self.stage_dims
                )));
            }
        }
        if self.stage_dims[0] == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return Err(Error::Config("dims, patch size and channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Checks that an `h×w` image survives patching and three halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let unit = self.patch_size * 8;
        if h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "backbone_forward",
                format!("{h}×{w} is not divisible by patch_size·8 = {unit}"),
            ));
        }
        Ok(())
    }
}
