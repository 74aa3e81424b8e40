//! Experiment configuration and the ablation variants.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Backbone, DenoiserConfig};
use crate::diffusion::{ScheduleKind, ScheduleSpec, TrainHyper};
use crate::error::{CdmError, Result};
use crate::metrics::{W1Norm, DEFAULT_QUANTILES};
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Model samples per counterfactual cell.
    pub model_samples: usize,
    /// Ground-truth simulator samples per counterfactual cell.
    pub truth_samples: usize,
    pub quantiles: usize,
    pub w1_norm: W1Norm,
    /// Cells sampled together in one reverse-diffusion batch.
    pub cells_per_batch: usize,
    /// Clamp the sampler's clean-volume estimate to the normalised range [0, 1]
    /// at every reverse step.
    pub clip_volume: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model_samples: 20,
            truth_samples: 100,
            quantiles: DEFAULT_QUANTILES,
            w1_norm: W1Norm::Mean,
            cells_per_batch: 100,
            clip_volume: true,
        }
    }
}

/// Grid searched by validation loss before evaluation. Empty lists mean
/// "use the base value only".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningGrid {
    pub lr0: Vec<f64>,
    pub embed_dim: Vec<usize>,
}

/// The design variants compared in the ablation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cdm,
    #[serde(rename = "k20")]
    Steps20,
    LinearBeta,
    ExtraResidualLayer,
    #[serde(rename = "embed_dim_8")]
    EmbedDim8,
    SimpleBackbone,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cdm,
        Variant::Steps20,
        Variant::LinearBeta,
        Variant::ExtraResidualLayer,
        Variant::EmbedDim8,
        Variant::SimpleBackbone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cdm => "cdm",
            Variant::Steps20 => "k20",
            Variant::LinearBeta => "linear_beta",
            Variant::ExtraResidualLayer => "extra_residual_layer",
            Variant::EmbedDim8 => "embed_dim_8",
            Variant::SimpleBackbone => "simple_backbone",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Cdm => "CDM",
            Variant::Steps20 => "K = 20 diffusion steps",
            Variant::LinearBeta => "Linear β schedule",
            Variant::ExtraResidualLayer => "Extra residual layer",
            Variant::EmbedDim8 => "Embedding dimension 8",
            Variant::SimpleBackbone => "Simple-NN backbone",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// `base` with this variant's change applied.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            Variant::Cdm => {}
            Variant::Steps20 => c.schedule.steps = 20,
            Variant::LinearBeta => c.schedule.kind = ScheduleKind::Linear,
            Variant::ExtraResidualLayer => c.model.residual_layers += 1,
            Variant::EmbedDim8 => {
                c.model.embed_dim = 8;
                c.model.num_heads = c.model.num_heads.min(8);
                c.tuning.embed_dim.clear();
            }
            Variant::SimpleBackbone => c.model.backbone = Backbone::FeedForward,
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub gammas: Vec<f64>,
    pub sizes: CohortSizes,
    pub model: DenoiserConfig,
    pub train: TrainHyper,
    pub schedule: ScheduleSpec,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub tuning: TuningGrid,
    pub ablation: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    /// Reduced cohorts and horizon sized for a single CPU core.
    pub fn desk() -> Self {
        ExperimentConfig {
            sim: SimConfig { horizon: 30, ..SimConfig::default() },
            gammas: vec![0.0, 5.0, 10.0],
            sizes: CohortSizes { train: 1000, val: 200, test: 200 },
            model: DenoiserConfig::default(),
            train: TrainHyper::default(),
            schedule: ScheduleSpec::default(),
            eval: EvalConfig::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            tuning: TuningGrid::default(),
            ablation: Variant::ALL.to_vec(),
        }
    }

    pub fn paper() -> Self {
        ExperimentConfig {
            sim: SimConfig { horizon: 60, ..SimConfig::default() },
            sizes: CohortSizes { train: 10_000, val: 1000, test: 1000 },
            train: TrainHyper::default(),
            ..ExperimentConfig::desk()
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Desk => ExperimentConfig::desk(),
            Scale::Paper => ExperimentConfig::paper(),
        }
    }

    /// Reads a TOML file whose tables override the fields of `base`.
    pub fn load(path: &Path, base: ExperimentConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CdmError::io(path, e))?;
        Self::from_toml_over(&text, base).map_err(|e| match e {
            CdmError::Config(m) => CdmError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_over(text: &str, base: ExperimentConfig) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| CdmError::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| CdmError::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| CdmError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CdmError::Config(e.to_string()))
    }

    /// The denoiser configuration with its step table sized to the schedule.
    pub fn model_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            diffusion_steps: self.schedule.steps,
            max_time: self.model.max_time.max(self.sim.horizon),
            ..self.model.clone()
        }
    }

    pub fn simulator(&self, gamma: f64) -> SimConfig {
        SimConfig { gamma_chemo: gamma, gamma_radio: gamma, ..self.sim.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(CdmError::Config(m.to_string()));
        if self.gammas.is_empty() {
            return err("gammas must be nonempty");
        }
        if self.gammas.iter().any(|g| !g.is_finite()) {
            return err("gammas must be finite");
        }
        if self.seeds.is_empty() {
            return err("seeds must be nonempty");
        }
        let CohortSizes { train, val, test } = self.sizes;
        if train == 0 || val == 0 || test == 0 {
            return err("cohort sizes must be at least 1");
        }
        if self.eval.model_samples == 0 || self.eval.truth_samples == 0 || self.eval.quantiles == 0 {
            return err("evaluation sample and quantile counts must be positive");
        }
        if self.eval.cells_per_batch == 0 {
            return err("cells_per_batch must be positive");
        }
        if self.tuning.lr0.iter().any(|l| !(*l > 0.0)) {
            return err("tuning learning rates must be positive");
        }
        self.sim.validate()?;
        self.model_config().validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        for &e in &self.tuning.embed_dim {
            DenoiserConfig { embed_dim: e, ..self.model_config() }.validate()?;
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Formats γ for file names: `5` → `5`, `2.5` → `2.5`.
pub fn gamma_tag(g: f64) -> String {
    format!("{g}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_unspecified_fields() {
        let c = ExperimentConfig::from_toml_over(
            "gammas = [1.0]\n[sizes]\ntrain = 7\nval = 2\ntest = 3\n[model]\nembed_dim = 16\n",
            ExperimentConfig::paper(),
        )
        .unwrap();
        assert_eq!(c.gammas, vec![1.0]);
        assert_eq!(c.sizes.train, 7);
        assert_eq!(c.model.embed_dim, 16);
        assert_eq!(c.model.num_heads, 8);
        assert_eq!(c.sim.horizon, 60);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::desk();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml_over(&text, ExperimentConfig::paper()).unwrap(), c);
    }

    #[test]
    fn preconditions() {
        assert!(ExperimentConfig::desk().validate().is_ok());
        let empty = ExperimentConfig { gammas: vec![], ..ExperimentConfig::desk() };
        assert!(matches!(empty.validate(), Err(CdmError::Config(_))));
        let no_seeds = ExperimentConfig { seeds: vec![], ..ExperimentConfig::desk() };
        assert!(matches!(no_seeds.validate(), Err(CdmError::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml_over("gammas = \"x\"", ExperimentConfig::desk()),
            Err(CdmError::Config(_))
        ));
    }

    #[test]
    fn variants_change_one_thing() {
        let base = ExperimentConfig::desk();
        assert_eq!(Variant::Cdm.apply(&base), base);
        assert_eq!(Variant::Steps20.apply(&base).model_config().diffusion_steps, 20);
        assert_eq!(Variant::SimpleBackbone.apply(&base).model.backbone, Backbone::FeedForward);
        assert_eq!(Variant::SimpleBackbone.apply(&base).model.embed_dim, base.model.embed_dim);
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()), Some(v));
            assert_eq!(toml::Value::try_from(v).unwrap().as_str(), Some(v.name()));
            v.apply(&base).validate().unwrap();
        }
    }
}
