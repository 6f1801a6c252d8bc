//! Run configuration: a TOML file merged over a preset, then flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tassel_core::data::SplitMode;
use tassel_core::{ModelConfig, SynthConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 128 px images, depth 2, width 64.
    #[default]
    Tiny,
    /// 384 px images, depth 12, width 768.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Scenes written by `synth`.
    pub scenes: usize,
    /// Relative split sizes: two (train/test) or three (train/val/test).
    pub split_ratios: Vec<f64>,
    pub split_mode: SplitMode,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            scenes: 300,
            split_ratios: vec![4.0, 1.0, 1.0],
            split_mode: SplitMode::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory; empty means it must be given with `--data`.
    pub root: PathBuf,
    pub train_split: String,
    /// Empty disables validation.
    pub val_split: String,
    pub eval_split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::new(),
            train_split: "train".into(),
            val_split: "val".into(),
            eval_split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub small_max: f64,
    pub large_min: f64,
    pub fps_warmup: usize,
    pub fps_iters: usize,
    /// Independent throughput runs whose medians are compared.
    pub fps_repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            small_max: 32.0,
            large_min: 96.0,
            fps_warmup: 5,
            fps_iters: 30,
            fps_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    pub tol: f64,
    pub abs_floor: f64,
    pub seeds: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeSection {
    pub opacity: f64,
}

impl Default for VisualizeSection {
    fn default() -> Self {
        Self { opacity: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataSection,
    pub dataset: DatasetSection,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
    pub visualize: VisualizeSection,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Tiny => (ModelConfig::tiny(), TrainConfig::tiny()),
            Preset::Full => (ModelConfig::default(), TrainConfig::default()),
        };
        let synth = SynthConfig {
            width: model.image_size,
            height: model.image_size,
            ..SynthConfig::default()
        };
        Self {
            preset,
            synth,
            model,
            train,
            ..Self::default()
        }
    }

    /// Preset defaults, overlaid with `file` when given. `preset` overrides
    /// the file's own `preset` key.
    pub fn resolve(file: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let table = match file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        let preset = match (preset, table.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.clone().try_into().context("config key `preset`")?,
            (None, None) => Preset::default(),
        };
        let mut merged = match toml::Value::try_from(Self::for_preset(preset))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut merged, table);
        merged.insert("preset".into(), toml::Value::try_from(preset)?);
        let cfg: Self = toml::Value::Table(merged).try_into().context("invalid config")?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.eval.fps_repeats == 0 {
            bail!("eval.fps_repeats must be at least 1");
        }
        if self.gradcheck.seeds == 0 {
            bail!("gradcheck.seeds must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Recursively overlays `over` onto `base`; tables merge, other values replace.
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
