//! Run configuration: preset defaults, overlaid by a TOML file, overlaid by flags.
//!
//! ```toml
//! preset = "tiny"          # or "large"
//! seed = 7
//!
//! [data]
//! split = [0.8, 0.1, 0.1]
//! balance = true
//!
//! [train]
//! epochs = 10
//! [train.optimizer]
//! lr = 1e-3
//!
//! [morph]
//! erosion_radius = 1
//! window = { center = 50.0, width = 100.0 }
//! ```
//!
//! Sections `[phantom]`, `[augment]` and `[train]` mirror the fields of the
//! corresponding library structs. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dtvit_core::datapipe::AugmentConfig;
use dtvit_core::morph::{MorphParams, Window};
use dtvit_core::phantom::PhantomSpec;
use dtvit_core::train::TrainConfig;
use dtvit_core::DtvitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// D=64, L=2, 4 heads, 32×32 input; the desk-scale configuration.
    Tiny,
    /// ViT-Large/16 at 224×224; for structural checks.
    Large,
}

impl Preset {
    pub fn model(self) -> DtvitConfig {
        match self {
            Preset::Tiny => DtvitConfig::tiny(),
            Preset::Large => DtvitConfig::large(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Train/val/test patient fractions, used when the index has no split column.
    pub split: [f64; 3],
    /// Replicate train records to equal class counts.
    pub balance: bool,
    /// Phantom slices per synthetic patient.
    pub slices_per_patient: usize,
    /// Phantom counts per class: normal, deep, lobar, subtentorial.
    pub counts: [usize; 4],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split: [0.8, 0.1, 0.1],
            balance: true,
            slices_per_patient: 64,
            counts: [100; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub phantom: PhantomSpec,
    pub morph: MorphParams,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Defaults for a preset.
    ///
    /// The tiny preset renders 64×64 phantoms with a brain window, halves
    /// them to 32×32 and trains at 1e-3, since a from-scratch model barely
    /// moves at the fine-tuning rate of 2e-5 within a few epochs.
    pub fn preset(preset: Preset) -> Self {
        let mut c = RunConfig {
            preset,
            seed: 0,
            data: DataConfig::default(),
            phantom: PhantomSpec::default(),
            morph: MorphParams::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
        };
        if preset == Preset::Tiny {
            c.phantom.size = 64;
            c.morph.erosion_radius = 1;
            c.morph.window = Some(Window {
                center: 50.0,
                width: 100.0,
            });
            c.augment.downsample = 2;
            c.augment.crop_size = 32;
            c.train.optimizer.lr = 1e-3;
        }
        c
    }

    /// Preset defaults overlaid with `file`. The preset named in the file is
    /// used unless `preset` overrides it.
    pub fn load(preset: Option<Preset>, file: Option<&Path>) -> anyhow::Result<Self> {
        let overlay: toml::Table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        let from_file = match overlay.get("preset") {
            Some(v) => Some(
                v.clone()
                    .try_into::<Preset>()
                    .context("`preset` must be \"tiny\" or \"large\"")?,
            ),
            None => None,
        };
        let chosen = preset.or(from_file).unwrap_or(Preset::Tiny);
        let mut base = toml::Table::try_from(RunConfig::preset(chosen))?;
        merge(&mut base, overlay);
        base.insert("preset".into(), toml::Value::try_from(chosen)?);
        let cfg: RunConfig = base.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> DtvitConfig {
        self.preset.model()
    }

    /// Train config with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.phantom.validate()?;
        self.morph.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        let split = self.data.split;
        if split.iter().any(|&r| r < 0.0) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!("data.split must be non-negative and sum to 1");
        }
        if self.data.slices_per_patient == 0 {
            bail!("data.slices_per_patient must be positive");
        }
        let p = self.model().encoder.patch;
        if self.augment.crop_size != p.height || self.augment.crop_size != p.width {
            bail!(
                "augment.crop_size {} does not match the {} model input {}x{}",
                self.augment.crop_size,
                self.preset_name(),
                p.height,
                p.width
            );
        }
        Ok(())
    }

    pub fn preset_name(&self) -> &'static str {
        match self.preset {
            Preset::Tiny => "tiny",
            Preset::Large => "large",
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
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
