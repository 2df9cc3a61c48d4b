use std::path::{Path, PathBuf};

use anyhow::Context;
use ctrlgan_core::data::LoadOptions;
use ctrlgan_core::metrics::Metric;
use ctrlgan_core::training::TrainConfig;
use ctrlgan_core::{Error, StructureKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub structure_channels: usize,
    pub structure_kind: StructureKind,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { root: None, structure_channels: 3, structure_kind: StructureKind::Skeleton }
    }
}

impl DataSection {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { structure_channels: self.structure_channels, structure_kind: self.structure_kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: Vec<Metric>,
    pub data_range: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { metrics: Metric::ALL.to_vec(), data_range: 255.0 }
    }
}

/// TOML run configuration: `[data]`, `[train]` (with `[train.model]`,
/// `[train.weights]`, `[train.augmentation]`) and `[eval]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config `{}`", path.display()))?;
        Ok(Self::parse(&text).with_context(|| format!("in config `{}`", path.display()))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctrlgan_core::training::{AblationRow, Preset};

    #[test]
    fn parses_nested_sections() {
        let c = RunConfigFile::parse(
            "[data]\nroot = \"toy\"\n[train]\npreset = \"gesture\"\nablation = \"E22\"\nepochs = 3\n\
             [train.model]\ngen_base_channels = 8\n[eval]\nmetrics = [\"psnr\", \"fid\"]\n",
        )
        .unwrap();
        assert_eq!(c.train.preset, Preset::Gesture);
        assert_eq!(c.train.ablation, AblationRow::E22);
        assert_eq!(c.train.model.gen_base_channels, 8);
        assert_eq!(c.train.model.num_res_blocks, 9);
        assert_eq!(c.eval.metrics, vec![Metric::Psnr, Metric::Fid]);
    }

    #[test]
    fn rejects_unknown_keys() {
        let e = RunConfigFile::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(e.is_validation());
    }

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfigFile::default();
        assert_eq!(RunConfigFile::parse(&c.to_toml()).unwrap(), c);
    }
}
