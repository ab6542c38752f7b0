//! Run configuration: a versioned TOML document. Unknown keys are rejected
//! and every error names the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::regularizers::{validate_groups, EdgeGroup, GroupPreset, RegularizerConfig};
use crate::supernet::NetworkSpec;
use crate::tensor::Float;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go; relative paths resolve against the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub regularizers: RegularizerConfig,
    #[serde(default)]
    pub groups: GroupsConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Synthetic task only.
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    /// CIFAR-10 only: directory with the binary batch files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub horizontal_flip: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Synthetic,
            classes: 4,
            train_count: 400,
            test_count: 200,
            height: 16,
            width: 16,
            path: None,
            horizontal_flip: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub cells: usize,
    pub channels: usize,
    pub nodes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { cells: 8, channels: 16, nodes: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: Float,
    pub momentum: Float,
    pub weight_decay: Float,
    pub arch_lr: Float,
    pub arch_betas: (Float, Float),
    pub arch_weight_decay: Float,
    pub arch_eps: Float,
    /// Share of the training set used for weight updates.
    pub split_fraction: Float,
    pub retrain_epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        SearchConfig {
            epochs: 50,
            batch_size: 64,
            lr0: 0.25,
            momentum: 0.9,
            weight_decay: 3e-4,
            arch_lr: adam.lr,
            arch_betas: adam.betas,
            arch_weight_decay: adam.weight_decay,
            arch_eps: adam.eps,
            split_fraction: 0.5,
            retrain_epochs: 30,
        }
    }
}

impl SearchConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.arch_lr, betas: self.arch_betas, weight_decay: self.arch_weight_decay, eps: self.arch_eps }
    }
}

/// A named preset or an explicit list, never both.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<GroupPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<Vec<EdgeGroup>>,
}

impl GroupsConfig {
    pub fn preset(preset: GroupPreset) -> Self {
        GroupsConfig { preset: Some(preset), explicit: None }
    }

    pub fn resolve(&self, network: &NetworkConfig) -> Result<Vec<EdgeGroup>> {
        let cell = crate::supernet::CellSpec::new(network.nodes).map_err(|e| Error::config("network.nodes", e.to_string()))?;
        let groups = match (&self.preset, &self.explicit) {
            (Some(_), Some(_)) => return Err(Error::config("groups", "give either `preset` or `explicit`, not both")),
            (Some(p), None) => p.groups(cell)?,
            (None, Some(list)) => list.clone(),
            (None, None) => GroupPreset::Balanced8.groups(cell)?,
        };
        validate_groups(&groups, cell).map_err(|e| match e {
            Error::Config { field, message } => Error::Config { field: format!("groups.{field}"), message },
            other => other,
        })?;
        Ok(groups)
    }
}

impl RunConfig {
    /// Toy configuration: small network, synthetic data.
    pub fn toy() -> RunConfig {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            task: TaskConfig::default(),
            network: NetworkConfig { cells: 1, channels: 4, nodes: 6 },
            search: SearchConfig { epochs: 30, batch_size: 50, arch_lr: 0.05, ..SearchConfig::default() },
            regularizers: RegularizerConfig::default(),
            groups: GroupsConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".to_string() } else { path }, e.into_inner().message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The configuration with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {CONFIG_SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let t = &self.task;
        match t.kind {
            TaskKind::Synthetic => {
                if t.path.is_some() {
                    return Err(Error::config("task.path", "a synthetic task takes no dataset path"));
                }
                if t.classes < 2 {
                    return Err(Error::config("task.classes", "need at least 2 classes"));
                }
                if t.train_count == 0 || t.test_count == 0 {
                    return Err(Error::config("task.train_count", "train and test counts must be positive"));
                }
                if t.height % 4 != 0 || t.width % 4 != 0 || t.height == 0 || t.width == 0 {
                    return Err(Error::config("task.height", "height and width must be positive multiples of 4"));
                }
            }
            TaskKind::Cifar10 => {
                if t.path.is_none() {
                    return Err(Error::config("task.path", "a cifar10 task needs the dataset directory"));
                }
            }
        }
        self.network_spec()?.validate().map_err(|e| Error::config("network", e.to_string()))?;
        let (h, w) = self.image_extent();
        let factor = self.network_spec()?.downsampling();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::config("task.height", format!("{h}x{w} images do not survive {factor}x downsampling")));
        }
        let s = &self.search;
        if s.epochs == 0 {
            return Err(Error::config("search.epochs", "must be at least 1"));
        }
        if s.batch_size == 0 {
            return Err(Error::config("search.batch_size", "must be at least 1"));
        }
        if !(s.split_fraction > 0.0 && s.split_fraction < 1.0) {
            return Err(Error::config("search.split_fraction", "must lie in (0, 1)"));
        }
        for (field, v) in [
            ("search.lr0", s.lr0),
            ("search.momentum", s.momentum),
            ("search.weight_decay", s.weight_decay),
            ("search.arch_lr", s.arch_lr),
            ("search.arch_weight_decay", s.arch_weight_decay),
            ("search.arch_eps", s.arch_eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a non-negative number"));
            }
        }
        let (b1, b2) = s.arch_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("search.arch_betas", "both must lie in [0, 1)"));
        }
        self.regularizers.validate()?;
        self.groups.resolve(&self.network)?;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self.task.kind {
            TaskKind::Synthetic => self.task.classes,
            TaskKind::Cifar10 => data::CIFAR_CLASSES,
        }
    }

    pub fn image_extent(&self) -> (usize, usize) {
        match self.task.kind {
            TaskKind::Synthetic => (self.task.height, self.task.width),
            TaskKind::Cifar10 => (data::CIFAR_SIDE, data::CIFAR_SIDE),
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec {
            cells: self.network.cells,
            channels: self.network.channels,
            nodes: self.network.nodes,
            in_channels: 3,
            classes: self.classes(),
        })
    }

    pub fn groups(&self) -> Result<Vec<EdgeGroup>> {
        self.groups.resolve(&self.network)
    }

    /// Training and test sets. Synthetic test data uses a derived seed so it
    /// never overlaps the training draw.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let t = &self.task;
        match t.kind {
            TaskKind::Synthetic => Ok((
                data::synth_generate(t.classes, t.train_count, t.height, t.width, self.seed)?,
                data::synth_generate(t.classes, t.test_count, t.height, t.width, self.seed ^ 0x7e57_7e57)?,
            )),
            TaskKind::Cifar10 => data::load_cifar10_dir(t.path.as_deref().expect("validated")),
        }
    }

    /// Hex digest of the resolved configuration.
    pub fn run_id(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
