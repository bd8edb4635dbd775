//! TOML run configuration.
//!
//! ```toml
//! name = "desk"
//! out = "runs"              # optional output root
//!
//! [data]
//! source = "synthetic"      # or "folder" with `root = "path/to/classes"`
//! seed = 0
//! split_ratio = 0.8
//! input_hw = [32, 32]
//! [data.synthetic]
//! classes = 4
//! train_per_class = 50
//! test_total = 50
//!
//! [student]                # distillkit::StudentConfig fields
//! [teacher]                # distillkit::TeacherConfig fields
//! [teacher_train]          # epochs / lr overrides, or a checkpoint to reuse
//! [train]                  # distillkit::TrainConfig fields
//! [ablate]
//! seeds = [0, 1, 2]
//! ```
//!
//! The model sections' `input_hw` and `num_classes` are overwritten from the
//! data section and the dataset itself.

use std::path::{Path, PathBuf};

use distillkit::backbone::{build_student, build_teacher};
use distillkit::data::Normalization;
use distillkit::{StudentConfig, TeacherConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_total: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 50,
            test_total: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub seed: u64,
    pub split_ratio: f64,
    pub input_hw: (usize, usize),
    pub normalization: Normalization,
    /// Decode folder datasets into memory once instead of every epoch.
    pub preload: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            seed: 0,
            split_ratio: 0.8,
            input_hw: (32, 32),
            normalization: Normalization::default(),
            preload: true,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    /// Defaults to `train.epochs`.
    pub epochs: Option<usize>,
    /// Defaults to `train.lr`.
    pub lr: Option<f64>,
    /// Load this teacher checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub teacher_train: TeacherTrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub input_hw: Option<(usize, usize)>,
    pub dataset_root: Option<PathBuf>,
}

pub const OUT_ENV: &str = "DISTILLKIT_OUT";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(hw) = o.input_hw {
            self.data.input_hw = hw;
        }
        if let Some(root) = &o.dataset_root {
            self.data.source = DataSource::Folder;
            self.data.root = Some(root.clone());
        }
        self.student.input_hw = self.data.input_hw;
        self.teacher.input_hw = self.data.input_hw;
    }

    /// Field-level checks that do not need the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Usage(format!("config field {field}: {msg}")));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad("name", format!("'{}' must be nonempty and use only [A-Za-z0-9-_.]", self.name));
        }
        let d = &self.data;
        if d.input_hw.0 == 0 || d.input_hw.1 == 0 {
            return bad("data.input_hw", "must be positive".into());
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return bad("data.split_ratio", format!("must be in (0, 1), got {}", d.split_ratio));
        }
        if d.normalization.validate().is_err() {
            return bad("data.normalization", "std must be positive and values finite".into());
        }
        match d.source {
            DataSource::Folder => match &d.root {
                None => return bad("data.root", "required when source = \"folder\"".into()),
                Some(root) if !root.is_dir() => {
                    return bad("data.root", format!("dataset root {} does not exist", root.display()))
                }
                Some(_) => {}
            },
            DataSource::Synthetic => {
                let s = &d.synthetic;
                if s.classes < 2 {
                    return bad("data.synthetic.classes", "must be >= 2".into());
                }
                if s.train_per_class == 0 || s.test_total == 0 {
                    return bad("data.synthetic", "sample counts must be positive".into());
                }
            }
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        let teacher_cfg = self.teacher_train_config();
        if let Err(e) = teacher_cfg.validate() {
            return bad("teacher_train", e.to_string());
        }
        if let Some(ck) = &self.teacher_train.checkpoint {
            if !ck.is_file() {
                return bad("teacher_train.checkpoint", format!("{} does not exist", ck.display()));
            }
        }
        // Class count is irrelevant for buildability; use a placeholder.
        let classes = self.student.num_classes.max(2);
        if let Err(e) = build_student(&StudentConfig {
            num_classes: classes,
            ..self.student.clone()
        }) {
            return bad("student", e.to_string());
        }
        if let Err(e) = build_teacher(&TeacherConfig {
            num_classes: classes,
            ..self.teacher.clone()
        }) {
            return bad("teacher", e.to_string());
        }
        if self.ablate.seeds.is_empty() {
            return bad("ablate.seeds", "must list at least one seed".into());
        }
        Ok(())
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_train.epochs.unwrap_or(self.train.epochs),
            lr: self.teacher_train.lr.unwrap_or(self.train.lr),
            distill_enabled: false,
            ..self.train.clone()
        }
    }

    /// `--out`, then `DISTILLKIT_OUT`, then the file's `out`, then `runs`.
    pub fn out_root(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Some(env) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(env);
        }
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.name, self.train.seed)
    }

    /// SHA-256 of the resolved config, excluding the output location.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out: None,
            ..self.clone()
        };
        let digest = Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml("name = \"x\"").unwrap();
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.data.source, DataSource::Synthetic);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_toml("name = \"x\"\n[train]\nmomentun = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("momentun"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn field_level_validation() {
        let mut c = RunConfig::from_toml("name = \"x\"\n[train]\nmomentum = 1.5\n").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("train") && err.contains("momentum"), "{err}");
        c.train.momentum = 0.9;
        c.data.source = DataSource::Folder;
        c.data.root = Some(PathBuf::from("/definitely/not/here"));
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("/definitely/not/here"), "{err}");
    }

    #[test]
    fn overrides_and_hash() {
        let mut c = RunConfig::from_toml("name = \"x\"").unwrap();
        let h0 = c.hash();
        c.apply(&Overrides {
            seed: Some(7),
            input_hw: Some((16, 16)),
            out: Some(PathBuf::from("elsewhere")),
            dataset_root: None,
        });
        assert_eq!(c.run_id(), "x-seed7");
        assert_eq!(c.student.input_hw, (16, 16));
        assert_ne!(c.hash(), h0);
        let moved = RunConfig {
            out: Some(PathBuf::from("other")),
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
        assert_eq!(c.out_root(Some(Path::new("cli"))), PathBuf::from("cli"));
    }

    #[test]
    fn toml_roundtrip() {
        let c = RunConfig::from_toml("name = \"x\"").unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
