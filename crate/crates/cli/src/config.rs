//! Run configuration: built-in defaults, overridden by a TOML file, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ovafuse_core::fusion::Objective;
use ovafuse_core::fusion::FusionMode;
use ovafuse_core::synth::SynthesisConfig;
use ovafuse_core::BackboneKind;
use ovafuse_models::{Scale, TrainConfig};

use crate::error::CliError;

/// Name of the resolved-config echo written into every output directory.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: Option<BackboneKind>,
    pub scale: Scale,
    pub pretrained: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: None,
            scale: Scale::Tiny,
            pretrained: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// `denconst` or `denconrest`.
    pub preset: Option<String>,
    pub mode: FusionMode,
    pub objective: Objective,
    pub step: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            preset: None,
            mode: FusionMode::SigmoidWeighted,
            objective: Objective::F1,
            step: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root.
    pub root: Option<PathBuf>,
    pub backbone: BackboneConfig,
    /// Training, preprocessing, holdout and worker settings.
    pub train: TrainConfig,
    pub synth: SynthesisConfig,
    pub fusion: FusionConfig,
}

impl RunConfig {
    /// Defaults, or the file at `path` layered over them.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn root(&self) -> Result<&Path, CliError> {
        self.root
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset root: pass --root or set `root` in the config file".into()))
    }
}

/// What a run directory records about how it was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
}

/// Writes `record` as `file_name` in `dir`.
pub fn echo(dir: &Path, file_name: &str, record: &RunRecord) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(file_name);
    let text = serde_json::to_string_pretty(record).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Echo name for a command whose output is a single file: `<stem>.run_config.json`.
pub fn sidecar_name(out_file: &Path) -> String {
    let stem = out_file.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    format!("{stem}.{RUN_CONFIG_FILE}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "root = \"data\"\n[train]\nepochs = 3\nlearning_rate = 0.0005\n[backbone]\nkind = \"residual_cnn\"\n[fusion]\npreset = \"denconst\"\nstep = 0.1\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.root.as_deref(), Some(Path::new("data")));
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 5e-4);
        assert_eq!(cfg.train.holdout_fraction, TrainConfig::default().holdout_fraction);
        assert_eq!(cfg.backbone.kind, Some(BackboneKind::ResidualCnn));
        assert_eq!(cfg.backbone.scale, Scale::Tiny);
        assert_eq!(cfg.fusion.step, 0.1);
        assert_eq!(cfg.synth, SynthesisConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nepoch = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&path)), Err(CliError::Config(_))));
        assert!(RunConfig::load(None).unwrap().root().is_err());
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let record = RunRecord {
            command: "synth".into(),
            seed: Some(9),
            config: RunConfig::default(),
        };
        let path = echo(dir.path(), RUN_CONFIG_FILE, &record).unwrap();
        let back: RunRecord = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.config, record.config);
        assert_eq!(back.seed, Some(9));
        assert_eq!(sidecar_name(Path::new("out/swin.csv")), "swin.run_config.json");
    }
}
