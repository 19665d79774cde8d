use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::StudyConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SceneSpec;
use crate::text::{PromptError, TemplateBank};
use crate::trainer::{TaskSelection, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Data sizes and seeds of a multi-seed study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPlan {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneSpec,
    pub seeds: Vec<u64>,
}

/// Everything needed to reproduce one CLI invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub train: TrainConfig,
    pub eval_dataset: Option<PathBuf>,
    /// Template bank JSON; the built-in bank when absent.
    pub templates: Option<PathBuf>,
    pub study: StudyPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            train: TrainConfig::default(),
            eval_dataset: None,
            templates: None,
            study: StudyPlan {
                train_scenes: 50,
                eval_scenes: 20,
                scene: SceneSpec::default(),
                seeds: (0..5).collect(),
            },
        }
    }
}

impl RunConfig {
    /// Desk-scale multi-seed study: 32×32 scenes, 8 channels, both tasks,
    /// lr 3e-3 and otherwise default losses.
    pub fn desk_study() -> Self {
        let size = 32;
        Self {
            experiment: "desk-study".into(),
            train: TrainConfig {
                lr: 3e-3,
                epochs: 5,
                tasks: TaskSelection::Both,
                loss: LossConfig::default(),
                model: ModelConfig {
                    channels: 8,
                    ..ModelConfig::with_size(size)
                },
                ..TrainConfig::default()
            },
            eval_dataset: None,
            templates: None,
            study: StudyPlan {
                train_scenes: 40,
                eval_scenes: 20,
                scene: SceneSpec::with_size(size),
                seeds: (0..5).collect(),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e: TrainError| ConfigError::Invalid(e.to_string()))?;
        self.study
            .scene
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if (self.study.scene.height, self.study.scene.width) != (self.train.model.height, self.train.model.width) {
            return Err(ConfigError::Invalid(
                "study scene size differs from model input size".into(),
            ));
        }
        Ok(())
    }

    pub fn bank(&self) -> Result<TemplateBank, PromptError> {
        match &self.templates {
            Some(p) => TemplateBank::load(p),
            None => Ok(TemplateBank::default()),
        }
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            train: self.train.clone(),
            train_scenes: self.study.train_scenes,
            eval_scenes: self.study.eval_scenes,
            scene: self.study.scene.clone(),
            seeds: self.study.seeds.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_losslessly() {
        for cfg in [RunConfig::default(), RunConfig::desk_study()] {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("run.json");
            cfg.save(&p).unwrap();
            assert_eq!(RunConfig::load(&p).unwrap(), cfg);
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn missing_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("partial.json");
        std::fs::write(&p, r#"{"experiment": "x"}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Parse { .. })));
    }
}
