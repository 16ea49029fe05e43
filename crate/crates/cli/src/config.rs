//! Run configuration file (TOML).

use std::path::Path;

use icm_core::codec::CodecConfig;
use icm_core::finetune::FinetuneConfig;
use icm_core::optim::OptimizerConfig;
use icm_core::task::{TaskConfig, TaskTrainConfig};
use icm_core::train::{ScheduleParams, TrainConfig};
use icm_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub classes: usize,
    /// Trailing samples of a dataset directory held out for validation.
    pub val_count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { seed: 0, count: 400, image_size: 64, classes: 4, val_count: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_interval: u32,
    pub optimizer: OptimizerConfig,
    pub task_channels: [usize; 4],
    pub task_epochs: usize,
    pub task_batch_size: usize,
    pub task_learning_rate: f64,
    /// Fraction of the dataset held out when reporting task accuracy.
    pub task_holdout: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let tt = TaskTrainConfig::default();
        TrainingSection {
            seed: 0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            lr_interval: t.lr_interval,
            optimizer: t.optimizer,
            task_channels: TaskConfig::default().channels,
            task_epochs: tt.epochs,
            task_batch_size: tt.batch_size,
            task_learning_rate: tt.learning_rate,
            task_holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Column label for the task score in rendered tables.
    pub metric_name: String,
    /// Row label of our curve in the BD-rate table.
    pub curve_name: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { metric_name: "Acc".into(), curve_name: "ours".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub codec: CodecConfig,
    pub schedule: ScheduleParams,
    pub training: TrainingSection,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }

    /// Writes the effective configuration as `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig { classes: self.dataset.classes, channels: self.training.task_channels }
    }

    pub fn task_train_config(&self) -> TaskTrainConfig {
        TaskTrainConfig {
            epochs: self.training.task_epochs,
            batch_size: self.training.task_batch_size,
            learning_rate: self.training.task_learning_rate,
            seed: self.training.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            lr_interval: t.lr_interval,
            seed: t.seed,
            schedule: self.schedule.clone(),
            optimizer: t.optimizer.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.task_config().validate()?;
        self.train_config().validate()?;
        self.finetune.validate()?;
        if !(0.0..1.0).contains(&self.training.task_holdout) {
            return Err(Error::Config(format!("task_holdout {} must be in [0, 1)", self.training.task_holdout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig { schedule: ScheduleParams::compressed(5).unwrap(), ..Default::default() };
        c.training.learning_rate = 2e-3;
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[training]\nepochs = 3\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
        assert_eq!(RunConfig::parse("[training]\nepochs = 3\n").unwrap().training.epochs, 3);
    }
}
