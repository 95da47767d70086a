//! The run configuration file.

use std::path::{Path, PathBuf};

use eex::data::SyntheticSpec;
use eex::metrics::DEFAULT_BINS;
use eex::training::EVAL_BATCH;
use eex::{Error, ModelConfig, OptimizerConfig, Speed, Stage, TrainPlan};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "EEX_SEED";

/// Everything a pipeline run needs. Unknown keys anywhere are an error;
/// omitted keys take the desk defaults shown by `eex init-config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds weight initialization, shuffling and dropout.
    pub seed: u64,
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    /// `vocab_size` caps the vocabulary built from the training split; the
    /// model is sized to the vocabulary actually built.
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            data: DataConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// One stage's schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub optimizer: OptimizerConfig,
}

impl StagePlan {
    fn defaults(stage: Stage) -> Self {
        let p = TrainPlan::for_stage(stage);
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            eval_every: p.eval_every,
            optimizer: p.optimizer,
        }
    }
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::defaults(Stage::FineTune)
    }
}

fn default_distill() -> StagePlan {
    StagePlan::defaults(Stage::SelfDistill)
}

fn default_joint() -> StagePlan {
    StagePlan::defaults(Stage::JointAblation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub fine_tune: StagePlan,
    #[serde(default = "default_distill")]
    pub self_distill: StagePlan,
    /// The ablation that trains every head on hard labels in one stage.
    #[serde(default = "default_joint")]
    pub joint: StagePlan,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            fine_tune: StagePlan::default(),
            self_distill: default_distill(),
            joint: default_joint(),
        }
    }
}

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated in memory; the same spec always yields the same splits.
    Synthetic { seed: u64, size: usize, easy_frac: f64 },
    /// `label<TAB>text` files. Distillation reads `unlabeled` when given and
    /// the training split otherwise.
    Files {
        train: PathBuf,
        dev: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        unlabeled: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataConfig::Synthetic {
            seed: s.seed,
            size: s.size,
            easy_frac: s.easy_frac,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Speeds of the evaluation sweep.
    pub speeds: Vec<f64>,
    /// Uncertainty bins for the calibration and histogram reports.
    pub bins: usize,
    /// Speed at which training logs adaptive accuracy and cost.
    pub reference_speed: f64,
    /// The two speeds of the ablation grid.
    pub ablation_speeds: Vec<f64>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            speeds: (0..=10).map(|i| i as f64 / 10.0).collect(),
            bins: DEFAULT_BINS,
            reference_speed: 0.5,
            ablation_speeds: vec![0.2, 0.7],
            batch_size: EVAL_BATCH,
        }
    }
}

/// Parses speeds, rejecting any outside `[0, 1]`.
pub fn speeds(values: &[f64]) -> eex::Result<Vec<Speed>> {
    values.iter().map(|&v| Speed::new(v)).collect()
}

impl RunConfig {
    /// Reads and validates `path`; relative paths inside it are resolved
    /// against its directory.
    pub fn load(path: &Path) -> eex::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let DataConfig::Files {
            train,
            dev,
            test,
            unlabeled,
        } = &mut self.data
        {
            join(train);
            join(dev);
            test.iter_mut().for_each(join);
            unlabeled.iter_mut().for_each(join);
        }
    }

    pub fn validate(&self) -> eex::Result<()> {
        // The vocabulary fixes the final size; check the rest now.
        self.model.validate()?;
        speeds(&self.eval.speeds)?;
        speeds(&self.eval.ablation_speeds)?;
        for (stage, plan) in self.plans() {
            self.plan(stage, plan)?.validate()?;
        }
        if self.eval.speeds.is_empty() {
            return Err(Error::Config("eval.speeds must not be empty".into()));
        }
        if self.eval.ablation_speeds.len() != 2 {
            return Err(Error::Config("eval.ablation_speeds must hold exactly two speeds".into()));
        }
        if self.eval.bins == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.bins and eval.batch_size must be positive".into()));
        }
        if let DataConfig::Synthetic { .. } = self.data {
            self.synthetic().expect("synthetic source").validate()?;
            if self.model.classes != 2 {
                return Err(Error::Config("the synthetic task has 2 classes; set model.classes to 2".into()));
            }
        }
        Ok(())
    }

    fn plans(&self) -> [(Stage, &StagePlan); 3] {
        [
            (Stage::FineTune, &self.train.fine_tune),
            (Stage::SelfDistill, &self.train.self_distill),
            (Stage::JointAblation, &self.train.joint),
        ]
    }

    fn plan(&self, stage: Stage, p: &StagePlan) -> eex::Result<TrainPlan> {
        Ok(TrainPlan {
            stage,
            epochs: p.epochs,
            batch_size: p.batch_size,
            optimizer: p.optimizer.clone(),
            seed: self.seed,
            eval_every: p.eval_every,
            reference_speed: Speed::new(self.eval.reference_speed)?,
        })
    }

    /// The full training plan for `stage`.
    pub fn train_plan(&self, stage: Stage) -> eex::Result<TrainPlan> {
        let p = self
            .plans()
            .into_iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, p)| p)
            .expect("every stage has a plan");
        self.plan(stage, p)
    }

    pub fn synthetic(&self) -> Option<SyntheticSpec> {
        match self.data {
            DataConfig::Synthetic { seed, size, easy_frac } => Some(SyntheticSpec { seed, size, easy_frac }),
            DataConfig::Files { .. } => None,
        }
    }

    /// Applies the documented precedence: flag, then `EEX_SEED`, then file.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> eex::Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// The default configuration as pretty JSON.
    pub fn template() -> String {
        serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> Result<RunConfig, serde_json::Error> {
        serde_json::from_str(json)
    }

    #[test]
    fn template_round_trips_and_validates() {
        let cfg = parse(&RunConfig::template()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_document_means_defaults() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        for json in [
            r#"{"sed": 1}"#,
            r#"{"model": {"layer": 3}}"#,
            r#"{"train": {"fine_tune": {"epoch": 3}}}"#,
            r#"{"train": {"fine_tune": {"optimizer": {"lr": 0.1}}}}"#,
            r#"{"data": {"source": "synthetic", "seed": 0, "size": 10, "easy_frac": 0.5, "extra": 1}}"#,
            r#"{"eval": {"speed": [0.1]}}"#,
        ] {
            let err = parse(json).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{json}: {err}");
        }
    }

    #[test]
    fn file_sources_parse() {
        let cfg = parse(r#"{"data": {"source": "files", "train": "a.tsv", "dev": "b.tsv"}}"#).unwrap();
        assert!(matches!(cfg.data, DataConfig::Files { test: None, .. }));
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.eval.speeds = vec![1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig::Synthetic {
            seed: 0,
            size: 10,
            easy_frac: 2.0,
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.fine_tune.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plans_carry_the_run_seed() {
        let cfg = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        let p = cfg.train_plan(Stage::SelfDistill).unwrap();
        assert_eq!(p.seed, 9);
        assert_eq!(p.stage, Stage::SelfDistill);
        assert_eq!(p.optimizer.learning_rate, 3e-3);
    }
}
