//! Data preparation and training stages shared by the subcommands.

use eex::data::{Dataset, Split, TaskMeta};
use eex::training::{fine_tune, joint_train_ablation, self_distill};
use eex::{ConvergenceLog, EncodedSet, Error, FastBert, ModelConfig, Result, Stage, Vocab};

use crate::config::{DataConfig, RunConfig};

/// Encoded splits plus the model configuration sized to their vocabulary.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub task: TaskMeta,
    pub train: EncodedSet,
    pub dev: EncodedSet,
    pub test: Option<EncodedSet>,
    pub unlabeled: Option<EncodedSet>,
}

impl Prepared {
    /// Distillation input: the unlabeled split if configured, else train.
    pub fn distill_set(&self) -> &EncodedSet {
        self.unlabeled.as_ref().unwrap_or(&self.train)
    }

    /// Held-out split for reports: test if present, else dev.
    pub fn eval_set(&self) -> (&'static str, &EncodedSet) {
        match &self.test {
            Some(t) => ("test", t),
            None => ("dev", &self.dev),
        }
    }
}

struct Splits {
    train: Dataset,
    dev: Dataset,
    test: Option<Dataset>,
    unlabeled: Option<Dataset>,
}

fn load_splits(cfg: &RunConfig, task: &TaskMeta) -> Result<Splits> {
    match &cfg.data {
        DataConfig::Synthetic { .. } => {
            let s = cfg.synthetic().expect("synthetic source").splits()?;
            Ok(Splits {
                train: s.train,
                dev: s.dev,
                test: Some(s.test),
                unlabeled: None,
            })
        }
        DataConfig::Files {
            train,
            dev,
            test,
            unlabeled,
        } => {
            let load = |p: &std::path::Path, split| Dataset::load_tsv(p, split, task.clone());
            Ok(Splits {
                train: load(train, Split::Train)?,
                dev: load(dev, Split::Dev)?,
                test: test.as_deref().map(|p| load(p, Split::Test)).transpose()?,
                unlabeled: unlabeled.as_deref().map(|p| load(p, Split::Unlabeled)).transpose()?,
            })
        }
    }
}

/// Loads the configured data and encodes it. The vocabulary is built from
/// the training split unless one is supplied (from a checkpoint).
pub fn prepare(cfg: &RunConfig, vocab: Option<Vocab>) -> Result<Prepared> {
    let task = TaskMeta::new(cfg.model.classes);
    let splits = load_splits(cfg, &task)?;
    if splits.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if splits.dev.is_empty() {
        return Err(Error::Config("empty dev set".into()));
    }
    let vocab = match vocab {
        Some(v) => v,
        None => Vocab::build(&splits.train, cfg.model.vocab_size)?,
    };
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    config.validate()?;
    let n = config.max_len;
    Ok(Prepared {
        train: splits.train.encode(&vocab, n),
        dev: splits.dev.encode(&vocab, n),
        test: splits.test.map(|d| d.encode(&vocab, n)),
        unlabeled: splits.unlabeled.map(|d| d.encode(&vocab, n)),
        config,
        vocab,
        task,
    })
}

/// Fresh model, then teacher fine-tuning.
pub fn run_fine_tune(cfg: &RunConfig, prep: &Prepared) -> Result<(FastBert<f64>, ConvergenceLog)> {
    let mut model = FastBert::new(prep.config.clone(), cfg.seed)?;
    let log = fine_tune(&mut model, &prep.train, &prep.dev, &cfg.train_plan(Stage::FineTune)?)?;
    Ok((model, log))
}

pub fn run_self_distill(cfg: &RunConfig, prep: &Prepared, model: &mut FastBert<f64>) -> Result<ConvergenceLog> {
    self_distill(model, prep.distill_set(), &prep.dev, &cfg.train_plan(Stage::SelfDistill)?)
}

/// Fresh model from the same initialization, trained jointly.
pub fn run_joint(cfg: &RunConfig, prep: &Prepared) -> Result<(FastBert<f64>, ConvergenceLog)> {
    let mut model = FastBert::new(prep.config.clone(), cfg.seed)?;
    let log = joint_train_ablation(&mut model, &prep.train, &prep.dev, &cfg.train_plan(Stage::JointAblation)?)?;
    Ok((model, log))
}
