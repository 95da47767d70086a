//! The staged training protocol.
//!
//! `fine_tune` trains embeddings, blocks and teacher on hard labels with every
//! student frozen. `self_distill` then freezes all of that and fits each
//! student to the teacher's output distribution. `joint_train_ablation`
//! trains everything at once on hard labels.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedSet;
use crate::error::{Error, Result};
use crate::flops::FlopsBreakdown;
use crate::graph::{Tape, Var, LOG_FLOOR};
use crate::inference::{adaptive_infer_set, fixed_layer_infer_set, Speed};
use crate::metrics::accuracy;
use crate::model::{EncodedBatch, FastBert, HeadKind};
use crate::optim::{adamw_step, OptimizerConfig};
use crate::param::ParamGroup;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch size used for dev evaluation.
pub const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FineTune,
    SelfDistill,
    JointAblation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::FineTune => "fine_tune",
            Stage::SelfDistill => "self_distill",
            Stage::JointAblation => "joint_ablation",
        }
    }

    /// Whether parameters in `group` train during this stage.
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Stage::FineTune => group.is_backbone(),
            Stage::SelfDistill => !group.is_backbone(),
            Stage::JointAblation => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// `total_steps` is overwritten with `epochs × batches per epoch`.
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Evaluate on the dev set after every `eval_every` epochs and after the last.
    pub eval_every: usize,
    /// Speed at which the log records adaptive accuracy and cost.
    pub reference_speed: Speed,
}

impl TrainPlan {
    /// Desk-scale defaults for `stage`.
    pub fn for_stage(stage: Stage) -> Self {
        let learning_rate = match stage {
            Stage::SelfDistill => 3e-3,
            _ => 1e-3,
        };
        Self {
            stage,
            epochs: 3,
            batch_size: 32,
            optimizer: OptimizerConfig {
                learning_rate,
                ..OptimizerConfig::default()
            },
            seed: 0,
            eval_every: 1,
            reference_speed: Speed::new(0.5).expect("0.5 is a valid speed"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        self.optimizer.validate()
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Contract(format!(
                "plan for {} passed to {}",
                self.stage.as_str(),
                stage.as_str()
            )));
        }
        self.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    /// Adaptive accuracy on dev at the reference speed.
    pub dev_acc: Option<f64>,
    /// Average adaptive cost on dev at the reference speed.
    pub avg_flops: Option<f64>,
    pub teacher_dev_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub kept_epoch: usize,
}

impl ConvergenceLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,train_loss,dev_acc,avg_flops\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.stage.as_str(),
                r.epoch,
                r.train_loss,
                opt(r.dev_acc),
                opt(r.avg_flops)
            )
            .unwrap();
        }
        out
    }

    pub fn extend(&mut self, other: ConvergenceLog) {
        self.records.extend(other.records);
        self.kept_epoch = other.kept_epoch;
    }
}

/// Mean `−ln p[label]` over rows of probabilities, floored at `1e-12`.
pub fn cross_entropy(p: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    check_rows(p, labels.len())?;
    let n = p.last_dim();
    let mut total = 0.0;
    for (row, &l) in p.rows().zip(labels) {
        if l >= n {
            return Err(Error::Index(format!("label {l} of {n} classes")));
        }
        total -= row[l].max(LOG_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Mean over rows of `Σ p_s ln(p_s / p_t)`, with `p_t` floored at `1e-12`.
pub fn kl_divergence(student: &Tensor<f64>, teacher: &Tensor<f64>) -> Result<f64> {
    if student.shape() != teacher.shape() || student.rank() != 2 {
        return Err(Error::Shape(format!(
            "kl_divergence of {:?} against {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let mut total = 0.0;
    for (s, t) in student.rows().zip(teacher.rows()) {
        total += s
            .iter()
            .zip(t)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| a * (a.ln() - b.max(LOG_FLOOR).ln()))
            .sum::<f64>();
    }
    Ok(total / student.shape()[0] as f64)
}

/// Sum of every student's divergence from the teacher.
pub fn distill_loss(students: &[Tensor<f64>], teacher: &Tensor<f64>) -> Result<f64> {
    students.iter().map(|s| kl_divergence(s, teacher)).sum()
}

fn check_rows(p: &Tensor<f64>, rows: usize) -> Result<()> {
    if p.rank() != 2 || p.shape()[0] != rows {
        return Err(Error::Shape(format!("{:?} probabilities for {rows} labels", p.shape())));
    }
    Ok(())
}

fn labels_of(batch: &EncodedBatch) -> Result<&[usize]> {
    batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::Contract("training batch without labels".into()))
}

/// Builds the stage's training loss for `batch` on `tape`.
///
/// Fine-tuning: teacher cross-entropy. Joint: teacher plus every student
/// cross-entropy. Distillation: the summed student divergence from the
/// teacher, where blocks and teacher run in inference mode outside the tape,
/// so nothing upstream of the students receives a gradient.
pub fn stage_loss<T: Scalar>(model: &FastBert<T>, tape: &mut Tape<T>, batch: &EncodedBatch, stage: Stage) -> Result<Var> {
    let layers = model.layers();
    match stage {
        Stage::FineTune | Stage::JointAblation => {
            let labels = labels_of(batch)?;
            let mut h = model.embed(tape, batch)?;
            let mut loss = None;
            for i in 0..layers {
                h = model.layer(tape, h, &batch.mask, i)?;
                let kind = model.head_for_layer(i);
                if kind == HeadKind::Teacher || stage == Stage::JointAblation {
                    let logits = model.head_logits(tape, h, &batch.mask, kind)?;
                    let ce = tape.cross_entropy(logits, labels)?;
                    loss = Some(match loss {
                        Some(acc) => tape.add(acc, ce)?,
                        None => ce,
                    });
                }
            }
            Ok(loss.expect("the teacher always contributes"))
        }
        Stage::SelfDistill => {
            let out = model.full_forward(batch)?;
            let mut loss: Option<Var> = None;
            for i in 0..layers - 1 {
                let h = tape.constant(out.hidden[i].clone())?;
                let logits = model.head_logits(tape, h, &batch.mask, HeadKind::Student(i))?;
                let kl = tape.kl_divergence(logits, &out.teacher)?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, kl)?,
                    None => kl,
                });
            }
            Ok(loss.expect("at least one student exists"))
        }
    }
}

/// Stream seed for `(seed, parts…)`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in std::iter::once(&0x5eed).chain(parts) {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Sample order of `epoch` (1-based): a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, size: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
    order
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut FastBert<T>,
    batch: &EncodedBatch,
    stage: Stage,
    optimizer: &OptimizerConfig,
    step: u64,
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::training(model.config().dropout, dropout_seed);
    let loss = stage_loss(model, &mut tape, batch, stage)?;
    let value = tape.value(loss).item()?.as_f64();
    let grads = tape.backward(loss)?;
    grads.accumulate_into(&tape, &mut model.params);
    adamw_step(&mut model.params, optimizer, step);
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DevEval {
    pub adaptive_acc: f64,
    pub avg_flops: f64,
    pub teacher_acc: f64,
}

/// Teacher accuracy plus adaptive accuracy and cost at `speed` on `dev`.
pub fn evaluate<T: Scalar>(model: &FastBert<T>, dev: &EncodedSet, speed: Speed) -> Result<DevEval> {
    let labels = dev.require_labels()?;
    let teacher = fixed_layer_infer_set(model, dev, model.layers(), EVAL_BATCH)?;
    let adaptive = adaptive_infer_set(model, dev, speed, EVAL_BATCH)?;
    let breakdown = FlopsBreakdown::new(model.config(), model.config().max_len);
    Ok(DevEval {
        adaptive_acc: accuracy(&adaptive.predictions(), &labels)?,
        avg_flops: adaptive.flops(&breakdown)?.avg_flops,
        teacher_acc: accuracy(&teacher.predictions(), &labels)?,
    })
}

fn run_stage<T: Scalar>(
    model: &mut FastBert<T>,
    train: &EncodedSet,
    dev: &EncodedSet,
    plan: &TrainPlan,
    keep_best: bool,
) -> Result<ConvergenceLog> {
    if train.is_empty() {
        return Err(Error::Config(format!("{}: empty training set", plan.stage.as_str())));
    }
    if dev.is_empty() {
        return Err(Error::Config(format!("{}: empty dev set", plan.stage.as_str())));
    }
    if plan.stage != Stage::SelfDistill {
        train.require_labels()?;
    }
    let batches = train.len().div_ceil(plan.batch_size);
    let optimizer = OptimizerConfig {
        total_steps: (plan.epochs * batches) as u64,
        ..plan.optimizer.clone()
    };
    optimizer.validate()?;
    model.params.set_trainable(|g| plan.stage.trains(g));
    model.params.zero_grad();

    let mut log = ConvergenceLog::default();
    let mut best: Option<(f64, FastBert<T>)> = None;
    let mut step = 0u64;
    for epoch in 1..=plan.epochs {
        let order = epoch_order(plan.seed, epoch, train.len());
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
            let mut batch = train.batch(chunk)?;
            if plan.stage == Stage::SelfDistill {
                batch.labels = None;
            }
            step += 1;
            let seed = derive_seed(plan.seed, &[epoch as u64, b as u64]);
            let loss = train_step(model, &batch, plan.stage, &optimizer, step, seed)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let mut record = EpochRecord {
            stage: plan.stage,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_acc: None,
            avg_flops: None,
            teacher_dev_acc: None,
        };
        if epoch % plan.eval_every == 0 || epoch == plan.epochs {
            let eval = evaluate(model, dev, plan.reference_speed)?;
            record.dev_acc = Some(eval.adaptive_acc);
            record.avg_flops = Some(eval.avg_flops);
            record.teacher_dev_acc = Some(eval.teacher_acc);
            if keep_best && best.as_ref().is_none_or(|(acc, _)| eval.teacher_acc > *acc) {
                best = Some((eval.teacher_acc, model.clone()));
                log.kept_epoch = epoch;
            }
        }
        log.records.push(record);
    }
    match best {
        Some((_, snapshot)) => *model = snapshot,
        None => log.kept_epoch = plan.epochs,
    }
    Ok(log)
}

/// Trains blocks and teacher on hard labels; keeps the epoch with the best
/// teacher dev accuracy, the earlier one on ties.
pub fn fine_tune<T: Scalar>(model: &mut FastBert<T>, train: &EncodedSet, dev: &EncodedSet, plan: &TrainPlan) -> Result<ConvergenceLog> {
    plan.expect(Stage::FineTune)?;
    run_stage(model, train, dev, plan, true)
}

/// Fits every student to the frozen teacher; labels in `unlabeled` are
/// ignored. Keeps the final epoch.
pub fn self_distill<T: Scalar>(
    model: &mut FastBert<T>,
    unlabeled: &EncodedSet,
    dev: &EncodedSet,
    plan: &TrainPlan,
) -> Result<ConvergenceLog> {
    plan.expect(Stage::SelfDistill)?;
    run_stage(model, unlabeled, dev, plan, false)
}

/// Trains every parameter on teacher plus student cross-entropy; keeps the
/// epoch with the best teacher dev accuracy.
pub fn joint_train_ablation<T: Scalar>(
    model: &mut FastBert<T>,
    train: &EncodedSet,
    dev: &EncodedSet,
    plan: &TrainPlan,
) -> Result<ConvergenceLog> {
    plan.expect(Stage::JointAblation)?;
    run_stage(model, train, dev, plan, true)
}
