//! Entropy-gated early exit.
//!
//! Every block runs only on the samples still in the batch. After block `i`
//! its student scores each of them; a sample whose normalized entropy is
//! strictly below the speed leaves with that prediction, the rest move on.
//! The teacher on the last block answers for whoever remains.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::EncodedSet;
use crate::error::{Error, Result};
use crate::flops::{average_flops, AverageFlops, FlopsBreakdown};
use crate::model::{EncodedBatch, FastBert, HeadKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uncertainty threshold in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Speed(f64);

impl Speed {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("speed {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Speed {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Speed> for f64 {
    fn from(s: Speed) -> f64 {
        s.0
    }
}

/// Normalized entropy `Σ p ln p / ln(1/N)`, clamped to `[0, 1]`.
pub fn uncertainty<T: Scalar>(p: &[T]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Contract(format!("uncertainty needs at least 2 classes, got {}", p.len())));
    }
    let total: f64 = p.iter().map(|v| v.as_f64()).sum();
    if (total - 1.0).abs() > 1e-6 || p.iter().any(|v| v.as_f64() < 0.0) {
        return Err(Error::Contract(format!("not a probability vector (sum {total})")));
    }
    let neg_entropy: f64 = p
        .iter()
        .map(|v| v.as_f64())
        .filter(|&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum();
    Ok((neg_entropy / (1.0 / p.len() as f64).ln()).clamp(0.0, 1.0))
}

fn argmax(p: &[f64]) -> usize {
    // First maximum wins ties.
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub exit_layer: usize,
    pub prediction: usize,
    /// Probabilities of the head that answered.
    pub probs: Vec<f64>,
    /// Uncertainty of the head on each block, where that head ran.
    pub uncertainties: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub layers: usize,
    pub samples: Vec<SampleTrace>,
    /// How many samples entered each block.
    pub active_per_layer: Vec<usize>,
}

impl InferenceTrace {
    fn empty(layers: usize) -> Self {
        Self {
            layers,
            samples: Vec::new(),
            active_per_layer: vec![0; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.prediction).collect()
    }

    pub fn exit_layers(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.exit_layer).collect()
    }

    /// Appends another trace over the same model.
    pub fn extend(&mut self, other: InferenceTrace) {
        debug_assert_eq!(self.layers, other.layers);
        self.samples.extend(other.samples);
        for (a, b) in self.active_per_layer.iter_mut().zip(other.active_per_layer) {
            *a += b;
        }
    }

    /// Average cost: every executed block plus every head that ran, which is
    /// each head with a recorded uncertainty.
    pub fn flops(&self, breakdown: &FlopsBreakdown) -> Result<AverageFlops> {
        let cost = |s: &SampleTrace| breakdown.executed(s.exit_layer + 1, s.uncertainties.iter().flatten().count());
        average_flops(self.samples.iter().map(cost), breakdown, self.layers)
    }

    /// `sample_id,exit_layer,prediction,label,u_0,…`; absent values are blank.
    pub fn to_csv(&self, labels: &[Option<usize>]) -> String {
        let mut out = String::from("sample_id,exit_layer,prediction,label");
        for i in 0..self.layers {
            write!(out, ",u_{i}").unwrap();
        }
        out.push('\n');
        for (id, s) in self.samples.iter().enumerate() {
            write!(out, "{id},{},{},", s.exit_layer, s.prediction).unwrap();
            if let Some(Some(l)) = labels.get(id) {
                write!(out, "{l}").unwrap();
            }
            for u in &s.uncertainties {
                out.push(',');
                if let Some(u) = u {
                    write!(out, "{u}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

fn sample_trace<T: Scalar>(row: &[T], exit_layer: usize, uncertainties: Vec<Option<f64>>) -> SampleTrace {
    let probs: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    SampleTrace {
        exit_layer,
        prediction: argmax(&probs),
        probs,
        uncertainties,
    }
}

fn select_keep(keep: &[bool], len: usize, rows: &[usize]) -> Vec<bool> {
    rows.iter().flat_map(|&r| keep[r * len..(r + 1) * len].iter().copied()).collect()
}

/// Runs `batch` with early exit at `speed`. Samples are reported in batch
/// order.
pub fn adaptive_infer<T: Scalar>(model: &FastBert<T>, batch: &EncodedBatch, speed: Speed) -> Result<InferenceTrace> {
    let layers = model.layers();
    let mut trace = InferenceTrace::empty(layers);
    let mut slots: Vec<Option<SampleTrace>> = vec![None; batch.batch];
    let mut history: Vec<Vec<Option<f64>>> = vec![vec![None; layers]; batch.batch];

    let mut active: Vec<usize> = (0..batch.batch).collect();
    let mut keep = batch.mask.clone();
    let mut h = model.run_embed(batch)?;
    for layer in 0..layers {
        if active.is_empty() {
            break;
        }
        trace.active_per_layer[layer] = active.len();
        h = model.run_layer(&h, &keep, layer)?;
        let kind = model.head_for_layer(layer);
        let probs = model.run_head(&h, &keep, kind)?;
        let mut survivors = Vec::new();
        for (row, &sample) in active.iter().enumerate() {
            let p = probs.row(row);
            let u = uncertainty(p)?;
            history[sample][layer] = Some(u);
            if kind == HeadKind::Teacher || u < speed.value() {
                slots[sample] = Some(sample_trace(p, layer, std::mem::take(&mut history[sample])));
            } else {
                survivors.push(row);
            }
        }
        if survivors.len() < active.len() && !survivors.is_empty() {
            h = h.select_first_axis(&survivors)?;
            keep = select_keep(&keep, batch.len, &survivors);
        }
        active = survivors.iter().map(|&r| active[r]).collect();
    }
    trace.samples = slots
        .into_iter()
        .map(|s| s.expect("every sample exits by the last block"))
        .collect();
    Ok(trace)
}

/// Runs exactly `k` blocks for every sample and answers with the head on
/// block `k − 1`.
pub fn fixed_layer_infer<T: Scalar>(model: &FastBert<T>, batch: &EncodedBatch, k: usize) -> Result<InferenceTrace> {
    let layers = model.layers();
    if k == 0 || k > layers {
        return Err(Error::Config(format!("fixed layer count {k} outside [1, {layers}]")));
    }
    let mut trace = InferenceTrace::empty(layers);
    let mut h = model.run_embed(batch)?;
    for layer in 0..k {
        trace.active_per_layer[layer] = batch.batch;
        h = model.run_layer(&h, &batch.mask, layer)?;
    }
    let probs = model.run_head(&h, &batch.mask, model.head_for_layer(k - 1))?;
    for row in 0..batch.batch {
        let p = probs.row(row);
        let mut u = vec![None; layers];
        u[k - 1] = Some(uncertainty(p)?);
        trace.samples.push(sample_trace(p, k - 1, u));
    }
    Ok(trace)
}

fn over_set<T: Scalar>(
    set: &EncodedSet,
    batch_size: usize,
    layers: usize,
    mut run: impl FnMut(&EncodedBatch) -> Result<InferenceTrace>,
) -> Result<InferenceTrace> {
    if set.is_empty() {
        return Err(Error::Contract("inference over an empty dataset".into()));
    }
    let mut trace = InferenceTrace::empty(layers);
    for chunk in set.chunks(batch_size) {
        trace.extend(run(&set.batch(&chunk)?)?);
    }
    Ok(trace)
}

/// [`adaptive_infer`] over a whole set in consecutive batches.
pub fn adaptive_infer_set<T: Scalar>(
    model: &FastBert<T>,
    set: &EncodedSet,
    speed: Speed,
    batch_size: usize,
) -> Result<InferenceTrace> {
    over_set::<T>(set, batch_size, model.layers(), |b| adaptive_infer(model, b, speed))
}

/// [`fixed_layer_infer`] over a whole set in consecutive batches.
pub fn fixed_layer_infer_set<T: Scalar>(
    model: &FastBert<T>,
    set: &EncodedSet,
    k: usize,
    batch_size: usize,
) -> Result<InferenceTrace> {
    over_set::<T>(set, batch_size, model.layers(), |b| fixed_layer_infer(model, b, k))
}

/// Per-classifier probabilities for a whole set without early exit:
/// entry `i` is the head on block `i` (the teacher last), each `[size, N]`.
pub fn all_head_probs<T: Scalar>(model: &FastBert<T>, set: &EncodedSet, batch_size: usize) -> Result<Vec<Tensor<f64>>> {
    if set.is_empty() {
        return Err(Error::Contract("inference over an empty dataset".into()));
    }
    let layers = model.layers();
    let classes = model.config().classes;
    let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(set.len() * classes); layers];
    for chunk in set.chunks(batch_size) {
        let out = model.full_forward(&set.batch(&chunk)?)?;
        for (i, p) in out.students.iter().chain(std::iter::once(&out.teacher)).enumerate() {
            rows[i].extend(p.data().iter().map(|v| v.as_f64()));
        }
    }
    rows.into_iter()
        .map(|r| Tensor::from_vec(vec![set.len(), classes], r))
        .collect()
}
