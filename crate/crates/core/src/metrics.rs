//! Accuracy, uncertainty-binned accuracy, exit distributions and speed sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::EncodedSet;
use crate::error::{Error, Result};
use crate::flops::FlopsBreakdown;
use crate::inference::{adaptive_infer_set, all_head_probs, uncertainty, InferenceTrace, Speed};
use crate::model::FastBert;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 10;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Name of the head on block `layer` of an `layers`-block model.
pub fn classifier_name(layer: usize, layers: usize) -> String {
    if layer + 1 == layers {
        "teacher".into()
    } else {
        format!("student{layer}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBins {
    pub classifier: String,
    pub layer: usize,
    pub bins: Vec<BinStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuhaReport {
    pub bin_edges: Vec<f64>,
    pub classifiers: Vec<ClassifierBins>,
}

/// Bin of `u` among `bins` equal-width bins on `[0, 1]`; the last bin is closed.
pub fn bin_index(u: f64, bins: usize) -> usize {
    ((u * bins as f64).floor() as usize).min(bins - 1)
}

struct Scored {
    uncertainty: f64,
    correct: bool,
}

fn score_heads(heads: &[Tensor<f64>], labels: &[usize]) -> Result<Vec<Vec<Scored>>> {
    heads
        .iter()
        .map(|p| {
            if p.shape()[0] != labels.len() {
                return Err(Error::Shape(format!("{} rows for {} labels", p.shape()[0], labels.len())));
            }
            p.rows()
                .zip(labels)
                .map(|(row, &l)| {
                    Ok(Scored {
                        uncertainty: uncertainty(row)?,
                        correct: argmax(row) == l,
                    })
                })
                .collect()
        })
        .collect()
}

/// Accuracy per uncertainty bin for each head; `heads[i]` holds the `[S, N]`
/// probabilities of the head on block `i`.
pub fn luha_from_probs(heads: &[Tensor<f64>], labels: &[usize], bins: usize) -> Result<LuhaReport> {
    if bins == 0 {
        return Err(Error::Config("bin count must be positive".into()));
    }
    let layers = heads.len();
    let bin_edges: Vec<f64> = (0..=bins).map(|k| k as f64 / bins as f64).collect();
    let classifiers = score_heads(heads, labels)?
        .into_iter()
        .enumerate()
        .map(|(layer, scored)| {
            let mut count = vec![0usize; bins];
            let mut hits = vec![0usize; bins];
            for s in scored {
                let b = bin_index(s.uncertainty, bins);
                count[b] += 1;
                hits[b] += usize::from(s.correct);
            }
            ClassifierBins {
                classifier: classifier_name(layer, layers),
                layer,
                bins: (0..bins)
                    .map(|b| BinStat {
                        lower: bin_edges[b],
                        upper: bin_edges[b + 1],
                        count: count[b],
                        accuracy: (count[b] > 0).then(|| hits[b] as f64 / count[b] as f64),
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(LuhaReport { bin_edges, classifiers })
}

/// Runs every head on every sample and bins the results.
pub fn luha_bins<T: Scalar>(model: &FastBert<T>, set: &EncodedSet, bins: usize, batch_size: usize) -> Result<LuhaReport> {
    let labels = set.require_labels()?;
    luha_from_probs(&all_head_probs(model, set, batch_size)?, &labels, bins)
}

impl LuhaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("classifier,layer,bin_lower,bin_upper,count,accuracy\n");
        for c in &self.classifiers {
            for b in &c.bins {
                write!(out, "{},{},{},{},{},", c.classifier, c.layer, b.lower, b.upper, b.count).unwrap();
                if let Some(a) = b.accuracy {
                    write!(out, "{a}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TercileStat {
    pub classifier: String,
    pub layer: usize,
    /// Accuracy over the third of samples with the lowest uncertainty.
    pub low_accuracy: f64,
    /// Accuracy over the third with the highest uncertainty.
    pub high_accuracy: f64,
}

/// Lowest- and highest-uncertainty tercile accuracy per head. Samples are
/// ranked by uncertainty, ties by index.
pub fn terciles(heads: &[Tensor<f64>], labels: &[usize]) -> Result<Vec<TercileStat>> {
    let third = labels.len() / 3;
    if third == 0 {
        return Err(Error::Contract("terciles need at least 3 samples".into()));
    }
    let layers = heads.len();
    score_heads(heads, labels)?
        .into_iter()
        .enumerate()
        .map(|(layer, mut scored)| {
            scored.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty));
            let acc = |s: &[Scored]| s.iter().filter(|x| x.correct).count() as f64 / s.len() as f64;
            Ok(TercileStat {
                classifier: classifier_name(layer, layers),
                layer,
                low_accuracy: acc(&scored[..third]),
                high_accuracy: acc(&scored[scored.len() - third..]),
            })
        })
        .collect()
}

/// Fraction of samples leaving at each block.
pub fn exit_layer_distribution(trace: &InferenceTrace) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::Contract("exit distribution of an empty trace".into()));
    }
    let mut counts = vec![0usize; trace.layers];
    for s in &trace.samples {
        counts[s.exit_layer] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / trace.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: usize,
    /// Samples that reached this block.
    pub population: usize,
    pub counts: Vec<usize>,
}

/// Histogram of the uncertainties recorded at each block, over the samples
/// that reached it.
pub fn histograms_from_trace(trace: &InferenceTrace, bins: usize) -> Result<Vec<LayerHistogram>> {
    if bins == 0 {
        return Err(Error::Config("bin count must be positive".into()));
    }
    Ok((0..trace.layers)
        .map(|layer| {
            let mut counts = vec![0usize; bins];
            for u in trace.samples.iter().filter_map(|s| s.uncertainties[layer]) {
                counts[bin_index(u, bins)] += 1;
            }
            LayerHistogram {
                layer,
                population: counts.iter().sum(),
                counts,
            }
        })
        .collect())
}

pub fn uncertainty_histograms<T: Scalar>(
    model: &FastBert<T>,
    set: &EncodedSet,
    speed: Speed,
    bins: usize,
    batch_size: usize,
) -> Result<Vec<LayerHistogram>> {
    histograms_from_trace(&adaptive_infer_set(model, set, speed, batch_size)?, bins)
}

pub fn histograms_to_csv(speed: Speed, hist: &[LayerHistogram]) -> String {
    let bins = hist.first().map_or(0, |h| h.counts.len());
    let mut out = String::from("speed,layer,bin_lower,bin_upper,count,population\n");
    for h in hist {
        for (b, c) in h.counts.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{c},{}",
                speed.value(),
                h.layer,
                b as f64 / bins as f64,
                (b + 1) as f64 / bins as f64,
                h.population
            )
            .unwrap();
        }
    }
    out
}

pub fn distribution_to_csv(rows: &[(Speed, Vec<f64>)]) -> String {
    let mut out = String::from("speed,layer,fraction\n");
    for (s, fractions) in rows {
        for (layer, f) in fractions.iter().enumerate() {
            writeln!(out, "{},{layer},{f}", s.value()).unwrap();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub speed: f64,
    pub accuracy: f64,
    pub avg_flops: f64,
    pub speedup: f64,
    pub exit_fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let layers = self.rows.first().map_or(0, |r| r.exit_fractions.len());
        let mut out = String::from("speed,accuracy,avg_flops,speedup");
        for i in 0..layers {
            write!(out, ",exit_{i}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},{},{}", r.speed, r.accuracy, r.avg_flops, r.speedup).unwrap();
            for f in &r.exit_fractions {
                write!(out, ",{f}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// One sweep row from an adaptive trace over labeled samples.
pub fn sweep_row(speed: Speed, trace: &InferenceTrace, labels: &[usize], breakdown: &FlopsBreakdown) -> Result<SweepRow> {
    let cost = trace.flops(breakdown)?;
    Ok(SweepRow {
        speed: speed.value(),
        accuracy: accuracy(&trace.predictions(), labels)?,
        avg_flops: cost.avg_flops,
        speedup: cost.speedup,
        exit_fractions: exit_layer_distribution(trace)?,
    })
}

/// Adaptive inference, cost and accuracy at every speed, in the given order.
/// Costs use sequences of the configured maximum length.
pub fn speed_sweep<T: Scalar>(model: &FastBert<T>, set: &EncodedSet, speeds: &[Speed], batch_size: usize) -> Result<SweepReport> {
    let labels = set.require_labels()?;
    let breakdown = FlopsBreakdown::new(model.config(), model.config().max_len);
    let rows = speeds
        .iter()
        .map(|&s| sweep_row(s, &adaptive_infer_set(model, set, s, batch_size)?, &labels, &breakdown))
        .collect::<Result<_>>()?;
    Ok(SweepReport { rows })
}
