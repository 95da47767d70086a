//! Analytic operation counts.
//!
//! Convention: two operations per multiply-accumulate, dense projection
//! matmuls only. Attention score and context products, softmax, layernorm,
//! bias adds, activations and embedding lookups count as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    /// Query, key, value and output projections of one encoder block.
    pub self_attention: u64,
    /// Both feedforward matmuls of one encoder block.
    pub feedforward: u64,
    pub classifier_fc1: u64,
    pub classifier_attention: u64,
    pub classifier_fc2: u64,
    /// Final projection of the pooled vector onto the classes.
    pub classifier_out: u64,
    pub embedding: u64,
}

impl FlopsBreakdown {
    /// Counts for sequences of `n` positions.
    pub fn new(cfg: &ModelConfig, n: usize) -> Self {
        let (n, d, ff, c, classes) = (
            n as u64,
            cfg.hidden as u64,
            cfg.ffn as u64,
            cfg.cls_hidden as u64,
            cfg.classes as u64,
        );
        Self {
            self_attention: 4 * 2 * n * d * d,
            feedforward: 2 * 2 * n * d * ff,
            classifier_fc1: 2 * n * d * c,
            classifier_attention: 4 * 2 * n * c * c,
            classifier_fc2: 2 * n * c * c,
            classifier_out: if n == 0 { 0 } else { 2 * c * classes },
            embedding: 0,
        }
    }

    pub fn transformer_total(&self) -> u64 {
        self.self_attention + self.feedforward
    }

    pub fn classifier_total(&self) -> u64 {
        self.classifier_fc1 + self.classifier_attention + self.classifier_fc2 + self.classifier_out
    }

    /// Cost of running `blocks` blocks and `heads` classifier heads.
    pub fn executed(&self, blocks: usize, heads: usize) -> u64 {
        self.embedding + blocks as u64 * self.transformer_total() + heads as u64 * self.classifier_total()
    }

    /// Cost of a sample leaving at `exit_layer`: every block up to it runs,
    /// and so does the head on each of those blocks.
    pub fn sample(&self, exit_layer: usize) -> u64 {
        self.executed(exit_layer + 1, exit_layer + 1)
    }

    /// Cost of a sample that runs `k` blocks and only the head on block `k − 1`.
    pub fn fixed_layer(&self, k: usize) -> u64 {
        self.executed(k, 1)
    }

    /// Every block plus the teacher head: the speedup denominator.
    pub fn full_model(&self, layers: usize) -> u64 {
        self.fixed_layer(layers)
    }
}

/// Sample-averaged cost and the speedup it implies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageFlops {
    pub avg_flops: f64,
    pub speedup: f64,
}

/// Average over per-sample costs against the full model of `layers` blocks.
pub fn average_flops(costs: impl IntoIterator<Item = u64>, breakdown: &FlopsBreakdown, layers: usize) -> Result<AverageFlops> {
    let (mut total, mut count) = (0u128, 0u64);
    for c in costs {
        total += c as u128;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("average FLOPs of an empty trace".into()));
    }
    let avg_flops = total as f64 / count as f64;
    Ok(AverageFlops {
        avg_flops,
        speedup: breakdown.full_model(layers) as f64 / avg_flops,
    })
}

/// Average adaptive cost for the given exit layers.
pub fn exit_layers_flops(exits: &[usize], cfg: &ModelConfig, n: usize) -> Result<AverageFlops> {
    let b = FlopsBreakdown::new(cfg, n);
    average_flops(exits.iter().map(|&e| b.sample(e)), &b, cfg.layers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedFlops {
    pub speed: f64,
    pub avg_flops: f64,
    pub speedup: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub config: ModelConfig,
    pub sequence_length: usize,
    pub table1_breakdown: FlopsBreakdown,
    pub transformer_total: u64,
    pub classifier_total: u64,
    pub full_model_flops: u64,
    pub per_speed: Vec<SpeedFlops>,
}

impl FlopsReport {
    pub fn new(cfg: &ModelConfig, n: usize, per_speed: Vec<SpeedFlops>) -> Self {
        let b = FlopsBreakdown::new(cfg, n);
        Self {
            config: cfg.clone(),
            sequence_length: n,
            table1_breakdown: b,
            transformer_total: b.transformer_total(),
            classifier_total: b.classifier_total(),
            full_model_flops: b.full_model(cfg.layers),
            per_speed,
        }
    }
}

/// Raw count in millions, rounded to one decimal.
pub fn millions(flops: u64) -> f64 {
    (flops as f64 / 1e5).round() / 10.0
}
