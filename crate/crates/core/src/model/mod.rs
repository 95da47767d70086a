//! The early-exit encoder: embeddings, a stack of post-layernorm transformer
//! blocks, a teacher classifier on the last block and one student classifier
//! on every other block.

mod batch;
mod config;

pub use batch::{Encoded, EncodedBatch};
pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Tape, Var};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for weight matrices and
/// embedding tables.
pub const INIT_STD: f64 = 0.02;

/// Token id that every sequence starts with.
pub const CLS_POSITION: usize = 0;

#[derive(Clone, Debug)]
struct Projection {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct SelfAttention {
    query: Projection,
    key: Projection,
    value: Projection,
    output: Projection,
}

#[derive(Clone, Debug)]
struct EmbeddingParams {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct Block {
    attention: SelfAttention,
    attention_norm: Norm,
    ffn_in: Projection,
    ffn_out: Projection,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
struct Head {
    narrow: Projection,
    attention: SelfAttention,
    dense: Projection,
    output: Projection,
}

/// Selects a classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Teacher,
    Student(usize),
}

/// Outputs of running every block and every head.
#[derive(Clone, Debug)]
pub struct FullOutput<T> {
    /// Teacher probabilities `[B, N]` from the last block.
    pub teacher: Tensor<T>,
    /// Student `i` probabilities `[B, N]` from block `i`, for `i < L − 1`.
    pub students: Vec<Tensor<T>>,
    /// Hidden states `[B, n, d]` of every block.
    pub hidden: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct FastBert<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    embedding: EmbeddingParams,
    blocks: Vec<Block>,
    teacher: Head,
    students: Vec<Head>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn projection(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Projection {
        Projection {
            weight: self
                .store
                .add_normal(format!("{name}.weight"), group, &[fan_in, fan_out], INIT_STD, self.rng),
            bias: self.store.add_filled(format!("{name}.bias"), group, &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, group: ParamGroup, width: usize) -> Norm {
        Norm {
            gain: self.store.add_filled(format!("{name}.gain"), group, &[width], 1.0),
            bias: self.store.add_filled(format!("{name}.bias"), group, &[width], 0.0),
        }
    }

    fn attention(&mut self, name: &str, group: ParamGroup, width: usize) -> SelfAttention {
        SelfAttention {
            query: self.projection(&format!("{name}.query"), group, width, width),
            key: self.projection(&format!("{name}.key"), group, width, width),
            value: self.projection(&format!("{name}.value"), group, width, width),
            output: self.projection(&format!("{name}.output"), group, width, width),
        }
    }

    fn head(&mut self, name: &str, group: ParamGroup, cfg: &ModelConfig) -> Head {
        Head {
            narrow: self.projection(&format!("{name}.narrow"), group, cfg.hidden, cfg.cls_hidden),
            attention: self.attention(&format!("{name}.attention"), group, cfg.cls_hidden),
            dense: self.projection(&format!("{name}.dense"), group, cfg.cls_hidden, cfg.cls_hidden),
            output: self.projection(&format!("{name}.output"), group, cfg.cls_hidden, cfg.classes),
        }
    }
}

impl<T: Scalar> FastBert<T> {
    /// Randomly initialized model. Parameters are drawn from a ChaCha8 stream
    /// seeded with `seed` in registration order: embeddings, blocks 0..L,
    /// teacher, students 0..L−1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.hidden;
        let g = ParamGroup::Embedding;
        let embedding = EmbeddingParams {
            token: b
                .store
                .add_normal("embedding.token", g, &[config.vocab_size, d], INIT_STD, b.rng),
            position: b
                .store
                .add_normal("embedding.position", g, &[config.max_len, d], INIT_STD, b.rng),
            segment: b.store.add_normal("embedding.segment", g, &[2, d], INIT_STD, b.rng),
            norm: b.norm("embedding.norm", g, d),
        };
        let blocks = (0..config.layers)
            .map(|i| {
                let g = ParamGroup::Block(i);
                let name = format!("block{i}");
                Block {
                    attention: b.attention(&format!("{name}.attention"), g, d),
                    attention_norm: b.norm(&format!("{name}.attention_norm"), g, d),
                    ffn_in: b.projection(&format!("{name}.ffn_in"), g, d, config.ffn),
                    ffn_out: b.projection(&format!("{name}.ffn_out"), g, config.ffn, d),
                    ffn_norm: b.norm(&format!("{name}.ffn_norm"), g, d),
                }
            })
            .collect();
        let teacher = b.head("teacher", ParamGroup::Teacher, &config);
        let students = (0..config.students())
            .map(|i| b.head(&format!("student{i}"), ParamGroup::Student(i), &config))
            .collect();
        Ok(Self {
            config,
            params: store,
            embedding,
            blocks,
            teacher,
            students,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    fn head(&self, kind: HeadKind) -> Result<&Head> {
        match kind {
            HeadKind::Teacher => Ok(&self.teacher),
            HeadKind::Student(i) => self
                .students
                .get(i)
                .ok_or_else(|| Error::Index(format!("student {i} of {}", self.students.len()))),
        }
    }

    /// Head attached to block `layer`: a student below the last block, the
    /// teacher on it.
    pub fn head_for_layer(&self, layer: usize) -> HeadKind {
        if layer + 1 >= self.config.layers {
            HeadKind::Teacher
        } else {
            HeadKind::Student(layer)
        }
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.len > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {}",
                batch.len, self.config.max_len
            )));
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index(format!("token id {id} outside vocabulary of {}", self.config.vocab_size)));
        }
        if let Some(&s) = batch.segments.iter().find(|&&s| s >= 2) {
            return Err(Error::Index(format!("segment id {s}")));
        }
        Ok(())
    }

    /// Sum of token, position and segment embeddings, then layernorm and
    /// dropout: the input to block 0, shape `[B, n, d]`.
    pub fn embed(&self, tape: &mut Tape<T>, batch: &EncodedBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let e = &self.embedding;
        let prefix = [batch.batch, batch.len];
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let token = tape.param(&self.params, e.token);
        let position = tape.param(&self.params, e.position);
        let segment = tape.param(&self.params, e.segment);
        let t = tape.embedding(token, &batch.ids, &prefix)?;
        let p = tape.embedding(position, &positions, &prefix)?;
        let s = tape.embedding(segment, &batch.segments, &prefix)?;
        let sum = tape.add(t, p)?;
        let sum = tape.add(sum, s)?;
        let out = self.norm(tape, sum, &e.norm)?;
        tape.dropout(out)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, p: &Projection) -> Result<Var> {
        let w = tape.param(&self.params, p.weight);
        let b = tape.param(&self.params, p.bias);
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, n: &Norm) -> Result<Var> {
        let g = tape.param(&self.params, n.gain);
        let b = tape.param(&self.params, n.bias);
        tape.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    fn self_attention(&self, tape: &mut Tape<T>, x: Var, keep: &[bool], heads: usize, p: &SelfAttention) -> Result<Var> {
        let width = *tape.shape(x).last().unwrap();
        let q = self.linear(tape, x, &p.query)?;
        let k = self.linear(tape, x, &p.key)?;
        let v = self.linear(tape, x, &p.value)?;
        let (q, k, v) = (tape.split_heads(q, heads)?, tape.split_heads(k, heads)?, tape.split_heads(v, heads)?);
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, T::of(1.0 / ((width / heads) as f64).sqrt()))?;
        let probs = tape.masked_softmax(scores, keep, heads)?;
        let probs = tape.dropout(probs)?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.merge_heads(ctx, heads)?;
        self.linear(tape, ctx, &p.output)
    }

    /// Transformer block `index` on `h[B, n, d]`; `keep` marks real tokens.
    pub fn layer(&self, tape: &mut Tape<T>, h: Var, keep: &[bool], index: usize) -> Result<Var> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Index(format!("block {index} of {}", self.blocks.len())))?;
        let attn = self.self_attention(tape, h, keep, self.config.heads, &block.attention)?;
        let attn = tape.dropout(attn)?;
        let h1 = tape.add(h, attn)?;
        let h1 = self.norm(tape, h1, &block.attention_norm)?;
        let ff = self.linear(tape, h1, &block.ffn_in)?;
        let ff = tape.gelu(ff)?;
        let ff = self.linear(tape, ff, &block.ffn_out)?;
        let ff = tape.dropout(ff)?;
        let h2 = tape.add(h1, ff)?;
        self.norm(tape, h2, &block.ffn_norm)
    }

    /// Classifier logits `[B, N]`: narrow to the head width, single-head
    /// self-attention, dense layer, pool the classification position, project
    /// to the classes.
    pub fn head_logits(&self, tape: &mut Tape<T>, h: Var, keep: &[bool], kind: HeadKind) -> Result<Var> {
        let head = self.head(kind)?;
        let x = self.linear(tape, h, &head.narrow)?;
        let x = tape.dropout(x)?;
        let x = self.self_attention(tape, x, keep, 1, &head.attention)?;
        let x = self.linear(tape, x, &head.dense)?;
        let x = tape.dropout(x)?;
        let pooled = tape.select_position(x, CLS_POSITION)?;
        self.linear(tape, pooled, &head.output)
    }

    /// Classifier probabilities `[B, N]`.
    pub fn head_forward(&self, tape: &mut Tape<T>, h: Var, keep: &[bool], kind: HeadKind) -> Result<Var> {
        let logits = self.head_logits(tape, h, keep, kind)?;
        tape.softmax(logits)
    }

    /// Inference-mode embedding, outside any caller tape.
    pub fn run_embed(&self, batch: &EncodedBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.embed(&mut tape, batch)?;
        Ok(tape.value(v).clone())
    }

    /// Inference-mode block `index` on a hidden-state tensor.
    pub fn run_layer(&self, h: &Tensor<T>, keep: &[bool], index: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone())?;
        let v = self.layer(&mut tape, x, keep, index)?;
        Ok(tape.value(v).clone())
    }

    /// Inference-mode classifier probabilities on a hidden-state tensor.
    pub fn run_head(&self, h: &Tensor<T>, keep: &[bool], kind: HeadKind) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone())?;
        let logits = self.head_logits(&mut tape, x, keep, kind)?;
        Ok(softmax_rows(tape.value(logits)))
    }

    /// Runs every block and every head in inference mode.
    pub fn full_forward(&self, batch: &EncodedBatch) -> Result<FullOutput<T>> {
        let mut h = self.run_embed(batch)?;
        let mut hidden = Vec::with_capacity(self.config.layers);
        let mut students = Vec::with_capacity(self.config.students());
        for i in 0..self.config.layers {
            h = self.run_layer(&h, &batch.mask, i)?;
            if i + 1 < self.config.layers {
                students.push(self.run_head(&h, &batch.mask, HeadKind::Student(i))?);
            }
            hidden.push(h.clone());
        }
        let teacher = self.run_head(&h, &batch.mask, HeadKind::Teacher)?;
        Ok(FullOutput {
            teacher,
            students,
            hidden,
        })
    }

    /// Checks that another configuration describes this architecture.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Config(format!(
                "model configuration mismatch: have {:?}, expected {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    /// Replaces the parameter values from `(name, tensor)` pairs, which must
    /// cover every parameter exactly once.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for (name, value) in values {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            self.params
                .set_value(id, value)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
