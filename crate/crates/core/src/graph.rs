//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! Nodes only reference earlier nodes, so creation order is a topological
//! order and [`Tape::backward`] walks it in reverse, visiting each node once.
//!
//! Parameters enter the tape through [`Tape::param`], which copies the current
//! value out of a [`ParamStore`]; after `backward`,
//! [`Gradients::accumulate_into`] adds the parameter gradients back into the
//! store's accumulators.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probability floor applied inside logarithms of target distributions.
pub const LOG_FLOOR: f64 = 1e-12;

const GELU_COEF: f64 = 0.044715;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Var },
    Tanh { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    SelectPosition { x: Var, pos: usize },
    Dropout { x: Var, mask: Vec<T> },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    KlDivergence { logits: Var, probs: Vec<T>, log_ratio: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct DropoutState {
    p: f64,
    rng: ChaCha8Rng,
}

/// Records a computation for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    dropout: Option<DropoutState>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape in inference mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout: None,
        }
    }

    /// A tape in training mode. Dropout masks are drawn from a ChaCha8 stream
    /// seeded with `seed`, in the order the dropout sites execute.
    pub fn training(dropout: f64, seed: u64) -> Self {
        let mut tape = Self::new();
        if dropout > 0.0 {
            tape.dropout = Some(DropoutState {
                p: dropout,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        tape
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A free leaf that receives a gradient (used by tests and probes).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `a[..., k] · b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, out)?, Op::MatMul { a, b }, needs, "matmul")
    }

    /// Batched product `a[G, m, k] · b[G, k, n]`, or `a · bᵀ` with
    /// `b[G, n, k]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Shape(format!("batch_matmul {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, ab, bb, ob);
            } else {
                gemm_nn(m, k, n, ab, bb, ob);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            needs,
            "batch_matmul",
        )
    }

    /// Adds `bias[n]` to every last-dimension slice of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias { x, bias }, needs, "add_bias")
    }

    /// `x · W + b` over the last dimension.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, needs, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, factor }, needs, "scale")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{op} {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `[B, n, H·dh] -> [B·H, n, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::Shape(format!("split_heads {s:?} into {heads}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let out = split_heads_raw(self.value(x).data(), b, n, d, heads);
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![b * heads, n, d / heads], out)?,
            Op::SplitHeads { x, heads },
            needs,
            "split_heads",
        )
    }

    /// `[B·H, n, dh] -> [B, n, H·dh]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::Shape(format!("merge_heads {s:?} from {heads}")));
        }
        let (b, n, d) = (s[0] / heads, s[1], s[2] * heads);
        let out = merge_heads_raw(self.value(x).data(), b, n, d, heads);
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![b, n, d], out)?,
            Op::MergeHeads { x, heads },
            needs,
            "merge_heads",
        )
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Softmax { x }, needs, "softmax")
    }

    /// Attention softmax over scores `[B·H, n_q, n_k]` where key `j` of batch
    /// row `b` takes part only if `keep[b·n_k + j]`. Excluded keys get
    /// probability exactly zero, as if their score were −∞.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool], heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 || keep.len() != (s[0] / heads) * s[2] {
            return Err(Error::Shape(format!(
                "masked_softmax scores {s:?}, mask of {} for {heads} heads",
                keep.len()
            )));
        }
        let (nq, nk) = (s[1], s[2]);
        let mut out = self.value(x).clone();
        for (g, block) in out.data_mut().chunks_exact_mut(nq * nk).enumerate() {
            let mask = &keep[(g / heads) * nk..(g / heads + 1) * nk];
            if !mask.iter().any(|&m| m) {
                return Err(Error::Contract("attention row with every key masked".into()));
            }
            for row in block.chunks_exact_mut(nk) {
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (v, &m) in row.iter_mut().zip(mask) {
                    *v = if m { (*v - max).exp() } else { T::zero() };
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Softmax { x }, needs, "masked_softmax")
    }

    /// Layer normalization over the last dimension (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!("layer_norm affine terms for width {d}")));
        }
        let eps = T::of(eps);
        let dt = T::from_usize(d).unwrap();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let xv = self.value(x);
        let mut normalized = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.numel() / d);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normalized.push(n);
                out.push(n * gv[i] + bv[i]);
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x }, needs, "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::tanh);
        let needs = self.needs(x);
        self.push(out, Op::Tanh { x }, needs, "tanh")
    }

    /// Gathers rows of `table[V, d]`; the result has shape `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!(
                "embedding table {s:?}, {} ids for prefix {prefix:?}",
                ids.len()
            )));
        }
        let (vocab, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} outside table of {vocab}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let needs = self.needs(table);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
            "embedding",
        )
    }

    /// `x[B, n, d] -> [B, d]` at sequence position `pos`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pos >= s[1] {
            return Err(Error::Shape(format!("select_position {pos} of {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * n + pos) * d;
            out.extend_from_slice(&xv[off..off + d]);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![b, d], out)?,
            Op::SelectPosition { x, pos },
            needs,
            "select_position",
        )
    }

    /// Inverted dropout in training mode; the identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - state.p;
        let scale = T::of(1.0 / keep);
        let numel = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..numel)
            .map(|_| {
                if state.rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, needs, "dropout")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum { x }, needs, "sum")
    }

    /// Mean over rows of `−log softmax(logits)[label]`, computed in log space.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!("cross_entropy logits {s:?} for {} labels", labels.len())));
        }
        let classes = s[1];
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(lv.numel());
        for (row, &y) in lv.rows().zip(labels) {
            if y >= classes {
                return Err(Error::Index(format!("label {y} with {classes} classes")));
            }
            let ls = log_softmax_row(row);
            total -= ls[y];
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        let out = Tensor::scalar(total / T::from_usize(labels.len()).unwrap());
        let needs = self.needs(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            "cross_entropy",
        )
    }

    /// Mean over rows of `KL(softmax(logits) ‖ target)`, natural log. The
    /// target rows are constants; a floor of [`LOG_FLOOR`] guards `ln target`.
    pub fn kl_divergence(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() || lv.rank() != 2 {
            return Err(Error::Shape(format!(
                "kl_divergence logits {:?} vs target {:?}",
                lv.shape(),
                target.shape()
            )));
        }
        let floor = T::of(LOG_FLOOR);
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(lv.numel());
        let mut log_ratio = Vec::with_capacity(lv.numel());
        for (row, trow) in lv.rows().zip(target.rows()) {
            let ls = log_softmax_row(row);
            for (&l, &t) in ls.iter().zip(trow) {
                let p = l.exp();
                let c = l - t.max(floor).ln();
                total += p * c;
                probs.push(p);
                log_ratio.push(c);
            }
        }
        let rows = lv.shape()[0];
        let out = Tensor::scalar(total / T::from_usize(rows).unwrap());
        let needs = self.needs(logits);
        self.push(
            out,
            Op::KlDivergence {
                logits,
                probs,
                log_ratio,
            },
            needs,
            "kl_divergence",
        )
    }

    /// Reverse pass from a scalar `loss`. Nodes not on a path to `loss` keep
    /// no gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of node {idx}")));
            }
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(buf.data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = self.value(*a).numel() / k;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| gemm_nt(m, n, k, gd, bv, ga));
                self.accumulate(grads, *b, |gb| gemm_tn(m, k, n, av, gd, gb));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (gcount, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let trans_b = *trans_b;
                self.accumulate(grads, *a, |ga| {
                    for gi in 0..gcount {
                        let gblk = &gd[gi * m * n..(gi + 1) * m * n];
                        let bblk = &bv[gi * k * n..(gi + 1) * k * n];
                        let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            gemm_nn(m, n, k, gblk, bblk, out);
                        } else {
                            gemm_nt(m, n, k, gblk, bblk, out);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for gi in 0..gcount {
                        let gblk = &gd[gi * m * n..(gi + 1) * m * n];
                        let ablk = &av[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            gemm_tn(m, n, k, gblk, ablk, out);
                        } else {
                            gemm_tn(m, k, n, ablk, gblk, out);
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
                let n = self.shape(*bias)[0];
                self.accumulate(grads, *bias, |gb| {
                    for row in gd.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += gv * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gv), &y) in gb.iter_mut().zip(gd).zip(av) {
                        *o += gv * y;
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &gv) in gx.iter_mut().zip(gd) {
                        *o += gv * *factor;
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let back = merge_heads_raw(gd, s[0], s[1], s[2], *heads);
                self.accumulate(grads, *x, |gx| add_into(gx, &back));
            }
            Op::MergeHeads { x, heads } => {
                let s = node.value.shape();
                let back = split_heads_raw(gd, s[0], s[1], s[2], *heads);
                self.accumulate(grads, *x, |gx| add_into(gx, &back));
            }
            Op::Softmax { x } => {
                let n = node.value.last_dim();
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, yr), gr) in gx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(gd.chunks_exact(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                let dt = T::from_usize(d).unwrap();
                self.accumulate(grads, *x, |gx| {
                    for (r, ((o, gr), xr)) in gx
                        .chunks_exact_mut(d)
                        .zip(gd.chunks_exact(d))
                        .zip(normalized.chunks_exact(d))
                        .enumerate()
                    {
                        let dxhat: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                        let mean_dx = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        for ((ov, &dv), &xh) in o.iter_mut().zip(&dxhat).zip(xr) {
                            *ov += inv_std[r] * (dv - mean_d - xh * mean_dx);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gr, xr) in gd.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for ((o, &gv), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gv * xh;
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in gd.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += gv * gelu_derivative(v);
                    }
                });
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(gd).zip(y) {
                        *o += gv * (T::one() - yv * yv);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *table, |gt| {
                    for (&id, gr) in ids.iter().zip(gd.chunks_exact(d)) {
                        add_into(&mut gt[id * d..(id + 1) * d], gr);
                    }
                });
            }
            Op::SelectPosition { x, pos } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, |gx| {
                    for bi in 0..b {
                        let off = (bi * n + pos) * d;
                        add_into(&mut gx[off..off + d], &gd[bi * d..(bi + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &m) in gx.iter_mut().zip(gd).zip(mask) {
                        *o += gv * m;
                    }
                });
            }
            Op::Sum { x } => {
                let gv = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gv));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = node_classes(self.shape(*logits));
                let scale = gd[0] / T::from_usize(labels.len()).unwrap();
                self.accumulate(grads, *logits, |gl| {
                    for (r, (o, pr)) in gl.chunks_exact_mut(n).zip(probs.chunks_exact(n)).enumerate() {
                        for (j, (ov, &p)) in o.iter_mut().zip(pr).enumerate() {
                            let target = if j == labels[r] { T::one() } else { T::zero() };
                            *ov += scale * (p - target);
                        }
                    }
                });
            }
            Op::KlDivergence { logits, probs, log_ratio } => {
                let s = self.shape(*logits);
                let (rows, n) = (s[0], s[1]);
                let scale = gd[0] / T::from_usize(rows).unwrap();
                self.accumulate(grads, *logits, |gl| {
                    for ((o, pr), cr) in gl
                        .chunks_exact_mut(n)
                        .zip(probs.chunks_exact(n))
                        .zip(log_ratio.chunks_exact(n))
                    {
                        let mean: T = pr.iter().zip(cr).map(|(&p, &c)| p * c).sum();
                        for ((ov, &p), &c) in o.iter_mut().zip(pr).zip(cr) {
                            *ov += scale * p * (c - mean);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn node_classes(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn split_heads_raw<T: Scalar>(x: &[T], b: usize, n: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..n {
            for h in 0..heads {
                let src = (bi * n + t) * d + h * dh;
                let dst = ((bi * heads + h) * n + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

fn merge_heads_raw<T: Scalar>(x: &[T], b: usize, n: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..n {
            for h in 0..heads {
                let dst = (bi * n + t) * d + h * dh;
                let src = ((bi * heads + h) * n + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Row-wise softmax over the last dimension, outside any tape.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.last_dim();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(GELU_COEF) * x * x * x)).tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(GELU_COEF);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient on `tape` into the store's accumulators.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &tape.params {
            if let Some(g) = &self.grads[v.0] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
