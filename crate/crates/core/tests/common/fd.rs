//! Finite-difference check of every parameter block on a tiny model.

use eex::graph::Tape;
use eex::model::{EncodedBatch, FastBert, ModelConfig};
use eex::training::{stage_loss, Stage};
use eex::ParamGroup;

const H: f64 = 1e-6;
/// Central differences at `H` carry round-off near 1e-10 per entry, so blocks
/// whose true gradient vanishes are compared against this norm instead.
const FLOOR: f64 = 1e-5;
const SCALE: f64 = 8.0;

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn: 16,
        cls_hidden: 4,
        classes: 2,
        vocab_size: 12,
        max_len: 6,
        dropout: 0.0,
        layer_norm_eps: 1e-12,
    }
}

fn batch() -> EncodedBatch {
    let mut b = EncodedBatch::from_rows(
        vec![vec![2, 5, 7, 9, 3, 0], vec![2, 11, 4, 3, 0, 0], vec![2, 6, 6, 8, 10, 3]],
        vec![
            vec![true, true, true, true, true, false],
            vec![true, true, true, true, false, false],
            vec![true; 6],
        ],
        Some(vec![1, 0, 1]),
    )
    .unwrap();
    b.segments[7] = 1;
    b
}

/// Weights well above the initializer's scale so attention is far from
/// uniform and every block sees gradients large enough to difference.
fn model(seed: u64) -> FastBert<f64> {
    let mut m = FastBert::new(tiny(), seed).unwrap();
    let ids: Vec<_> = m.params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = m.params.get_mut(id);
        for (j, v) in p.value.data_mut().iter_mut().enumerate() {
            *v = *v * SCALE + 0.05 * (((k * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
        }
    }
    m
}

fn loss(m: &FastBert<f64>, stage: Stage) -> f64 {
    let mut tape = Tape::new();
    let l = stage_loss(m, &mut tape, &batch(), stage).unwrap();
    tape.value(l).item().unwrap()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(FLOOR)
}

/// Returns `(name, group, relative error, analytic norm)` for every block.
pub fn check(stage: Stage) -> Vec<(String, ParamGroup, f64, f64)> {
    let mut m = model(11);
    m.params.set_trainable(|g| stage.trains(g));
    let mut tape = Tape::new();
    let l = stage_loss(&m, &mut tape, &batch(), stage).unwrap();
    let grads = tape.backward(l).unwrap();
    grads.accumulate_into(&tape, &mut m.params);

    let ids: Vec<_> = m.params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let analytic = m.params.get(id).grad.data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = m.params.get(id).value.data()[j];
            m.params.get_mut(id).value.data_mut()[j] = orig + H;
            let up = loss(&m, stage);
            m.params.get_mut(id).value.data_mut()[j] = orig - H;
            let down = loss(&m, stage);
            m.params.get_mut(id).value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let p = m.params.get(id);
        let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push((p.name.clone(), p.group, rel_err(&analytic, &numeric), norm));
    }
    out
}

