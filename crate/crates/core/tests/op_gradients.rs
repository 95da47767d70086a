//! Each differentiable tape operation against central finite differences.

use eex::graph::{Tape, Var};
use eex::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `f(inputs)`, reduces it to a scalar through a fixed random
/// weighting, and compares the gradient of every input with differences.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let w = weights.cloned().unwrap_or_else(|| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            random(tape.shape(out), &mut r)
        });
        let wv = tape.constant(w.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).item().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, g, w)
    };
    let (_, analytic, weights) = eval(&inputs, None);
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut up = inputs.clone();
            up[k].data_mut()[j] += H;
            let mut down = inputs.clone();
            down[k].data_mut()[j] -= H;
            numeric.push((eval(&up, Some(&weights)).0 - eval(&down, Some(&weights)).0) / (2.0 * H));
        }
        let a = analytic[k].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-5);
        assert!(diff / scale < TOL, "input {k}: relative error {:e}", diff / scale);
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(1)
}

#[test]
fn matmul() {
    let mut r = rng();
    check(vec![random(&[4, 5], &mut r), random(&[5, 3], &mut r)], |t, v| t.matmul(v[0], v[1]));
    check(vec![random(&[2, 3, 4], &mut r), random(&[4, 2], &mut r)], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn matmul_of_summed_output_is_ones_times_b_transpose() {
    let mut r = rng();
    let a = random(&[4, 5], &mut r);
    let b = random(&[5, 3], &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a).unwrap(), tape.leaf(b.clone()).unwrap());
    let out = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(out).unwrap();
    let g = tape.backward(loss).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..4 {
        for k in 0..5 {
            let expected: f64 = b.row(k).iter().sum();
            assert!((ga.data()[i * 5 + k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_matmul_both_layouts() {
    let mut r = rng();
    check(vec![random(&[3, 2, 4], &mut r), random(&[3, 4, 5], &mut r)], |t, v| t.batch_matmul(v[0], v[1], false));
    check(vec![random(&[3, 2, 4], &mut r), random(&[3, 5, 4], &mut r)], |t, v| t.batch_matmul(v[0], v[1], true));
}

#[test]
fn bias_add_mul_scale() {
    let mut r = rng();
    check(vec![random(&[2, 3, 4], &mut r), random(&[4], &mut r)], |t, v| t.add_bias(v[0], v[1]));
    check(vec![random(&[3, 4], &mut r), random(&[3, 4], &mut r)], |t, v| t.add(v[0], v[1]));
    check(vec![random(&[3, 4], &mut r), random(&[3, 4], &mut r)], |t, v| t.mul(v[0], v[1]));
    check(vec![random(&[3, 4], &mut r)], |t, v| t.scale(v[0], 0.37));
}

#[test]
fn softmax_and_masked_softmax() {
    let mut r = rng();
    check(vec![random(&[3, 5], &mut r)], |t, v| t.softmax(v[0]));
    let keep = [true, true, false, true, false, false];
    check(vec![random(&[4, 2, 3], &mut r)], move |t, v| t.masked_softmax(v[0], &keep, 2));
}

#[test]
fn layer_norm() {
    let mut r = rng();
    check(
        vec![random(&[2, 3, 6], &mut r), random(&[6], &mut r), random(&[6], &mut r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-12),
    );
}

#[test]
fn activations() {
    let mut r = rng();
    check(vec![random(&[4, 5], &mut r)], |t, v| t.gelu(v[0]));
    check(vec![random(&[4, 5], &mut r)], |t, v| t.tanh(v[0]));
}

#[test]
fn embedding_lookup() {
    let mut r = rng();
    check(vec![random(&[5, 3], &mut r)], |t, v| t.embedding(v[0], &[0, 2, 2, 4, 1, 2], &[2, 3]));
}

#[test]
fn head_reshapes_and_pooling() {
    let mut r = rng();
    check(vec![random(&[2, 3, 4], &mut r)], |t, v| t.split_heads(v[0], 2));
    check(vec![random(&[4, 3, 2], &mut r)], |t, v| t.merge_heads(v[0], 2));
    check(vec![random(&[2, 3, 4], &mut r)], |t, v| t.select_position(v[0], 0));
}

#[test]
fn losses() {
    let mut r = rng();
    check(vec![random(&[3, 4], &mut r)], |t, v| t.cross_entropy(v[0], &[0, 3, 1]));
    let target = Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
    check(vec![random(&[2, 3], &mut r)], move |t, v| t.kl_divergence(v[0], &target));
}
