use proptest::prelude::*;

use super::*;

fn small() -> ModelConfig {
    ModelConfig {
        layers: 3,
        hidden: 8,
        heads: 2,
        ffn: 16,
        cls_hidden: 4,
        classes: 3,
        vocab_size: 10,
        max_len: 8,
        dropout: 0.1,
        layer_norm_eps: 1e-12,
    }
}

fn batch(rows: &[&[usize]]) -> EncodedBatch {
    let len = rows.iter().map(|r| r.len()).max().unwrap();
    let ids = rows
        .iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(len, 0);
            v
        })
        .collect();
    let mask = rows.iter().map(|r| (0..len).map(|i| i < r.len()).collect()).collect();
    EncodedBatch::from_rows(ids, mask, None).unwrap()
}

fn set(model: &mut FastBert<f64>, name: &str, value: Tensor<f64>) {
    let id = model.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.set_value(id, value).unwrap();
}

fn zero(model: &mut FastBert<f64>, name: &str) {
    let shape = model.params.value(model.params.find(name).unwrap()).shape().to_vec();
    set(model, name, Tensor::zeros(&shape));
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_tables_embed_to_zero() {
    let mut m = FastBert::<f64>::new(small(), 1).unwrap();
    for t in ["embedding.token", "embedding.position", "embedding.segment"] {
        zero(&mut m, t);
    }
    let e = m.run_embed(&batch(&[&[2]])).unwrap();
    assert_eq!(e.shape(), &[1, 1, 8]);
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_sentences_embed_identically() {
    let m = FastBert::<f64>::new(small(), 1).unwrap();
    let e = m.run_embed(&batch(&[&[2, 5, 6, 3], &[2, 5, 6, 3]])).unwrap();
    assert_eq!(e.select_first_axis(&[0]).unwrap(), e.select_first_axis(&[1]).unwrap());
}

/// Population-variance layer norm of one row, unit gain and zero bias.
fn reference_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

#[test]
fn embedding_is_the_normalized_sum_of_token_and_position_rows() {
    let mut m = FastBert::<f64>::new(small(), 2).unwrap();
    zero(&mut m, "embedding.segment");
    let ids = [2, 7, 4, 3];
    let e = m.run_embed(&batch(&[&ids])).unwrap();
    let token = m.params.value(m.params.find("embedding.token").unwrap());
    let position = m.params.value(m.params.find("embedding.position").unwrap());
    for (pos, &id) in ids.iter().enumerate() {
        let sum: Vec<f64> = token.row(id).iter().zip(position.row(pos)).map(|(a, b)| a + b).collect();
        let expected = reference_norm(&sum, 1e-12);
        for (a, b) in e.data()[pos * 8..(pos + 1) * 8].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn sequence_longer_than_max_len_is_rejected() {
    let m = FastBert::<f64>::new(small(), 0).unwrap();
    let long: Vec<usize> = vec![4; 9];
    assert!(matches!(m.run_embed(&batch(&[&long])), Err(Error::Shape(_))));
    assert!(matches!(m.run_embed(&batch(&[&[2, 99]])), Err(Error::Index(_))));
}

#[test]
fn trailing_padding_never_changes_outputs() {
    let m = FastBert::<f64>::new(small(), 3).unwrap();
    let short = batch(&[&[2, 5, 9, 3]]);
    let mut padded = batch(&[&[2, 5, 9, 3, 0, 0, 0]]);
    padded.mask[4..].iter_mut().for_each(|k| *k = false);
    let a = m.full_forward(&short).unwrap();
    let b = m.full_forward(&padded).unwrap();
    for (x, y) in a.students.iter().chain([&a.teacher]).zip(b.students.iter().chain([&b.teacher])) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }
    for (x, y) in a.hidden.iter().zip(&b.hidden) {
        let real = &y.data()[..4 * 8];
        for (p, q) in x.data().iter().zip(real) {
            assert!((p - q).abs() < 1e-9);
        }
    }
}

#[test]
fn single_position_attention_passes_values_through() {
    // With one position the attention weight is exactly 1, so the context is
    // the value projection itself.
    let m = FastBert::<f64>::new(small(), 4).unwrap();
    let b = batch(&[&[2]]);
    let h = m.run_embed(&b).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(h.clone()).unwrap();
    let out = m.layer(&mut tape, x, &b.mask, 0).unwrap();

    let p = |n: &str| m.params.value(m.params.find(n).unwrap()).clone();
    let lin = |x: &[f64], w: &Tensor<f64>, bias: &Tensor<f64>| -> Vec<f64> {
        let (i, o) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|c| (0..i).map(|r| x[r] * w.data()[r * o + c]).sum::<f64>() + bias.data()[c])
            .collect()
    };
    let x0 = h.data().to_vec();
    let v = lin(&x0, &p("block0.attention.value.weight"), &p("block0.attention.value.bias"));
    let attn = lin(&v, &p("block0.attention.output.weight"), &p("block0.attention.output.bias"));
    let h1 = reference_norm(&x0.iter().zip(&attn).map(|(a, b)| a + b).collect::<Vec<_>>(), 1e-12);
    let ff = lin(&h1, &p("block0.ffn_in.weight"), &p("block0.ffn_in.bias"));
    let ff: Vec<f64> = ff.into_iter().map(crate::graph::gelu).collect();
    let ff = lin(&ff, &p("block0.ffn_out.weight"), &p("block0.ffn_out.bias"));
    let h2 = reference_norm(&h1.iter().zip(&ff).map(|(a, b)| a + b).collect::<Vec<_>>(), 1e-12);
    for (a, b) in tape.value(out).data().iter().zip(&h2) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn permuting_rows_permutes_outputs() {
    let m = FastBert::<f64>::new(small(), 5).unwrap();
    let ab = batch(&[&[2, 5, 6, 3], &[2, 8, 3]]);
    let ba = batch(&[&[2, 8, 3], &[2, 5, 6, 3]]);
    let x = m.full_forward(&ab).unwrap();
    let y = m.full_forward(&ba).unwrap();
    let swap = |t: &Tensor<f64>| t.select_first_axis(&[1, 0]).unwrap();
    assert_eq!(bits(&x.teacher), bits(&swap(&y.teacher)));
    for (s, t) in x.students.iter().zip(&y.students) {
        assert_eq!(bits(s), bits(&swap(t)));
    }
}

#[test]
fn every_head_emits_probability_rows() {
    let m = FastBert::<f64>::new(small(), 6).unwrap();
    let out = m.full_forward(&batch(&[&[2, 5, 3], &[2, 9, 9, 9, 3]])).unwrap();
    assert_eq!(out.students.len(), 2);
    assert_eq!(out.hidden.len(), 3);
    for p in out.students.iter().chain([&out.teacher]) {
        assert_eq!(p.shape(), &[2, 3]);
        for row in p.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn heads_with_equal_parameters_agree() {
    let mut m = FastBert::<f64>::new(small(), 7).unwrap();
    let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).filter(|n| n.starts_with("teacher.")).collect();
    for n in names {
        let v = m.params.value(m.params.find(&n).unwrap()).clone();
        set(&mut m, &n.replacen("teacher", "student0", 1), v);
    }
    let b = batch(&[&[2, 4, 5, 3]]);
    let h = m.run_embed(&b).unwrap();
    let t = m.run_head(&h, &b.mask, HeadKind::Teacher).unwrap();
    let s = m.run_head(&h, &b.mask, HeadKind::Student(0)).unwrap();
    assert_eq!(bits(&t), bits(&s));
}

#[test]
fn one_token_head_matches_a_scalar_evaluation() {
    let cfg = ModelConfig {
        layers: 2,
        hidden: 2,
        heads: 1,
        ffn: 2,
        cls_hidden: 2,
        classes: 2,
        vocab_size: 4,
        max_len: 2,
        dropout: 0.0,
        layer_norm_eps: 1e-12,
    };
    let mut m = FastBert::<f64>::new(cfg, 0).unwrap();
    let t = |rows: &[&[f64]]| Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let v = |xs: &[f64]| Tensor::from_vec(vec![xs.len()], xs.to_vec()).unwrap();
    set(&mut m, "teacher.narrow.weight", t(&[&[0.5, -0.25], &[0.1, 0.2]]));
    set(&mut m, "teacher.narrow.bias", v(&[0.05, -0.05]));
    set(&mut m, "teacher.attention.value.weight", t(&[&[1.0, 0.5], &[-0.5, 1.0]]));
    set(&mut m, "teacher.attention.value.bias", v(&[0.0, 0.1]));
    set(&mut m, "teacher.attention.output.weight", t(&[&[0.3, 0.0], &[0.2, 0.4]]));
    set(&mut m, "teacher.attention.output.bias", v(&[-0.1, 0.0]));
    set(&mut m, "teacher.dense.weight", t(&[&[2.0, -1.0], &[1.0, 1.0]]));
    set(&mut m, "teacher.dense.bias", v(&[0.0, 0.2]));
    set(&mut m, "teacher.output.weight", t(&[&[1.5, -1.5], &[0.5, 0.25]]));
    set(&mut m, "teacher.output.bias", v(&[0.1, -0.1]));

    // x = (1, -2)
    // narrow: (0.5 − 0.2 + 0.05, −0.25 − 0.4 − 0.05) = (0.35, −0.7)
    // value:  (0.35 + 0.35, 0.175 − 0.7 + 0.1) = (0.7, −0.425)
    // output: (0.21 − 0.085 − 0.1, −0.17) = (0.025, −0.17)
    // dense:  (0.05 − 0.17, −0.025 − 0.17 + 0.2) = (−0.12, 0.005)
    // logits: (−0.18 + 0.0025 + 0.1, 0.18 + 0.00125 − 0.1) = (−0.0775, 0.08125)
    let h = Tensor::from_vec(vec![1, 1, 2], vec![1.0, -2.0]).unwrap();
    let p = m.run_head(&h, &[true], HeadKind::Teacher).unwrap();
    let z = (-0.0775f64).exp() + 0.08125f64.exp();
    let expected = [(-0.0775f64).exp() / z, 0.08125f64.exp() / z];
    for (a, b) in p.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn students_ignore_everything_above_them() {
    let m = FastBert::<f64>::new(small(), 8).unwrap();
    let b = batch(&[&[2, 5, 6, 3], &[2, 7, 3]]);
    let before = m.full_forward(&b).unwrap();
    let mut changed = m.clone();
    let names: Vec<String> = changed
        .params
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.starts_with("block1") || n.starts_with("block2") || n.starts_with("teacher") || n.starts_with("student1"))
        .collect();
    for n in names {
        let id = changed.params.find(&n).unwrap();
        let bumped = changed.params.value(id).map(|v| v * 3.0 + 0.1);
        changed.params.set_value(id, bumped).unwrap();
    }
    let after = changed.full_forward(&b).unwrap();
    assert_eq!(bits(&before.students[0]), bits(&after.students[0]));
    assert_ne!(bits(&before.students[1]), bits(&after.students[1]));
    assert_ne!(bits(&before.teacher), bits(&after.teacher));
}

#[test]
fn teacher_is_the_head_on_the_last_block() {
    let m = FastBert::<f64>::new(small(), 9).unwrap();
    let b = batch(&[&[2, 5, 6, 3]]);
    let out = m.full_forward(&b).unwrap();
    let direct = m.run_head(out.hidden.last().unwrap(), &b.mask, HeadKind::Teacher).unwrap();
    assert_eq!(bits(&out.teacher), bits(&direct));
    assert_eq!(m.head_for_layer(2), HeadKind::Teacher);
    assert_eq!(m.head_for_layer(1), HeadKind::Student(1));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { layers: 1, ..small() },
        ModelConfig { heads: 3, ..small() },
        ModelConfig { classes: 1, ..small() },
    ];
    for cfg in bad {
        assert!(matches!(FastBert::<f64>::new(cfg, 0), Err(Error::Config(_))));
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = FastBert::<f64>::new(small(), 10).unwrap();
    let b = FastBert::<f64>::new(small(), 10).unwrap();
    let c = FastBert::<f64>::new(small(), 11).unwrap();
    assert_eq!(a.params.fingerprint(|_| true), b.params.fingerprint(|_| true));
    assert_ne!(a.params.fingerprint(|_| true), c.params.fingerprint(|_| true));
}

#[test]
fn load_values_checks_names_and_counts() {
    let a = FastBert::<f64>::new(small(), 1).unwrap();
    let mut b = FastBert::<f64>::new(small(), 2).unwrap();
    let values: Vec<_> = a.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    b.load_values(values.clone()).unwrap();
    assert_eq!(a.params.fingerprint(|_| true), b.params.fingerprint(|_| true));

    let mut dup = values.clone();
    dup[1].0 = dup[0].0.clone();
    assert!(b.load_values(dup).is_err());
    assert!(b.load_values(values[1..].to_vec()).is_err());
    let mut unknown = values;
    unknown[0].0 = "nope".into();
    assert!(b.load_values(unknown).is_err());
}

#[test]
fn f32_model_runs_the_same_contract() {
    let m = FastBert::<f32>::new(small(), 12).unwrap();
    let out = m.full_forward(&batch(&[&[2, 5, 3]])).unwrap();
    for row in out.teacher.rows() {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_shapes_follow_the_config(
        layers in 2usize..4,
        heads in 1usize..3,
        head_dim in 1usize..4,
        cls_hidden in 1usize..5,
        classes in 2usize..4,
        rows in prop::collection::vec(prop::collection::vec(4usize..12, 1..6), 1..4),
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            layers,
            hidden: heads * head_dim,
            heads,
            ffn: 2 * heads * head_dim,
            cls_hidden,
            classes,
            vocab_size: 12,
            max_len: 6,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
        };
        let m = FastBert::<f64>::new(cfg.clone(), seed).unwrap();
        let refs: Vec<&[usize]> = rows.iter().map(|r| r.as_slice()).collect();
        let b = batch(&refs);
        let out = m.full_forward(&b).unwrap();
        prop_assert_eq!(out.teacher.shape(), &[b.batch, classes]);
        prop_assert_eq!(out.students.len(), layers - 1);
        for s in &out.students {
            prop_assert_eq!(s.shape(), &[b.batch, classes]);
        }
        for h in &out.hidden {
            prop_assert_eq!(h.shape(), &[b.batch, b.len, cfg.hidden]);
        }
    }
}
