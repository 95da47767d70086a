//! Early-exit behaviour on a briefly trained desk model.

mod common;

use std::sync::OnceLock;

use common::desk::{desk, Desk};
use eex::flops::FlopsBreakdown;
use eex::inference::{adaptive_infer, adaptive_infer_set, fixed_layer_infer, fixed_layer_infer_set, uncertainty};
use eex::training::{fine_tune, self_distill, EVAL_BATCH};
use eex::{Error, FastBert, Speed, Stage, TrainPlan};

struct Trained {
    desk: Desk,
    model: FastBert<f64>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let desk = desk(1200, 0.7);
        let mut model = FastBert::new(desk.config.clone(), 0).unwrap();
        let ft = TrainPlan {
            epochs: 2,
            ..TrainPlan::for_stage(Stage::FineTune)
        };
        fine_tune(&mut model, &desk.train, &desk.dev, &ft).unwrap();
        let sd = TrainPlan {
            epochs: 2,
            ..TrainPlan::for_stage(Stage::SelfDistill)
        };
        self_distill(&mut model, &desk.train, &desk.dev, &sd).unwrap();
        Trained { desk, model }
    })
}

fn speed(v: f64) -> Speed {
    Speed::new(v).unwrap()
}

/// Normalized entropy computed directly, independent of the library.
fn entropy_ratio(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[test]
fn uncertainty_reference_values() {
    assert_eq!(uncertainty(&[0.5f64, 0.5]).unwrap(), 1.0);
    assert!((uncertainty(&[0.2f64; 5]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(uncertainty(&[0.0f64, 1.0, 0.0]).unwrap(), 0.0);
    let u = uncertainty(&[0.9f64, 0.1]).unwrap();
    assert!((u - 0.468_995_593_589).abs() < 1e-9);
    assert!(matches!(uncertainty(&[0.6f64, 0.6]), Err(Error::Contract(_))));
    assert!(matches!(uncertainty(&[1.2f64, -0.2]), Err(Error::Contract(_))));
}

#[test]
fn speed_zero_is_the_teacher_on_every_sample() {
    let t = trained();
    let set = &t.desk.dev;
    let trace = adaptive_infer_set(&t.model, set, speed(0.0), EVAL_BATCH).unwrap();
    let layers = t.model.layers();
    for (i, chunk) in set.chunks(EVAL_BATCH).enumerate() {
        let teacher = t.model.full_forward(&set.batch(&chunk).unwrap()).unwrap().teacher;
        for (j, row) in teacher.rows().enumerate() {
            let s = &trace.samples[i * EVAL_BATCH + j];
            assert_eq!(s.exit_layer, layers - 1);
            assert_eq!(s.prediction, argmax(row));
            assert_eq!(s.probs, row.to_vec());
        }
    }
    assert_eq!(trace.active_per_layer, vec![set.len(); layers]);
}

#[test]
fn speed_one_exits_everything_at_the_first_block() {
    let t = trained();
    let trace = adaptive_infer_set(&t.model, &t.desk.dev, speed(1.0), EVAL_BATCH).unwrap();
    assert!(trace.exit_layers().iter().all(|&e| e == 0));
    assert_eq!(trace.active_per_layer[1..].iter().sum::<usize>(), 0);
}

#[test]
fn batched_sifting_matches_one_sample_at_a_time() {
    let t = trained();
    let set = &t.desk.dev;
    let layers = t.model.layers();
    let mut heads = Vec::new();
    for i in 0..set.len() {
        let out = t.model.full_forward(&set.batch(&[i]).unwrap()).unwrap();
        let rows: Vec<Vec<f64>> = out
            .students
            .iter()
            .chain(std::iter::once(&out.teacher))
            .map(|p| p.row(0).to_vec())
            .collect();
        heads.push(rows);
    }
    for s in [0.1, 0.3, 0.5, 0.8] {
        let trace = adaptive_infer_set(&t.model, set, speed(s), EVAL_BATCH).unwrap();
        for (rows, got) in heads.iter().zip(&trace.samples) {
            let exit = (0..layers - 1).find(|&i| entropy_ratio(&rows[i]) < s).unwrap_or(layers - 1);
            assert_eq!(got.exit_layer, exit, "speed {s}");
            assert_eq!(got.prediction, argmax(&rows[exit]), "speed {s}");
        }
    }
}

#[test]
fn batch_composition_does_not_matter() {
    let t = trained();
    let set = &t.desk.dev;
    let whole = adaptive_infer(&t.model, &set.batch(&(0..set.len()).collect::<Vec<_>>()).unwrap(), speed(0.4)).unwrap();
    let reversed: Vec<usize> = (0..set.len()).rev().collect();
    let back = adaptive_infer(&t.model, &set.batch(&reversed).unwrap(), speed(0.4)).unwrap();
    for (i, s) in back.samples.iter().rev().enumerate() {
        assert_eq!(s, &whole.samples[i]);
    }
}

#[test]
fn exits_and_cost_never_grow_with_speed() {
    let t = trained();
    let breakdown = FlopsBreakdown::new(&t.desk.config, t.desk.config.max_len);
    let speeds: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let traces: Vec<_> = speeds
        .iter()
        .map(|&s| adaptive_infer_set(&t.model, &t.desk.dev, speed(s), EVAL_BATCH).unwrap())
        .collect();
    for w in traces.windows(2) {
        for (a, b) in w[0].samples.iter().zip(&w[1].samples) {
            assert!(b.exit_layer <= a.exit_layer);
        }
        assert!(w[1].flops(&breakdown).unwrap().avg_flops <= w[0].flops(&breakdown).unwrap().avg_flops);
    }
    for trace in &traces {
        for s in &trace.samples {
            for u in s.uncertainties.iter().flatten() {
                assert!((0.0..=1.0).contains(u));
            }
            for (i, u) in s.uncertainties.iter().enumerate() {
                assert_eq!(u.is_some(), i <= s.exit_layer, "uncertainty recorded exactly up to the exit");
            }
        }
    }
}

#[test]
fn fixed_layer_runs_take_the_named_head() {
    let t = trained();
    let set = &t.desk.dev;
    let layers = t.model.layers();
    let batch = set.batch(&(0..40).collect::<Vec<_>>()).unwrap();
    let out = t.model.full_forward(&batch).unwrap();
    let breakdown = FlopsBreakdown::new(&t.desk.config, t.desk.config.max_len);
    for k in 1..=layers {
        let trace = fixed_layer_infer(&t.model, &batch, k).unwrap();
        let head = if k == layers { &out.teacher } else { &out.students[k - 1] };
        for (s, row) in trace.samples.iter().zip(head.rows()) {
            assert_eq!(s.exit_layer, k - 1);
            assert_eq!(s.prediction, argmax(row));
        }
        let expected = k as u64 * breakdown.transformer_total() + breakdown.classifier_total() + breakdown.embedding;
        assert_eq!(trace.flops(&breakdown).unwrap().avg_flops, expected as f64);
    }
    assert!(matches!(fixed_layer_infer(&t.model, &batch, 0), Err(Error::Config(_))));
    assert!(matches!(fixed_layer_infer(&t.model, &batch, layers + 1), Err(Error::Config(_))));
    let teacher = fixed_layer_infer_set(&t.model, set, layers, EVAL_BATCH).unwrap();
    let zero = adaptive_infer_set(&t.model, set, speed(0.0), EVAL_BATCH).unwrap();
    assert_eq!(teacher.predictions(), zero.predictions());
}

#[test]
fn invalid_speeds_are_rejected() {
    assert!(Speed::new(-0.01).is_err());
    assert!(Speed::new(1.01).is_err());
    assert!(Speed::new(f64::NAN).is_err());
}
