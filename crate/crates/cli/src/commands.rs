//! One function per subcommand. Each computes every output in memory and
//! writes only once all of it succeeded, so a failure leaves no partial files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eex::data::{load_checkpoint, Checkpoint, Dataset, Provenance, Split, SyntheticSpec};
use eex::flops::{FlopsReport, SpeedFlops};
use eex::inference::{adaptive_infer_set, all_head_probs, fixed_layer_infer_set, InferenceTrace};
use eex::metrics::{
    distribution_to_csv, exit_layer_distribution, histograms_from_trace, histograms_to_csv, luha_from_probs, sweep_row,
    terciles, SweepReport, TercileStat,
};
use eex::training::evaluate;
use eex::{ConvergenceLog, EncodedSet, Error, FastBert, FlopsBreakdown, ModelConfig, Speed, Stage};
use serde::Serialize;

use crate::config::{speeds, RunConfig};
use crate::pipeline::{prepare, run_fine_tune, run_joint, run_self_distill, Prepared};

/// Files waiting to be written.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    pub fn json(&mut self, path: impl Into<PathBuf>, value: &impl Serialize) -> eex::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(path, text);
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn commit(self) -> eex::Result<()> {
        for (path, bytes) in self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
        }
        Ok(())
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn speed_tag(s: Speed) -> String {
    format!("{:.3}", s.value())
}

pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> eex::Result<Outputs> {
    let s = spec.splits()?;
    let mut o = Outputs::default();
    for (name, d) in [("train", &s.train), ("dev", &s.dev), ("test", &s.test)] {
        o.add(out.join(format!("{name}.tsv")), d.to_tsv());
    }
    Ok(o)
}

#[derive(Clone, Debug, Serialize)]
pub struct FineTuneSummary {
    pub train_size: usize,
    pub dev_size: usize,
    pub vocab_size: usize,
    pub kept_epoch: usize,
    pub teacher_dev_acc: f64,
}

fn checkpoint_bytes(model: &FastBert<f64>, prep: &Prepared, provenance: Provenance) -> eex::Result<Vec<u8>> {
    Checkpoint {
        model: model.clone(),
        vocab: prep.vocab.clone(),
        task: prep.task.clone(),
        provenance,
    }
    .to_bytes()
}

fn teacher_acc(model: &FastBert<f64>, cfg: &RunConfig, dev: &EncodedSet) -> eex::Result<f64> {
    Ok(evaluate(model, dev, Speed::new(cfg.eval.reference_speed)?)?.teacher_acc)
}

pub fn finetune(cfg: &RunConfig) -> eex::Result<(Outputs, FineTuneSummary)> {
    let prep = prepare(cfg, None)?;
    let (model, log) = run_fine_tune(cfg, &prep)?;
    let summary = FineTuneSummary {
        train_size: prep.train.len(),
        dev_size: prep.dev.len(),
        vocab_size: prep.vocab.len(),
        kept_epoch: log.kept_epoch,
        teacher_dev_acc: teacher_acc(&model, cfg, &prep.dev)?,
    };
    let provenance = Provenance {
        stages: vec![Stage::FineTune],
        seed: cfg.seed,
    };
    let dir = &cfg.output_dir;
    let mut o = Outputs::default();
    o.add(dir.join("finetune.ckpt"), checkpoint_bytes(&model, &prep, provenance)?);
    o.add(dir.join("finetune_log.csv"), log.to_csv());
    o.add(dir.join("vocab.json"), prep.vocab.to_json()? + "\n");
    o.json(dir.join("finetune_summary.json"), &summary)?;
    Ok((o, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillSummary {
    pub distill_size: usize,
    pub teacher_dev_acc_before: f64,
    pub teacher_dev_acc_after: f64,
    pub reference_speed: f64,
    pub adaptive_dev_acc: f64,
    pub avg_flops: f64,
}

pub fn distill(cfg: &RunConfig, checkpoint: &Path) -> eex::Result<(Outputs, DistillSummary)> {
    let ck = load_checkpoint::<f64>(checkpoint)?;
    if !ck.provenance.has(Stage::FineTune) {
        return Err(Error::Contract(format!(
            "{} was not produced by fine-tuning; distillation needs a fine-tuned teacher",
            checkpoint.display()
        )));
    }
    if ck.task.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, config {}",
            ck.task.classes, cfg.model.classes
        )));
    }
    let prep = prepare(cfg, Some(ck.vocab.clone()))?;
    ck.model.ensure_config(&prep.config)?;
    let mut model = ck.model;
    let before = teacher_acc(&model, cfg, &prep.dev)?;
    let log = run_self_distill(cfg, &prep, &mut model)?;
    let eval = evaluate(&model, &prep.dev, Speed::new(cfg.eval.reference_speed)?)?;
    let summary = DistillSummary {
        distill_size: prep.distill_set().len(),
        teacher_dev_acc_before: before,
        teacher_dev_acc_after: eval.teacher_acc,
        reference_speed: cfg.eval.reference_speed,
        adaptive_dev_acc: eval.adaptive_acc,
        avg_flops: eval.avg_flops,
    };
    let provenance = ck.provenance.with(Stage::SelfDistill);
    let dir = &cfg.output_dir;
    let mut o = Outputs::default();
    o.add(dir.join("distill.ckpt"), checkpoint_bytes(&model, &prep, provenance)?);
    o.add(dir.join("distill_log.csv"), log.to_csv());
    o.json(dir.join("distill_summary.json"), &summary)?;
    Ok((o, summary))
}

/// A labeled TSV encoded with a checkpoint's vocabulary.
fn load_eval_data(ck: &Checkpoint<f64>, data: &Path) -> eex::Result<(EncodedSet, Vec<usize>)> {
    let set = Dataset::load_tsv(data, Split::Dev, ck.task.clone())?.encode(&ck.vocab, ck.model.config().max_len);
    if set.is_empty() {
        return Err(Error::Contract(format!("{} holds no examples", data.display())));
    }
    let labels = set.require_labels()?;
    Ok((set, labels))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub sweep: SweepReport,
    pub flops: FlopsReport,
}

pub fn eval(checkpoint: &Path, data: &Path, speed_list: &[f64], batch: usize, out: &Path) -> eex::Result<(Outputs, EvalReport)> {
    let speeds = speeds(speed_list)?;
    if speeds.is_empty() {
        return Err(Error::Config("no speeds to evaluate".into()));
    }
    let ck = load_checkpoint::<f64>(checkpoint)?;
    let (set, labels) = load_eval_data(&ck, data)?;
    let cfg = ck.model.config();
    let breakdown = FlopsBreakdown::new(cfg, cfg.max_len);
    let mut o = Outputs::default();
    let mut rows = Vec::new();
    for &s in &speeds {
        let trace = adaptive_infer_set(&ck.model, &set, s, batch)?;
        o.add(out.join(format!("trace_speed_{}.csv", speed_tag(s))), trace.to_csv(&set.labels));
        rows.push(sweep_row(s, &trace, &labels, &breakdown)?);
    }
    let per_speed = rows
        .iter()
        .map(|r| SpeedFlops {
            speed: r.speed,
            avg_flops: r.avg_flops,
            speedup: r.speedup,
            accuracy: Some(r.accuracy),
        })
        .collect();
    let report = EvalReport {
        sweep: SweepReport { rows },
        flops: FlopsReport::new(cfg, cfg.max_len, per_speed),
    };
    o.add(out.join("sweep.csv"), report.sweep.to_csv());
    o.json(out.join("sweep.json"), &report.sweep)?;
    o.json(out.join("flops.json"), &report.flops)?;
    Ok((o, report))
}

fn terciles_csv(stats: &[TercileStat]) -> String {
    let mut s = String::from("classifier,layer,low_uncertainty_accuracy,high_uncertainty_accuracy\n");
    for t in stats {
        writeln!(s, "{},{},{},{}", t.classifier, t.layer, t.low_accuracy, t.high_accuracy).unwrap();
    }
    s
}

pub fn stats(checkpoint: &Path, data: &Path, speed_list: &[f64], bins: usize, batch: usize, out: &Path) -> eex::Result<Outputs> {
    let speeds = speeds(speed_list)?;
    if speeds.is_empty() {
        return Err(Error::Config("no speeds for the exit statistics".into()));
    }
    let ck = load_checkpoint::<f64>(checkpoint)?;
    let (set, labels) = load_eval_data(&ck, data)?;
    let heads = all_head_probs(&ck.model, &set, batch)?;
    let luha = luha_from_probs(&heads, &labels, bins)?;
    let tercile = terciles(&heads, &labels)?;

    let mut distribution = Vec::new();
    let mut hist = String::new();
    for &s in &speeds {
        let trace = adaptive_infer_set(&ck.model, &set, s, batch)?;
        distribution.push((s, exit_layer_distribution(&trace)?));
        let csv = histograms_to_csv(s, &histograms_from_trace(&trace, bins)?);
        let body = if hist.is_empty() { &csv[..] } else { csv.split_once('\n').map_or("", |(_, b)| b) };
        hist.push_str(body);
    }
    let mut o = Outputs::default();
    o.add(out.join("luha.csv"), luha.to_csv());
    o.add(out.join("terciles.csv"), terciles_csv(&tercile));
    o.add(out.join("exit_distribution.csv"), distribution_to_csv(&distribution));
    o.add(out.join("uncertainty_histograms.csv"), hist);
    Ok(o)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    /// Column speed; fixed-layer rows ignore it.
    pub speed: f64,
    pub accuracy: f64,
    pub avg_flops: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub variant: String,
    pub setting: String,
    /// Blocks run per sample, for fixed-layer rows.
    pub layers_executed: Option<usize>,
    pub cells: Vec<GridCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationGrid {
    pub eval_split: String,
    pub eval_size: usize,
    pub speeds: Vec<f64>,
    pub rows: Vec<GridRow>,
}

impl AblationGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,setting,speed,accuracy,avg_flops,speedup\n");
        for r in &self.rows {
            for c in &r.cells {
                writeln!(s, "{},{},{},{},{},{}", r.variant, r.setting, c.speed, c.accuracy, c.avg_flops, c.speedup).unwrap();
            }
        }
        s
    }
}

/// Everything the ablation trains, kept for callers that inspect the models.
pub struct AblationRun {
    pub prepared: Prepared,
    pub fine_tuned: FastBert<f64>,
    pub fastbert: FastBert<f64>,
    pub joint: FastBert<f64>,
    pub logs: Vec<(&'static str, ConvergenceLog)>,
    pub grid: AblationGrid,
}

fn cell(speed: Speed, trace: &InferenceTrace, labels: &[usize], b: &FlopsBreakdown) -> eex::Result<GridCell> {
    let row = sweep_row(speed, trace, labels, b)?;
    Ok(GridCell {
        speed: row.speed,
        accuracy: row.accuracy,
        avg_flops: row.avg_flops,
        speedup: row.speedup,
    })
}

/// Trains the full pipeline and the joint variant, then fills the grid:
/// both adaptive variants at the two ablation speeds, and the distilled
/// model with a fixed depth of `L/2` and of 2 blocks.
pub fn ablation(cfg: &RunConfig) -> eex::Result<AblationRun> {
    let prepared = prepare(cfg, None)?;
    let (fine_tuned, ft_log) = run_fine_tune(cfg, &prepared)?;
    let mut fastbert = fine_tuned.clone();
    let sd_log = run_self_distill(cfg, &prepared, &mut fastbert)?;
    let (joint, joint_log) = run_joint(cfg, &prepared)?;

    let (split, set) = prepared.eval_set();
    let labels = set.require_labels()?;
    let speeds = speeds(&cfg.eval.ablation_speeds)?;
    let batch = cfg.eval.batch_size;
    let b = FlopsBreakdown::new(&prepared.config, prepared.config.max_len);
    let mut rows = Vec::new();
    for (variant, model) in [("fastbert", &fastbert), ("without_self_distillation", &joint)] {
        let cells = speeds
            .iter()
            .map(|&s| cell(s, &adaptive_infer_set(model, set, s, batch)?, &labels, &b))
            .collect::<eex::Result<_>>()?;
        rows.push(GridRow {
            variant: variant.into(),
            setting: "adaptive".into(),
            layers_executed: None,
            cells,
        });
    }
    let layers = prepared.config.layers;
    for (setting, k) in [("layer=L/2", layers / 2), ("layer=2", 2)] {
        let trace = fixed_layer_infer_set(&fastbert, set, k, batch)?;
        let cells = speeds
            .iter()
            .map(|&s| cell(s, &trace, &labels, &b))
            .collect::<eex::Result<_>>()?;
        rows.push(GridRow {
            variant: "without_adaptive_inference".into(),
            setting: setting.into(),
            layers_executed: Some(k),
            cells,
        });
    }
    Ok(AblationRun {
        grid: AblationGrid {
            eval_split: split.into(),
            eval_size: set.len(),
            speeds: speeds.iter().map(|s| s.value()).collect(),
            rows,
        },
        logs: vec![("fine_tune", ft_log), ("self_distill", sd_log), ("joint", joint_log)],
        prepared,
        fine_tuned,
        fastbert,
        joint,
    })
}

pub fn ablate(cfg: &RunConfig) -> eex::Result<(Outputs, AblationGrid)> {
    let run = ablation(cfg)?;
    let dir = &cfg.output_dir;
    let mut o = Outputs::default();
    o.json(dir.join("ablation.json"), &run.grid)?;
    o.add(dir.join("ablation.csv"), run.grid.to_csv());
    for (name, log) in &run.logs {
        o.add(dir.join(format!("ablation_{name}_log.csv")), log.to_csv());
    }
    Ok((o, run.grid))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OperationRow {
    pub operation: String,
    pub shape: String,
    pub flops: u64,
    /// Millions, to 0.1M.
    pub mflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsTable {
    pub config: ModelConfig,
    pub sequence_length: usize,
    pub operations: Vec<OperationRow>,
    pub transformer_total: u64,
    pub classifier_total: u64,
    /// Every block plus the teacher head.
    pub full_model_flops: u64,
    /// Every sample leaving at the first block.
    pub earliest_exit_flops: u64,
}

pub fn flops_table(model: &ModelConfig) -> FlopsTable {
    let n = model.max_len;
    let b = FlopsBreakdown::new(model, n);
    let (d, c) = (model.hidden, model.cls_hidden);
    let row = |operation: &str, shape: String, flops: u64| OperationRow {
        operation: operation.into(),
        shape,
        flops,
        mflops: eex::flops::millions(flops),
    };
    FlopsTable {
        config: model.clone(),
        sequence_length: n,
        operations: vec![
            row("embedding", "-".into(), b.embedding),
            row("self_attention", format!("{d}->{d}"), b.self_attention),
            row("feedforward", format!("{d}->{}->{d}", model.ffn), b.feedforward),
            row("classifier_fc1", format!("{d}->{c}"), b.classifier_fc1),
            row("classifier_attention", format!("{c}->{c}"), b.classifier_attention),
            row("classifier_fc2", format!("{c}->{c}"), b.classifier_fc2),
            row("classifier_out", format!("{c}->{}", model.classes), b.classifier_out),
        ],
        transformer_total: b.transformer_total(),
        classifier_total: b.classifier_total(),
        full_model_flops: b.full_model(model.layers),
        earliest_exit_flops: b.sample(0),
    }
}

pub fn flops(cfg: &RunConfig, out: Option<&Path>) -> eex::Result<(Outputs, FlopsTable)> {
    let table = flops_table(&cfg.model);
    let mut o = Outputs::default();
    if let Some(path) = out {
        o.json(path, &table)?;
    }
    Ok((o, table))
}
