//! Experiment specs, presets and orchestration.

use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use super::{evaluate, train, EpochStats, EvalOptions, TestOrder, TestState, TrainConfig, TrainStack};
use crate::data::{load_stack, sample_split, synth_stack, PreparedStack, SplitConfig, SplitPlan, SplitStrategy, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{ClassReport, Counts, EvalReport};
use crate::model::{adapt_num_classes, load_checkpoint, Architecture, ModelConfig, ModelGraph, DEPTH};
use crate::rng::RngStream;

pub const RESULTS_SCHEMA: &str = "results.v1";
pub const LOSS_SCHEMA: &str = "loss.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Preset {
    /// Architecture comparison.
    #[serde(rename = "exp-A")]
    ArchitectureComparison,
    /// Training-set location sensitivity.
    #[serde(rename = "exp-B")]
    StrategySensitivity,
    /// Six versus ten propagated layers.
    #[serde(rename = "exp-C")]
    PropagationSet,
    /// Head replacement and fine-tuning on a new class count.
    #[serde(rename = "exp-D")]
    Transfer,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exp-a" => Ok(Preset::ArchitectureComparison),
            "exp-b" => Ok(Preset::StrategySensitivity),
            "exp-c" => Ok(Preset::PropagationSet),
            "exp-d" => Ok(Preset::Transfer),
            _ => Err(Error::Spec(format!("unknown preset `{s}` (expected exp-A, exp-B, exp-C or exp-D)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSpec {
    Synth(SynthConfig),
    Stack { path: PathBuf, height: usize, width: usize },
}

impl DataSpec {
    pub fn load(&self) -> Result<PreparedStack> {
        match self {
            DataSpec::Synth(cfg) => {
                let (img, lab) = synth_stack(cfg)?;
                PreparedStack::prepare(&img, &lab, cfg.height, cfg.width)
            }
            DataSpec::Stack { path, height, width } => {
                let (img, lab) = load_stack(path)?;
                PreparedStack::prepare(&img, &lab, *height, *width)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TransferSpec {
    /// Source data used to pre-train when no checkpoint is given.
    pub source: DataSpec,
    pub source_checkpoint: Option<PathBuf>,
    pub source_epochs: usize,
    /// Also train a cold-start model on the target for comparison.
    pub cold_baseline: bool,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            source: DataSpec::Synth(SynthConfig { classes: 3, seed: 100, ..SynthConfig::default() }),
            source_checkpoint: None,
            source_epochs: 60,
            cold_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub preset: Option<Preset>,
    pub architectures: Vec<Architecture>,
    /// Explicit widths for every architecture; overrides `width_scale`.
    pub widths: Option<[usize; DEPTH]>,
    /// Multiplier on each architecture's default widths.
    pub width_scale: f64,
    pub data: DataSpec,
    pub strategies: Vec<SplitStrategy>,
    pub split: SplitConfig,
    /// One repetition per seed.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Also evaluate a shuffled test order.
    pub shuffled_test: bool,
    pub transfer: Option<TransferSpec>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            preset: None,
            architectures: vec![Architecture::Numsnet],
            widths: None,
            width_scale: 0.25,
            data: DataSpec::Synth(SynthConfig::default()),
            strategies: vec![SplitStrategy::MidSeq],
            split: SplitConfig::default(),
            seeds: vec![0],
            train: TrainConfig::default(),
            shuffled_test: false,
            transfer: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_preset(preset: Preset) -> Self {
        let base = ExperimentSpec { preset: Some(preset), ..ExperimentSpec::default() };
        match preset {
            Preset::ArchitectureComparison => ExperimentSpec {
                name: "exp-A".into(),
                architectures: vec![Architecture::Unet, Architecture::Wunet, Architecture::Unetpp, Architecture::Numsnet],
                ..base
            },
            Preset::StrategySensitivity => ExperimentSpec {
                name: "exp-B".into(),
                strategies: vec![SplitStrategy::InitialSeq, SplitStrategy::MidRand, SplitStrategy::MidSeq],
                ..base
            },
            Preset::PropagationSet => ExperimentSpec {
                name: "exp-C".into(),
                architectures: vec![Architecture::Numsnet, Architecture::Numsall],
                ..base
            },
            Preset::Transfer => ExperimentSpec {
                name: "exp-D".into(),
                data: DataSpec::Synth(SynthConfig { classes: 7, seed: 200, ..SynthConfig::default() }),
                transfer: Some(TransferSpec::default()),
                ..base
            },
        }
    }

    /// Parses a TOML spec. Keys given next to `preset` override the preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Spec(format!("{e}")))?;
        if let Some(p) = table.get("preset").and_then(|v| v.as_str()) {
            let preset: Preset = p.parse()?;
            let base = toml::Table::try_from(ExperimentSpec::from_preset(preset)).map_err(|e| Error::Spec(e.to_string()))?;
            table = merge(base, table);
        }
        let spec: ExperimentSpec = table.try_into().map_err(|e: toml::de::Error| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Spec("architectures, strategies and seeds must be non-empty".into()));
        }
        if !(self.width_scale > 0.0) {
            return Err(Error::Spec(format!("width_scale must be positive, got {}", self.width_scale)));
        }
        if self.train.deep_supervision && self.architectures.iter().any(|a| !a.is_nested()) {
            return Err(Error::Spec("deep supervision needs nested architectures".into()));
        }
        self.train.validate().map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn widths_for(&self, arch: Architecture) -> [usize; DEPTH] {
        self.widths.unwrap_or_else(|| scaled_widths(arch.default_widths(), self.width_scale))
    }

    fn model_config(&self, arch: Architecture, classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(arch, classes).with_widths(self.widths_for(arch));
        cfg.deep_supervision = self.train.deep_supervision;
        cfg
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// `round(w · scale)`, at least 1.
pub fn scaled_widths(widths: [usize; DEPTH], scale: f64) -> [usize; DEPTH] {
    widths.map(|w| ((w as f64 * scale).round() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub arch: Architecture,
    pub strategy: SplitStrategy,
    pub seed: u64,
    pub config: TrainConfig,
    pub plan: SplitPlan,
    pub epochs: Vec<EpochStats>,
    /// One report per evaluated test order.
    pub reports: Vec<EvalReport>,
    pub wall_time_s: f64,
    pub model: ModelGraph<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub name: String,
    pub runs: Vec<RunRecord>,
    /// Mean over seeds per (label, strategy, test order).
    pub averaged: Vec<(String, SplitStrategy, EvalReport)>,
}

fn eval_all(spec: &ExperimentSpec, model: &ModelGraph<f32>, stack: &PreparedStack, plan: &SplitPlan, label: &str, seed: u64) -> Result<Vec<EvalReport>> {
    let mut orders = vec![TestOrder::Ordered];
    if spec.shuffled_test {
        orders.push(TestOrder::Shuffled { seed });
    }
    orders
        .into_iter()
        .map(|order| {
            let opts = EvalOptions { order, state: TestState::Fresh, oracle: false, model_label: label.to_string() };
            Ok(evaluate(model, stack, &plan.test, &opts)?.report)
        })
        .collect()
}

/// Runs every (architecture, strategy, seed) combination of `spec`.
pub fn run_experiment(spec: &ExperimentSpec, progress: &mut dyn FnMut(&RunRecord)) -> Result<ExperimentOutput> {
    spec.validate()?;
    let stack = spec.data.load()?;
    let annotated = stack.annotated();
    let source = match &spec.transfer {
        Some(t) if t.source_checkpoint.is_none() => Some(t.source.load()?),
        _ => None,
    };
    let mut runs = Vec::new();
    for &arch in &spec.architectures {
        for &strategy in &spec.strategies {
            for &seed in &spec.seeds {
                let plan = sample_split(&annotated, strategy, &spec.split, seed)?;
                let config = TrainConfig { seed, ..spec.train.clone() };
                let init = RngStream::new(seed).split("init");
                let mut candidates: Vec<(String, ModelGraph<f32>)> = Vec::new();
                match &spec.transfer {
                    None => candidates.push((arch.tag().to_string(), ModelGraph::build(spec.model_config(arch, stack.num_classes()), &init)?)),
                    Some(t) => {
                        let pretrained = match (&t.source_checkpoint, &source) {
                            (Some(path), _) => {
                                let ckpt = load_checkpoint::<f32>(path)?;
                                if ckpt.model.arch() != arch {
                                    return Err(Error::ArchitectureMismatch(format!(
                                        "checkpoint holds {}, experiment asks for {arch}",
                                        ckpt.model.arch()
                                    )));
                                }
                                ckpt.model
                            }
                            (None, Some(src)) => {
                                let src_plan = sample_split(&src.annotated(), strategy, &spec.split, seed)?;
                                let mut m = ModelGraph::build(spec.model_config(arch, src.num_classes()), &init)?;
                                let src_cfg = TrainConfig { epochs: t.source_epochs, ..config.clone() };
                                train(&mut m, &[TrainStack { stack: src, train: &src_plan.train }], &src_cfg, &mut ())?;
                                m
                            }
                            (None, None) => unreachable!("source data is loaded when no checkpoint is given"),
                        };
                        let adapted = adapt_num_classes(&pretrained, stack.num_classes(), &init.split("head"))?;
                        candidates.push((format!("{arch}+transfer"), adapted));
                        if t.cold_baseline {
                            candidates.push((format!("{arch}+cold"), ModelGraph::build(spec.model_config(arch, stack.num_classes()), &init)?));
                        }
                    }
                }
                for (label, mut model) in candidates {
                    let outcome = train(&mut model, &[TrainStack { stack: &stack, train: &plan.train }], &config, &mut ())?;
                    let reports = eval_all(spec, &model, &stack, &plan, &label, seed)?;
                    let record = RunRecord {
                        label,
                        arch,
                        strategy,
                        seed,
                        config: config.clone(),
                        plan: plan.clone(),
                        epochs: outcome.epochs,
                        reports,
                        wall_time_s: outcome.wall_time_s,
                        model,
                    };
                    progress(&record);
                    runs.push(record);
                }
            }
        }
    }
    let mut averaged = Vec::new();
    let mut keys: Vec<(String, SplitStrategy, String)> = Vec::new();
    for r in &runs {
        for rep in &r.reports {
            let key = (r.label.clone(), r.strategy, rep.test_order.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    for (label, strategy, order) in keys {
        let group: Vec<EvalReport> = runs
            .iter()
            .filter(|r| r.label == label && r.strategy == strategy)
            .flat_map(|r| r.reports.iter().filter(|rep| rep.test_order == order).cloned())
            .collect();
        averaged.push((label, strategy, average_reports(&group)?));
    }
    Ok(ExperimentOutput { name: spec.name.clone(), runs, averaged })
}

/// Class-wise mean of several reports over the same classes.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidArgument("no reports to average".into()))?;
    let mean = |vals: Vec<Option<f64>>| {
        let v: Vec<f64> = vals.into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut classes = Vec::new();
    for (k, c) in first.classes.iter().enumerate() {
        if reports.iter().any(|r| r.classes.get(k).map(|x| &x.name) != Some(&c.name)) {
            return Err(Error::InvalidArgument("reports cover different classes".into()));
        }
        let col = |f: fn(&ClassReport) -> Option<f64>| mean(reports.iter().map(|r| f(&r.classes[k])).collect());
        classes.push(ClassReport {
            name: c.name.clone(),
            precision: col(|c| c.precision),
            recall: col(|c| c.recall),
            iou: col(|c| c.iou),
            dice: col(|c| c.dice),
            dice_raw: col(|c| c.dice_raw),
            counts: reports.iter().fold(Counts::default(), |a, r| Counts {
                tp: a.tp + r.classes[k].counts.tp,
                fp: a.fp + r.classes[k].counts.fp,
                fn_: a.fn_ + r.classes[k].counts.fn_,
            }),
        });
    }
    Ok(EvalReport {
        model: first.model.clone(),
        test_order: first.test_order.clone(),
        slices: reports.iter().map(|r| r.slices).sum(),
        classes,
    })
}

pub const RESULTS_HEADER: [&str; 14] = [
    "schema", "experiment", "model", "strategy", "seed", "test_order", "class", "Pr", "Re", "IoU", "Dice", "dice_smoothed",
    "dice_raw", "slices",
];

/// One row per (run or mean, class), metrics in Pr, Re, IoU, Dice order.
pub fn write_results_csv<W: Write>(output: &ExperimentOutput, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(RESULTS_HEADER).map_err(err)?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    let emit = |w: &mut csv::Writer<W>, label: &str, strategy: SplitStrategy, seed: &str, r: &EvalReport| -> Result<()> {
        let mut rows: Vec<(String, [Option<f64>; 5])> = r
            .classes
            .iter()
            .map(|c| (c.name.clone(), [c.precision, c.recall, c.iou, c.dice, c.dice_raw]))
            .collect();
        rows.push(("mean".into(), [r.mean_precision(), r.mean_recall(), r.mean_iou(), r.mean_dice(), r.mean_dice_raw()]));
        for (class, [p, re, iou, dice, raw]) in rows {
            w.write_record([
                RESULTS_SCHEMA.to_string(),
                output.name.clone(),
                label.to_string(),
                strategy.to_string(),
                seed.to_string(),
                r.test_order.clone(),
                class,
                fmt(p),
                fmt(re),
                fmt(iou),
                fmt(dice),
                fmt(dice),
                fmt(raw),
                r.slices.to_string(),
            ])
            .map_err(err)?;
        }
        Ok(())
    };
    for run in &output.runs {
        for r in &run.reports {
            emit(&mut w, &run.label, run.strategy, &run.seed.to_string(), r)?;
        }
    }
    for (label, strategy, r) in &output.averaged {
        emit(&mut w, label, *strategy, "mean", r)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub const LOSS_HEADER: [&str; 13] = [
    "schema", "experiment", "model", "strategy", "seed", "epoch", "loss", "depth1", "depth2", "depth3", "depth4", "steps",
    "max_grad_norm",
];

pub fn write_loss_csv<W: Write>(output: &ExperimentOutput, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(LOSS_HEADER).map_err(err)?;
    for run in &output.runs {
        for (e, stats) in run.epochs.iter().enumerate() {
            let depth = |d: usize| stats.depth_losses.get(d).map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([
                LOSS_SCHEMA.to_string(),
                output.name.clone(),
                run.label.clone(),
                run.strategy.to_string(),
                run.seed.to_string(),
                (e + 1).to_string(),
                format!("{:.6}", stats.loss),
                depth(0),
                depth(1),
                depth(2),
                depth(3),
                stats.steps.to_string(),
                format!("{:.6}", stats.max_grad_norm),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}
