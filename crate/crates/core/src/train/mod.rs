//! Ordered-slice training and evaluation with propagation state.

mod experiment;
mod state;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

pub use experiment::{
    average_reports, run_experiment, scaled_widths, write_loss_csv, write_results_csv, DataSpec, ExperimentOutput,
    ExperimentSpec, Preset, RunRecord, TransferSpec, LOSS_HEADER, LOSS_SCHEMA, RESULTS_HEADER, RESULTS_SCHEMA,
};
pub use state::{forward_with_state, forward_with_state_traced, Phase, PropagationState, StepTrace};

use crate::autodiff::{Tape, Var};
use crate::data::{augment_pair, threshold_prediction, AugmentationParams, PreparedStack};
use crate::error::{Error, Result};
use crate::losses::{loss_on_tape, LossKind};
use crate::metrics::{EvalReport, ReportBuilder};
use crate::model::{BoundParams, ForwardMode, LayerId, ModelGraph};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub deep_supervision: bool,
    pub seed: u64,
    /// Stop gradients at the carried maps (otherwise they flow one slice back).
    pub detach_state: bool,
    pub augment: Option<AugmentationParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::BceDice,
            epochs: 60,
            batch_size: 5,
            adam: AdamConfig::default(),
            deep_supervision: false,
            seed: 0,
            detach_state: true,
            augment: Some(AugmentationParams::default()),
        }
    }
}

impl TrainConfig {
    /// Parses the TOML form; omitted keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One stack with its ordered training indices.
#[derive(Debug, Clone, Copy)]
pub struct TrainStack<'a> {
    pub stack: &'a PreparedStack,
    pub train: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetReason {
    EpochStart,
    StackBoundary,
}

/// Instrumentation hooks for the training loop.
pub trait TrainObserver {
    fn on_reset(&mut self, _stack_id: &str, _reason: ResetReason) {}
    fn on_step(&mut self, _stack_id: &str, _batch: &[usize], _loss: f64) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochStats {
    /// Mean per-slice loss over annotated slices.
    pub loss: f64,
    /// Mean loss of each supervision head, depth 1 first.
    pub depth_losses: Vec<f64>,
    pub steps: usize,
    pub annotated_slices: usize,
    /// Largest gradient L2 norm seen by an optimizer step.
    pub max_grad_norm: f64,
}

struct BatchOut {
    loss: f64,
    depth: Vec<f64>,
    annotated: usize,
    grad_norm: f64,
}

/// The slice order used within a batch: declared order for propagating
/// models (must ascend), index order otherwise.
fn batch_order(model_propagates: bool, batch: &[usize], last: Option<usize>) -> Result<Vec<usize>> {
    let mut order = batch.to_vec();
    if model_propagates {
        let mut prev = last;
        for &i in &order {
            if prev.is_some_and(|p| i <= p) {
                return Err(Error::State(format!(
                    "propagating models need strictly ascending slices; {i} follows {}",
                    prev.unwrap()
                )));
            }
            prev = Some(i);
        }
    } else {
        order.sort_unstable();
    }
    Ok(order)
}

fn slice_inputs<T: Element>(
    stack: &PreparedStack,
    index: usize,
    augment: Option<&AugmentationParams>,
    stream: &RngStream,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let image = stack
        .images
        .get(index)
        .ok_or_else(|| Error::Slice { index, message: format!("stack `{}` has {} slices", stack.id, stack.len()) })?;
    let label = stack.labels[index].as_ref();
    let Some(params) = augment else {
        return Ok((image.cast(), label.map(Tensor::cast)));
    };
    let (h, w) = (stack.height, stack.width);
    let (img, planes) = augment_pair(image.data(), label.map(|l| l.data()), h, w, params, &stream.split_index("augment", index as u64))?;
    Ok((
        Tensor::new(vec![1, 1, h, w], img)?.cast(),
        planes.map(|p| Tensor::new(label.unwrap().shape().to_vec(), p)).transpose()?.map(|t| t.cast()),
    ))
}

/// Per-head losses and their mean for one slice.
fn slice_loss<T: Element>(tape: &mut Tape<T>, kind: LossKind, heads: &[(usize, Var)], label: &Tensor<T>) -> Result<(Var, Vec<f64>)> {
    let mut losses = Vec::with_capacity(heads.len());
    for &(_, h) in heads {
        losses.push(loss_on_tape(tape, kind, h, label)?);
    }
    let values = losses.iter().map(|&l| tape.value(l).data()[0].to_f64()).collect();
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    if losses.len() > 1 {
        total = tape.scale(total, T::from_f64(1.0 / losses.len() as f64));
    }
    Ok((total, values))
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], tape: &Tape<T>, bound: &BoundParams) -> Result<()> {
    for (i, v) in bound.iter() {
        if let Some(g) = tape.grad(v) {
            match &mut grads[i] {
                Some(acc) => acc.add_assign(g)?,
                slot => *slot = Some(g.clone()),
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_batch<T: Element>(
    model: &mut ModelGraph<T>,
    opt: &mut AdamState<T>,
    stack: &PreparedStack,
    batch: &[usize],
    state: &mut PropagationState<T>,
    config: &TrainConfig,
    stream: &RngStream,
) -> Result<BatchOut> {
    let propagates = model.arch().propagates();
    let order = batch_order(propagates, batch, state.last_index())?;
    let heads = if model.config().deep_supervision { 4 } else { 1 };
    let mut out = BatchOut { loss: 0.0, depth: vec![0.0; heads], annotated: 0, grad_norm: 0.0 };
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params().len()];

    let step_mode = |index: usize| ForwardMode::Train { dropout: Some(stream.split_index("dropout", index as u64)) };
    let record = |out: &mut BatchOut, values: &[f64], total: f64| {
        out.loss += total;
        out.annotated += 1;
        for (d, v) in out.depth.iter_mut().zip(values) {
            *d += v;
        }
    };

    for &index in &order {
        let (image, label) = slice_inputs::<T>(stack, index, config.augment.as_ref(), stream)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(model, &mut tape, true);
        let prev = match state.fed() {
            // Rebuild the previous slice from the detached maps it saw, so gradients reach it and stop there.
            Some((j, fed)) if propagates && !config.detach_state => {
                let (prev_image, _) = slice_inputs::<T>(stack, *j, config.augment.as_ref(), stream)?;
                let xj = tape.constant(prev_image);
                let fed: Option<BTreeMap<LayerId, Var>> =
                    (!fed.is_empty()).then(|| fed.iter().map(|(id, t)| (*id, tape.constant(t.clone()))).collect());
                Some(model.forward(&mut tape, &bound, xj, step_mode(*j), fed.as_ref())?.state)
            }
            _ => state.to_tape(model, &mut tape),
        };
        let x = tape.constant(image);
        let fwd = model.forward(&mut tape, &bound, x, step_mode(index), prev.as_ref())?;
        if let Some(label) = label {
            let (loss, values) = slice_loss(&mut tape, config.loss, &fwd.heads, &label)?;
            record(&mut out, &values, tape.value(loss).data()[0].to_f64());
            tape.backward(loss)?;
            accumulate(&mut grads, &tape, &bound)?;
        }
        model.update_running_stats(&fwd.bn_stats)?;
        if propagates {
            state.advance(fwd.state.iter().map(|(id, v)| (*id, tape.value(*v).clone())).collect(), index);
        }
    }

    if out.annotated > 0 {
        out.grad_norm = grads.iter().flatten().map(|g| g.data().iter().map(|v| v.to_f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        opt.step(model.params_mut().iter_mut().zip(&grads).map(|(p, g)| (&mut p.value, g.as_ref())))?;
    }
    Ok(out)
}

/// One pass over every stack's training slices, in order, in batches.
pub fn train_epoch<T: Element>(
    model: &mut ModelGraph<T>,
    opt: &mut AdamState<T>,
    data: &[TrainStack<'_>],
    config: &TrainConfig,
    epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<EpochStats> {
    config.validate()?;
    let stream = RngStream::new(config.seed).split_index("epoch", epoch as u64);
    let heads = if model.config().deep_supervision { 4 } else { 1 };
    let mut stats = EpochStats { depth_losses: vec![0.0; heads], ..EpochStats::default() };
    for (k, ts) in data.iter().enumerate() {
        if ts.stack.num_classes() != model.num_classes() {
            return Err(Error::Data(format!(
                "stack `{}` has {} classes, model predicts {}",
                ts.stack.id,
                ts.stack.num_classes(),
                model.num_classes()
            )));
        }
        observer.on_reset(&ts.stack.id, if k == 0 { ResetReason::EpochStart } else { ResetReason::StackBoundary });
        let mut state = PropagationState::new(ts.stack.id.clone(), Phase::Train);
        let stack_stream = stream.split(&ts.stack.id);
        for batch in ts.train.chunks(config.batch_size) {
            let out = train_batch(model, opt, ts.stack, batch, &mut state, config, &stack_stream)?;
            observer.on_step(&ts.stack.id, batch, out.loss);
            stats.steps += 1;
            stats.loss += out.loss;
            stats.annotated_slices += out.annotated;
            stats.max_grad_norm = stats.max_grad_norm.max(out.grad_norm);
            for (d, v) in stats.depth_losses.iter_mut().zip(&out.depth) {
                *d += v;
            }
        }
    }
    if stats.annotated_slices > 0 {
        let n = stats.annotated_slices as f64;
        stats.loss /= n;
        stats.depth_losses.iter_mut().for_each(|d| *d /= n);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub wall_time_s: f64,
}

/// Runs `config.epochs` epochs from a fresh optimizer.
pub fn train<T: Element>(
    model: &mut ModelGraph<T>,
    data: &[TrainStack<'_>],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut opt = AdamState::new(config.adam);
    train_with(model, &mut opt, data, config, 0, observer)
}

/// Runs epochs `first_epoch..config.epochs` with an existing optimizer state.
pub fn train_with<T: Element>(
    model: &mut ModelGraph<T>,
    opt: &mut AdamState<T>,
    data: &[TrainStack<'_>],
    config: &TrainConfig,
    first_epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if config.deep_supervision != model.config().deep_supervision {
        return Err(Error::InvalidArgument(format!(
            "training config asks for deep supervision = {}, model was built with {}",
            config.deep_supervision,
            model.config().deep_supervision
        )));
    }
    let start = Instant::now();
    let mut epochs = Vec::with_capacity(config.epochs);
    for e in first_epoch..config.epochs {
        epochs.push(train_epoch(model, opt, data, config, e, observer)?);
    }
    Ok(TrainOutcome { epochs, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Per-depth loss curves of a deep-supervision model, depth 1 first.
pub fn deep_supervision_trace<T: Element>(
    model: &mut ModelGraph<T>,
    data: &[TrainStack<'_>],
    config: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    if !model.config().deep_supervision {
        return Err(Error::InvalidArgument("deep-supervision trace needs a model built with supervision heads".into()));
    }
    let outcome = train(model, data, config, &mut ())?;
    Ok((0..4).map(|d| outcome.epochs.iter().map(|e| e.depth_losses[d]).collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TestOrder {
    Ordered,
    Shuffled { seed: u64 },
}

impl TestOrder {
    pub fn label(&self) -> &'static str {
        match self {
            TestOrder::Ordered => "ordered",
            TestOrder::Shuffled { .. } => "shuffled",
        }
    }

    pub fn apply(&self, indices: &[usize]) -> Vec<usize> {
        let mut order = indices.to_vec();
        match self {
            TestOrder::Ordered => order.sort_unstable(),
            TestOrder::Shuffled { seed } => order.shuffle(&mut RngStream::new(*seed).split("test-order").rng()),
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestState<T> {
    /// Start every test sequence from an empty state.
    Fresh,
    /// Start from a given state, e.g. the one left by training.
    Continue(PropagationState<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions<T> {
    pub order: TestOrder,
    pub state: TestState<T>,
    /// Replace predictions by the ground truth (harness check).
    pub oracle: bool,
    pub model_label: String,
}

impl<T> EvalOptions<T> {
    pub fn ordered(model_label: impl Into<String>) -> Self {
        EvalOptions { order: TestOrder::Ordered, state: TestState::Fresh, oracle: false, model_label: model_label.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction<T> {
    pub index: usize,
    /// Main-head probabilities `[1, d, h, w]`.
    pub prob: Tensor<T>,
    /// Thresholded planes, `d · h · w` bytes.
    pub planes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T> {
    pub report: EvalReport,
    /// In processing order.
    pub predictions: Vec<SlicePrediction<T>>,
    pub final_state: PropagationState<T>,
}

/// Runs the test slices through the model in the requested order and scores
/// annotated slices.
pub fn evaluate<T: Element>(
    model: &ModelGraph<T>,
    stack: &PreparedStack,
    indices: &[usize],
    options: &EvalOptions<T>,
) -> Result<Evaluation<T>> {
    if stack.num_classes() != model.num_classes() {
        return Err(Error::Data(format!(
            "stack `{}` has {} classes, model predicts {}",
            stack.id,
            stack.num_classes(),
            model.num_classes()
        )));
    }
    let mut state = match &options.state {
        TestState::Fresh => PropagationState::new(stack.id.clone(), Phase::Test),
        TestState::Continue(s) => {
            let mut s = s.clone();
            s.set_phase(Phase::Test);
            s
        }
    };
    let mut builder = ReportBuilder::new(&stack.class_names);
    let mut predictions = Vec::with_capacity(indices.len());
    let tau = T::from_f64(THRESHOLD);
    for index in options.order.apply(indices) {
        let image = stack
            .images
            .get(index)
            .ok_or_else(|| Error::Slice { index, message: "test index outside the stack".into() })?;
        let (prob, next) = forward_with_state(model, &image.cast(), index, &state)?;
        state = next;
        let truth = stack.labels[index].as_ref().map(|l| threshold_prediction(l.data(), 0.5f32));
        let planes = match (&truth, options.oracle) {
            (Some(t), true) => t.clone(),
            _ => threshold_prediction(prob.data(), tau),
        };
        if let Some(t) = &truth {
            builder.add_slice(&planes, t)?;
        }
        predictions.push(SlicePrediction { index, prob, planes });
    }
    Ok(Evaluation { report: builder.finish(&options.model_label, options.order.label()), predictions, final_state: state })
}

#[cfg(test)]
mod tests;
