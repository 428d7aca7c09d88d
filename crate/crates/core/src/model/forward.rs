//! Forward pass of a [`ModelGraph`] onto a [`Tape`].

use std::collections::BTreeMap;

use super::{supervision_source, LayerId, ModelGraph};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::Padding;
use crate::ops::norm::{BatchNormMode, BatchStats};
use crate::rng::RngStream;
use crate::tensor::Element;

/// Tape handles for a model's parameters, indexed like [`ModelGraph::params`].
/// Non-trainable entries (running statistics) are read from the model directly.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    /// Places every trainable parameter on `tape` as a leaf.
    pub fn bind<T: Element>(model: &ModelGraph<T>, tape: &mut Tape<T>, requires_grad: bool) -> Self {
        let vars = model
            .params()
            .iter()
            .map(|p| p.trainable.then(|| tape.leaf(p.value.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Uses caller-owned vars, one per trainable parameter in registry order.
    pub fn from_trainable<T: Element>(model: &ModelGraph<T>, vars: &[Var]) -> Result<Self> {
        let trainable = model.params().iter().filter(|p| p.trainable).count();
        if vars.len() != trainable {
            return Err(Error::InvalidArgument(format!("expected {trainable} parameter vars, got {}", vars.len())));
        }
        let mut it = vars.iter();
        let vars = model.params().iter().map(|p| if p.trainable { it.next().copied() } else { None }).collect();
        Ok(BoundParams { vars })
    }

    pub fn get(&self, index: usize) -> Option<Var> {
        self.vars.get(index).copied().flatten()
    }

    /// `(registry index, var)` for every bound parameter.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    /// Batch statistics for batch-norm; dropout drawn from the stream when given.
    Train { dropout: Option<RngStream> },
    /// Running statistics; dropout disabled.
    Infer,
}

impl ForwardMode {
    pub fn is_train(&self) -> bool {
        matches!(self, ForwardMode::Train { .. })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Main-head probabilities `[n, classes, h, w]`.
    pub prob: Var,
    /// `(depth, probabilities at input resolution)` for every built head, depth 1 first.
    pub heads: Vec<(usize, Var)>,
    /// Final output of every node (after merging, where propagated).
    pub nodes: BTreeMap<LayerId, Var>,
    /// Block outputs of propagated layers before merging.
    pub pre_merge: BTreeMap<LayerId, Var>,
    /// Outputs of the propagated layers, to be carried to the next slice.
    pub state: BTreeMap<LayerId, Var>,
    /// Train-mode batch statistics keyed by batch-norm prefix.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

struct Ctx<'a, T> {
    model: &'a ModelGraph<T>,
    bound: &'a BoundParams,
    mode: ForwardMode,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Element> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        let idx = self
            .model
            .param_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no parameter `{name}`")))?;
        self.bound
            .get(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` is not bound")))
    }

    fn conv(&self, tape: &mut Tape<T>, prefix: &str, x: Var, padding: Padding) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        tape.conv2d(x, w, Some(b), padding, 1)
    }

    fn bn(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let eps = self.model.config().bn_eps;
        let (y, stats) = match self.mode {
            ForwardMode::Train { .. } => tape.batch_norm(x, gamma, beta, BatchNormMode::Train, eps)?,
            ForwardMode::Infer => {
                let model = self.model;
                let mean = model.param(&format!("{prefix}.running_mean")).map(|p| p.value.data());
                let var = model.param(&format!("{prefix}.running_var")).map(|p| p.value.data());
                let (Some(running_mean), Some(running_var)) = (mean, var) else {
                    return Err(Error::InvalidArgument(format!("missing running statistics for `{prefix}`")));
                };
                tape.batch_norm(x, gamma, beta, BatchNormMode::Infer { running_mean, running_var }, eps)?
            }
        };
        if let Some(stats) = stats {
            self.bn_stats.push((prefix.to_string(), stats));
        }
        Ok(y)
    }

    /// conv → [bn] → relu, twice.
    fn block(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var, bn: bool) -> Result<Var> {
        let mut h = x;
        for k in 1..=2 {
            h = self.conv(tape, &format!("{prefix}.conv{k}"), h, Padding::Same)?;
            if bn {
                h = self.bn(tape, &format!("{prefix}.bn{k}"), h)?;
            }
            h = tape.relu(h);
        }
        Ok(h)
    }
}

impl<T: Element> ModelGraph<T> {
    /// Builds the network on `tape` for input `[n, 1, h, w]` with `h` and `w`
    /// divisible by 16. `prev` carries the previous slice's propagated maps;
    /// a propagating model without `prev` merges each layer with itself.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        input: Var,
        mode: ForwardMode,
        prev: Option<&BTreeMap<LayerId, Var>>,
    ) -> Result<ForwardOutput<T>> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!("model input must be [n, 1, h, w], got {shape:?}")));
        }
        let scale = 1 << (super::DEPTH - 1);
        if shape[2] % scale != 0 || shape[3] % scale != 0 {
            return Err(Error::Shape(format!(
                "input height and width must be divisible by {scale}, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let cfg = self.config();
        if prev.is_some() && !cfg.arch.propagates() {
            return Err(Error::State(format!("{} does not take a propagated state", cfg.arch)));
        }
        if let Some(prev) = prev {
            for &id in cfg.arch.propagated_layers() {
                let p = prev.get(&id).ok_or_else(|| Error::State(format!("state lacks {id}")))?;
                let mut expect = self.state_shape(id, shape[2], shape[3]);
                expect[0] = shape[0];
                if tape.shape(*p) != expect.as_slice() {
                    return Err(Error::State(format!(
                        "state for {id} has shape {:?}, expected {expect:?}",
                        tape.shape(*p)
                    )));
                }
            }
        }

        let mut ctx = Ctx { model: self, bound, mode, bn_stats: Vec::new() };
        let mut nodes: BTreeMap<LayerId, Var> = BTreeMap::new();
        let mut pre_merge = BTreeMap::new();
        let mut state = BTreeMap::new();
        for id in cfg.nodes() {
            let key = id.key();
            let block_in = if id.is_encoder() {
                if id.row() == 1 {
                    input
                } else {
                    tape.max_pool2d(nodes[&LayerId::at(id.row - 1, 1)])?
                }
            } else {
                let below = nodes[&LayerId::at(id.row + 1, id.col - 1)];
                let w = ctx.var(&format!("{key}.up.weight"))?;
                let b = ctx.var(&format!("{key}.up.bias"))?;
                let up = tape.conv_transpose2d(below, w, Some(b), 2)?;
                let mut parts: Vec<Var> = cfg.skips(id).iter().map(|s| nodes[s]).collect();
                parts.push(up);
                tape.concat_channels(&parts)?
            };
            let mut out = ctx.block(tape, &key, block_in, cfg.bn_at(id))?;
            if let Some(rate) = cfg.dropout_at(id) {
                if let ForwardMode::Train { dropout: Some(stream) } = mode {
                    out = tape.dropout(out, rate, Some(&stream.split(&key)))?;
                }
            }
            if cfg.propagated(id) {
                pre_merge.insert(id, out);
                let carried = prev.map(|p| p[&id]).unwrap_or(out);
                let cat = tape.concat_channels(&[carried, out])?;
                out = ctx.block(tape, &format!("{key}.merge"), cat, false)?;
                state.insert(id, out);
            }
            nodes.insert(id, out);
        }

        let mut heads = Vec::new();
        let main = ctx.conv(tape, "head", nodes[&supervision_source(1)], Padding::Valid)?;
        let prob = tape.sigmoid(main);
        heads.push((1, prob));
        for depth in cfg.supervision_depths() {
            let logits = ctx.conv(tape, &format!("head_d{depth}"), nodes[&supervision_source(depth)], Padding::Valid)?;
            let p = tape.sigmoid(logits);
            heads.push((depth, tape.upsample_nearest(p, 1 << (depth - 1))?));
        }
        Ok(ForwardOutput { prob, heads, nodes, pre_merge, state, bn_stats: ctx.bn_stats })
    }
}
