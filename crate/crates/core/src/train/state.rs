//! Cross-slice propagation state and single-slice inference.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ForwardMode, LayerId, ModelGraph};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Test,
}

/// Feature maps of the propagated layers from the previous slice of one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationState<T> {
    stack_id: String,
    phase: Phase,
    last_index: Option<usize>,
    maps: BTreeMap<LayerId, Tensor<T>>,
    /// The last slice and the maps it was fed, for one-step gradient flow.
    fed: Option<(usize, BTreeMap<LayerId, Tensor<T>>)>,
}

impl<T: Element> PropagationState<T> {
    pub fn new(stack_id: impl Into<String>, phase: Phase) -> Self {
        PropagationState { stack_id: stack_id.into(), phase, last_index: None, maps: BTreeMap::new(), fed: None }
    }

    pub fn stack_id(&self) -> &str {
        &self.stack_id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn last_index(&self) -> Option<usize> {
        self.last_index
    }

    pub fn maps(&self) -> &BTreeMap<LayerId, Tensor<T>> {
        &self.maps
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Clears the carried maps, keeping the stack and phase.
    pub fn reset(&mut self) {
        self.maps.clear();
        self.last_index = None;
        self.fed = None;
    }

    /// Replaces the maps with arbitrary contents (for tests and tools).
    pub fn with_maps(mut self, maps: BTreeMap<LayerId, Tensor<T>>, last_index: Option<usize>) -> Self {
        self.maps = maps;
        self.last_index = last_index;
        self.fed = None;
        self
    }

    pub(crate) fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub(crate) fn advance(&mut self, maps: BTreeMap<LayerId, Tensor<T>>, index: usize) {
        let fed = std::mem::replace(&mut self.maps, maps);
        self.fed = Some((index, fed));
        self.last_index = Some(index);
    }

    pub(crate) fn fed(&self) -> Option<&(usize, BTreeMap<LayerId, Tensor<T>>)> {
        self.fed.as_ref()
    }

    /// Checks a non-empty state against the model's propagated layers and shape table.
    pub fn check(&self, model: &ModelGraph<T>, height: usize, width: usize) -> Result<()> {
        if self.maps.is_empty() || !model.arch().propagates() {
            return Ok(());
        }
        let expected = model.propagated_layers();
        if self.maps.len() != expected.len() || expected.iter().any(|id| !self.maps.contains_key(id)) {
            return Err(Error::State(format!(
                "state holds {:?}, {} propagates {:?}",
                self.maps.keys().map(ToString::to_string).collect::<Vec<_>>(),
                model.arch(),
                expected.iter().map(ToString::to_string).collect::<Vec<_>>()
            )));
        }
        for (id, t) in &self.maps {
            let want = model.state_shape(*id, height, width);
            if t.shape() != want.as_slice() {
                return Err(Error::State(format!("state for {id} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Places the maps on `tape` as constants, or `None` when empty or unused.
    pub(crate) fn to_tape(&self, model: &ModelGraph<T>, tape: &mut Tape<T>) -> Option<BTreeMap<LayerId, Var>> {
        (model.arch().propagates() && !self.maps.is_empty())
            .then(|| self.maps.iter().map(|(id, t)| (*id, tape.constant(t.clone()))).collect())
    }
}

/// Inputs seen by each merge stage during one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<T> {
    /// `(carried map, current block output)` per propagated layer.
    pub merge_inputs: BTreeMap<LayerId, (Tensor<T>, Tensor<T>)>,
}

/// Test-phase inference of one `[1, 1, h, w]` slice; returns the main-head
/// probabilities and the state for the next slice. Models without
/// propagation return the state unchanged.
pub fn forward_with_state<T: Element>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    index: usize,
    state: &PropagationState<T>,
) -> Result<(Tensor<T>, PropagationState<T>)> {
    let (p, s, _) = forward_with_state_traced(model, image, index, state)?;
    Ok((p, s))
}

pub fn forward_with_state_traced<T: Element>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    index: usize,
    state: &PropagationState<T>,
) -> Result<(Tensor<T>, PropagationState<T>, StepTrace<T>)> {
    if state.phase != Phase::Test {
        return Err(Error::State("inference needs a test-phase state".into()));
    }
    let (_, _, h, w) = image.dims4()?;
    state.check(model, h, w)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(model, &mut tape, false);
    let x = tape.constant(image.clone());
    let prev = state.to_tape(model, &mut tape);
    let out = model.forward(&mut tape, &bound, x, ForwardMode::Infer, prev.as_ref())?;
    let prob = tape.value(out.prob).clone();
    let mut next = state.clone();
    let mut trace = StepTrace { merge_inputs: BTreeMap::new() };
    if model.arch().propagates() {
        for (id, &current) in &out.pre_merge {
            let carried = prev.as_ref().map_or(current, |p| p[id]);
            trace.merge_inputs.insert(*id, (tape.value(carried).clone(), tape.value(current).clone()));
        }
        next.advance(out.state.iter().map(|(id, v)| (*id, tape.value(*v).clone())).collect(), index);
    }
    Ok((prob, next, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelConfig, NESTED_LAYERS};
    use crate::rng::RngStream;
    use rand::Rng;

    fn model(arch: Architecture) -> ModelGraph<f64> {
        ModelGraph::build(ModelConfig::new(arch, 2).with_widths([2, 3, 4, 5, 6]), &RngStream::new(1)).unwrap()
    }

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed).rng();
        Tensor::new(vec![1, 1, 16, 16], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn empty_state_self_merges_and_fills_keys() {
        let m = model(Architecture::Numsnet);
        let s = PropagationState::new("s", Phase::Test);
        let (p, next, trace) = forward_with_state_traced(&m, &image(1), 0, &s).unwrap();
        assert_eq!(p.shape(), &[1, 2, 16, 16]);
        assert_eq!(next.maps().keys().copied().collect::<Vec<_>>(), NESTED_LAYERS.iter().copied().collect::<Vec<_>>());
        for (carried, current) in trace.merge_inputs.values() {
            assert_eq!(carried, current);
        }
        assert_eq!(next.last_index(), Some(0));
    }

    #[test]
    fn same_slice_twice_merges_previous_state() {
        let m = model(Architecture::Numsall);
        let s0 = PropagationState::new("s", Phase::Test);
        let (_, s1, t1) = forward_with_state_traced(&m, &image(2), 0, &s0).unwrap();
        let (_, _, t2) = forward_with_state_traced(&m, &image(2), 1, &s1).unwrap();
        for (id, (carried, _)) in &t2.merge_inputs {
            assert_eq!(carried, &s1.maps()[id]);
        }
        // Later blocks see merged maps, so only the first block's own output repeats.
        let first = *m.config().nodes().iter().find(|id| t1.merge_inputs.contains_key(id)).unwrap();
        assert_eq!(t2.merge_inputs[&first].1, t1.merge_inputs[&first].1);
    }

    #[test]
    fn non_propagating_models_ignore_state() {
        let m = model(Architecture::Unetpp);
        let empty = PropagationState::new("s", Phase::Test);
        let junk: BTreeMap<_, _> = NESTED_LAYERS.iter().map(|&id| (id, image(9))).collect();
        let full = PropagationState::new("s", Phase::Test).with_maps(junk, Some(3));
        let (a, sa) = forward_with_state(&m, &image(3), 0, &empty).unwrap();
        let (b, sb) = forward_with_state(&m, &image(3), 0, &full).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, empty);
        assert_eq!(sb, full);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let m = model(Architecture::Numsnet);
        let bad: BTreeMap<_, _> = [(NESTED_LAYERS[0], image(1))].into_iter().collect();
        let s = PropagationState::new("s", Phase::Test).with_maps(bad, None);
        assert!(matches!(forward_with_state(&m, &image(1), 0, &s), Err(Error::State(_))));
        let train = PropagationState::new("s", Phase::Train);
        assert!(matches!(forward_with_state(&m, &image(1), 0, &train), Err(Error::State(_))));
    }

    #[test]
    fn advance_remembers_what_the_last_slice_was_fed() {
        let mut s = PropagationState::<f64>::new("s", Phase::Train);
        let a: BTreeMap<_, _> = [(NESTED_LAYERS[0], image(1))].into_iter().collect();
        let b: BTreeMap<_, _> = [(NESTED_LAYERS[0], image(2))].into_iter().collect();
        s.advance(a.clone(), 3);
        assert_eq!(s.fed(), Some(&(3, BTreeMap::new())));
        s.advance(b.clone(), 4);
        assert_eq!(s.fed(), Some(&(4, a)));
        assert_eq!(s.maps(), &b);
        s.reset();
        assert_eq!(s.fed(), None);
    }

    #[test]
    fn reset_equals_fresh() {
        let m = model(Architecture::Numsnet);
        let fresh = PropagationState::new("s", Phase::Test);
        let (_, mut s, _) = forward_with_state_traced(&m, &image(4), 0, &fresh).unwrap();
        s.reset();
        assert_eq!(forward_with_state(&m, &image(5), 0, &s).unwrap(), forward_with_state(&m, &image(5), 0, &fresh).unwrap());
    }
}
