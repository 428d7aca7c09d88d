//! The five Unet-family architectures as named layer graphs.
//!
//! Nodes follow the `X(i, j)` grid: row `i` is the depth (1 = full
//! resolution), column `j` counts merges at that depth. `X(i, 1)` are the
//! encoder blocks, `X(i, 6 - i)` the decoder path, and the remaining six
//! `X(1,2) X(1,3) X(1,4) X(2,2) X(2,3) X(3,2)` the nested layers.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{BoundParams, ForwardMode, ForwardOutput};

use crate::error::{Error, Result};
use crate::ops::norm::BatchStats;
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

pub const DEPTH: usize = 5;
pub const UNET_WIDTHS: [usize; DEPTH] = [32, 64, 128, 256, 512];
pub const WUNET_WIDTHS: [usize; DEPTH] = [35, 70, 140, 280, 560];

/// A node of the `X(i, j)` grid, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    row: u8,
    col: u8,
}

impl LayerId {
    pub fn new(row: usize, col: usize) -> Result<Self> {
        if (1..=DEPTH).contains(&row) && col >= 1 && row + col <= DEPTH + 1 {
            Ok(LayerId { row: row as u8, col: col as u8 })
        } else {
            Err(Error::InvalidArgument(format!("X({row},{col}) is not a node of the depth-{DEPTH} grid")))
        }
    }

    pub(crate) const fn at(row: u8, col: u8) -> Self {
        LayerId { row, col }
    }

    pub fn row(self) -> usize {
        self.row as usize
    }

    pub fn col(self) -> usize {
        self.col as usize
    }

    pub fn is_encoder(self) -> bool {
        self.col == 1
    }

    /// On the classic Unet decoder path `X(4,2) X(3,3) X(2,4) X(1,5)`.
    pub fn is_decoder(self) -> bool {
        self.col > 1 && (self.row + self.col) as usize == DEPTH + 1
    }

    pub fn is_nested(self) -> bool {
        self.col > 1 && !self.is_decoder()
    }

    /// Stable parameter-name prefix, e.g. `x12`.
    pub fn key(self) -> String {
        format!("x{}{}", self.row, self.col)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        let inner = t
            .strip_prefix("X(")
            .or_else(|| t.strip_prefix("x("))
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidArgument(format!("cannot parse layer id `{s}`")))?;
        let (r, c) = inner
            .split_once(',')
            .ok_or_else(|| Error::InvalidArgument(format!("cannot parse layer id `{s}`")))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("cannot parse layer id `{s}`")));
        LayerId::new(parse(r)?, parse(c)?)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "X({},{})", self.row, self.col)
    }
}

/// The six nested layers.
pub const NESTED_LAYERS: [LayerId; 6] = [
    LayerId::at(1, 2),
    LayerId::at(1, 3),
    LayerId::at(1, 4),
    LayerId::at(2, 2),
    LayerId::at(2, 3),
    LayerId::at(3, 2),
];

/// All ten up-sampling layers.
pub const UPSAMPLING_LAYERS: [LayerId; 10] = [
    LayerId::at(1, 2),
    LayerId::at(1, 3),
    LayerId::at(1, 4),
    LayerId::at(1, 5),
    LayerId::at(2, 2),
    LayerId::at(2, 3),
    LayerId::at(2, 4),
    LayerId::at(3, 2),
    LayerId::at(3, 3),
    LayerId::at(4, 2),
];

/// Decoder node feeding the supervision head at `depth` (1..=4).
pub fn supervision_source(depth: usize) -> LayerId {
    LayerId::at(depth as u8, (DEPTH + 1 - depth) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Unet,
    Wunet,
    Unetpp,
    Numsnet,
    Numsall,
}

impl Architecture {
    pub const ALL: [Architecture; 5] =
        [Architecture::Unet, Architecture::Wunet, Architecture::Unetpp, Architecture::Numsnet, Architecture::Numsall];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Unet => "unet",
            Architecture::Wunet => "wunet",
            Architecture::Unetpp => "unetpp",
            Architecture::Numsnet => "numsnet",
            Architecture::Numsall => "numsall",
        }
    }

    pub fn code(self) -> u8 {
        Architecture::ALL.iter().position(|&a| a == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Architecture::ALL.get(code as usize).copied()
    }

    pub fn default_widths(self) -> [usize; DEPTH] {
        match self {
            Architecture::Unet | Architecture::Unetpp => UNET_WIDTHS,
            Architecture::Wunet | Architecture::Numsnet | Architecture::Numsall => WUNET_WIDTHS,
        }
    }

    /// Dense nested skips (Unet++ topology).
    pub fn is_nested(self) -> bool {
        matches!(self, Architecture::Unetpp | Architecture::Numsnet | Architecture::Numsall)
    }

    pub fn propagates(self) -> bool {
        matches!(self, Architecture::Numsnet | Architecture::Numsall)
    }

    pub fn propagated_layers(self) -> &'static [LayerId] {
        match self {
            Architecture::Numsnet => &NESTED_LAYERS,
            Architecture::Numsall => &UPSAMPLING_LAYERS,
            _ => &[],
        }
    }

    /// Encoder depths carrying batch-norm (both convs of each block).
    pub fn batch_norm_depths(self) -> usize {
        if self.is_nested() {
            4
        } else {
            5
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Unet => "Unet",
            Architecture::Wunet => "wUnet",
            Architecture::Unetpp => "Unet++",
            Architecture::Numsnet => "NUMSnet",
            Architecture::Numsall => "NUMS-all",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', '+'], "").as_str() {
            "unet" => Ok(Architecture::Unet),
            "wunet" => Ok(Architecture::Wunet),
            "unetpp" | "unetplusplus" | "nestedunet" => Ok(Architecture::Unetpp),
            "numsnet" => Ok(Architecture::Numsnet),
            "numsall" => Ok(Architecture::Numsall),
            _ => Err(Error::InvalidArgument(format!(
                "unknown architecture `{s}` (expected unet, wunet, unetpp, numsnet or numsall)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub widths: [usize; DEPTH],
    pub num_classes: usize,
    pub batch_norm: bool,
    pub deep_supervision: bool,
    /// Applied after `X(4,1)` and `X(5,1)` for the propagating variants.
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn new(arch: Architecture, num_classes: usize) -> Self {
        ModelConfig {
            arch,
            widths: arch.default_widths(),
            num_classes,
            batch_norm: true,
            deep_supervision: false,
            dropout: if arch.propagates() { 0.5 } else { 0.0 },
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }

    pub fn with_widths(mut self, widths: [usize; DEPTH]) -> Self {
        self.widths = widths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("widths must be positive, got {:?}", self.widths)));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be at least 1".into()));
        }
        if self.deep_supervision && !self.arch.is_nested() {
            return Err(Error::InvalidArgument(format!("deep supervision needs a nested architecture, not {}", self.arch)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::InvalidArgument("batch-norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, row: usize) -> usize {
        self.widths[row - 1]
    }

    /// Nodes in evaluation order (anti-diagonals of the grid).
    pub fn nodes(&self) -> Vec<LayerId> {
        let mut out = Vec::new();
        for diag in 2..=DEPTH + 1 {
            for row in (1..diag).rev() {
                let id = LayerId::at(row as u8, (diag - row) as u8);
                if id.row() > DEPTH {
                    continue;
                }
                if id.is_encoder() || id.is_decoder() || self.arch.is_nested() {
                    out.push(id);
                }
            }
        }
        out
    }

    /// Same-row nodes concatenated (before the up-sampled input) into `id`.
    pub fn skips(&self, id: LayerId) -> Vec<LayerId> {
        if id.is_encoder() {
            return vec![];
        }
        if self.arch.is_nested() {
            (1..id.col()).map(|c| LayerId::at(id.row, c as u8)).collect()
        } else {
            vec![LayerId::at(id.row, 1)]
        }
    }

    pub fn bn_at(&self, id: LayerId) -> bool {
        self.batch_norm && id.is_encoder() && id.row() <= self.arch.batch_norm_depths()
    }

    pub fn dropout_at(&self, id: LayerId) -> Option<f64> {
        (self.dropout > 0.0 && id.is_encoder() && id.row() >= 4).then_some(self.dropout)
    }

    pub fn propagated(&self, id: LayerId) -> bool {
        self.arch.propagated_layers().contains(&id)
    }

    /// Extra supervision depths (2..=4) whose heads are built.
    pub fn supervision_depths(&self) -> Vec<usize> {
        if self.deep_supervision {
            (2..=4).collect()
        } else {
            vec![]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerRole {
    Encoder,
    Nested,
    Decoder,
    Head,
    PropagationMerge,
}

/// One entry of a model's ordered layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub id: LayerId,
    pub role: LayerRole,
    /// Registry name prefix of the layer's parameters.
    pub prefix: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitKind {
    HeUniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub init: InitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// A built model: configuration, ordered layer list and parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    config: ModelConfig,
    layers: Vec<LayerInfo>,
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

struct Builder<T> {
    layers: Vec<LayerInfo>,
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Element> Builder<T> {
    fn add(&mut self, name: String, shape: Vec<usize>, trainable: bool, init: InitKind) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let value = match init {
            InitKind::Ones => Tensor::full(shape, T::ONE)?,
            _ => Tensor::zeros(shape)?,
        };
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable, init });
        Ok(())
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.add(format!("{prefix}.weight"), vec![cout, cin, k, k], true, InitKind::HeUniform)?;
        self.add(format!("{prefix}.bias"), vec![cout], true, InitKind::Zeros)
    }

    fn conv_transpose(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        self.add(format!("{prefix}.weight"), vec![cin, cout, 2, 2], true, InitKind::HeUniform)?;
        self.add(format!("{prefix}.bias"), vec![cout], true, InitKind::Zeros)
    }

    fn batch_norm(&mut self, prefix: &str, ch: usize) -> Result<()> {
        self.add(format!("{prefix}.gamma"), vec![ch], true, InitKind::Ones)?;
        self.add(format!("{prefix}.beta"), vec![ch], true, InitKind::Zeros)?;
        self.add(format!("{prefix}.running_mean"), vec![ch], false, InitKind::Zeros)?;
        self.add(format!("{prefix}.running_var"), vec![ch], false, InitKind::Ones)
    }

    fn layer(&mut self, id: LayerId, role: LayerRole, prefix: String) {
        self.layers.push(LayerInfo { id, role, prefix });
    }
}

/// He-uniform bound `sqrt(6 / fan_in)` for a weight of the given shape.
fn he_bound(name: &str, shape: &[usize]) -> f64 {
    // Transposed-conv weights are [cin, cout, k, k]; their fan-in is cin·k·k.
    let fan_in = if name.contains(".up.") {
        shape[0] * shape[2] * shape[3]
    } else {
        shape[1..].iter().product()
    };
    (6.0 / fan_in as f64).sqrt()
}

impl<T: Element> ModelGraph<T> {
    /// Builds the parameter registry for `config` and initialises it from `stream`.
    pub fn build(config: ModelConfig, stream: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { layers: Vec::new(), params: Vec::new(), index: BTreeMap::new() };
        for id in config.nodes() {
            let key = id.key();
            let w = config.width(id.row());
            let cin = if id.is_encoder() {
                if id.row() == 1 {
                    1
                } else {
                    config.width(id.row() - 1)
                }
            } else {
                b.conv_transpose(&format!("{key}.up"), config.width(id.row() + 1), w)?;
                (config.skips(id).len() + 1) * w
            };
            b.conv(&format!("{key}.conv1"), cin, w, 3)?;
            if config.bn_at(id) {
                b.batch_norm(&format!("{key}.bn1"), w)?;
            }
            b.conv(&format!("{key}.conv2"), w, w, 3)?;
            if config.bn_at(id) {
                b.batch_norm(&format!("{key}.bn2"), w)?;
            }
            let role = if id.is_encoder() {
                LayerRole::Encoder
            } else if id.is_decoder() {
                LayerRole::Decoder
            } else {
                LayerRole::Nested
            };
            b.layer(id, role, key.clone());
            if config.propagated(id) {
                let prefix = format!("{key}.merge");
                b.conv(&format!("{prefix}.conv1"), 2 * w, w, 3)?;
                b.conv(&format!("{prefix}.conv2"), w, w, 3)?;
                b.layer(id, LayerRole::PropagationMerge, prefix);
            }
        }
        b.conv("head", config.width(1), config.num_classes, 1)?;
        b.layer(supervision_source(1), LayerRole::Head, "head".into());
        for depth in config.supervision_depths() {
            let prefix = format!("head_d{depth}");
            b.conv(&prefix, config.width(depth), config.num_classes, 1)?;
            b.layer(supervision_source(depth), LayerRole::Head, prefix);
        }
        let mut model = ModelGraph { config, layers: b.layers, params: b.params, index: b.index };
        model.initialize(stream, |_| true);
        Ok(model)
    }

    /// Re-draws every parameter selected by `filter`.
    pub(crate) fn initialize(&mut self, stream: &RngStream, filter: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut().filter(|p| filter(&p.name)) {
            match p.init {
                InitKind::Zeros => p.value.data_mut().fill(T::ZERO),
                InitKind::Ones => p.value.data_mut().fill(T::ONE),
                InitKind::HeUniform => {
                    let bound = he_bound(&p.name, p.value.shape());
                    let mut rng = stream.split(&p.name).rng();
                    for v in p.value.data_mut() {
                        *v = T::from_f64(rng.gen_range(-bound..bound));
                    }
                }
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Architecture {
        self.config.arch
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn propagated_layers(&self) -> &'static [LayerId] {
        self.config.arch.propagated_layers()
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(&self.params)
    }

    /// Parameters that belong to classification heads.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.") || name.starts_with("head_d")
    }

    /// Shape of the state map stored for `id` at the given input extent.
    pub fn state_shape(&self, id: LayerId, height: usize, width: usize) -> Vec<usize> {
        let scale = 1 << (id.row() - 1);
        vec![1, self.config.width(id.row()), height / scale, width / scale]
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::from_f64(self.config.bn_momentum);
        let c = T::ONE - m;
        for (prefix, stats) in updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}.{suffix}");
                let idx = self
                    .param_index(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
                for (r, &b) in self.params[idx].value.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + c * b;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        ModelGraph {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable, init: p.init })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Published parameter counts at three classes without deep supervision.
pub const REFERENCE_COUNTS: [(Architecture, ParamCount); 5] = [
    (Architecture::Unet, ParamCount { total: 7_767_523, trainable: 7_763_555, non_trainable: 3_968 }),
    (Architecture::Wunet, ParamCount { total: 9_290_998, trainable: 9_286_658, non_trainable: 4_340 }),
    (Architecture::Unetpp, ParamCount { total: 9_045_507, trainable: 9_043_587, non_trainable: 1_920 }),
    (Architecture::Numsnet, ParamCount { total: 11_713_943, trainable: 11_711_843, non_trainable: 2_100 }),
    (Architecture::Numsall, ParamCount { total: 14_526_368, trainable: 14_524_268, non_trainable: 2_100 }),
];
pub const REFERENCE_CLASSES: usize = 3;

pub fn reference_count(arch: Architecture) -> ParamCount {
    REFERENCE_COUNTS.iter().find(|(a, _)| *a == arch).map(|(_, c)| *c).expect("every architecture has a reference row")
}

pub fn count_params<T: Element>(params: &[Param<T>]) -> ParamCount {
    params.iter().fold(ParamCount::default(), |mut acc, p| {
        let n = p.value.numel();
        acc.total += n;
        if p.trainable {
            acc.trainable += n;
        } else {
            acc.non_trainable += n;
        }
        acc
    })
}

pub fn build_unet<T: Element>(num_classes: usize, stream: &RngStream) -> Result<ModelGraph<T>> {
    ModelGraph::build(ModelConfig::new(Architecture::Unet, num_classes), stream)
}

pub fn build_wunet<T: Element>(num_classes: usize, stream: &RngStream) -> Result<ModelGraph<T>> {
    ModelGraph::build(ModelConfig::new(Architecture::Wunet, num_classes), stream)
}

pub fn build_unetpp<T: Element>(num_classes: usize, deep_supervision: bool, stream: &RngStream) -> Result<ModelGraph<T>> {
    let mut cfg = ModelConfig::new(Architecture::Unetpp, num_classes);
    cfg.deep_supervision = deep_supervision;
    ModelGraph::build(cfg, stream)
}

pub fn build_numsnet<T: Element>(num_classes: usize, stream: &RngStream) -> Result<ModelGraph<T>> {
    ModelGraph::build(ModelConfig::new(Architecture::Numsnet, num_classes), stream)
}

pub fn build_numsall<T: Element>(num_classes: usize, stream: &RngStream) -> Result<ModelGraph<T>> {
    ModelGraph::build(ModelConfig::new(Architecture::Numsall, num_classes), stream)
}

/// Copies every parameter of `source` into a model configured like `target`
/// except the classification head(s), which are freshly initialised.
pub fn transfer_adapt<T: Element>(source: &ModelGraph<T>, target: &ModelConfig, stream: &RngStream) -> Result<ModelGraph<T>> {
    let mut expected = source.config.clone();
    expected.num_classes = target.num_classes;
    if &expected != target {
        return Err(Error::ArchitectureMismatch(format!(
            "target {:?} differs from source {:?} beyond the class count",
            target, source.config
        )));
    }
    let mut adapted = ModelGraph::build(target.clone(), stream)?;
    for p in adapted.params.iter_mut() {
        if ModelGraph::<T>::is_head_param(&p.name) {
            continue;
        }
        let src = source
            .param(&p.name)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("source lacks parameter `{}`", p.name)))?;
        p.value = src.value.clone();
    }
    Ok(adapted)
}

/// [`transfer_adapt`] keeping the source configuration.
pub fn adapt_num_classes<T: Element>(source: &ModelGraph<T>, num_classes: usize, stream: &RngStream) -> Result<ModelGraph<T>> {
    let mut cfg = source.config.clone();
    cfg.num_classes = num_classes;
    transfer_adapt(source, &cfg, stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(arch: Architecture) -> ParamCount {
        ModelGraph::<f32>::build(ModelConfig::new(arch, 3), &RngStream::new(0)).unwrap().count_params()
    }

    #[test]
    fn layer_id_validity() {
        assert!(LayerId::new(1, 5).is_ok());
        assert!(LayerId::new(5, 1).is_ok());
        assert!(LayerId::new(5, 2).is_err());
        assert!(LayerId::new(0, 1).is_err());
        assert_eq!(LayerId::parse("X(3,2)").unwrap(), LayerId::at(3, 2));
        assert_eq!(LayerId::at(2, 4).to_string(), "X(2,4)");
        let nested: Vec<_> = NESTED_LAYERS.iter().filter(|l| l.is_nested()).collect();
        assert_eq!(nested.len(), 6);
        assert_eq!(UPSAMPLING_LAYERS.iter().filter(|l| l.is_decoder()).count(), 4);
    }

    #[test]
    fn node_orders() {
        let unet = ModelConfig::new(Architecture::Unet, 1).nodes();
        assert_eq!(unet.len(), 9);
        let pp = ModelConfig::new(Architecture::Unetpp, 1).nodes();
        assert_eq!(pp.len(), 15);
        // Every node appears after its up-sampling source and skips.
        let cfg = ModelConfig::new(Architecture::Unetpp, 1);
        for (pos, id) in pp.iter().enumerate() {
            if id.is_encoder() {
                continue;
            }
            let up = LayerId::at(id.row + 1, id.col - 1);
            assert!(pp[..pos].contains(&up));
            for s in cfg.skips(*id) {
                assert!(pp[..pos].contains(&s));
            }
        }
    }

    #[test]
    fn empty_registry_counts_zero() {
        assert_eq!(count_params::<f32>(&[]), ParamCount::default());
    }

    #[test]
    fn single_conv_hand_count() {
        let mut b = Builder::<f32> { layers: vec![], params: vec![], index: BTreeMap::new() };
        b.conv("c", 1, 32, 3).unwrap();
        assert_eq!(count_params(&b.params), ParamCount { total: 320, trainable: 320, non_trainable: 0 });
    }

    #[test]
    fn batch_norm_registers_two_and_two() {
        let mut b = Builder::<f32> { layers: vec![], params: vec![], index: BTreeMap::new() };
        b.batch_norm("bn", 32).unwrap();
        assert_eq!(count_params(&b.params), ParamCount { total: 128, trainable: 64, non_trainable: 64 });
        assert!(b.batch_norm("bn", 32).is_err());
    }

    #[test]
    fn parameter_table_rows() {
        let rows = [
            (Architecture::Unet, 7_767_523, 7_763_555, 3_968),
            (Architecture::Wunet, 9_290_998, 9_286_658, 4_340),
            (Architecture::Unetpp, 9_045_507, 9_043_587, 1_920),
            (Architecture::Numsnet, 11_713_943, 11_711_843, 2_100),
            (Architecture::Numsall, 14_526_368, 14_524_268, 2_100),
        ];
        for (arch, total, trainable, non_trainable) in rows {
            assert_eq!(count(arch), ParamCount { total, trainable, non_trainable }, "{arch}");
        }
    }

    #[test]
    fn toy_unet_without_bn_matches_hand_enumeration() {
        let mut cfg = ModelConfig::new(Architecture::Unet, 1).with_widths([1; 5]);
        cfg.batch_norm = false;
        let m = ModelGraph::<f32>::build(cfg, &RngStream::new(0)).unwrap();
        // Encoder: 5 blocks × 2 convs × (9 + 1).
        // Decoder: 4 × [up (4 + 1) + conv(2→1) (18 + 1) + conv(1→1) (9 + 1)].
        // Head: 1 + 1.
        let expect = 5 * 2 * 10 + 4 * (5 + 19 + 10) + 2;
        assert_eq!(m.count_params().total, expect);
        assert_eq!(m.count_params().non_trainable, 0);
    }

    #[test]
    fn deep_supervision_adds_three_heads() {
        let base = count(Architecture::Unetpp).trainable;
        let m = build_unetpp::<f32>(3, true, &RngStream::new(0)).unwrap();
        let delta = (64 * 3 + 3) + (128 * 3 + 3) + (256 * 3 + 3);
        assert_eq!(m.count_params().trainable, base + delta);
        let mut cfg = ModelConfig::new(Architecture::Unet, 3);
        cfg.deep_supervision = true;
        assert!(ModelGraph::<f32>::build(cfg, &RngStream::new(0)).is_err());
    }

    #[test]
    fn propagated_sets() {
        assert_eq!(Architecture::Numsnet.propagated_layers(), &NESTED_LAYERS);
        assert_eq!(Architecture::Numsall.propagated_layers().len(), 10);
        assert!(Architecture::Unetpp.propagated_layers().is_empty());
        let m = build_numsnet::<f32>(3, &RngStream::new(0)).unwrap();
        assert_eq!(m.layers().iter().filter(|l| l.role == LayerRole::PropagationMerge).count(), 6);
    }

    #[test]
    fn parameter_names_unique_and_build_deterministic() {
        let a = build_numsall::<f32>(2, &RngStream::new(5)).unwrap();
        let b = build_numsall::<f32>(2, &RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        let names: std::collections::BTreeSet<_> = a.params().iter().map(|p| &p.name).collect();
        assert_eq!(names.len(), a.params().len());
    }

    #[test]
    fn transfer_replaces_only_head() {
        let src = build_numsnet::<f32>(3, &RngStream::new(1)).unwrap();
        let dst = adapt_num_classes(&src, 7, &RngStream::new(2)).unwrap();
        for p in dst.params() {
            if ModelGraph::<f32>::is_head_param(&p.name) {
                continue;
            }
            assert_eq!(p.value, src.param(&p.name).unwrap().value, "{}", p.name);
        }
        assert_eq!(dst.param("head.weight").unwrap().value.shape(), &[7, 35, 1, 1]);
        assert_eq!(src.param("head.weight").unwrap().value.shape(), &[3, 35, 1, 1]);
        let delta = dst.count_params().total - src.count_params().total;
        assert_eq!(delta, (7 - 3) * (35 + 1));

        let mut other = dst.config().clone();
        other.widths = UNET_WIDTHS;
        assert!(matches!(transfer_adapt(&src, &other, &RngStream::new(2)), Err(Error::ArchitectureMismatch(_))));
    }
}
