//! 3-D DenseNet classifier.
//!
//! Stem conv, four dense blocks of bottleneck layers joined by three transition
//! layers, then BN, ReLU, global average pooling and a linear head. Each dense
//! layer is `BN -> ReLU -> 1x1x1 conv (4k) -> BN -> ReLU -> 3x3x3 conv (k)` and its
//! output is concatenated onto the block's running feature map. Transitions are
//! `BN -> ReLU -> 1x1x1 conv -> 2x2x2 average pool`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BatchNormMode, BatchStats, Graph, NnError, Tensor, Var};
use crate::training::AdamState;

pub const CHECKPOINT_FORMAT: &str = "avd-densenet3d";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Layer whose activations drive Grad-CAM by default.

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("unknown capture layer {0:?}")]
    UnknownCapture(String),
    #[error("input shape {got:?} does not match model input (N, 1, {expected:?})")]
    InputShape { got: Vec<usize>, expected: [usize; 3] },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    /// Channels produced by the stem; `None` means `2 * growth_rate`.
    pub init_channels: Option<usize>,
    /// Output channels of each 1x1x1 bottleneck conv; `None` means `4 * growth_rate`.
    pub bottleneck_width: Option<usize>,
    pub transition_compression: f64,
    pub num_classes: usize,
    /// `(H, W, D)` of the classifier input.
    pub input_shape: [usize; 3],
    /// Enforce four blocks of five layers.
    pub paper_faithful: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            layers_per_block: 5,
            growth_rate: 16,
            init_channels: None,
            bottleneck_width: None,
            transition_compression: 0.5,
            num_classes: 2,
            input_shape: [224, 224, 30],
            paper_faithful: true,
        }
    }
}

impl ArchConfig {
    /// Desk-scale configuration for synthetic data.
    pub fn phantom(num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self { growth_rate: 8, num_classes, input_shape, ..Self::default() }
    }

    pub fn init_channels(&self) -> usize {
        self.init_channels.unwrap_or(2 * self.growth_rate)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck_width.unwrap_or(4 * self.growth_rate)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.paper_faithful && (self.num_blocks != 4 || self.layers_per_block != 5) {
            return bad(format!(
                "paper-faithful model needs 4 blocks of 5 layers, got {} blocks of {}",
                self.num_blocks, self.layers_per_block
            ));
        }
        if self.num_blocks == 0 || self.layers_per_block == 0 || self.growth_rate == 0 {
            return bad("blocks, layers and growth rate must be positive".into());
        }
        if self.init_channels() == 0 || self.bottleneck_width() == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return bad("transition_compression must lie in (0, 1]".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        let mut dims = self.input_shape;
        for t in 1..self.num_blocks {
            if dims.iter().any(|&d| d < 2) {
                return bad(format!("input {:?} too small for transition {t}", self.input_shape));
            }
            dims = dims.map(|d| d / 2);
        }
        if dims.contains(&0) {
            return bad(format!("input {:?} too small", self.input_shape));
        }
        Ok(())
    }

    /// Channels leaving each transition after compression.
    pub fn compressed(&self, channels: usize) -> usize {
        ((channels as f64 * self.transition_compression).floor() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { kernel: usize },
    BatchNorm,
    Linear,
}

/// Static description of one parameterised layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct BnState {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    tracked: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnRef {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    bn1: BnRef,
    conv1: usize,
    bn2: BnRef,
    conv2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Transition {
    bn: BnRef,
    conv: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ArchConfig,
    params: Vec<Param>,
    bn_names: Vec<String>,
    bn_states: Vec<BnState>,
    layers: Vec<LayerInfo>,
    stem: usize,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    head_bn: BnRef,
    fc_w: usize,
    fc_b: usize,
}

/// Result of a recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    pub probs: Var,
    pub captured: Option<Var>,
    /// Graph leaf for each model parameter, in model order.
    pub param_vars: Vec<Var>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub bn_stats: Vec<Option<BatchStats>>,
}

struct Builder<R> {
    params: Vec<Param>,
    bn_names: Vec<String>,
    bn_states: Vec<BnState>,
    layers: Vec<LayerInfo>,
    rng: R,
}

impl<R: rand::Rng> Builder<R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> usize {
        let fan_in = (cin * k * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let n = cout * cin * k * k * k;
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32 as f64).collect();
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::Conv { kernel: k },
            in_channels: cin,
            out_channels: cout,
        });
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: Tensor::new(vec![cout, cin, k, k, k], data).expect("shape"),
        });
        self.params.len() - 1
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        self.layers.push(LayerInfo { name: name.to_string(), kind: LayerKind::BatchNorm, in_channels: c, out_channels: c });
        self.params.push(Param { name: format!("{name}.gamma"), value: Tensor::full(&[c], 1.0) });
        self.params.push(Param { name: format!("{name}.beta"), value: Tensor::zeros(&[c]) });
        self.bn_names.push(name.to_string());
        self.bn_states.push(BnState { running_mean: vec![0.0; c], running_var: vec![1.0; c], tracked: 0 });
        BnRef { gamma: self.params.len() - 2, beta: self.params.len() - 1, state: self.bn_states.len() - 1 }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> (usize, usize) {
        let dist = Normal::new(0.0, (2.0 / fin as f64).sqrt()).expect("positive std");
        let data = (0..fin * fout).map(|_| dist.sample(&mut self.rng) as f32 as f64).collect();
        self.layers.push(LayerInfo { name: name.to_string(), kind: LayerKind::Linear, in_channels: fin, out_channels: fout });
        self.params.push(Param { name: format!("{name}.weight"), value: Tensor::new(vec![fout, fin], data).expect("shape") });
        self.params.push(Param { name: format!("{name}.bias"), value: Tensor::zeros(&[fout]) });
        (self.params.len() - 2, self.params.len() - 1)
    }
}

pub fn build_model(cfg: &ArchConfig, seed: u64) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        bn_names: Vec::new(),
        bn_states: Vec::new(),
        layers: Vec::new(),
        rng: crate::rng::stream(seed, &[0x00de_5e11]),
    };
    let k = cfg.growth_rate;
    let width = cfg.bottleneck_width();
    let mut channels = cfg.init_channels();
    let stem = b.conv("stem.conv", 1, channels, 3);
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for bi in 1..=cfg.num_blocks {
        let mut layers = Vec::new();
        for li in 1..=cfg.layers_per_block {
            let p = format!("block{bi}.layer{li}");
            let bn1 = b.bn(&format!("{p}.bn1"), channels);
            let conv1 = b.conv(&format!("{p}.conv1"), channels, width, 1);
            let bn2 = b.bn(&format!("{p}.bn2"), width);
            let conv2 = b.conv(&format!("{p}.conv2"), width, k, 3);
            layers.push(DenseLayer { bn1, conv1, bn2, conv2 });
            channels += k;
        }
        blocks.push(layers);
        if bi < cfg.num_blocks {
            let p = format!("transition{bi}");
            let bn = b.bn(&format!("{p}.bn"), channels);
            let out = cfg.compressed(channels);
            let conv = b.conv(&format!("{p}.conv"), channels, out, 1);
            transitions.push(Transition { bn, conv });
            channels = out;
        }
    }
    let head_bn = b.bn("head.bn", channels);
    let (fc_w, fc_b) = b.linear("head.fc", channels, cfg.num_classes);
    Ok(Model {
        cfg: cfg.clone(),
        params: b.params,
        bn_names: b.bn_names,
        bn_states: b.bn_states,
        layers: b.layers,
        stem,
        blocks,
        transitions,
        head_bn,
        fc_w,
        fc_b,
    })
}

impl Model {
    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Convolution of the last transition layer, or the head activation when
    /// the network has a single block.
    pub fn default_cam_layer(&self) -> String {
        match self.cfg.num_blocks {
            1 => "head.relu".to_string(),
            b => format!("transition{}.conv", b - 1),
        }
    }

    /// Names accepted by the `capture` argument of the forward functions.
    pub fn capture_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.clone())
            .collect();
        names.extend((1..=self.cfg.num_blocks).map(|b| format!("block{b}")));
        names.extend((1..self.cfg.num_blocks).map(|t| format!("transition{t}.pool")));
        names.push("head.relu".into());
        names
    }

    /// Whether every batch norm layer has accumulated running statistics.
    pub fn has_running_stats(&self) -> bool {
        self.bn_states.iter().all(|s| s.tracked > 0)
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_params_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Spatial shape entering each dense block.
    pub fn block_input_shapes(&self) -> Vec<[usize; 3]> {
        let mut dims = self.cfg.input_shape;
        let mut out = vec![dims];
        for _ in 1..self.cfg.num_blocks {
            dims = dims.map(|d| d / 2);
            out.push(dims);
        }
        out
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), ModelError> {
        let s = batch.shape();
        if s.len() != 5 || s[1] != 1 || s[2..] != self.cfg.input_shape {
            return Err(ModelError::InputShape { got: s.to_vec(), expected: self.cfg.input_shape });
        }
        Ok(())
    }

    /// Records a full forward pass. Parameters become graph leaves that require
    /// gradients when `params_require_grad` is set.
    pub fn forward_pass(
        &self,
        batch: &Tensor,
        mode: Mode,
        capture: Option<&str>,
        params_require_grad: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.check_input(batch)?;
        if let Some(name) = capture {
            if !self.capture_names().iter().any(|n| n == name) {
                return Err(ModelError::UnknownCapture(name.to_string()));
            }
        }
        if mode == Mode::Eval && !self.has_running_stats() {
            return Err(NnError::NoRunningStats.into());
        }
        let mut g = Graph::new();
        let param_vars: Vec<Var> =
            self.params.iter().map(|p| g.leaf(p.value.clone(), params_require_grad)).collect();
        let mut bn_stats: Vec<Option<BatchStats>> = vec![None; self.bn_states.len()];
        let mut captured = None;
        let mark = |name: &str, v: Var, captured: &mut Option<Var>| {
            if capture == Some(name) {
                *captured = Some(v);
            }
        };

        let bn_relu = |g: &mut Graph, x: Var, r: BnRef, stats: &mut Vec<Option<BatchStats>>| -> Result<Var, ModelError> {
            let st = &self.bn_states[r.state];
            let m = match mode {
                Mode::Train => BatchNormMode::Train { eps: BN_EPS },
                Mode::Eval => BatchNormMode::Eval { running_mean: &st.running_mean, running_var: &st.running_var, eps: BN_EPS },
            };
            let (y, s) = g.batch_norm(x, param_vars[r.gamma], param_vars[r.beta], m)?;
            stats[r.state] = s;
            Ok(g.relu(y)?)
        };

        let input = g.leaf(batch.clone(), false);
        let mut x = g.conv3d(input, param_vars[self.stem], None, 1, 1)?;
        mark("stem.conv", x, &mut captured);
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.iter().enumerate() {
                let p = format!("block{}.layer{}", bi + 1, li + 1);
                let h = bn_relu(&mut g, x, layer.bn1, &mut bn_stats)?;
                let h = g.conv3d(h, param_vars[layer.conv1], None, 1, 0)?;
                mark(&format!("{p}.conv1"), h, &mut captured);
                let h = bn_relu(&mut g, h, layer.bn2, &mut bn_stats)?;
                let h = g.conv3d(h, param_vars[layer.conv2], None, 1, 1)?;
                mark(&format!("{p}.conv2"), h, &mut captured);
                x = g.concat(&[x, h])?;
            }
            mark(&format!("block{}", bi + 1), x, &mut captured);
            if let Some(t) = self.transitions.get(bi) {
                let p = format!("transition{}", bi + 1);
                let h = bn_relu(&mut g, x, t.bn, &mut bn_stats)?;
                let h = g.conv3d(h, param_vars[t.conv], None, 1, 0)?;
                mark(&format!("{p}.conv"), h, &mut captured);
                x = g.avg_pool2(h)?;
                mark(&format!("{p}.pool"), x, &mut captured);
            }
        }
        let h = bn_relu(&mut g, x, self.head_bn, &mut bn_stats)?;
        mark("head.relu", h, &mut captured);
        let pooled = g.global_avg_pool(h)?;
        let logits = g.linear(pooled, param_vars[self.fc_w], param_vars[self.fc_b])?;
        let probs = g.softmax(logits)?;
        Ok(ForwardPass { graph: g, logits, probs, captured, param_vars, bn_stats })
    }

    /// Inference with running statistics: `(probabilities, captured activation)`.
    pub fn forward(&self, batch: &Tensor, capture: Option<&str>) -> Result<(Tensor, Option<Tensor>), ModelError> {
        let pass = self.forward_pass(batch, Mode::Eval, capture, false)?;
        let probs = pass.graph.value(pass.probs).clone();
        let cap = pass.captured.map(|v| pass.graph.value(v).clone());
        Ok((probs, cap))
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (state, s) in self.bn_states.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for c in 0..state.running_mean.len() {
                state.running_mean[c] = (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * s.mean[c];
                state.running_var[c] = (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * s.var[c] * unbias;
            }
            state.tracked += 1;
        }
    }

    fn buffer_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, st) in self.bn_names.iter().zip(&self.bn_states) {
            let c = st.running_mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(vec![c], st.running_mean.clone()).expect("shape")));
            out.push((format!("{name}.running_var"), Tensor::new(vec![c], st.running_var.clone()).expect("shape")));
            out.push((format!("{name}.tracked"), Tensor::scalar(st.tracked as f64)));
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
    adam_step: Option<u64>,
}

fn ckpt_err(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

/// Writes a checkpoint: one JSON header line, then every tensor as
/// little-endian `f32` in header order.
pub fn save_checkpoint(model: &Model, optimizer: Option<&AdamState>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let mut tensors: Vec<(String, &[f64], Vec<usize>)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.data(), p.value.shape().to_vec()))
        .collect();
    let buffers = model.buffer_tensors();
    tensors.extend(buffers.iter().map(|(n, t)| (n.clone(), t.data(), t.shape().to_vec())));
    if let Some(opt) = optimizer {
        for (p, (m, v)) in model.params.iter().zip(opt.first_moment.iter().zip(&opt.second_moment)) {
            tensors.push((format!("adam.m.{}", p.name), m.as_slice(), p.value.shape().to_vec()));
            tensors.push((format!("adam.v.{}", p.name), v.as_slice(), p.value.shape().to_vec()));
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: model.cfg.clone(),
        tensors: tensors.iter().map(|(n, _, s)| TensorEntry { name: n.clone(), shape: s.clone() }).collect(),
        adam_step: optimizer.map(|o| o.step),
    };
    let io = |e| ModelError::Io { path: path.display().to_string(), source: e };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let mut line = serde_json::to_string(&header).map_err(|e| ckpt_err(e.to_string()))?;
    line.push('\n');
    out.write_all(line.as_bytes()).map_err(io)?;
    for (_, data, _) in &tensors {
        for &v in *data {
            out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Loads a checkpoint, validating every tensor name and shape against the
/// architecture in its header.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Option<AdamState>), ModelError> {
    let path = path.as_ref();
    let io = |e| ModelError::Io { path: path.display().to_string(), source: e };
    let mut reader = BufReader::new(File::open(path).map_err(io)?);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io)?;
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(ckpt_err(format!("payload has {} bytes, header needs {}", payload.len(), total * 4)));
    }
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut model = build_model(&header.arch, 0)?;
    let mut entries = header.tensors.iter();
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>, ModelError> {
        let e = entries.next().ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        if e.name != name || e.shape != shape {
            return Err(ckpt_err(format!("expected {name} {shape:?}, found {} {:?}", e.name, e.shape)));
        }
        let n: usize = shape.iter().product();
        Ok(values.by_ref().take(n).collect())
    };
    for p in &mut model.params {
        let shape = p.value.shape().to_vec();
        let data = take(&p.name, &shape)?;
        p.value = Tensor::new(shape, data)?;
    }
    for (name, st) in model.bn_names.iter().zip(model.bn_states.iter_mut()) {
        let c = st.running_mean.len();
        st.running_mean = take(&format!("{name}.running_mean"), &[c])?;
        st.running_var = take(&format!("{name}.running_var"), &[c])?;
        st.tracked = take(&format!("{name}.tracked"), &[1])?[0] as u64;
    }
    let optimizer = match header.adam_step {
        None => None,
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in &model.params {
                m.push(take(&format!("adam.m.{}", p.name), p.value.shape())?);
                v.push(take(&format!("adam.v.{}", p.name), p.value.shape())?);
            }
            Some(AdamState { first_moment: m, second_moment: v, step })
        }
    };
    if entries.next().is_some() {
        return Err(ckpt_err("unexpected trailing tensors"));
    }
    if model.params.iter().any(|p| !p.value.is_finite()) {
        return Err(ckpt_err("non-finite parameter"));
    }
    Ok((model, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(classes: usize) -> ArchConfig {
        ArchConfig { growth_rate: 4, num_classes: classes, input_shape: [16, 16, 8], ..ArchConfig::default() }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&tiny(2), 9).unwrap();
        let b = build_model(&tiny(2), 9).unwrap();
        assert_eq!(a, b);
        let c = build_model(&tiny(2), 10).unwrap();
        assert_ne!(a.params(), c.params());
        // Parameters are f32-representable from the start.
        for p in a.params() {
            assert!(p.value.data().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn channel_arithmetic() {
        let cfg = ArchConfig { growth_rate: 8, init_channels: Some(16), ..tiny(4) };
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.layer("transition1.bn").unwrap().in_channels, 56);
        assert_eq!(m.layer("transition1.conv").unwrap().out_channels, 28);
        for b in 1..=4 {
            let block_in = m.layer(&format!("block{b}.layer1.bn1")).unwrap().in_channels;
            for j in 1..=5 {
                let l = m.layer(&format!("block{b}.layer{j}.conv1")).unwrap();
                assert_eq!(l.in_channels, block_in + (j - 1) * 8);
                assert_eq!(l.out_channels, 32);
                assert_eq!(m.layer(&format!("block{b}.layer{j}.conv2")).unwrap().out_channels, 8);
            }
        }
        let transitions = m.layers().iter().filter(|l| l.name.starts_with("transition") && l.name.ends_with(".conv")).count();
        assert_eq!(transitions, 3);
        assert!(m.layer("transition4.conv").is_none());
    }

    #[test]
    fn paper_faithful_requires_five_layers() {
        let cfg = ArchConfig { layers_per_block: 4, ..tiny(2) };
        assert!(matches!(build_model(&cfg, 0), Err(ModelError::InvalidConfig(_))));
        let relaxed = ArchConfig { layers_per_block: 4, paper_faithful: false, ..tiny(2) };
        assert!(build_model(&relaxed, 0).is_ok());
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let a = build_model(&tiny(2), 1).unwrap();
        let b = build_model(&tiny(2), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(build_model(&tiny(4), 1).unwrap().param_count() > a.param_count());
    }

    #[test]
    fn spatial_halving_through_transitions() {
        let m = build_model(&ArchConfig { input_shape: [224, 224, 30], ..tiny(2) }, 0).unwrap();
        assert_eq!(m.block_input_shapes(), vec![[224, 224, 30], [112, 112, 15], [56, 56, 7], [28, 28, 3]]);
    }

    #[test]
    fn eval_without_running_stats_fails() {
        let m = build_model(&tiny(2), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16, 8]);
        let err = m.forward(&x, None).unwrap_err();
        assert!(err.to_string().contains("before any running statistics"));
    }

    #[test]
    fn input_and_capture_validation() {
        let m = build_model(&tiny(2), 0).unwrap();
        let bad = Tensor::zeros(&[1, 1, 8, 16, 8]);
        assert!(matches!(m.forward_pass(&bad, Mode::Train, None, false), Err(ModelError::InputShape { .. })));
        let x = Tensor::zeros(&[1, 1, 16, 16, 8]);
        assert!(matches!(
            m.forward_pass(&x, Mode::Train, Some("transition4.conv"), false),
            Err(ModelError::UnknownCapture(_))
        ));
    }
}
