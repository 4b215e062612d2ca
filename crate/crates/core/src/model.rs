//! GATv2 regression model over multilayer graphs.
//!
//! Every (vertex, layer) replica of a [`MultilayerGraph`] is a node. Three
//! attention layers with six heads each pass messages along the rewired
//! intra-layer edges, self-loops and inter-layer replica edges. Hidden layers
//! concatenate heads and apply ReLU; the last layer averages heads. Node
//! states are mean-pooled and mapped to a scalar by an affine readout.
//!
//! Attention for an edge `u → v` is `aᵀ LeakyReLU(W [x_v ‖ x_u])` with one
//! `W` of shape `hidden × 2·d_in` per head. Messages use a separate per-head
//! value matrix applied to `x_u`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::graph::{MultilayerGraph, PatientSample};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in GAT layer {layer}, head {head}: {source}")]
    NonFinite {
        layer: usize,
        head: usize,
        source: AutodiffError,
    },
    #[error("{0}")]
    Autodiff(#[from] AutodiffError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("node {0} has no incoming edges")]
    NoInEdges(usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScheme {
    OneHotRegion,
    OneHotPlusStrength,
}

impl FeatureScheme {
    pub fn id(self) -> u8 {
        match self {
            FeatureScheme::OneHotRegion => 1,
            FeatureScheme::OneHotPlusStrength => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(FeatureScheme::OneHotRegion),
            2 => Some(FeatureScheme::OneHotPlusStrength),
            _ => None,
        }
    }

    pub fn dimension(self, regions: usize, layers: usize) -> usize {
        match self {
            FeatureScheme::OneHotRegion => regions,
            FeatureScheme::OneHotPlusStrength => regions + layers,
        }
    }
}

/// Architecture and fixed output map. `prediction = offset + scale · readout`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_scheme: FeatureScheme,
    pub regions: usize,
    pub bands: usize,
    pub hidden: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub dropout: f64,
    pub negative_slope: f64,
    pub output_offset: f64,
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_scheme: FeatureScheme::OneHotPlusStrength,
            regions: 31,
            bands: 3,
            hidden: 8,
            heads: 6,
            gat_layers: 3,
            dropout: 0.1,
            negative_slope: 0.2,
            // centre and half-width of the NIHSS range 1..=42
            output_offset: 21.5,
            output_scale: 20.5,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_scheme.dimension(self.regions, self.bands)
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim()
        } else {
            self.hidden * self.heads
        }
    }

    /// Shapes of every parameter tensor in canonical order: for each GAT
    /// layer and head, attention weight, attention vector, value weight;
    /// then readout weight and readout bias.
    pub fn parameter_shapes(&self) -> Vec<[usize; 2]> {
        let mut shapes = Vec::new();
        for layer in 0..self.gat_layers {
            let d = self.layer_input_dim(layer);
            for _ in 0..self.heads {
                shapes.push([self.hidden, 2 * d]);
                shapes.push([self.hidden, 1]);
                shapes.push([self.hidden, d]);
            }
        }
        shapes.push([1, self.hidden]);
        shapes.push([1, 1]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|s| s[0] * s[1]).sum()
    }
}

/// Model weights as a list of tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParameters {
    /// Uniform initialisation in `±1/√fan_in` per tensor.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|[r, c]| {
                let fan_in = if c == 1 { r } else { c };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::matrix(r, c, data).expect("finite init")
            })
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|[r, c]| Tensor::zeros(&[r, c]))
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let expected = config.parameter_count();
        if flat.len() != expected {
            return Err(ModelError::Shape(format!(
                "flat vector has {} values, model expects {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::new();
        for [r, c] in config.parameter_shapes() {
            tensors.push(Tensor::matrix(r, c, flat[offset..offset + r * c].to_vec())?);
            offset += r * c;
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Index of the attention weight of `(layer, head)` in [`Self::tensors`].
    fn head_index(&self, layer: usize, head: usize) -> usize {
        3 * (layer * self.config.heads + head)
    }

    pub fn attention_weight(&self, layer: usize, head: usize) -> &Tensor {
        &self.tensors[self.head_index(layer, head)]
    }

    pub fn attention_vector(&self, layer: usize, head: usize) -> &Tensor {
        &self.tensors[self.head_index(layer, head) + 1]
    }

    pub fn value_weight(&self, layer: usize, head: usize) -> &Tensor {
        &self.tensors[self.head_index(layer, head) + 2]
    }

    pub fn readout_weight(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 2]
    }

    pub fn readout_bias(&self) -> f64 {
        self.tensors[self.tensors.len() - 1].item()
    }
}

/// Directed edge list of a graph with receivers `dst` and senders `src`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub num_nodes: usize,
}

impl EdgeIndex {
    pub fn new(src: Vec<usize>, dst: Vec<usize>, num_nodes: usize) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(ModelError::Shape(format!("{} sources for {} targets", src.len(), dst.len())));
        }
        if let Some(&bad) = src.iter().chain(&dst).find(|&&i| i >= num_nodes) {
            return Err(ModelError::Shape(format!("node {bad} out of range for {num_nodes} nodes")));
        }
        Ok(Self {
            src: src.into(),
            dst: dst.into(),
            num_nodes,
        })
    }

    /// All replica edges of a multilayer graph, both directions for
    /// non-loop edges. `keep(layer, u, v)` filters intra-layer non-loop edges.
    pub fn from_graph_filtered(graph: &MultilayerGraph, mut keep: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (l, layer) in graph.layers.iter().enumerate() {
            for e in &layer.edges {
                let (a, b) = (graph.replica(l, e.u), graph.replica(l, e.v));
                if e.u == e.v {
                    src.push(a);
                    dst.push(a);
                } else if keep(l, e.u, e.v) {
                    src.extend([a, b]);
                    dst.extend([b, a]);
                }
            }
        }
        for e in &graph.inter {
            let (a, b) = (graph.replica(e.layer_a, e.vertex), graph.replica(e.layer_b, e.vertex));
            src.extend([a, b]);
            dst.extend([b, a]);
        }
        Self {
            src: src.into(),
            dst: dst.into(),
            num_nodes: graph.num_replicas(),
        }
    }

    pub fn from_graph(graph: &MultilayerGraph) -> Self {
        Self::from_graph_filtered(graph, |_, _, _| true)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn check_in_edges(&self) -> Result<()> {
        let mut has = vec![false; self.num_nodes];
        for &d in self.dst.iter() {
            has[d] = true;
        }
        match has.iter().position(|h| !h) {
            Some(node) => Err(ModelError::NoInEdges(node)),
            None => Ok(()),
        }
    }
}

/// Model-ready form of a sample: node features, edges and target.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub features: Tensor,
    pub edges: EdgeIndex,
    pub label: f64,
}

impl GraphInput {
    pub fn from_sample(sample: &PatientSample, scheme: FeatureScheme) -> Self {
        Self {
            features: node_features(sample, scheme),
            edges: EdgeIndex::from_graph(&sample.graph),
            label: f64::from(sample.label),
        }
    }
}

/// One row per (vertex, layer) replica, replicas ordered layer-major.
///
/// Columns `0..V` one-hot encode the region. With
/// [`FeatureScheme::OneHotPlusStrength`], column `V + l` of a replica in
/// layer `l` holds its strength (sum of incident edge weights in that layer,
/// self-loop included), min-max normalised over all replicas of the graph.
pub fn node_features(sample: &PatientSample, scheme: FeatureScheme) -> Tensor {
    let graph = &sample.graph;
    let (v, l) = (graph.num_vertices(), graph.num_layers());
    let d = scheme.dimension(v, l);
    let n = v * l;
    let mut data = vec![0.0; n * d];
    for layer in 0..l {
        for vertex in 0..v {
            data[graph.replica(layer, vertex) * d + vertex] = 1.0;
        }
    }
    if scheme == FeatureScheme::OneHotPlusStrength {
        let strengths: Vec<Vec<f64>> = graph.layers.iter().map(|layer| layer.strengths()).collect();
        let all = strengths.iter().flatten();
        let min = all.clone().copied().fold(f64::INFINITY, f64::min);
        let max = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        for (layer, s) in strengths.iter().enumerate() {
            for (vertex, &value) in s.iter().enumerate() {
                let norm = if range > 0.0 { (value - min) / range } else { 0.0 };
                data[graph.replica(layer, vertex) * d + v + layer] = norm;
            }
        }
    }
    Tensor::matrix(n, d, data).expect("finite features")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass mode; training draws dropout masks from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionContext {
    pub mode: Mode,
    pub seed: u64,
}

impl PredictionContext {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, seed: 0 }
    }

    pub fn train(seed: u64) -> Self {
        Self { mode: Mode::Train, seed }
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Arc<[f64]> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// One head's per-edge attention logits and normalised coefficients.
fn head_attention<'t>(
    x: Var<'t>,
    att_w: Var<'t>,
    att_a: Var<'t>,
    edges: &EdgeIndex,
    d_in: usize,
    slope: f64,
) -> std::result::Result<(Var<'t>, Var<'t>), AutodiffError> {
    // W [x_v ‖ x_u] = W[:, :d] x_v + W[:, d:] x_u, evaluated per node first.
    let recv = x.matmul_t(att_w.slice_cols(0, d_in)?)?;
    let send = x.matmul_t(att_w.slice_cols(d_in, 2 * d_in)?)?;
    let pre = recv
        .gather_rows(edges.dst.clone())?
        .add(send.gather_rows(edges.src.clone())?)?;
    let scores = pre.leaky_relu(slope)?.matmul(att_a)?;
    let alpha = scores.segment_softmax(edges.dst.clone())?;
    Ok((scores, alpha))
}

/// Build the forward pass on `tape`. `params` are the parameter variables in
/// canonical order. Returns the scalar prediction.
pub fn forward_on_tape<'t>(
    tape: &'t Tape,
    config: &ModelConfig,
    input: &GraphInput,
    params: &[Var<'t>],
    ctx: PredictionContext,
) -> Result<Var<'t>> {
    let n = input.edges.num_nodes;
    if input.features.rows() != n || input.features.cols() != config.input_dim() {
        return Err(ModelError::Shape(format!(
            "features {:?} do not match {n} nodes x {} inputs",
            input.features.shape(),
            config.input_dim()
        )));
    }
    if params.len() != 3 * config.gat_layers * config.heads + 2 {
        return Err(ModelError::Shape(format!("{} parameter tensors supplied", params.len())));
    }
    input.edges.check_in_edges()?;
    let mut rng = match ctx.mode {
        Mode::Train => Some(ChaCha8Rng::seed_from_u64(ctx.seed)),
        Mode::Eval => None,
    };
    let mut h = tape.leaf(input.features.clone());
    for layer in 0..config.gat_layers {
        let d_in = config.layer_input_dim(layer);
        if let Some(rng) = rng.as_mut() {
            if config.dropout > 0.0 {
                h = h.dropout(dropout_mask(rng, n * d_in, config.dropout))?;
            }
        }
        let mut outputs = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let base = 3 * (layer * config.heads + head);
            let out = (|| {
                let (_, alpha) = head_attention(h, params[base], params[base + 1], &input.edges, d_in, config.negative_slope)?;
                let values = h.matmul_t(params[base + 2])?;
                values
                    .gather_rows(input.edges.src.clone())?
                    .mul(alpha)?
                    .segment_sum(input.edges.dst.clone(), n)
            })()
            .map_err(|source| ModelError::NonFinite { layer, head, source })?;
            outputs.push(out);
        }
        let last = layer + 1 == config.gat_layers;
        h = if last {
            let mut sum = outputs[0];
            for o in &outputs[1..] {
                sum = sum.add(*o)?;
            }
            sum.scale(1.0 / config.heads as f64)?
        } else {
            Var::concat_cols(&outputs)?.relu()?
        };
    }
    let pooled = h.mean_rows()?;
    let k = params.len();
    let raw = pooled.matmul_t(params[k - 2])?.add(params[k - 1])?;
    let out = raw
        .scale(config.output_scale)?
        .add(tape.leaf(Tensor::scalar(config.output_offset)))?;
    Ok(out)
}

/// Scalar prediction for one graph.
pub fn forward(input: &GraphInput, params: &ModelParameters, ctx: PredictionContext) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = forward_on_tape(&tape, &params.config, input, &vars, ctx)?;
    Ok(out.value().item())
}

/// Prediction, squared-error loss and flat gradient for one sample.
pub fn loss_and_gradient(
    input: &GraphInput,
    params: &ModelParameters,
    ctx: PredictionContext,
) -> Result<(f64, f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let pred = forward_on_tape(&tape, &params.config, input, &vars, ctx)?;
    let loss = pred.squared_error(&[input.label])?;
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.len());
    for v in &vars {
        flat.extend_from_slice(grads.wrt(*v).data());
    }
    Ok((pred.value().item(), loss.value().item(), flat))
}

/// Per-edge attention logits `s(x_v, x_u)` of one head of one layer, for
/// node features `features` (the layer's input).
pub fn attention_scores(
    params: &ModelParameters,
    layer: usize,
    head: usize,
    features: &Tensor,
    edges: &EdgeIndex,
) -> Result<Vec<f64>> {
    let config = &params.config;
    let d_in = config.layer_input_dim(layer);
    if features.cols() != d_in || features.rows() != edges.num_nodes {
        return Err(ModelError::Shape(format!(
            "layer {layer} expects {} x {d_in} features, got {:?}",
            edges.num_nodes,
            features.shape()
        )));
    }
    let tape = Tape::new();
    let x = tape.leaf(features.clone());
    let w = tape.leaf(params.attention_weight(layer, head).clone());
    let a = tape.leaf(params.attention_vector(layer, head).clone());
    let (scores, _) = head_attention(x, w, a, edges, d_in, config.negative_slope)
        .map_err(|source| ModelError::NonFinite { layer, head, source })?;
    Ok(scores.value().into_data())
}

/// Softmax of per-edge scores over each receiving node's in-edges.
pub fn attention_normalize(scores: &[f64], edges: &EdgeIndex) -> Result<Vec<f64>> {
    if scores.len() != edges.len() {
        return Err(ModelError::Shape(format!("{} scores for {} edges", scores.len(), edges.len())));
    }
    edges.check_in_edges()?;
    let tape = Tape::new();
    let s = tape.leaf(Tensor::column(scores.to_vec())?);
    Ok(s.segment_softmax(edges.dst.clone())?.value().into_data())
}

/// Clamp a raw prediction into the reportable NIHSS range.
pub fn clamp_nihss(raw: f64) -> f64 {
    raw.clamp(1.0, 42.0)
}

/// Eval-mode prediction (unclamped).
pub fn predict_nihss(input: &GraphInput, params: &ModelParameters) -> Result<f64> {
    forward(input, params, PredictionContext::eval())
}
