//! The recalibration network.
//!
//! ```text
//! x ──backbone──▶ E ──┬──────────────────────────────┐
//!                     │ Q = E·W_Q + b_Q               │
//! centroids ──▶ K, V  └─ attn = softmax(Q·Kᵀ) ──▶ E_R ─┴─ merge ──▶ classifier ──▶ logits
//! ```
//!
//! The backbone is an MLP. The recalibration block projects the batch
//! embeddings to queries and the class centroids to keys and values, then
//! mixes the values by attention. The attention scores are the bare dot
//! product; [`ModelConfig::scaled_attention`] opts into a `1/√D` factor.
//! Centroids enter the graph as constants, so they never receive gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// How the input embedding and its recalibration are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    /// `[E | E_R]`, classifier input width `2D`.
    Concat,
    /// `E + E_R`.
    Add,
    /// `E_R` alone.
    RecalOnly,
    /// `E` alone; the recalibration block is not built.
    BackboneOnly,
}

impl Merge {
    pub const ALL: [Merge; 4] = [
        Merge::Concat,
        Merge::Add,
        Merge::RecalOnly,
        Merge::BackboneOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Merge::Concat => "concat",
            Merge::Add => "add",
            Merge::RecalOnly => "recal_only",
            Merge::BackboneOnly => "backbone_only",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != Merge::BackboneOnly
    }
}

impl fmt::Display for Merge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Merge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Merge::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown merge strategy `{s}` (expected concat, add, recal_only or backbone_only)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Embedding width `D`.
    pub embed_dim: usize,
    /// Number of classes `M`.
    pub classes: usize,
    pub merge: Merge,
    #[serde(default)]
    pub seed: u64,
    /// Multiply attention scores by `1/√D`. Off by default.
    #[serde(default)]
    pub scaled_attention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("hidden[{i}] must be at least 1")));
        }
        Ok(())
    }

    pub fn classifier_in(&self) -> usize {
        match self.merge {
            Merge::Concat => 2 * self.embed_dim,
            _ => self.embed_dim,
        }
    }

    /// Layer widths of the backbone from input to embedding.
    pub fn backbone_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.d_in);
        w.extend_from_slice(&self.hidden);
        w.push(self.embed_dim);
        w
    }
}

/// Closed-form parameter count.
pub fn count_params(config: &ModelConfig) -> usize {
    let widths = config.backbone_widths();
    let backbone: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let d = config.embed_dim;
    let attention = if config.merge.uses_attention() {
        3 * (d * d + d)
    } else {
        0
    };
    backbone + attention + config.classifier_in() * config.classes + config.classes
}

/// Affine map `x·weight + bias`, weight `in × out`, bias `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    /// Uniform in `[-√(1/fan_in), √(1/fan_in)]`, weight first then bias,
    /// both in row-major order.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform_range(-bound, bound)).collect() };
        let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
        let bias = Tensor::new(vec![1, fan_out], draw(fan_out)).expect("shape");
        Dense { weight, bias }
    }
}

/// Query, key and value projections of the recalibration block.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Dense>,
    /// Absent for [`Merge::BackboneOnly`].
    pub attention: Option<Attention>,
    pub classifier: Dense,
}

impl ModelParams {
    /// Seeded initialization. Draw order: backbone layers, then query, key,
    /// value, then the classifier.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::stream(config.seed, "init");
        let widths = config.backbone_widths();
        let backbone = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng))
            .collect();
        let d = config.embed_dim;
        let attention = config.merge.uses_attention().then(|| Attention {
            query: Dense::init(d, d, &mut rng),
            key: Dense::init(d, d, &mut rng),
            value: Dense::init(d, d, &mut rng),
        });
        let classifier = Dense::init(config.classifier_in(), config.classes, &mut rng);
        Ok(ModelParams {
            backbone,
            attention,
            classifier,
        })
    }

    fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = self
            .backbone
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("backbone.{i}"), l))
            .collect();
        if let Some(a) = &self.attention {
            out.push(("attention.query".into(), &a.query));
            out.push(("attention.key".into(), &a.key));
            out.push(("attention.value".into(), &a.value));
        }
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Every parameter tensor with its name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    /// Mutable parameter tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(a) = &mut self.attention {
            for l in [&mut a.query, &mut a.key, &mut a.value] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Rebuild from named tensors, which must match `config` exactly.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if named.len() != expected.len() {
            return Err(Error::CheckpointShape {
                name: "params".into(),
                detail: format!("expected {} arrays, found {}", expected.len(), named.len()),
            });
        }
        for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(&expected) {
            let pos = named.iter().position(|(n, _)| n == name).ok_or_else(|| {
                Error::CheckpointShape {
                    name: name.clone(),
                    detail: "missing".into(),
                }
            })?;
            let (_, tensor) = named.swap_remove(pos);
            if tensor.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    detail: format!(
                        "shape {:?} does not match config shape {shape:?}",
                        tensor.shape()
                    ),
                });
            }
            if !tensor.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
            *slot = tensor;
        }
        Ok(params)
    }

    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.backbone_widths();
        let d = config.embed_dim;
        Ok(ModelParams {
            backbone: widths
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
            attention: config.merge.uses_attention().then(|| Attention {
                query: Dense::zeros(d, d),
                key: Dense::zeros(d, d),
                value: Dense::zeros(d, d),
            }),
            classifier: Dense::zeros(config.classifier_in(), config.classes),
        })
    }

    /// Number of scalars actually held.
    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph handles of one affine layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub query: DenseNodes,
    pub key: DenseNodes,
    pub value: DenseNodes,
}

/// Parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub backbone: Vec<DenseNodes>,
    pub attention: Option<AttentionNodes>,
    pub classifier: DenseNodes,
}

impl BoundParams {
    /// Node ids in the order of [`ModelParams::named`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for l in &self.backbone {
            out.extend([l.weight, l.bias]);
        }
        if let Some(a) = &self.attention {
            for l in [a.query, a.key, a.value] {
                out.extend([l.weight, l.bias]);
            }
        }
        out.extend([self.classifier.weight, self.classifier.bias]);
        out
    }
}

impl ModelParams {
    /// Place every parameter on `graph` as a gradient-receiving leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, true)
    }

    /// Place every parameter as a constant, for inference.
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.variable(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let mut dense = |d: &Dense| DenseNodes {
            weight: leaf(&d.weight),
            bias: leaf(&d.bias),
        };
        let backbone = self.backbone.iter().map(&mut dense).collect();
        let attention = self.attention.as_ref().map(|a| AttentionNodes {
            query: dense(&a.query),
            key: dense(&a.key),
            value: dense(&a.value),
        });
        let classifier = dense(&self.classifier);
        BoundParams {
            backbone,
            attention,
            classifier,
        }
    }

    /// Rebuild parameters from a list of tensors in [`ModelParams::named`] order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::shape(
                "with_tensors",
                format!("{} tensors for {} parameters", tensors.len(), slots.len()),
            ));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "with_tensors",
                    format!("{:?} vs {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(out)
    }
}

impl BoundParams {
    /// Wrap raw node ids (in [`ModelParams::named`] order) using `params`
    /// for the layout.
    pub fn from_ids(params: &ModelParams, ids: &[NodeId]) -> Result<Self> {
        let expected = params.named().len();
        if ids.len() != expected {
            return Err(Error::shape(
                "BoundParams::from_ids",
                format!("{} ids for {expected} parameters", ids.len()),
            ));
        }
        let mut it = ids.iter().copied();
        let mut dense = || DenseNodes {
            weight: it.next().expect("counted"),
            bias: it.next().expect("counted"),
        };
        let backbone = params.backbone.iter().map(|_| dense()).collect();
        let attention = params.attention.as_ref().map(|_| AttentionNodes {
            query: dense(),
            key: dense(),
            value: dense(),
        });
        let classifier = dense();
        Ok(BoundParams {
            backbone,
            attention,
            classifier,
        })
    }
}

/// Linear and relu layers, no nonlinearity after the last linear.
pub fn backbone_forward(graph: &mut Graph, x: NodeId, layers: &[DenseNodes]) -> Result<NodeId> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = graph.linear(h, l.weight, l.bias)?;
        if i + 1 < layers.len() {
            h = graph.relu(h);
        }
    }
    Ok(h)
}

/// Output of the recalibration block.
#[derive(Clone, Copy, Debug)]
pub struct Recalibration {
    pub recalibrated: NodeId,
    pub attention: NodeId,
}

/// `E_R = softmax(Q·Kᵀ)·V` with `Q` from the embeddings and `K`, `V` from
/// the centroids.
pub fn cafe_forward(
    graph: &mut Graph,
    embeddings: NodeId,
    centroids: NodeId,
    params: &AttentionNodes,
    scaled: bool,
) -> Result<Recalibration> {
    let d = graph.value(embeddings).cols();
    let c = graph.value(centroids);
    if c.rank() != 2 || c.cols() != d || c.rows() == 0 {
        return Err(Error::shape(
            "cafe_forward",
            format!("centroid table {:?} for embedding width {d}", c.shape()),
        ));
    }
    let q = graph.linear(embeddings, params.query.weight, params.query.bias)?;
    let k = graph.linear(centroids, params.key.weight, params.key.bias)?;
    let v = graph.linear(centroids, params.value.weight, params.value.bias)?;
    let kt = graph.transpose(k)?;
    let mut scores = graph.matmul(q, kt)?;
    if scaled {
        scores = graph.scale(scores, 1.0 / (d as f64).sqrt());
    }
    let attention = graph.softmax_rows(scores)?;
    let recalibrated = graph.matmul(attention, v)?;
    Ok(Recalibration {
        recalibrated,
        attention,
    })
}

/// Combine `E` and `E_R`. For [`Merge::BackboneOnly`] `recalibrated` is
/// ignored and may be `None`.
pub fn merge(
    graph: &mut Graph,
    embeddings: NodeId,
    recalibrated: Option<NodeId>,
    strategy: Merge,
) -> Result<NodeId> {
    let need = || Error::Config(format!("merge `{strategy}` needs a recalibrated embedding"));
    match strategy {
        Merge::BackboneOnly => Ok(embeddings),
        Merge::RecalOnly => recalibrated.ok_or_else(need),
        Merge::Add => graph.add(embeddings, recalibrated.ok_or_else(need)?),
        Merge::Concat => graph.concat_cols(embeddings, recalibrated.ok_or_else(need)?),
    }
}

/// Node handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub embeddings: NodeId,
    pub attention: Option<NodeId>,
}

/// Full forward pass on an existing graph. `centroids` enter as a constant.
pub fn model_forward(
    graph: &mut Graph,
    x: &Tensor,
    params: &BoundParams,
    config: &ModelConfig,
    centroids: &Tensor,
) -> Result<ForwardNodes> {
    if x.rank() != 2 || x.cols() != config.d_in {
        return Err(Error::shape(
            "model_forward",
            format!("input {:?} for d_in {}", x.shape(), config.d_in),
        ));
    }
    let xn = graph.constant(x.clone());
    let embeddings = backbone_forward(graph, xn, &params.backbone)?;
    let (recal, attention) = if config.merge.uses_attention() {
        if centroids.shape() != [config.classes, config.embed_dim] {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "centroid table {:?}, expected [{}, {}]",
                    centroids.shape(),
                    config.classes,
                    config.embed_dim
                ),
            ));
        }
        let attn_params = params.attention.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "merge `{}` needs attention parameters",
                config.merge
            ))
        })?;
        let c = graph.constant(centroids.clone());
        let r = cafe_forward(graph, embeddings, c, attn_params, config.scaled_attention)?;
        (Some(r.recalibrated), Some(r.attention))
    } else {
        (None, None)
    };
    let merged = merge(graph, embeddings, recal, config.merge)?;
    let logits = graph.linear(merged, params.classifier.weight, params.classifier.bias)?;
    Ok(ForwardNodes {
        logits,
        embeddings,
        attention,
    })
}

/// A config together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Values of one inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub embeddings: Tensor,
    pub attention: Option<Tensor>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.argmax_rows()
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Model { config, params })
    }

    /// Forward pass with every parameter held constant.
    pub fn infer(&self, x: &Tensor, centroids: &Tensor) -> Result<Inference> {
        let mut graph = Graph::new();
        let bound = self.params.bind_frozen(&mut graph);
        let nodes = model_forward(&mut graph, x, &bound, &self.config, centroids)?;
        Ok(Inference {
            logits: graph.value(nodes.logits).clone(),
            embeddings: graph.value(nodes.embeddings).clone(),
            attention: nodes.attention.map(|a| graph.value(a).clone()),
        })
    }

    /// Argmax class per row, ties toward the lowest index.
    pub fn predict(&self, x: &Tensor, centroids: &Tensor) -> Result<Vec<usize>> {
        Ok(self.infer(x, centroids)?.predictions())
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.config)
    }
}
