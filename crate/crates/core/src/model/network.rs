//! The instance encoder, attention pooling and the two task heads.
//!
//! Data flow for a bag of `N` instances:
//!
//! ```text
//! (N,1,H,W) -conv1-pool-relu-conv2-pool-relu-fc..-relu-> H (N,D)
//! H -> scores_n = u . tanh(V h_n) -> a = softmax(scores) -> z = a H   (1,D)
//! main logits = z W_main + b_main        (1, C_main)
//! aux logits  = H W_aux + b_aux          (N, C_aux)
//! ```
//!
//! The aux head reads the per-instance embeddings before pooling, so it never
//! touches the attention parameters.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bag::{Bag, Instance};
use crate::autodiff::{Graph, NodeId, ParamId, ParamSet, Partition, TensorValue};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    /// Widths of the fully connected layers after the conv stack; the last one is the embedding size.
    pub fc: Vec<usize>,
    pub attention_dim: usize,
    pub main_classes: usize,
    pub aux_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_height: 28,
            input_width: 28,
            conv1: ConvSpec {
                channels: 20,
                kernel: 5,
            },
            conv2: ConvSpec {
                channels: 50,
                kernel: 5,
            },
            fc: vec![500],
            attention_dim: 128,
            main_classes: 2,
            aux_classes: 2,
        }
    }
}

impl EncoderConfig {
    /// A narrow encoder for single-core desk runs. Same topology as the
    /// default, roughly 30x cheaper per instance.
    pub fn desk() -> Self {
        Self {
            conv1: ConvSpec {
                channels: 6,
                kernel: 5,
            },
            conv2: ConvSpec {
                channels: 8,
                kernel: 5,
            },
            fc: vec![32],
            attention_dim: 16,
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc.last().copied().unwrap_or(0)
    }

    fn spatial_after_convs(&self) -> Option<(usize, usize)> {
        let stage = |s: usize, k: usize| s.checked_sub(k).map(|v| v.div_ceil(2)).filter(|&v| v > 0);
        let h = stage(
            stage(self.input_height, self.conv1.kernel)?,
            self.conv2.kernel,
        )?;
        let w = stage(
            stage(self.input_width, self.conv1.kernel)?,
            self.conv2.kernel,
        )?;
        Some((h, w))
    }

    /// Flattened length of the conv stack output.
    pub fn conv_features(&self) -> usize {
        self.spatial_after_convs()
            .map_or(0, |(h, w)| h * w * self.conv2.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("conv1.channels", self.conv1.channels),
            ("conv1.kernel", self.conv1.kernel),
            ("conv2.channels", self.conv2.channels),
            ("conv2.kernel", self.conv2.kernel),
            ("attention_dim", self.attention_dim),
            ("main_classes", self.main_classes),
            ("aux_classes", self.aux_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!(
                "encoder dimension {name} must be positive"
            )));
        }
        if self.fc.is_empty() || self.fc.contains(&0) {
            return Err(Error::config(format!(
                "encoder fc widths {:?} must be non-empty and positive",
                self.fc
            )));
        }
        if self.spatial_after_convs().is_none() {
            return Err(Error::config(format!(
                "{}x{} input is too small for kernels {} and {} with 2x2 pooling",
                self.input_height, self.input_width, self.conv1.kernel, self.conv2.kernel
            )));
        }
        Ok(())
    }
}

/// Parameter ids of every layer, in canonical registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIds {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub fc: Vec<(ParamId, ParamId)>,
    pub attn_v: ParamId,
    pub attn_u: ParamId,
    pub main_w: ParamId,
    pub main_b: ParamId,
    pub aux_w: ParamId,
    pub aux_b: ParamId,
}

/// Graph nodes for the model parameters, bound once per graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    conv1_w: NodeId,
    conv1_b: NodeId,
    conv2_w: NodeId,
    conv2_b: NodeId,
    fc: Vec<(NodeId, NodeId)>,
    attn_v: NodeId,
    attn_u: NodeId,
    main_w: NodeId,
    main_b: NodeId,
    aux_w: NodeId,
    aux_b: NodeId,
}

/// Node ids of one bag's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BagNodes {
    pub embeddings: NodeId,
    pub scores: NodeId,
    pub attention: NodeId,
    pub pooled: NodeId,
    pub main_logits: NodeId,
    pub aux_logits: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput {
    pub main_logits: Vec<f64>,
    /// Row-major `N x C_aux`.
    pub aux_logits: TensorValue,
    pub attention: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl BagOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.main_logits)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    config: EncoderConfig,
    params: ParamSet,
    ids: LayerIds,
}

impl MilModel {
    /// Fresh model: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut weight =
            |params: &mut ParamSet, name: &str, part, shape: &[usize], fan_in: usize| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                params.insert(name, part, TensorValue::new(shape.to_vec(), data)?)
            };
        let zeros = |params: &mut ParamSet, name: &str, part, shape: &[usize]| {
            params.insert(name, part, TensorValue::zeros(shape))
        };

        use Partition::*;
        let (c1, c2) = (config.conv1, config.conv2);
        let conv1_w = weight(
            &mut params,
            "conv1.weight",
            Shared,
            &[c1.channels, 1, c1.kernel, c1.kernel],
            c1.kernel * c1.kernel,
        )?;
        let conv1_b = zeros(&mut params, "conv1.bias", Shared, &[c1.channels])?;
        let conv2_w = weight(
            &mut params,
            "conv2.weight",
            Shared,
            &[c2.channels, c1.channels, c2.kernel, c2.kernel],
            c1.channels * c2.kernel * c2.kernel,
        )?;
        let conv2_b = zeros(&mut params, "conv2.bias", Shared, &[c2.channels])?;
        let mut fc = Vec::with_capacity(config.fc.len());
        let mut fan_in = config.conv_features();
        for (i, &width) in config.fc.iter().enumerate() {
            let w = weight(
                &mut params,
                &format!("fc{}.weight", i + 1),
                Shared,
                &[fan_in, width],
                fan_in,
            )?;
            let b = zeros(&mut params, &format!("fc{}.bias", i + 1), Shared, &[width])?;
            fc.push((w, b));
            fan_in = width;
        }
        let d = config.embedding_dim();
        let l = config.attention_dim;
        let attn_v = weight(&mut params, "attention.v", MainHead, &[l, d], d)?;
        let attn_u = weight(&mut params, "attention.u", MainHead, &[l], l)?;
        let main_w = weight(
            &mut params,
            "main.weight",
            MainHead,
            &[d, config.main_classes],
            d,
        )?;
        let main_b = zeros(&mut params, "main.bias", MainHead, &[config.main_classes])?;
        let aux_w = weight(
            &mut params,
            "aux.weight",
            AuxHead,
            &[d, config.aux_classes],
            d,
        )?;
        let aux_b = zeros(&mut params, "aux.bias", AuxHead, &[config.aux_classes])?;

        Ok(Self {
            config,
            params,
            ids: LayerIds {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                fc,
                attn_v,
                attn_u,
                main_w,
                main_b,
                aux_w,
                aux_b,
            },
        })
    }

    /// Rebuilds a model around an existing parameter set, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, want), (_, got)) in template.params.iter().zip(params.iter()) {
            if want.name != got.name
                || want.partition != got.partition
                || want.value.shape() != got.value.shape()
            {
                return Err(Error::config(format!(
                    "parameter {:?} {:?} ({}) does not match expected {:?} {:?} ({})",
                    got.name,
                    got.value.shape(),
                    got.partition,
                    want.name,
                    want.value.shape(),
                    want.partition
                )));
            }
        }
        Ok(Self {
            config,
            params,
            ids: template.ids,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn ids(&self) -> &LayerIds {
        &self.ids
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, &self.params)
    }

    /// Binds an arbitrary parameter set with this model's layout (used by
    /// finite-difference checks that perturb a copy).
    pub fn bind_with(&self, g: &mut Graph, params: &ParamSet) -> BoundParams {
        let ids = &self.ids;
        BoundParams {
            conv1_w: g.param(params, ids.conv1_w),
            conv1_b: g.param(params, ids.conv1_b),
            conv2_w: g.param(params, ids.conv2_w),
            conv2_b: g.param(params, ids.conv2_b),
            fc: ids
                .fc
                .iter()
                .map(|&(w, b)| (g.param(params, w), g.param(params, b)))
                .collect(),
            attn_v: g.param(params, ids.attn_v),
            attn_u: g.param(params, ids.attn_u),
            main_w: g.param(params, ids.main_w),
            main_b: g.param(params, ids.main_b),
            aux_w: g.param(params, ids.aux_w),
            aux_b: g.param(params, ids.aux_b),
        }
    }

    /// Embeds an `(N, 1, H, W)` input node into `(N, D)`.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, input: NodeId) -> Result<NodeId> {
        let shape = g.value(input).shape().to_vec();
        let expected = [self.config.input_height, self.config.input_width];
        if shape.len() != 4 || shape[1] != 1 || shape[2..] != expected {
            return Err(Error::config(format!(
                "encoder expects (N, 1, {}, {}) input, got {shape:?}",
                expected[0], expected[1]
            )));
        }
        let n = shape[0];
        // Pooling before ReLU gives identical values and gradients (max and
        // ReLU commute) with the ReLU applied to a quarter of the elements.
        let x = g.conv2d(input, p.conv1_w, Some(p.conv1_b))?;
        let x = g.max_pool2(x)?;
        let x = g.relu(x)?;
        let x = g.conv2d(x, p.conv2_w, Some(p.conv2_b))?;
        let x = g.max_pool2(x)?;
        let x = g.relu(x)?;
        let mut x = g.reshape(x, &[n, self.config.conv_features()])?;
        for &(w, b) in &p.fc {
            let y = g.matmul(x, w)?;
            let y = g.add_bias(y, b)?;
            x = g.relu(y)?;
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, bag: &Bag) -> Result<BagNodes> {
        bag.validate()?;
        let input = g.input(bag.to_tensor(self.config.input_height, self.config.input_width)?);
        let embeddings = self.encode(g, p, input)?;
        let (scores, attention, pooled) = attention_pool(g, embeddings, p.attn_v, p.attn_u)?;
        let main = g.matmul(pooled, p.main_w)?;
        let main_logits = g.add_bias(main, p.main_b)?;
        let aux = g.matmul(embeddings, p.aux_w)?;
        let aux_logits = g.add_bias(aux, p.aux_b)?;
        Ok(BagNodes {
            embeddings,
            scores,
            attention,
            pooled,
            main_logits,
            aux_logits,
        })
    }

    /// Forward pass without keeping the graph.
    pub fn bag_forward(&self, bag: &Bag) -> Result<BagOutput> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let nodes = self.forward(&mut g, &p, bag)?;
        Ok(collect_output(&g, &nodes))
    }

    pub fn encode_instance(&self, inst: &Instance) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let input = TensorValue::new(vec![1, 1, inst.height, inst.width], inst.pixels.clone())?;
        let x = g.input(input);
        let h = self.encode(&mut g, &p, x)?;
        Ok(g.value(h).data().to_vec())
    }

    /// Attention pooling over explicit embeddings, using this model's `V` and `u`.
    pub fn attend(&self, embeddings: &TensorValue) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let h = g.input(embeddings.clone());
        let v = g.param(&self.params, self.ids.attn_v);
        let u = g.param(&self.params, self.ids.attn_u);
        let (_, a, z) = attention_pool(&mut g, h, v, u)?;
        Ok((g.value(a).data().to_vec(), g.value(z).data().to_vec()))
    }

    /// Main head applied to a pooled embedding.
    pub fn main_head(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.head(z, 1, self.ids.main_w, self.ids.main_b)
    }

    /// Aux head applied to `rows` stacked embeddings.
    pub fn aux_head(&self, h: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.head(h, rows, self.ids.aux_w, self.ids.aux_b)
    }

    fn head(&self, x: &[f64], rows: usize, w: ParamId, b: ParamId) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let d = self.config.embedding_dim();
        let xi = g.input(TensorValue::new(vec![rows, d], x.to_vec())?);
        let wi = g.param(&self.params, w);
        let bi = g.param(&self.params, b);
        let y = g.matmul(xi, wi)?;
        let y = g.add_bias(y, bi)?;
        Ok(g.value(y).data().to_vec())
    }
}

pub fn collect_output(g: &Graph, nodes: &BagNodes) -> BagOutput {
    BagOutput {
        main_logits: g.value(nodes.main_logits).data().to_vec(),
        aux_logits: g.value(nodes.aux_logits).clone(),
        attention: g.value(nodes.attention).data().to_vec(),
        embedding: g.value(nodes.pooled).data().to_vec(),
    }
}

/// `a_n = softmax_n(u . tanh(V h_n))`, `z = sum_n a_n h_n`.
///
/// `h` is `(N, D)`, `v` is `(L, D)`, `u` has length `L`. Returns the score,
/// attention `(1, N)` and pooled `(1, D)` nodes.
pub fn attention_pool(
    g: &mut Graph,
    h: NodeId,
    v: NodeId,
    u: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let (n, d) = g.value(h).dims2()?;
    let (l, d2) = g.value(v).dims2()?;
    if d != d2 || g.value(u).len() != l {
        return Err(Error::config(format!(
            "attention: embeddings {:?}, V {:?}, u {:?} do not conform",
            g.value(h).shape(),
            g.value(v).shape(),
            g.value(u).shape()
        )));
    }
    let vt = g.transpose(v)?;
    let hidden = g.matmul(h, vt)?;
    let hidden = g.tanh(hidden)?;
    let u_col = g.reshape(u, &[l, 1])?;
    let scores = g.matmul(hidden, u_col)?;
    let scores = g.reshape(scores, &[1, n])?;
    let a = g.softmax(scores)?;
    let z = g.matmul(a, h)?;
    Ok((scores, a, z))
}

/// Cross-entropy of the bag logits against the bag label.
pub fn main_loss(g: &mut Graph, main_logits: NodeId, bag_label: usize) -> Result<NodeId> {
    let c = g.value(main_logits).len();
    let logits = g.reshape(main_logits, &[1, c])?;
    g.cross_entropy(logits, &[bag_label])
}

/// Mean per-instance cross-entropy of the aux logits.
pub fn aux_loss(g: &mut Graph, aux_logits: NodeId, aux_labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy(aux_logits, aux_labels)
}
