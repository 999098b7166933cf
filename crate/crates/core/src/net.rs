//! Cascaded multi-task backbone.
//!
//! A downsampling stem feeds a chain of identical blocks. Each block runs a
//! shared encoder over the stem features concatenated with the previous
//! block's fused map, splits into heatmap, segmentation, and orientation
//! decoders, and fuses the three pre-output decoder features through a task
//! attention module (or a plain concat + conv baseline). One regressor head,
//! whose weights every block references, turns each fused map into hand,
//! rigid-pose, and focal parameters. [`Trainer`] couples the whole thing to
//! the loss module: map supervision on every stack, geometric supervision on
//! every stack's regressed parameters, and render/decode consistency terms
//! for samples without ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project_graph, CameraIntrinsics};
use crate::encodings::{soft_argmax_graph, SkeletonHierarchy};
use crate::error::{Error, Result};
use crate::fit::{adam_step, AdamState, FitState};
use crate::graph::{conv2d_out_dims, GradStore, Graph, NodeId, Values};
use crate::hand::{
    bone_directions_graph, build_skin_graph, keypoints21_graph, rodrigues_graph, HandModelData,
    HandParams, ARTICULATED_COUNT, KEYPOINT_COUNT, SHAPE_COEFFS,
};
use crate::loss::{
    bone_direction_term, keypoint2d_term, ssl_terms, term, LossReport, LossTerms, LossWeights,
    SslDetach,
};
use crate::render::silhouette_graph;
use crate::tensor::{read_hkt, write_hkt, Tensor};
use crate::Real;

/// The three decoder branches every block carries.
const TASKS: usize = 3;
const TASK_NAMES: [&str; TASKS] = ["hm", "mask", "pof"];

/// Regressed parameter vector: articulation, shape, rotation, translation,
/// focal.
pub const REGRESSED_DIM: usize = ARTICULATED_COUNT * 3 + SHAPE_COEFFS + 3 + 3 + 1;

/// Hidden width of the regressor head's first fully-connected layer.
const HEAD_HIDDEN: usize = 64;

/// Focal floor and softplus scale for the regressed focal length (pixels).
const F_MIN: f64 = 32.0;
const F_SCALE: f64 = 128.0;

/// Depth floor for the regressed translation z (meters).
const TZ_MIN: f64 = 0.05;

const MANIFEST_NAME: &str = "net_manifest.json";
const MANIFEST_FORMAT: &str = "handkit-net";
const MANIFEST_VERSION: u32 = 1;

/// Canonical reporting order for loss terms aggregated over a batch.
const TERM_ORDER: [&str; 10] = [
    term::HM,
    term::POF,
    term::SEG,
    term::BONE3D,
    term::KPT2D,
    term::MASK,
    term::CONS_MASK,
    term::CONS_POSE,
    term::REG_BETA,
    term::REG_THETA,
];

/// Network geometry. Defaults describe the full toy scale; tests shrink it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of cascaded blocks.
    pub stacks: usize,
    /// Channel width shared by encoder and decoders.
    pub channels: usize,
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub map_height: usize,
    pub map_width: usize,
    /// Heatmap channels.
    pub keypoints: usize,
    /// Orientation-field channels (three per bone).
    pub pof_channels: usize,
    /// Segmentation logit channels.
    pub mask_channels: usize,
    /// Channel-to-descriptor reduction ratio of the attention module.
    pub tam_reduction: usize,
    /// Attentive fusion when true; concat + 3x3 conv baseline when false.
    pub tam: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stacks: 2,
            channels: 32,
            in_channels: 3,
            input_height: 128,
            input_width: 128,
            map_height: 32,
            map_width: 32,
            keypoints: KEYPOINT_COUNT,
            pof_channels: 60,
            mask_channels: 2,
            tam_reduction: 4,
            tam: true,
        }
    }
}

impl NetConfig {
    pub const MAX_STACKS: usize = 8;

    /// Width of the pooled task descriptor after reduction.
    pub fn descriptor_dim(&self) -> usize {
        self.channels / self.tam_reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks == 0 || self.stacks > Self::MAX_STACKS {
            return Err(Error::Config(format!(
                "stacks must lie in 1..={}, got {}",
                Self::MAX_STACKS,
                self.stacks
            )));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("in_channels", self.in_channels),
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("map_height", self.map_height),
            ("map_width", self.map_width),
            ("keypoints", self.keypoints),
            ("mask_channels", self.mask_channels),
            ("tam_reduction", self.tam_reduction),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.channels % self.tam_reduction != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by tam_reduction {}",
                self.channels, self.tam_reduction
            )));
        }
        if self.tam && self.descriptor_dim() < 4 {
            return Err(Error::Config(format!(
                "task descriptor dimension {} below the minimum of 4",
                self.descriptor_dim()
            )));
        }
        if self.pof_channels == 0 || self.pof_channels % 3 != 0 {
            return Err(Error::Config(format!(
                "pof_channels must be a positive multiple of 3, got {}",
                self.pof_channels
            )));
        }
        if self.mask_channels != 2 {
            return Err(Error::Config(format!(
                "mask branch emits two-class logits, got {} channels",
                self.mask_channels
            )));
        }
        let (h1, w1) = conv2d_out_dims(self.input_height, self.input_width, 7, 7, 2, 3)?;
        let (h2, w2) = conv2d_out_dims(h1, w1, 7, 7, 2, 3)?;
        if (h2, w2) != (self.map_height, self.map_width) {
            return Err(Error::Config(format!(
                "stem maps {}x{} input to {h2}x{w2}, config wants {}x{} maps",
                self.input_height, self.input_width, self.map_height, self.map_width
            )));
        }
        Ok(())
    }
}

fn name_hash(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Canonical parameter listing for a configuration: name and shape, in the
/// order the forward pass first touches them. The head entries appear once
/// regardless of stack count.
fn param_spec(config: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.channels;
    let mut out = vec![
        ("stem.c1.w".to_string(), vec![c, config.in_channels, 7, 7]),
        ("stem.c1.b".to_string(), vec![c]),
        ("stem.c2.w".to_string(), vec![c, c, 7, 7]),
        ("stem.c2.b".to_string(), vec![c]),
    ];
    for s in 0..config.stacks {
        let p = |suffix: String| format!("stack{s}.{suffix}");
        out.push((p("enc.c1.w".into()), vec![c, 2 * c, 3, 3]));
        out.push((p("enc.c1.b".into()), vec![c]));
        for layer in ["c2", "c3"] {
            out.push((p(format!("enc.{layer}.w")), vec![c, c, 3, 3]));
            out.push((p(format!("enc.{layer}.b")), vec![c]));
        }
        let widths = [config.keypoints, config.mask_channels, config.pof_channels];
        for (task, ch) in TASK_NAMES.iter().zip(widths) {
            for layer in ["c1", "c2"] {
                out.push((p(format!("dec.{task}.{layer}.w")), vec![c, c, 3, 3]));
                out.push((p(format!("dec.{task}.{layer}.b")), vec![c]));
            }
            out.push((p(format!("dec.{task}.out.w")), vec![ch, c, 1, 1]));
            out.push((p(format!("dec.{task}.out.b")), vec![ch]));
        }
        if config.tam {
            let d = config.descriptor_dim();
            out.push((p("tam.reduce.w".into()), vec![d, TASKS * c]));
            out.push((p("tam.reduce.b".into()), vec![d]));
            for task in TASK_NAMES {
                out.push((p(format!("tam.{task}.w")), vec![c, d]));
                out.push((p(format!("tam.{task}.b")), vec![c]));
            }
        } else {
            out.push((p("fuse.w".into()), vec![c, TASKS * c, 3, 3]));
            out.push((p("fuse.b".into()), vec![c]));
        }
    }
    out.push(("head.fc1.w".into(), vec![HEAD_HIDDEN, c]));
    out.push(("head.fc1.b".into(), vec![HEAD_HIDDEN]));
    out.push(("head.fc2.w".into(), vec![REGRESSED_DIM, HEAD_HIDDEN]));
    out.push(("head.fc2.b".into(), vec![REGRESSED_DIM]));
    out
}

fn init_tensor<T: Real>(name: &str, shape: &[usize], seed: u64) -> Tensor<T> {
    if name.ends_with(".b") {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let mut bound = (6.0 / fan_in.max(1) as f64).sqrt();
    if name == "head.fc2.w" {
        // keep the initial regressed parameters near neutral: articulation
        // close to zero, depth and focal near their softplus anchors
        bound *= 0.05;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

/// Every learnable tensor, keyed by a stable dotted name. Each tensor's
/// initial values depend only on its name and the seed, so shared prefixes
/// across different stack counts hold identical values.
#[derive(Debug, Clone)]
pub struct NetParams<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> NetParams<T> {
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = param_spec(config)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, seed);
                (name, t)
            })
            .collect();
        Ok(NetParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Declares each parameter as a graph leaf on first use and memoizes the
/// node, so every later reference (a head shared across stacks, say) resolves
/// to the same leaf.
struct NodeBank<'p, T: Real> {
    params: &'p NetParams<T>,
    nodes: BTreeMap<String, NodeId>,
}

impl<'p, T: Real> NodeBank<'p, T> {
    fn new(params: &'p NetParams<T>) -> Self {
        NodeBank { params, nodes: BTreeMap::new() }
    }

    fn node(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Model(format!("network parameters are missing '{name}'")))?;
        let id = g.param(name, t.shape());
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn bind_all(&self, g: &Graph<T>, values: &mut Values<T>) -> Result<()> {
        for (name, &id) in &self.nodes {
            values.bind(g, id, self.params.get(name).expect("declared from params").clone())?;
        }
        Ok(())
    }

    fn into_nodes(self) -> BTreeMap<String, NodeId> {
        self.nodes
    }
}

/// Two stride-2 7x7 convolutions with relu, quartering the spatial dims.
pub fn stem_graph<T: Real>(
    g: &mut Graph<T>,
    image: NodeId,
    c1_w: NodeId,
    c1_b: NodeId,
    c2_w: NodeId,
    c2_b: NodeId,
) -> Result<NodeId> {
    let x = g.conv2d(image, c1_w, c1_b, 2, 3)?;
    let x = g.relu(x);
    let x = g.conv2d(x, c2_w, c2_b, 2, 3)?;
    Ok(g.relu(x))
}

/// Attentive fusion of task feature maps, returning `(fused, weights)` where
/// `weights` is the `[N,C]` softmax matrix (tasks down the rows).
///
/// Each map is pooled to a channel descriptor; the concatenated descriptors
/// reduce to a compact code, which expands to per-task channel logits. A
/// softmax across tasks turns those into convex per-channel weights, and the
/// output is the weight-blended sum of the input maps.
pub fn tam_fuse_weighted<T: Real>(
    g: &mut Graph<T>,
    features: &[NodeId],
    reduce_w: NodeId,
    reduce_b: NodeId,
    expand: &[(NodeId, NodeId)],
) -> Result<(NodeId, NodeId)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Config(format!("task fusion needs at least two feature maps, got {n}")));
    }
    if expand.len() != n {
        return Err(Error::Config(format!(
            "got {} expand transforms for {n} task features",
            expand.len()
        )));
    }
    let shape = g.shape(features[0]).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "tam_fuse".into(),
            detail: format!("features must be [C,H,W], got {shape:?}"),
        });
    }
    for &f in &features[1..] {
        if g.shape(f) != shape {
            return Err(Error::Shape {
                op: "tam_fuse".into(),
                detail: format!("feature shapes differ: {:?} vs {shape:?}", g.shape(f)),
            });
        }
    }
    let c = shape[0];
    let mut descs = Vec::with_capacity(n);
    for &f in features {
        descs.push(g.global_avg_pool(f)?);
    }
    let cat = g.concat(&descs, 0)?;
    let red = g.linear(cat, reduce_w, reduce_b)?;
    let red = g.relu(red);
    let mut rows = Vec::with_capacity(n);
    for &(w, b) in expand {
        let logits = g.linear(red, w, b)?;
        rows.push(g.reshape(logits, &[1, c])?);
    }
    let stacked = g.concat(&rows, 0)?;
    let weights = g.softmax(stacked, 0)?;
    let mut acc: Option<NodeId> = None;
    for (t, &f) in features.iter().enumerate() {
        let row = g.slice(weights, 0, t, 1)?;
        let col = g.reshape(row, &[c, 1, 1])?;
        let part = g.mul(col, f)?;
        acc = Some(match acc {
            None => part,
            Some(a) => g.add(a, part)?,
        });
    }
    Ok((acc.expect("n >= 2"), weights))
}

/// [`tam_fuse_weighted`] without the weight matrix.
pub fn tam_fuse<T: Real>(
    g: &mut Graph<T>,
    features: &[NodeId],
    reduce_w: NodeId,
    reduce_b: NodeId,
    expand: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    Ok(tam_fuse_weighted(g, features, reduce_w, reduce_b, expand)?.0)
}

/// Node handles for one stack's regressed parameters.
#[derive(Debug, Clone, Copy)]
pub struct RegressedNodes {
    /// `[15,3]` axis-angle articulation.
    pub theta: NodeId,
    /// `[10]` shape coefficients.
    pub beta: NodeId,
    /// `[3]` global axis-angle rotation.
    pub rotation: NodeId,
    /// `[3]` translation; z is `0.05 + softplus(raw)`.
    pub translation: NodeId,
    /// Scalar focal length, `32 + softplus(raw) * 128`.
    pub focal: NodeId,
}

/// Pool, two fully-connected layers with a relu between, and a split of the
/// 62 outputs into parameter blocks. Depth and focal pass through softplus
/// floors so the hand stays in front of the camera from the first step.
pub fn regressor_head<T: Real>(
    g: &mut Graph<T>,
    fused: NodeId,
    fc1_w: NodeId,
    fc1_b: NodeId,
    fc2_w: NodeId,
    fc2_b: NodeId,
) -> Result<RegressedNodes> {
    let desc = g.global_avg_pool(fused)?;
    let h = g.linear(desc, fc1_w, fc1_b)?;
    let h = g.relu(h);
    let raw = g.linear(h, fc2_w, fc2_b)?;
    if g.shape(raw) != [REGRESSED_DIM] {
        return Err(Error::Shape {
            op: "regressor_head".into(),
            detail: format!("head must emit [{REGRESSED_DIM}], got {:?}", g.shape(raw)),
        });
    }
    let nt = ARTICULATED_COUNT * 3;
    let theta = {
        let s = g.slice(raw, 0, 0, nt)?;
        g.reshape(s, &[ARTICULATED_COUNT, 3])?
    };
    let beta = g.slice(raw, 0, nt, SHAPE_COEFFS)?;
    let rotation = g.slice(raw, 0, nt + SHAPE_COEFFS, 3)?;
    let t_xy = g.slice(raw, 0, nt + SHAPE_COEFFS + 3, 2)?;
    let tz = {
        let r = g.slice(raw, 0, nt + SHAPE_COEFFS + 5, 1)?;
        let sp = g.softplus(r);
        let floor = g.scalar(T::from_f64(TZ_MIN));
        g.add(floor, sp)?
    };
    let translation = g.concat(&[t_xy, tz], 0)?;
    let focal = {
        let r = g.slice(raw, 0, nt + SHAPE_COEFFS + 6, 1)?;
        let r = g.reshape(r, &[])?;
        let sp = g.softplus(r);
        let scale = g.scalar(T::from_f64(F_SCALE));
        let scaled = g.mul(scale, sp)?;
        let floor = g.scalar(T::from_f64(F_MIN));
        g.add(floor, scaled)?
    };
    Ok(RegressedNodes { theta, beta, rotation, translation, focal })
}

/// Node handles for one stack's outputs.
#[derive(Debug, Clone)]
pub struct StackNodes {
    /// `[K,H,W]`, sigmoid-activated.
    pub heatmaps: NodeId,
    /// `[2,H,W]` raw logits, channel 1 foreground.
    pub mask_logits: NodeId,
    /// `[3B,H,W]` raw regression maps.
    pub pof: NodeId,
    /// `[C,H,W]` fused features feeding the next stack and the head.
    pub fused: NodeId,
    pub regressed: RegressedNodes,
}

fn conv_relu<T: Real>(
    g: &mut Graph<T>,
    bank: &mut NodeBank<'_, T>,
    x: NodeId,
    name: &str,
    pad: usize,
) -> Result<NodeId> {
    let w = bank.node(g, &format!("{name}.w"))?;
    let b = bank.node(g, &format!("{name}.b"))?;
    let y = g.conv2d(x, w, b, 1, pad)?;
    Ok(g.relu(y))
}

fn conv_plain<T: Real>(
    g: &mut Graph<T>,
    bank: &mut NodeBank<'_, T>,
    x: NodeId,
    name: &str,
    pad: usize,
) -> Result<NodeId> {
    let w = bank.node(g, &format!("{name}.w"))?;
    let b = bank.node(g, &format!("{name}.b"))?;
    g.conv2d(x, w, b, 1, pad)
}

/// One block: encoder over stem + previous fused features, three decoders,
/// fusion, and the shared head. `prev_fused` of `None` means the first
/// block's zero features.
fn mtl_block<T: Real>(
    g: &mut Graph<T>,
    bank: &mut NodeBank<'_, T>,
    config: &NetConfig,
    stack: usize,
    stem_features: NodeId,
    prev_fused: Option<NodeId>,
) -> Result<StackNodes> {
    let c = config.channels;
    let prev = match prev_fused {
        Some(n) => n,
        None => g.constant(Tensor::zeros(&[c, config.map_height, config.map_width])),
    };
    let x = g.concat(&[stem_features, prev], 0)?;
    let p = |suffix: String| format!("stack{stack}.{suffix}");
    let mut e = conv_relu(g, bank, x, &p("enc.c1".into()), 1)?;
    e = conv_relu(g, bank, e, &p("enc.c2".into()), 1)?;
    e = conv_relu(g, bank, e, &p("enc.c3".into()), 1)?;
    let mut feats = Vec::with_capacity(TASKS);
    let mut outs = Vec::with_capacity(TASKS);
    for task in TASK_NAMES {
        let f = conv_relu(g, bank, e, &p(format!("dec.{task}.c1")), 1)?;
        let f = conv_relu(g, bank, f, &p(format!("dec.{task}.c2")), 1)?;
        let o = conv_plain(g, bank, f, &p(format!("dec.{task}.out")), 0)?;
        feats.push(f);
        outs.push(o);
    }
    let heatmaps = g.sigmoid(outs[0]);
    let mask_logits = outs[1];
    let pof = outs[2];
    let fused = if config.tam {
        let rw = bank.node(g, &p("tam.reduce.w".into()))?;
        let rb = bank.node(g, &p("tam.reduce.b".into()))?;
        let mut expand = Vec::with_capacity(TASKS);
        for task in TASK_NAMES {
            let w = bank.node(g, &p(format!("tam.{task}.w")))?;
            let b = bank.node(g, &p(format!("tam.{task}.b")))?;
            expand.push((w, b));
        }
        tam_fuse(g, &feats, rw, rb, &expand)?
    } else {
        let cat = g.concat(&feats, 0)?;
        conv_plain(g, bank, cat, &p("fuse".into()), 1)?
    };
    let regressed = {
        let w1 = bank.node(g, "head.fc1.w")?;
        let b1 = bank.node(g, "head.fc1.b")?;
        let w2 = bank.node(g, "head.fc2.w")?;
        let b2 = bank.node(g, "head.fc2.b")?;
        regressor_head(g, fused, w1, b1, w2, b2)?
    };
    Ok(StackNodes { heatmaps, mask_logits, pof, fused, regressed })
}

fn build_stacks<T: Real>(
    g: &mut Graph<T>,
    bank: &mut NodeBank<'_, T>,
    config: &NetConfig,
    image: NodeId,
) -> Result<Vec<StackNodes>> {
    let stem = {
        let c1w = bank.node(g, "stem.c1.w")?;
        let c1b = bank.node(g, "stem.c1.b")?;
        let c2w = bank.node(g, "stem.c2.w")?;
        let c2b = bank.node(g, "stem.c2.b")?;
        stem_graph(g, image, c1w, c1b, c2w, c2b)?
    };
    let mut stacks = Vec::with_capacity(config.stacks);
    let mut prev = None;
    for s in 0..config.stacks {
        let nodes = mtl_block(g, bank, config, s, stem, prev)?;
        prev = Some(nodes.fused);
        stacks.push(nodes);
    }
    Ok(stacks)
}

/// The full forward program with its parameter bindings.
pub struct NetGraph<T: Real> {
    pub graph: Graph<T>,
    pub values: Values<T>,
    pub image: NodeId,
    pub stacks: Vec<StackNodes>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Real> NetGraph<T> {
    /// Builds the graph and binds every parameter. The image is bound
    /// separately via [`NetGraph::bind_image`].
    pub fn build(config: &NetConfig, params: &NetParams<T>) -> Result<Self> {
        config.validate()?;
        let mut g: Graph<T> = Graph::new();
        let image =
            g.input("image", &[config.in_channels, config.input_height, config.input_width]);
        let mut bank = NodeBank::new(params);
        let stacks = build_stacks(&mut g, &mut bank, config, image)?;
        let mut values = Values::new(&g);
        bank.bind_all(&g, &mut values)?;
        Ok(NetGraph { graph: g, values, image, stacks, params: bank.into_nodes() })
    }

    /// Parameter name to leaf node map. Exactly one entry per distinct
    /// tensor; the head's four entries appear once however many stacks there
    /// are.
    pub fn param_nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    pub fn bind_image(&mut self, image: &Tensor<T>) -> Result<()> {
        self.values.bind(&self.graph, self.image, image.clone())
    }

    /// Snapshots every stack's outputs after a forward pass.
    pub fn outputs(&self) -> Result<Vec<StackOutput<T>>> {
        let take = |id: NodeId| -> Result<Tensor<T>> {
            self.values
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Graph("forward pass has not run".into()))
        };
        let mut out = Vec::with_capacity(self.stacks.len());
        for s in &self.stacks {
            out.push(StackOutput {
                heatmaps: take(s.heatmaps)?,
                mask_logits: take(s.mask_logits)?,
                pof: take(s.pof)?,
                theta: take(s.regressed.theta)?,
                beta: take(s.regressed.beta)?,
                rotation: take(s.regressed.rotation)?,
                translation: take(s.regressed.translation)?,
                focal: take(s.regressed.focal)?.data()[0].to_f64(),
            });
        }
        Ok(out)
    }
}

/// One stack's evaluated outputs.
#[derive(Debug, Clone)]
pub struct StackOutput<T: Real> {
    pub heatmaps: Tensor<T>,
    pub mask_logits: Tensor<T>,
    pub pof: Tensor<T>,
    /// `[15,3]`
    pub theta: Tensor<T>,
    /// `[10]`
    pub beta: Tensor<T>,
    /// `[3]`
    pub rotation: Tensor<T>,
    /// `[3]`
    pub translation: Tensor<T>,
    pub focal: f64,
}

impl<T: Real> StackOutput<T> {
    /// The regressed parameters in the fitter's state layout.
    pub fn fit_state(&self) -> FitState {
        let mut params = HandParams::zero();
        for (dst, v) in params.beta.iter_mut().zip(self.beta.data()) {
            *dst = v.to_f64();
        }
        let td = self.theta.data();
        for (j, row) in params.theta.iter_mut().enumerate() {
            *row = [td[3 * j].to_f64(), td[3 * j + 1].to_f64(), td[3 * j + 2].to_f64()];
        }
        let r = self.rotation.data();
        let t = self.translation.data();
        FitState {
            params,
            rotation: [r[0].to_f64(), r[1].to_f64(), r[2].to_f64()],
            translation: [t[0].to_f64(), t[1].to_f64(), t[2].to_f64()],
            focal: self.focal,
        }
    }
}

/// Runs the network on one image, returning every stack's outputs in cascade
/// order.
pub fn forward<T: Real>(
    image: &Tensor<T>,
    config: &NetConfig,
    params: &NetParams<T>,
) -> Result<Vec<StackOutput<T>>> {
    let mut ng = NetGraph::build(config, params)?;
    ng.bind_image(image)?;
    ng.graph.forward(&mut ng.values)?;
    ng.outputs()
}

#[derive(Debug, Serialize, Deserialize)]
struct NetManifest {
    format: String,
    version: u32,
    config: NetConfig,
    tensors: Vec<String>,
}

/// Writes `net_manifest.json` plus one HKT tensor file per parameter.
pub fn save_checkpoint(dir: &Path, config: &NetConfig, params: &NetParams<f64>) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let expected = param_spec(config);
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Model(format!("network parameters are missing '{name}'")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "save_checkpoint".into(),
                detail: format!("'{name}' wants {shape:?}, got {:?}", t.shape()),
            });
        }
        write_hkt(&dir.join(format!("{name}.hkt")), t)?;
    }
    let manifest = NetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config: config.clone(),
        tensors: expected.into_iter().map(|(n, _)| n).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// Loads a checkpoint directory, verifying the manifest and every tensor
/// shape against the configuration it declares.
pub fn load_checkpoint(dir: &Path) -> Result<(NetConfig, NetParams<f64>)> {
    let raw = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: NetManifest = serde_json::from_str(&raw)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!(
            "expected a '{MANIFEST_FORMAT}' manifest, got '{}'",
            manifest.format
        )));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let expected = param_spec(&manifest.config);
    let names: Vec<String> = expected.iter().map(|(n, _)| n.clone()).collect();
    let mut listed = manifest.tensors.clone();
    listed.sort();
    let mut want = names.clone();
    want.sort();
    if listed != want {
        return Err(Error::Format("manifest tensor list does not match its config".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in expected {
        let t: Tensor<f64> = read_hkt(&dir.join(format!("{name}.hkt")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, manifest config wants {shape:?}",
                t.shape()
            )));
        }
        tensors.insert(name, t);
    }
    Ok((manifest.config, NetParams { tensors }))
}

/// Which decoder branches (and their coupled objective terms) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSet {
    /// Heatmap branch, keypoint reprojection, pose consistency.
    pub pose: bool,
    /// Segmentation branch, mask consistency.
    pub mask: bool,
    /// Orientation branch, bone directions, parameter priors.
    pub mesh: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        TaskSet::all()
    }
}

impl TaskSet {
    pub fn all() -> Self {
        TaskSet { pose: true, mask: true, mesh: true }
    }

    /// Parses a comma-separated subset such as `"pose,mask"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut set = TaskSet { pose: false, mask: false, mesh: false };
        for part in spec.split(',') {
            match part.trim() {
                "pose" => set.pose = true,
                "mask" => set.mask = true,
                "mesh" => set.mesh = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown task '{other}' (expected pose, mask, mesh)"
                    )))
                }
            }
        }
        if set == (TaskSet { pose: false, mask: false, mesh: false }) {
            return Err(Error::Config("task set selects nothing".into()));
        }
        Ok(set)
    }
}

/// Ground truth for one supervised sample. Map tensors live at map
/// resolution; keypoints in full-image pixels; bone directions in the camera
/// frame.
#[derive(Debug, Clone)]
pub struct TrainTarget {
    /// `[K,mh,mw]`
    pub heatmaps: Tensor<f64>,
    /// `[3B,mh,mw]`
    pub pof: Tensor<f64>,
    /// `[mh,mw]` foreground coverage in [0,1].
    pub mask: Tensor<f64>,
    /// `[21,2]`
    pub kpts2d: Tensor<f64>,
    /// `[20,3]` unit directions.
    pub bone_dirs: Tensor<f64>,
}

/// One training sample. `gt: None` marks an unlabeled sample trained purely
/// through the consistency terms.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// `[3,H,W]` in [0,1].
    pub image: Tensor<f64>,
    pub gt: Option<TrainTarget>,
}

/// Knobs of [`Trainer`] that shape the objective graph.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub tasks: TaskSet,
    /// Soft-render sharpness for the consistency silhouette, in map pixels.
    pub sharpness: f64,
    pub detach: SslDetach,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { tasks: TaskSet::all(), sharpness: 1.0, detach: SslDetach::default() }
    }
}

/// Adam over the whole parameter set, one moment pair per tensor.
#[derive(Debug, Clone)]
pub struct NetOptimizer {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    states: BTreeMap<String, AdamState>,
}

impl NetOptimizer {
    pub fn new(learning_rate: f64) -> Self {
        NetOptimizer {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            states: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One objective graph (supervised or consistency flavor) with its bindings.
struct TrainGraph {
    graph: Graph<f64>,
    values: Values<f64>,
    params: BTreeMap<String, NodeId>,
    image: NodeId,
    gt_heatmaps: Option<NodeId>,
    gt_pof: Option<NodeId>,
    gt_mask: Option<NodeId>,
    gt_kpts: Option<NodeId>,
    gt_dirs: Option<NodeId>,
    weight_nodes: Vec<(&'static str, NodeId)>,
    /// Per-stack heatmap error nodes (supervised graphs with the pose task).
    stack_hm: Vec<NodeId>,
    terms: LossTerms,
    total: NodeId,
}

/// Accumulates same-named term nodes by addition, preserving first-seen
/// order.
#[derive(Default)]
struct TermAcc {
    entries: Vec<(&'static str, NodeId)>,
}

impl TermAcc {
    fn add(&mut self, g: &mut Graph<f64>, name: &'static str, node: NodeId) -> Result<()> {
        if let Some(e) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            e.1 = g.add(e.1, node)?;
        } else {
            self.entries.push((name, node));
        }
        Ok(())
    }

    fn into_terms(self) -> LossTerms {
        let mut t = LossTerms::new();
        for (name, node) in self.entries {
            t.push(name, node);
        }
        t
    }
}

fn map_to_image_px(g: &mut Graph<f64>, decoded: NodeId, config: &NetConfig) -> Result<NodeId> {
    let sx = config.input_width as f64 / config.map_width as f64;
    let sy = config.input_height as f64 / config.map_height as f64;
    let scale = g.constant(Tensor::new(&[1, 2], vec![sx, sy])?);
    let offset = g.constant(Tensor::new(&[1, 2], vec![0.5 * sx - 0.5, 0.5 * sy - 0.5])?);
    let m = g.mul(decoded, scale)?;
    g.add(m, offset)
}

/// Skins one stack's regressed parameters and returns (skin, camera-frame
/// keypoint projection) as needed by the geometric terms.
struct StackGeometry {
    skin: crate::hand::SkinOutput,
    kpts: Option<NodeId>,
    proj_px: Option<NodeId>,
}

fn stack_geometry(
    g: &mut Graph<f64>,
    model: &HandModelData,
    reg: &RegressedNodes,
    intr: &CameraIntrinsics,
    with_kpts: bool,
) -> Result<StackGeometry> {
    let skin = build_skin_graph(g, model, reg.beta, reg.theta)?;
    if !with_kpts {
        return Ok(StackGeometry { skin, kpts: None, proj_px: None });
    }
    let kpts = keypoints21_graph(g, model, &skin)?;
    let proj = project_graph(g, kpts, reg.rotation, reg.translation, reg.focal, intr.p0, intr.q0)?;
    Ok(StackGeometry { skin, kpts: Some(kpts), proj_px: Some(proj.pixels) })
}

fn build_train_graph(
    config: &NetConfig,
    model: &HandModelData,
    options: &TrainOptions,
    params: &NetParams<f64>,
    supervised: bool,
) -> Result<TrainGraph> {
    let t = options.tasks;
    let skeleton = SkeletonHierarchy::hand();
    let (mh, mw) = (config.map_height, config.map_width);
    let intr = CameraIntrinsics::from_image(config.input_width, config.input_height, 1.0)?;

    let mut g: Graph<f64> = Graph::new();
    let image = g.input("image", &[config.in_channels, config.input_height, config.input_width]);
    let mut bank = NodeBank::new(params);
    let stacks = build_stacks(&mut g, &mut bank, config, image)?;
    let mut acc = TermAcc::default();
    let mut stack_hm = Vec::new();
    let (mut gt_heatmaps, mut gt_pof, mut gt_mask, mut gt_kpts, mut gt_dirs) =
        (None, None, None, None, None);

    if supervised {
        if t.pose {
            gt_heatmaps = Some(g.input("gt_heatmaps", &[config.keypoints, mh, mw]));
            gt_kpts = Some(g.input("gt_kpts", &[KEYPOINT_COUNT, 2]));
        }
        if t.mask {
            gt_mask = Some(g.input("gt_mask", &[mh, mw]));
        }
        if t.mesh {
            gt_pof = Some(g.input("gt_pof", &[config.pof_channels, mh, mw]));
            gt_dirs = Some(g.input("gt_dirs", &[skeleton.bones.len(), 3]));
        }
        // map supervision on every stack
        for s in &stacks {
            if let Some(gt) = gt_heatmaps {
                let e = g.mse(s.heatmaps, gt)?;
                stack_hm.push(e);
                acc.add(&mut g, term::HM, e)?;
            }
            if let Some(gt) = gt_pof {
                let e = g.mse(s.pof, gt)?;
                acc.add(&mut g, term::POF, e)?;
            }
            if let Some(gt) = gt_mask {
                let e = g.mask_cross_entropy(s.mask_logits, gt)?;
                acc.add(&mut g, term::SEG, e)?;
            }
        }
        // geometric supervision on every stack's regressed parameters
        if t.pose || t.mesh {
            for s in &stacks {
                let geo = stack_geometry(&mut g, model, &s.regressed, &intr, t.pose)?;
                if let (Some(px), Some(gt)) = (geo.proj_px, gt_kpts) {
                    let (name, node) =
                        keypoint2d_term(&mut g, px, gt, config.input_width as f64)?;
                    acc.add(&mut g, name, node)?;
                }
                if t.mesh {
                    let kpts = match geo.kpts {
                        Some(k) => k,
                        None => keypoints21_graph(&mut g, model, &geo.skin)?,
                    };
                    let dirs_hand = bone_directions_graph(&mut g, kpts, &skeleton)?;
                    // observed directions live in the camera frame
                    let rot = rodrigues_graph(&mut g, s.regressed.rotation)?;
                    let rot_t = g.transpose2d(rot)?;
                    let dirs = g.matmul(dirs_hand, rot_t)?;
                    let (name, node) = bone_direction_term(&mut g, dirs, gt_dirs.unwrap())?;
                    acc.add(&mut g, name, node)?;
                    let bsq = g.square(s.regressed.beta);
                    let reg_b = g.sum_all(bsq);
                    acc.add(&mut g, term::REG_BETA, reg_b)?;
                    let tsq = g.square(s.regressed.theta);
                    let reg_t = g.sum_all(tsq);
                    acc.add(&mut g, term::REG_THETA, reg_t)?;
                }
            }
        }
    } else {
        // consistency terms between the final stack's regressed parameters
        // and its own map outputs; no ground truth enters this graph
        let s = stacks.last().expect("stacks >= 1");
        let mut rendered_fg: Option<(NodeId, NodeId)> = None;
        let mut proj_decoded: Option<(NodeId, NodeId)> = None;
        if t.pose || t.mask {
            let geo = stack_geometry(&mut g, model, &s.regressed, &intr, t.pose)?;
            if t.pose {
                if config.keypoints != KEYPOINT_COUNT {
                    return Err(Error::Config(format!(
                        "pose consistency needs {KEYPOINT_COUNT} heatmap channels, got {}",
                        config.keypoints
                    )));
                }
                let decoded_map = soft_argmax_graph(&mut g, s.heatmaps)?;
                let decoded = map_to_image_px(&mut g, decoded_map, config)?;
                proj_decoded = Some((geo.proj_px.expect("with_kpts"), decoded));
            }
            if t.mask {
                let scale = mw as f64 / config.input_width as f64;
                let scaled = intr.scaled(scale);
                let focal_scaled = {
                    let sc = g.scalar(scale);
                    g.mul(sc, s.regressed.focal)?
                };
                let vproj = project_graph(
                    &mut g,
                    geo.skin.vertices,
                    s.regressed.rotation,
                    s.regressed.translation,
                    focal_scaled,
                    scaled.p0,
                    scaled.q0,
                )?;
                let rendered =
                    silhouette_graph(&mut g, vproj.pixels, &model.faces, mw, mh, options.sharpness)?;
                let sm = g.softmax(s.mask_logits, 0)?;
                let fg_ch = g.slice(sm, 0, 1, 1)?;
                let fg = g.reshape(fg_ch, &[mh, mw])?;
                rendered_fg = Some((rendered, fg));
            }
        }
        let hold = |g: &mut Graph<f64>, n: NodeId, stop: bool| if stop { g.detach(n) } else { n };
        match (rendered_fg, proj_decoded) {
            (Some((rendered, fg)), Some((proj, decoded))) => {
                let terms = ssl_terms(
                    &mut g,
                    rendered,
                    fg,
                    proj,
                    decoded,
                    config.input_width as f64,
                    options.detach,
                )?;
                for &(name, node) in terms.entries() {
                    acc.add(&mut g, name, node)?;
                }
            }
            (Some((rendered, fg)), None) => {
                let r = hold(&mut g, rendered, options.detach.detach_regressor);
                let f = hold(&mut g, fg, options.detach.detach_backbone);
                let e = g.mse(r, f)?;
                acc.add(&mut g, term::CONS_MASK, e)?;
            }
            (None, Some((proj, decoded))) => {
                let p = hold(&mut g, proj, options.detach.detach_regressor);
                let d = hold(&mut g, decoded, options.detach.detach_backbone);
                let (_, node) = keypoint2d_term(&mut g, p, d, config.input_width as f64)?;
                acc.add(&mut g, term::CONS_POSE, node)?;
            }
            (None, None) => {}
        }
        if t.mesh {
            let bsq = g.square(s.regressed.beta);
            let reg_b = g.sum_all(bsq);
            acc.add(&mut g, term::REG_BETA, reg_b)?;
            let tsq = g.square(s.regressed.theta);
            let reg_t = g.sum_all(tsq);
            acc.add(&mut g, term::REG_THETA, reg_t)?;
        }
    }

    let terms = acc.into_terms();
    // weights enter as scalar inputs so one graph serves any weighting
    let mut weight_nodes = Vec::with_capacity(terms.entries().len());
    let mut total = g.scalar(0.0);
    for &(name, node) in terms.entries() {
        let wn = g.input(&format!("weight.{name}"), &[]);
        weight_nodes.push((name, wn));
        let weighted = g.mul(wn, node)?;
        total = g.add(total, weighted)?;
    }

    let mut values = Values::new(&g);
    bank.bind_all(&g, &mut values)?;
    Ok(TrainGraph {
        graph: g,
        values,
        params: bank.into_nodes(),
        image,
        gt_heatmaps,
        gt_pof,
        gt_mask,
        gt_kpts,
        gt_dirs,
        weight_nodes,
        stack_hm,
        terms,
        total,
    })
}

fn bind_sample(tg: &mut TrainGraph, sample: &TrainSample, weights: &LossWeights) -> Result<()> {
    if !sample.image.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Config("non-finite value in training image".into()));
    }
    tg.values.bind(&tg.graph, tg.image, sample.image.clone())?;
    if let Some(gt) = &sample.gt {
        // each ground-truth field feeds exactly one objective term, so a bad
        // tensor can abort the step with that term named
        for (node, tensor, term_name) in [
            (tg.gt_heatmaps, &gt.heatmaps, term::HM),
            (tg.gt_pof, &gt.pof, term::POF),
            (tg.gt_mask, &gt.mask, term::SEG),
            (tg.gt_kpts, &gt.kpts2d, term::KPT2D),
            (tg.gt_dirs, &gt.bone_dirs, term::BONE3D),
        ] {
            if let Some(id) = node {
                if !tensor.data().iter().all(|v| v.is_finite()) {
                    return Err(Error::Config(format!(
                        "non-finite ground truth feeding loss term '{term_name}'"
                    )));
                }
                tg.values.bind(&tg.graph, id, tensor.clone())?;
            }
        }
    }
    for &(name, node) in &tg.weight_nodes {
        let w = weights
            .weight_of(name)
            .ok_or_else(|| Error::Config(format!("no weight defined for loss term '{name}'")))?;
        tg.values.bind(&tg.graph, node, Tensor::scalar(w))?;
    }
    Ok(())
}

/// Owns the parameters, optimizer state, and lazily-built objective graphs
/// for one training run.
pub struct Trainer {
    config: NetConfig,
    model: HandModelData,
    options: TrainOptions,
    opt: NetOptimizer,
    params: NetParams<f64>,
    sup: Option<TrainGraph>,
    unsup: Option<TrainGraph>,
}

impl Trainer {
    pub fn new(
        config: NetConfig,
        model: HandModelData,
        params: NetParams<f64>,
        options: TrainOptions,
        optimizer: NetOptimizer,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        optimizer.validate()?;
        if !(options.sharpness > 0.0) {
            return Err(Error::Config(format!(
                "render sharpness must be positive, got {}",
                options.sharpness
            )));
        }
        Ok(Trainer { config, model, options, opt: optimizer, params, sup: None, unsup: None })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &NetParams<f64> {
        &self.params
    }

    pub fn into_params(self) -> NetParams<f64> {
        self.params
    }

    /// Forward, backward, and one Adam update over the mean batch gradient.
    /// Any non-finite loss term aborts before parameters change.
    pub fn step(&mut self, batch: &[TrainSample], weights: &LossWeights) -> Result<LossReport> {
        self.run(batch, weights, true)
    }

    /// Forward only: the batch-mean loss report at the current parameters.
    pub fn evaluate(&mut self, batch: &[TrainSample], weights: &LossWeights) -> Result<LossReport> {
        self.run(batch, weights, false)
    }

    /// Batch-mean heatmap error per stack, over the supervised samples.
    pub fn stack_heatmap_losses(
        &mut self,
        batch: &[TrainSample],
        weights: &LossWeights,
    ) -> Result<Vec<f64>> {
        self.ensure_graphs(batch)?;
        let tg = match &mut self.sup {
            Some(tg) if !tg.stack_hm.is_empty() => tg,
            _ => {
                return Err(Error::Config(
                    "per-stack heatmap losses need supervised samples and the pose task".into(),
                ))
            }
        };
        let mut sums = vec![0.0; tg.stack_hm.len()];
        let mut count = 0usize;
        for sample in batch.iter().filter(|s| s.gt.is_some()) {
            bind_sample(tg, sample, weights)?;
            tg.values.reset_computed(&tg.graph);
            tg.graph.forward(&mut tg.values)?;
            for (sum, &node) in sums.iter_mut().zip(&tg.stack_hm) {
                *sum += tg.values.value(node).data()[0];
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Config("batch holds no supervised samples".into()));
        }
        Ok(sums.into_iter().map(|s| s / count as f64).collect())
    }

    fn ensure_graphs(&mut self, batch: &[TrainSample]) -> Result<()> {
        if batch.iter().any(|s| s.gt.is_some()) && self.sup.is_none() {
            self.sup =
                Some(build_train_graph(&self.config, &self.model, &self.options, &self.params, true)?);
        }
        if batch.iter().any(|s| s.gt.is_none()) && self.unsup.is_none() {
            self.unsup = Some(build_train_graph(
                &self.config,
                &self.model,
                &self.options,
                &self.params,
                false,
            )?);
        }
        Ok(())
    }

    fn run(&mut self, batch: &[TrainSample], weights: &LossWeights, apply: bool) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Config("training batch is empty".into()));
        }
        weights.validate()?;
        self.ensure_graphs(batch)?;
        let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        for sample in batch {
            let tg = if sample.gt.is_some() {
                self.sup.as_mut().expect("ensured above")
            } else {
                self.unsup.as_mut().expect("ensured above")
            };
            bind_sample(tg, sample, weights)?;
            tg.values.reset_computed(&tg.graph);
            tg.graph.forward(&mut tg.values)?;
            let report = LossReport::from_values(&tg.values, &tg.terms, weights)?;
            for (name, v) in &report.terms {
                if !v.is_finite() {
                    return Err(Error::Config(format!("non-finite loss term '{name}'")));
                }
                *term_sums.entry(name.clone()).or_insert(0.0) += v;
            }
            total_sum += report.total;
            if apply {
                let mut grads = GradStore::new(&tg.graph);
                tg.graph.backward(&tg.values, tg.total, &mut grads)?;
                for (name, &node) in &tg.params {
                    if let Some(gt) = grads.get(node) {
                        let slot = grad_acc
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0; gt.numel()]);
                        for (a, &gv) in slot.iter_mut().zip(gt.data()) {
                            *a += gv;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        if apply {
            for (name, mut gv) in grad_acc {
                for x in &mut gv {
                    *x *= inv;
                }
                let tensor = self
                    .params
                    .get_mut(&name)
                    .expect("gradient accumulated for unknown parameter");
                let st = self
                    .opt
                    .states
                    .entry(name.clone())
                    .or_insert_with(|| AdamState::new(gv.len()));
                adam_step(
                    tensor.data_mut(),
                    &gv,
                    st,
                    self.opt.learning_rate,
                    self.opt.beta1,
                    self.opt.beta2,
                    self.opt.epsilon,
                )?;
            }
            for tg in self.sup.iter_mut().chain(self.unsup.iter_mut()) {
                for (name, &node) in &tg.params {
                    let src = self.params.get(name).expect("graph built from these params");
                    tg.values.get_mut(node).data_mut().copy_from_slice(src.data());
                }
            }
        }
        let mut rows = Vec::new();
        for name in TERM_ORDER {
            if let Some(&v) = term_sums.get(name) {
                rows.push((name.to_string(), v * inv));
            }
        }
        Ok(LossReport { terms: rows, total: total_sum * inv })
    }
}
