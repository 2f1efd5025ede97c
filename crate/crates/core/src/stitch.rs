//! Stitch layers and stitched-model composition.
//!
//! A stitch layer S maps source layer-n features into the target's layer-n
//! input space; it is the only trainable unit in a stitched model
//! `F = T^N_target ∘ S ∘ R^n_source`. Three families: a per-token linear map,
//! a per-token two-layer ReLU perceptron, and a copy of the source block f^n
//! with low-rank adapters, which consumes layer n−1 features and may mix
//! tokens.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    reg_leaf, Backbone, BlockNodes, BlockParams, FeatureMapBatch, ImageBatch,
};
use crate::container::{self, Section};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchFamily {
    Linear,
    Mlp,
    LoraBlock,
}

impl std::fmt::Display for StitchFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StitchFamily::Linear => write!(f, "linear"),
            StitchFamily::Mlp => write!(f, "mlp"),
            StitchFamily::LoraBlock => write!(f, "lora_block"),
        }
    }
}

/// Options for [`make_stitch`]. The source block reference is required by the
/// `lora_block` family only.
pub struct StitchInit<'a, T> {
    /// MLP hidden width; defaults to `d_tgt`.
    pub hidden: Option<usize>,
    pub rank: usize,
    pub alpha: f64,
    pub source_block: Option<LoraSource<'a, T>>,
}

pub struct LoraSource<'a, T> {
    pub block: &'a BlockParams<T>,
    pub heads: usize,
}

impl<T> Default for StitchInit<'_, T> {
    fn default() -> Self {
        StitchInit {
            hidden: None,
            rank: 8,
            alpha: 16.0,
            source_block: None,
        }
    }
}

/// One low-rank adapter pair: `delta(x) = (x·A)·B · (α/r)`; only A and B are
/// trainable, and B starts at zero so the wrapped block is initially
/// unperturbed.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub enum StitchKind<T> {
    Linear {
        /// `[d_src, d_tgt]` in the tokens-as-rows layout.
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Mlp {
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
    LoraBlock {
        /// Frozen copy of the wrapped source block f^n.
        block: BlockParams<T>,
        heads: usize,
        q: LoraAdapter<T>,
        v: LoraAdapter<T>,
        mlp_in: LoraAdapter<T>,
        rank: usize,
        alpha: f64,
    },
}

/// The sole trainable unit in a stitched model.
#[derive(Debug)]
pub struct StitchLayer<T> {
    pub family: StitchFamily,
    pub d_src: usize,
    pub d_tgt: usize,
    pub kind: StitchKind<T>,
    applications: AtomicU64,
}

impl<T: Scalar> Clone for StitchLayer<T> {
    fn clone(&self) -> Self {
        StitchLayer {
            family: self.family,
            d_src: self.d_src,
            d_tgt: self.d_tgt,
            kind: self.kind.clone(),
            applications: AtomicU64::new(0),
        }
    }
}

/// Node ids of a stitch layer registered on a graph.
pub struct StitchNodes {
    /// Trainable parameters, in `param_tensors` order.
    pub params: Vec<NodeId>,
    /// Frozen wrapped-block nodes (lora_block only).
    pub block: Option<BlockNodes>,
}

pub fn make_stitch<T: Scalar>(
    family: StitchFamily,
    d_src: usize,
    d_tgt: usize,
    init: &StitchInit<'_, T>,
    seed: u64,
) -> Result<StitchLayer<T>> {
    if d_src == 0 || d_tgt == 0 {
        return Err(Error::Config("stitch dims must be positive".into()));
    }
    let mut rng = StreamRng::new(seed, "stitch-init");
    let kind = match family {
        StitchFamily::Linear => {
            let weight = if d_src == d_tgt {
                Tensor::eye(d_src)
            } else {
                let a = (6.0 / (d_src + d_tgt) as f64).sqrt();
                Tensor::from_fn(vec![d_src, d_tgt], |_| T::of_f64(rng.uniform(-a, a)))
            };
            StitchKind::Linear {
                weight,
                bias: Tensor::zeros(vec![d_tgt]),
            }
        }
        StitchFamily::Mlp => {
            let hidden = init.hidden.unwrap_or(d_tgt);
            let a1 = (6.0 / (d_src + hidden) as f64).sqrt();
            let a2 = (6.0 / (hidden + d_tgt) as f64).sqrt();
            StitchKind::Mlp {
                w1: Tensor::from_fn(vec![d_src, hidden], |_| T::of_f64(rng.uniform(-a1, a1))),
                b1: Tensor::zeros(vec![hidden]),
                w2: Tensor::from_fn(vec![hidden, d_tgt], |_| T::of_f64(rng.uniform(-a2, a2))),
                b2: Tensor::zeros(vec![d_tgt]),
            }
        }
        StitchFamily::LoraBlock => {
            let src = init.source_block.as_ref().ok_or_else(|| {
                Error::Config("lora_block stitch requires a source block reference".into())
            })?;
            if d_src != d_tgt {
                return Err(Error::Config(
                    "lora_block stitch keeps the source width; d_src must equal d_tgt".into(),
                ));
            }
            if init.rank == 0 || init.rank > d_src {
                return Err(Error::Config(format!(
                    "lora rank {} out of range 1..={d_src}",
                    init.rank
                )));
            }
            let d = d_src;
            let hidden = src.block.w1.cols();
            let adapter = |fan_out: usize, label: &str| {
                let mut r = rng.fork(label);
                let a = (6.0 / (d + init.rank) as f64).sqrt();
                LoraAdapter {
                    a: Tensor::from_fn(vec![d, init.rank], move |_| T::of_f64(r.uniform(-a, a))),
                    b: Tensor::zeros(vec![init.rank, fan_out]),
                }
            };
            StitchKind::LoraBlock {
                q: adapter(d, "lora-q"),
                v: adapter(d, "lora-v"),
                mlp_in: adapter(hidden, "lora-mlp"),
                block: src.block.clone(),
                heads: src.heads,
                rank: init.rank,
                alpha: init.alpha,
            }
        }
    };
    Ok(StitchLayer {
        family,
        d_src,
        d_tgt,
        kind,
        applications: AtomicU64::new(0),
    })
}

impl<T: Scalar> StitchLayer<T> {
    /// Layer-index shift: the lora_block family consumes layer n−1 features
    /// and emits layer-n features; per-token families stay at layer n.
    pub fn input_layer_offset(&self) -> usize {
        match self.family {
            StitchFamily::LoraBlock => 1,
            _ => 0,
        }
    }

    pub fn applications(&self) -> u64 {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn reset_applications(&self) {
        self.applications.store(0, Ordering::Relaxed);
    }

    /// Trainable parameter tensors.
    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        match &self.kind {
            StitchKind::Linear { weight, bias } => vec![weight, bias],
            StitchKind::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            StitchKind::LoraBlock { q, v, mlp_in, .. } => {
                vec![&q.a, &q.b, &v.a, &v.b, &mlp_in.a, &mlp_in.b]
            }
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.kind {
            StitchKind::Linear { weight, bias } => vec![weight, bias],
            StitchKind::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            StitchKind::LoraBlock { q, v, mlp_in, .. } => {
                vec![&mut q.a, &mut q.b, &mut v.a, &mut v.b, &mut mlp_in.a, &mut mlp_in.b]
            }
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 digest of the trainable parameters.
    pub fn param_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.param_tensors() {
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn set_params(&mut self, values: &[Tensor<T>]) {
        let mut mine = self.param_tensors_mut();
        assert_eq!(mine.len(), values.len());
        for (m, v) in mine.iter_mut().zip(values) {
            assert_eq!(m.shape(), v.shape());
            **m = v.clone();
        }
    }

    pub fn snapshot_params(&self) -> Vec<Tensor<T>> {
        self.param_tensors().into_iter().cloned().collect()
    }

    /// Register the layer on a graph; trainable params become param leaves
    /// when `trainable`, the wrapped lora block always stays frozen.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> StitchNodes {
        let params = self
            .param_tensors()
            .into_iter()
            .map(|t| reg_leaf(g, t, trainable))
            .collect();
        let block = match &self.kind {
            StitchKind::LoraBlock { block, .. } => Some(block.register(g, false)),
            _ => None,
        };
        StitchNodes { params, block }
    }

    /// Apply the stitch to `[rows, d_src]` token rows inside a graph.
    /// `batch`/`tokens` describe the row grouping (needed by lora_block).
    pub fn apply_graph(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        nodes: &StitchNodes,
        batch: usize,
        tokens: usize,
    ) -> Result<NodeId> {
        if g.value(input).cols() != self.d_src {
            return Err(Error::Compatibility(format!(
                "stitch expects d_src {}, got {}",
                self.d_src,
                g.value(input).cols()
            )));
        }
        self.applications.fetch_add(batch as u64, Ordering::Relaxed);
        match &self.kind {
            StitchKind::Linear { .. } => {
                let h = g.matmul(input, nodes.params[0])?;
                g.add_bias(h, nodes.params[1])
            }
            StitchKind::Mlp { .. } => {
                let h = g.matmul(input, nodes.params[0])?;
                let h = g.add_bias(h, nodes.params[1])?;
                let h = g.relu(h)?;
                let h = g.matmul(h, nodes.params[2])?;
                g.add_bias(h, nodes.params[3])
            }
            StitchKind::LoraBlock { heads, rank, alpha, .. } => {
                let block = nodes.block.as_ref().expect("lora block nodes");
                let scale = T::of_f64(*alpha / *rank as f64);
                lora_block_forward(g, input, block, &nodes.params, scale, batch, tokens, *heads)
            }
        }
    }

    /// No-grad application to a feature-map batch. The output sits in the
    /// target's feature space; for lora_block the layer index advances by 1.
    pub fn apply(&self, a: &FeatureMapBatch<T>) -> Result<FeatureMapBatch<T>> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false);
        let input = g.constant(a.values.clone());
        let out = self.apply_graph(&mut g, input, &nodes, a.batch, a.tokens())?;
        Ok(FeatureMapBatch {
            values: g.value(out).clone(),
            batch: a.batch,
            layer_index: a.layer_index + self.input_layer_offset(),
            layout: a.layout,
        })
    }
}

/// The wrapped source block with low-rank deltas on the query, value, and MLP
/// input projections. Mirrors `block_forward` with `q += s·(h·Aq)Bq` etc.
#[allow(clippy::too_many_arguments)]
fn lora_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &BlockNodes,
    adapters: &[NodeId],
    scale: T,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<NodeId> {
    let d = g.value(x).cols();
    let dh = d / heads;
    let (qa, qb, va, vb, ma, mb) = (
        adapters[0], adapters[1], adapters[2], adapters[3], adapters[4], adapters[5],
    );
    let h = g.layernorm(x, p.ln1_gain, p.ln1_bias)?;
    let qkv = g.matmul(h, p.wqkv)?;
    let qkv = g.add_bias(qkv, p.bqkv)?;
    let q = g.slice_cols(qkv, 0, d)?;
    let k = g.slice_cols(qkv, d, d)?;
    let v = g.slice_cols(qkv, 2 * d, d)?;
    // Low-rank deltas read the same pre-norm activations as the base proj.
    let dq = g.matmul(h, qa)?;
    let dq = g.matmul(dq, qb)?;
    let dq = g.scale(dq, scale)?;
    let q = g.add(q, dq)?;
    let dv = g.matmul(h, va)?;
    let dv = g.matmul(dv, vb)?;
    let dv = g.scale(dv, scale)?;
    let v = g.add(v, dv)?;
    let qh = g.to_heads(q, batch, tokens, heads)?;
    let kh = g.to_heads(k, batch, tokens, heads)?;
    let vh = g.to_heads(v, batch, tokens, heads)?;
    let scores = g.bmm_nt(qh, kh)?;
    let scores = g.scale(scores, T::of_f64(1.0 / (dh as f64).sqrt()))?;
    let attn = g.softmax(scores)?;
    let ctx = g.bmm(attn, vh)?;
    let merged = g.from_heads(ctx, batch, tokens, heads)?;
    let proj = g.matmul(merged, p.wo)?;
    let proj = g.add_bias(proj, p.bo)?;
    let x = g.add(x, proj)?;
    let h2 = g.layernorm(x, p.ln2_gain, p.ln2_bias)?;
    let base = g.matmul(h2, p.w1)?;
    let base = g.add_bias(base, p.b1)?;
    let dm = g.matmul(h2, ma)?;
    let dm = g.matmul(dm, mb)?;
    let dm = g.scale(dm, scale)?;
    let pre = g.add(base, dm)?;
    let act = g.gelu(pre)?;
    let out = g.matmul(act, p.w2)?;
    let out = g.add_bias(out, p.b2)?;
    g.add(x, out)
}

// ── stitched model ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchMode {
    Cross,
    SelfSource,
    SelfTarget,
}

impl std::fmt::Display for StitchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StitchMode::Cross => write!(f, "cross"),
            StitchMode::SelfSource => write!(f, "self_source"),
            StitchMode::SelfTarget => write!(f, "self_target"),
        }
    }
}

/// Frozen source prefix + trainable stitch + frozen target suffix.
pub struct StitchedModel<T> {
    pub source: Arc<Backbone<T>>,
    pub target: Arc<Backbone<T>>,
    pub stitch: StitchLayer<T>,
    /// Stitch point n (1-based layer index).
    pub n: usize,
    pub mode: StitchMode,
}

impl<T: Scalar> StitchedModel<T> {
    pub fn new(
        source: Arc<Backbone<T>>,
        target: Arc<Backbone<T>>,
        stitch: StitchLayer<T>,
        n: usize,
        mode: StitchMode,
    ) -> Result<Self> {
        if source.spec.layout() != target.spec.layout() {
            return Err(Error::Compatibility(format!(
                "token layouts differ: {:?} vs {:?}",
                source.spec.layout(),
                target.spec.layout()
            )));
        }
        if stitch.d_src != source.spec.width || stitch.d_tgt != target.spec.width {
            return Err(Error::Compatibility(format!(
                "stitch dims {}→{} do not match backbones {}→{}",
                stitch.d_src, stitch.d_tgt, source.spec.width, target.spec.width
            )));
        }
        let off = stitch.input_layer_offset();
        if n < 1 || n > source.spec.depth || n > target.spec.depth || n < off {
            return Err(Error::Compatibility(format!("stitch point {n} out of range")));
        }
        Ok(StitchedModel {
            source,
            target,
            stitch,
            n,
            mode,
        })
    }

    /// Source prefix depth: n, or n−1 for the lora_block family.
    pub fn prefix_depth(&self) -> usize {
        self.n - self.stitch.input_layer_offset()
    }

    /// No-grad forward: final-layer features and pooled vectors.
    pub fn forward(&self, x: &ImageBatch<T>) -> Result<(FeatureMapBatch<T>, Tensor<T>)> {
        let a = self.source.run_prefix(x, self.prefix_depth())?;
        let s = self.stitch.apply(&a)?;
        let f = self.target.run_suffix(&s, self.n)?;
        let pooled = Backbone::pool(&f);
        Ok((f, pooled))
    }

    /// Graph forward from already-computed source prefix features; returns
    /// the final-feature node. Stitch trainability is the caller's choice;
    /// backbone params always enter frozen.
    pub fn tail_graph(
        &self,
        g: &mut Graph<T>,
        prefix_values: NodeId,
        stitch_nodes: &StitchNodes,
        batch: usize,
    ) -> Result<NodeId> {
        let tokens = self.source.spec.tokens();
        let stitched = self
            .stitch
            .apply_graph(g, prefix_values, stitch_nodes, batch, tokens)?;
        let tnodes = self.target.register(g, false);
        self.target
            .blocks_graph(g, stitched, &tnodes, self.n, self.target.spec.depth, batch)
    }
}

// ── stitch tree ──────────────────────────────────────────────────────────

/// One suffix branch of a stitch tree. The trunk-owner branch has no stitch
/// layer and must reference the trunk backbone itself.
pub struct StitchBranch<T> {
    pub name: String,
    pub backbone: Arc<Backbone<T>>,
    pub stitch: Option<StitchLayer<T>>,
}

/// Shared frozen trunk of depth n feeding per-branch frozen suffixes.
pub struct StitchTree<T> {
    trunk: Arc<Backbone<T>>,
    n: usize,
    branches: Vec<StitchBranch<T>>,
    trunk_evals: AtomicU64,
}

impl<T: Scalar> StitchTree<T> {
    pub fn new(trunk: Arc<Backbone<T>>, n: usize, branches: Vec<StitchBranch<T>>) -> Result<Self> {
        if n < 1 || n > trunk.spec.depth {
            return Err(Error::Config(format!("trunk depth {n} out of range")));
        }
        if branches.is_empty() {
            return Err(Error::Config("a stitch tree needs at least one branch".into()));
        }
        for br in &branches {
            if br.backbone.spec.layout() != trunk.spec.layout() {
                return Err(Error::Compatibility(format!(
                    "branch '{}' layout does not match trunk",
                    br.name
                )));
            }
            if n > br.backbone.spec.depth {
                return Err(Error::Compatibility(format!(
                    "branch '{}' is shallower than the trunk depth {n}",
                    br.name
                )));
            }
            match &br.stitch {
                None => {
                    if !Arc::ptr_eq(&br.backbone, &trunk) {
                        return Err(Error::Compatibility(format!(
                            "branch '{}' has no stitch layer but is not the trunk backbone",
                            br.name
                        )));
                    }
                }
                Some(s) => {
                    if s.family == StitchFamily::LoraBlock {
                        return Err(Error::Config(
                            "stitch trees use per-token stitch families".into(),
                        ));
                    }
                    if s.d_src != trunk.spec.width || s.d_tgt != br.backbone.spec.width {
                        return Err(Error::Compatibility(format!(
                            "branch '{}' stitch dims {}→{} mismatch trunk {} / branch {}",
                            br.name,
                            s.d_src,
                            s.d_tgt,
                            trunk.spec.width,
                            br.backbone.spec.width
                        )));
                    }
                }
            }
        }
        Ok(StitchTree {
            trunk,
            n,
            branches,
            trunk_evals: AtomicU64::new(0),
        })
    }

    pub fn trunk_backbone(&self) -> &Backbone<T> {
        &self.trunk
    }

    pub fn depth(&self) -> usize {
        self.n
    }

    pub fn branches(&self) -> &[StitchBranch<T>] {
        &self.branches
    }

    pub fn trunk_evals(&self) -> u64 {
        self.trunk_evals.load(Ordering::Relaxed)
    }

    /// Total branch stitch applications (images × stitched branches).
    pub fn stitch_applications(&self) -> u64 {
        self.branches
            .iter()
            .filter_map(|b| b.stitch.as_ref())
            .map(|s| s.applications())
            .sum()
    }

    /// Block executions across trunk and all distinct branch backbones.
    pub fn block_execs(&self) -> u64 {
        let mut seen: Vec<*const Backbone<T>> = vec![Arc::as_ptr(&self.trunk)];
        let mut total = self.trunk.block_execs();
        for br in &self.branches {
            let p = Arc::as_ptr(&br.backbone);
            if !seen.contains(&p) {
                seen.push(p);
                total += br.backbone.block_execs();
            }
        }
        total
    }

    pub fn reset_counters(&self) {
        self.trunk_evals.store(0, Ordering::Relaxed);
        self.trunk.reset_block_execs();
        for br in &self.branches {
            br.backbone.reset_block_execs();
            if let Some(s) = &br.stitch {
                s.reset_applications();
            }
        }
    }

    /// Trunk computed once, each branch consuming the shared layer-n features
    /// through its own stitch; the trunk-owner branch consumes them directly.
    pub fn forward(&self, x: &ImageBatch<T>) -> Result<Vec<FeatureMapBatch<T>>> {
        let shared = self.trunk.run_prefix(x, self.n)?;
        self.trunk_evals.fetch_add(1, Ordering::Relaxed);
        let mut outputs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let features = match &br.stitch {
                None => br.backbone.run_suffix(&shared, self.n)?,
                Some(s) => {
                    let mapped = s.apply(&shared)?;
                    br.backbone.run_suffix(&mapped, self.n)?
                }
            };
            outputs.push(features);
        }
        Ok(outputs)
    }
}

// ── serialization ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct StitchMeta {
    family: StitchFamily,
    d_src: usize,
    d_tgt: usize,
    hidden: Option<usize>,
    rank: Option<usize>,
    alpha: Option<f64>,
    heads: Option<usize>,
    scalar: String,
}

pub fn save_stitch<T: Scalar>(s: &StitchLayer<T>, path: &Path) -> Result<()> {
    let (hidden, rank, alpha, heads) = match &s.kind {
        StitchKind::Linear { .. } => (None, None, None, None),
        StitchKind::Mlp { w1, .. } => (Some(w1.cols()), None, None, None),
        StitchKind::LoraBlock { rank, alpha, heads, .. } => {
            (None, Some(*rank), Some(*alpha), Some(*heads))
        }
    };
    let meta = serde_json::to_value(StitchMeta {
        family: s.family,
        d_src: s.d_src,
        d_tgt: s.d_tgt,
        hidden,
        rank,
        alpha,
        heads,
        scalar: T::DTYPE.to_string(),
    })?;
    let mut sections: Vec<Section> = s
        .param_tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| Section::from_tensor(&format!("param{i}"), t))
        .collect();
    if let StitchKind::LoraBlock { block, .. } = &s.kind {
        for (name, t) in block_named(block) {
            sections.push(Section::from_tensor(&name, t));
        }
    }
    container::save(path, "stitch", meta, &sections)
}

fn block_named<T: Scalar>(b: &BlockParams<T>) -> Vec<(String, &Tensor<T>)> {
    vec![
        ("wrapped_block.ln1.gain".into(), &b.ln1_gain),
        ("wrapped_block.ln1.bias".into(), &b.ln1_bias),
        ("wrapped_block.attn.wqkv".into(), &b.wqkv),
        ("wrapped_block.attn.bqkv".into(), &b.bqkv),
        ("wrapped_block.attn.wo".into(), &b.wo),
        ("wrapped_block.attn.bo".into(), &b.bo),
        ("wrapped_block.ln2.gain".into(), &b.ln2_gain),
        ("wrapped_block.ln2.bias".into(), &b.ln2_bias),
        ("wrapped_block.mlp.w1".into(), &b.w1),
        ("wrapped_block.mlp.b1".into(), &b.b1),
        ("wrapped_block.mlp.w2".into(), &b.w2),
        ("wrapped_block.mlp.b2".into(), &b.b2),
    ]
}

pub fn load_stitch<T: Scalar>(path: &Path) -> Result<StitchLayer<T>> {
    let (header, sections) = container::load(path)?;
    if header.kind != "stitch" {
        return Err(Error::Container(format!(
            "expected a stitch layer, found kind '{}'",
            header.kind
        )));
    }
    let meta: StitchMeta = serde_json::from_value(header.spec)?;
    let p = |i: usize| -> Result<Tensor<T>> {
        container::section(&sections, &format!("param{i}"))?.to_tensor()
    };
    let kind = match meta.family {
        StitchFamily::Linear => StitchKind::Linear {
            weight: p(0)?,
            bias: p(1)?,
        },
        StitchFamily::Mlp => StitchKind::Mlp {
            w1: p(0)?,
            b1: p(1)?,
            w2: p(2)?,
            b2: p(3)?,
        },
        StitchFamily::LoraBlock => {
            let t = |name: &str| -> Result<Tensor<T>> {
                container::section(&sections, &format!("wrapped_block.{name}"))?.to_tensor()
            };
            StitchKind::LoraBlock {
                q: LoraAdapter { a: p(0)?, b: p(1)? },
                v: LoraAdapter { a: p(2)?, b: p(3)? },
                mlp_in: LoraAdapter { a: p(4)?, b: p(5)? },
                block: BlockParams {
                    ln1_gain: t("ln1.gain")?,
                    ln1_bias: t("ln1.bias")?,
                    wqkv: t("attn.wqkv")?,
                    bqkv: t("attn.bqkv")?,
                    wo: t("attn.wo")?,
                    bo: t("attn.bo")?,
                    ln2_gain: t("ln2.gain")?,
                    ln2_bias: t("ln2.bias")?,
                    w1: t("mlp.w1")?,
                    b1: t("mlp.b1")?,
                    w2: t("mlp.w2")?,
                    b2: t("mlp.b2")?,
                },
                heads: meta.heads.unwrap_or(1),
                rank: meta.rank.unwrap_or(8),
                alpha: meta.alpha.unwrap_or(16.0),
            }
        }
    };
    Ok(StitchLayer {
        family: meta.family,
        d_src: meta.d_src,
        d_tgt: meta.d_tgt,
        kind,
        applications: AtomicU64::new(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, FeatureLayout, ModelSpec, Objective};

    fn spec(width: usize) -> ModelSpec {
        ModelSpec {
            depth: 3,
            width,
            heads: 2,
            mlp_ratio: 2,
            patch: 8,
            image: 16,
            use_class_token: false,
            num_classes: 0,
            objective_tag: Objective::Supervised,
        }
    }

    fn images(s: &ModelSpec, batch: usize, seed: u64) -> ImageBatch<f32> {
        let mut r = StreamRng::new(seed, "imgs");
        ImageBatch::new(
            Tensor::from_fn(vec![batch, s.image * s.image * 3], |_| r.uniform(0.0, 1.0) as f32),
            s.image,
        )
        .unwrap()
    }

    fn frozen(spec: &ModelSpec, seed: u64) -> Arc<Backbone<f32>> {
        let mut b = init_backbone::<f32>(spec, seed).unwrap();
        b.freeze();
        Arc::new(b)
    }

    #[test]
    fn square_linear_initializes_to_identity() {
        let s = make_stitch::<f32>(StitchFamily::Linear, 8, 8, &StitchInit::default(), 0).unwrap();
        let StitchKind::Linear { weight, bias } = &s.kind else { panic!() };
        assert_eq!(weight, &Tensor::<f32>::eye(8));
        assert!(bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_parameter_count_matches_arithmetic() {
        let init = StitchInit {
            hidden: Some(128),
            ..StitchInit::default()
        };
        let s = make_stitch::<f32>(StitchFamily::Mlp, 64, 64, &init, 1).unwrap();
        assert_eq!(s.trainable_param_count(), 64 * 128 + 128 + 128 * 64 + 64);
        assert_eq!(s.trainable_param_count(), 16_576);
    }

    #[test]
    fn bad_lora_requests_are_errors() {
        let sp = spec(16);
        let bb = init_backbone::<f32>(&sp, 3).unwrap();
        let init = StitchInit {
            rank: 99,
            source_block: Some(LoraSource {
                block: &bb.blocks[0],
                heads: sp.heads,
            }),
            ..StitchInit::default()
        };
        assert!(make_stitch::<f32>(StitchFamily::LoraBlock, 16, 16, &init, 0).is_err());
        let init2 = StitchInit::<f32>::default();
        assert!(make_stitch::<f32>(StitchFamily::LoraBlock, 16, 16, &init2, 0).is_err());
    }

    #[test]
    fn identity_linear_leaves_features_unchanged() {
        let sp = spec(16);
        let bb = frozen(&sp, 1);
        let a = bb.run_prefix(&images(&sp, 2, 5), 1).unwrap();
        let s = make_stitch::<f32>(StitchFamily::Linear, 16, 16, &StitchInit::default(), 0).unwrap();
        let out = s.apply(&a).unwrap();
        assert_eq!(out.values.data(), a.values.data());
    }

    #[test]
    fn mlp_single_token_matches_hand_computation() {
        let mut s = make_stitch::<f64>(
            StitchFamily::Mlp,
            2,
            2,
            &StitchInit { hidden: Some(2), ..StitchInit::default() },
            0,
        )
        .unwrap();
        s.set_params(&[
            Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(),
            Tensor::new(vec![2, 2], vec![2.0, 0.0, 1.0, -1.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 0.3]).unwrap(),
        ]);
        let a = FeatureMapBatch {
            values: Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap(),
            batch: 1,
            layer_index: 1,
            layout: FeatureLayout { has_class_token: false, grid: (1, 1) },
        };
        // h = relu([1,2]·W1 + b1) = relu([1+1+0.1, −1+4−0.2]) = [2.1, 2.8]
        // y = h·W2 + b2 = [2.1·2+2.8·1, 2.8·(−1)+0.3] = [7.0, −2.5]
        let out = s.apply(&a).unwrap();
        assert!((out.values.data()[0] - 7.0).abs() < 1e-12);
        assert!((out.values.data()[1] - (-2.5)).abs() < 1e-12);
    }

    #[test]
    fn per_token_stitches_commute_with_token_permutation() {
        let sp = spec(16);
        let bb = frozen(&sp, 2);
        let a = bb.run_prefix(&images(&sp, 1, 8), 2).unwrap();
        let k = a.tokens();
        let d = a.dim();
        for family in [StitchFamily::Linear, StitchFamily::Mlp] {
            let s = make_stitch::<f32>(family, d, d, &StitchInit::default(), 77).unwrap();
            let out = s.apply(&a).unwrap();
            let perm: Vec<usize> = (0..k).map(|i| (i * 3 + 1) % k).collect();
            let mut permuted = a.clone();
            for (dst, &src) in perm.iter().enumerate() {
                let row = a.values.data()[src * d..(src + 1) * d].to_vec();
                permuted.values.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&row);
            }
            let out_p = s.apply(&permuted).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(
                    &out_p.values.data()[dst * d..(dst + 1) * d],
                    &out.values.data()[src * d..(src + 1) * d]
                );
            }
        }
    }

    #[test]
    fn lora_block_at_init_equals_frozen_source_block() {
        let sp = spec(16);
        let bb = frozen(&sp, 4);
        let n = 2;
        let a_prev = bb.run_prefix(&images(&sp, 2, 6), n - 1).unwrap();
        let init = StitchInit {
            rank: 4,
            source_block: Some(LoraSource {
                block: &bb.blocks[n - 1],
                heads: sp.heads,
            }),
            ..StitchInit::default()
        };
        let s = make_stitch::<f32>(StitchFamily::LoraBlock, 16, 16, &init, 9).unwrap();
        let out = s.apply(&a_prev).unwrap();
        let direct = bb.run_prefix(&images(&sp, 2, 6), n).unwrap();
        assert_eq!(out.values.data(), direct.values.data());
        assert_eq!(out.layer_index, n);
    }

    #[test]
    fn identity_self_stitch_is_bit_exact_with_zero_training() {
        let sp = spec(16);
        let bb = frozen(&sp, 10);
        let x = images(&sp, 2, 11);
        let s = make_stitch::<f32>(StitchFamily::Linear, 16, 16, &StitchInit::default(), 0).unwrap();
        let m = StitchedModel::new(bb.clone(), bb.clone(), s, 2, StitchMode::SelfTarget).unwrap();
        let (f, pooled) = m.forward(&x).unwrap();
        let direct = bb.run_prefix(&x, sp.depth).unwrap();
        assert_eq!(f.values.data(), direct.values.data());
        assert_eq!(pooled.data(), Backbone::pool(&direct).data());
    }

    #[test]
    fn cross_stitch_with_untrained_layer_produces_finite_right_shape() {
        let sp_a = spec(16);
        let mut sp_b = spec(32);
        sp_b.heads = 4;
        let src = frozen(&sp_a, 1);
        let tgt = frozen(&sp_b, 2);
        let s = make_stitch::<f32>(StitchFamily::Mlp, 16, 32, &StitchInit::default(), 3).unwrap();
        let m = StitchedModel::new(src, tgt, s, 2, StitchMode::Cross).unwrap();
        let (f, pooled) = m.forward(&images(&sp_a, 2, 12)).unwrap();
        assert_eq!(f.values.shape(), &[2 * sp_b.tokens(), 32]);
        assert!(f.values.all_finite());
        assert_eq!(pooled.shape(), &[2, 32]);
    }

    #[test]
    fn trainable_census_equals_stitch_param_count() {
        let sp = spec(16);
        let bb = frozen(&sp, 1);
        for family in [StitchFamily::Linear, StitchFamily::Mlp] {
            let s = make_stitch::<f32>(family, 16, 16, &StitchInit::default(), 5).unwrap();
            let count = s.trainable_param_count();
            let m = StitchedModel::new(bb.clone(), bb.clone(), s, 1, StitchMode::SelfSource).unwrap();
            let mut g = Graph::new();
            let nodes = m.stitch.register(&mut g, true);
            let registered: usize = nodes.params.iter().map(|&id| g.value(id).len()).sum();
            assert_eq!(registered, count);
        }
    }

    #[test]
    fn stitch_gradients_match_finite_differences() {
        let sp = spec(8);
        let mut src = init_backbone::<f64>(&sp, 21).unwrap();
        let mut tgt = init_backbone::<f64>(&sp, 22).unwrap();
        src.freeze();
        tgt.freeze();
        let (src, tgt) = (Arc::new(src), Arc::new(tgt));
        let mut r = StreamRng::new(7, "ffm-in");
        let batch = 2;
        let k = sp.tokens();
        let a = Tensor::from_fn(vec![batch * k, 8], |_| r.uniform(-0.5, 0.5));
        let target_final = Tensor::from_fn(vec![batch * k, 8], |_| r.uniform(-0.5, 0.5));

        for family in [StitchFamily::Linear, StitchFamily::Mlp] {
            let stitch = make_stitch::<f64>(family, 8, 8, &StitchInit::default(), 31).unwrap();
            let m = StitchedModel::new(src.clone(), tgt.clone(), stitch, 2, StitchMode::Cross).unwrap();
            let params = m.stitch.snapshot_params();
            let err = crate::gradcheck::grad_check(
                &|g: &mut Graph<f64>, ps: &[NodeId]| {
                    let nodes = StitchNodes { params: ps.to_vec(), block: None };
                    let input = g.constant(a.clone());
                    let out = m.tail_graph(g, input, &nodes, batch)?;
                    let tgt_c = g.constant(target_final.clone());
                    let diff = g.sub(out, tgt_c)?;
                    g.sum_sq_scaled(diff, 1.0 / batch as f64)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{family}: relative error {err}");
        }
    }

    #[test]
    fn single_branch_tree_equals_plain_backbone() {
        let sp = spec(16);
        let bb = frozen(&sp, 13);
        let x = images(&sp, 2, 14);
        let tree = StitchTree::new(
            bb.clone(),
            2,
            vec![StitchBranch {
                name: "self".into(),
                backbone: bb.clone(),
                stitch: None,
            }],
        )
        .unwrap();
        let outs = tree.forward(&x).unwrap();
        let direct = bb.run_prefix(&x, sp.depth).unwrap();
        assert_eq!(outs[0].values.data(), direct.values.data());
    }

    #[test]
    fn tree_branches_equal_independent_stitched_models() {
        let sp = spec(16);
        let trunk = frozen(&sp, 15);
        let other = frozen(&sp, 16);
        let x = images(&sp, 2, 17);
        let n = 2;
        let s = make_stitch::<f32>(StitchFamily::Mlp, 16, 16, &StitchInit::default(), 18).unwrap();
        let tree = StitchTree::new(
            trunk.clone(),
            n,
            vec![
                StitchBranch { name: "own".into(), backbone: trunk.clone(), stitch: None },
                StitchBranch { name: "other".into(), backbone: other.clone(), stitch: Some(s.clone()) },
            ],
        )
        .unwrap();
        let outs = tree.forward(&x).unwrap();
        let own_direct = trunk.run_prefix(&x, sp.depth).unwrap();
        assert_eq!(outs[0].values.data(), own_direct.values.data());
        let m = StitchedModel::new(trunk.clone(), other.clone(), s, n, StitchMode::Cross).unwrap();
        let (f, _) = m.forward(&x).unwrap();
        assert_eq!(outs[1].values.data(), f.values.data());
    }

    #[test]
    fn trunk_executes_once_and_stitch_counts_match() {
        let sp = spec(16);
        let trunk = frozen(&sp, 19);
        let b2 = frozen(&sp, 20);
        let b3 = frozen(&sp, 21);
        let n = 1;
        let mk = |seed| make_stitch::<f32>(StitchFamily::Linear, 16, 16, &StitchInit::default(), seed).unwrap();
        let tree = StitchTree::new(
            trunk.clone(),
            n,
            vec![
                StitchBranch { name: "own".into(), backbone: trunk.clone(), stitch: None },
                StitchBranch { name: "b2".into(), backbone: b2, stitch: Some(mk(1)) },
                StitchBranch { name: "b3".into(), backbone: b3, stitch: Some(mk(2)) },
            ],
        )
        .unwrap();
        let batch = 3u64;
        tree.reset_counters();
        tree.forward(&images(&sp, batch as usize, 22)).unwrap();
        assert_eq!(tree.trunk_evals(), 1);
        // B − (trunk-owner branches) = 2 stitch evaluations per image.
        assert_eq!(tree.stitch_applications(), 2 * batch);
    }

    #[test]
    fn stitch_save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("stchlab-st-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let sp = spec(16);
        let bb = init_backbone::<f32>(&sp, 30).unwrap();
        let init = StitchInit {
            rank: 4,
            source_block: Some(LoraSource { block: &bb.blocks[1], heads: sp.heads }),
            ..StitchInit::default()
        };
        for (i, family) in [StitchFamily::Linear, StitchFamily::Mlp, StitchFamily::LoraBlock]
            .into_iter()
            .enumerate()
        {
            let s = make_stitch::<f32>(family, 16, 16, &init, 40 + i as u64).unwrap();
            let path = dir.join(format!("s{i}.stch1"));
            save_stitch(&s, &path).unwrap();
            let loaded = load_stitch::<f32>(&path).unwrap();
            assert_eq!(loaded.family, s.family);
            assert_eq!(loaded.param_digest(), s.param_digest());
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
