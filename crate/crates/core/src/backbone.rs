//! Tiny ViT-style encoders with per-layer feature taps.
//!
//! An encoder is a stack of pre-norm transformer blocks over patch tokens.
//! `run_prefix` evaluates the embedding plus blocks `1..=n` ("layer 0" is the
//! embedding output), `run_suffix` evaluates blocks `n+1..=N`; chaining the
//! two at any split point is bit-identical to the full forward because both
//! paths execute the same kernels in the same order.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::container::{self, Section};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pretraining objective attached to a spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Supervised,
    MaskedRecon,
}

/// Architecture description; parameter shapes are derivable from this alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Transformer layer count N.
    pub depth: usize,
    /// Token dimension d.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch side length in pixels.
    pub patch: usize,
    /// Image side length in pixels.
    pub image: usize,
    pub use_class_token: bool,
    /// Classifier output size; 0 = headless.
    pub num_classes: usize,
    pub objective_tag: Objective,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be positive".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.patch == 0 || self.image == 0 || self.image % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {} must be divisible by patch {}",
                self.image, self.patch
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid side.
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count k.
    pub fn tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    /// Flattened patch pixel count (RGB).
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            has_class_token: self.use_class_token,
            grid: (self.grid(), self.grid()),
        }
    }
}

/// Token-layout metadata carried alongside feature values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub has_class_token: bool,
    pub grid: (usize, usize),
}

impl FeatureLayout {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + usize::from(self.has_class_token)
    }
}

/// A batch of intermediate feature maps A^n.
///
/// Values are stored tokens-as-rows (`[batch·k, d]`) for compute; the
/// per-sample `d×k` matrix view is available via [`FeatureMapBatch::sample_matrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapBatch<T> {
    pub values: Tensor<T>,
    pub batch: usize,
    pub layer_index: usize,
    pub layout: FeatureLayout,
}

impl<T: Scalar> FeatureMapBatch<T> {
    pub fn tokens(&self) -> usize {
        self.layout.tokens()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// The `d×k` matrix of one sample.
    pub fn sample_matrix(&self, i: usize) -> Tensor<T> {
        let (k, d) = (self.tokens(), self.dim());
        let base = i * k * d;
        Tensor::from_fn(vec![d, k], |idx| {
            let (row, col) = (idx / k, idx % k);
            self.values.data()[base + col * d + row]
        })
    }

    /// Rows of one sample in the batch layout (`k×d`).
    pub fn sample_rows(&self, i: usize) -> &[T] {
        let (k, d) = (self.tokens(), self.dim());
        &self.values.data()[i * k * d..(i + 1) * k * d]
    }
}

/// A batch of images, pixels flattened per sample (`H·W·3`, values in [0,1]).
#[derive(Clone, Debug)]
pub struct ImageBatch<T> {
    pub pixels: Tensor<T>,
    pub side: usize,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(pixels: Tensor<T>, side: usize) -> Result<Self> {
        if pixels.shape().len() != 2 || pixels.shape()[1] != side * side * 3 {
            return Err(Error::shape("ImageBatch", pixels.shape(), &[0, side * side * 3]));
        }
        Ok(ImageBatch { pixels, side })
    }

    pub fn len(&self) -> usize {
        self.pixels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rearrange into `[batch·num_patches, patch·patch·3]` rows, patches in
    /// row-major grid order, pixels row-major within the patch.
    pub fn patchify(&self, patch: usize) -> Tensor<T> {
        let side = self.side;
        let grid = side / patch;
        let b = self.len();
        let pd = patch * patch * 3;
        let px = self.pixels.data();
        let mut out = Tensor::zeros(vec![b * grid * grid, pd]);
        {
            let o = out.data_mut();
            for img in 0..b {
                let ibase = img * side * side * 3;
                for gy in 0..grid {
                    for gx in 0..grid {
                        let row = (img * grid * grid + gy * grid + gx) * pd;
                        for py in 0..patch {
                            let src = ibase + ((gy * patch + py) * side + gx * patch) * 3;
                            let dst = row + py * patch * 3;
                            o[dst..dst + patch * 3].copy_from_slice(&px[src..src + patch * 3]);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wqkv: Tensor<T>,
    pub bqkv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Node ids of one block's parameters inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wqkv: NodeId,
    pub bqkv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl<T: Scalar> BlockParams<T> {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{prefix}.ln1.gain"), &self.ln1_gain),
            (format!("{prefix}.ln1.bias"), &self.ln1_bias),
            (format!("{prefix}.attn.wqkv"), &self.wqkv),
            (format!("{prefix}.attn.bqkv"), &self.bqkv),
            (format!("{prefix}.attn.wo"), &self.wo),
            (format!("{prefix}.attn.bo"), &self.bo),
            (format!("{prefix}.ln2.gain"), &self.ln2_gain),
            (format!("{prefix}.ln2.bias"), &self.ln2_bias),
            (format!("{prefix}.mlp.w1"), &self.w1),
            (format!("{prefix}.mlp.b1"), &self.b1),
            (format!("{prefix}.mlp.w2"), &self.w2),
            (format!("{prefix}.mlp.b2"), &self.b2),
        ]
    }

    /// Register every block parameter on a graph.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> BlockNodes {
        BlockNodes {
            ln1_gain: reg_leaf(g, &self.ln1_gain, trainable),
            ln1_bias: reg_leaf(g, &self.ln1_bias, trainable),
            wqkv: reg_leaf(g, &self.wqkv, trainable),
            bqkv: reg_leaf(g, &self.bqkv, trainable),
            wo: reg_leaf(g, &self.wo, trainable),
            bo: reg_leaf(g, &self.bo, trainable),
            ln2_gain: reg_leaf(g, &self.ln2_gain, trainable),
            ln2_bias: reg_leaf(g, &self.ln2_bias, trainable),
            w1: reg_leaf(g, &self.w1, trainable),
            b1: reg_leaf(g, &self.b1, trainable),
            w2: reg_leaf(g, &self.w2, trainable),
            b2: reg_leaf(g, &self.b2, trainable),
        }
    }

    pub fn node_list(nodes: &BlockNodes) -> Vec<NodeId> {
        vec![
            nodes.ln1_gain,
            nodes.ln1_bias,
            nodes.wqkv,
            nodes.bqkv,
            nodes.wo,
            nodes.bo,
            nodes.ln2_gain,
            nodes.ln2_bias,
            nodes.w1,
            nodes.b1,
            nodes.w2,
            nodes.b2,
        ]
    }
}

/// One self-attention + MLP block applied to `[batch·tokens, d]` rows.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &BlockNodes,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<NodeId> {
    let d = g.value(x).cols();
    let dh = d / heads;
    // Attention over the pre-norm branch.
    let h = g.layernorm(x, p.ln1_gain, p.ln1_bias)?;
    let qkv = g.matmul(h, p.wqkv)?;
    let qkv = g.add_bias(qkv, p.bqkv)?;
    let q = g.slice_cols(qkv, 0, d)?;
    let k = g.slice_cols(qkv, d, d)?;
    let v = g.slice_cols(qkv, 2 * d, d)?;
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
    // MLP branch.
    let h = g.layernorm(x, p.ln2_gain, p.ln2_bias)?;
    let h = g.matmul(h, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, p.w2)?;
    let h = g.add_bias(h, p.b2)?;
    g.add(x, h)
}

/// A tiny ViT encoder with optional classifier head.
#[derive(Debug)]
pub struct Backbone<T> {
    pub spec: ModelSpec,
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub cls_token: Option<Tensor<T>>,
    pub blocks: Vec<BlockParams<T>>,
    /// Classifier head (weight `[d, C]`, bias `[C]`); dropped on freeze.
    pub head: Option<(Tensor<T>, Tensor<T>)>,
    pub frozen: bool,
    block_execs: AtomicU64,
}

impl<T: Scalar> Clone for Backbone<T> {
    fn clone(&self) -> Self {
        Backbone {
            spec: self.spec.clone(),
            patch_weight: self.patch_weight.clone(),
            patch_bias: self.patch_bias.clone(),
            pos_embed: self.pos_embed.clone(),
            cls_token: self.cls_token.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            frozen: self.frozen,
            block_execs: AtomicU64::new(0),
        }
    }
}

/// Node ids for every registered backbone parameter.
pub struct BackboneNodes {
    pub patch_weight: NodeId,
    pub patch_bias: NodeId,
    pub pos_embed: NodeId,
    pub cls_token: Option<NodeId>,
    pub blocks: Vec<BlockNodes>,
    pub head: Option<(NodeId, NodeId)>,
}

impl BackboneNodes {
    /// Flat id list matching [`Backbone::param_tensors`] order.
    pub fn param_list(&self) -> Vec<NodeId> {
        let mut ids = vec![self.patch_weight, self.patch_bias, self.pos_embed];
        if let Some(c) = self.cls_token {
            ids.push(c);
        }
        for b in &self.blocks {
            ids.extend(BlockParams::<f32>::node_list(b));
        }
        if let Some((w, b)) = self.head {
            ids.push(w);
            ids.push(b);
        }
        ids
    }
}

/// Register one tensor as a trainable or constant leaf.
pub fn reg_leaf<T: Scalar>(g: &mut Graph<T>, t: &Tensor<T>, trainable: bool) -> NodeId {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

fn xavier_uniform<T: Scalar>(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> impl FnMut(usize) -> T + '_ {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    move |_| T::of_f64(rng.uniform(-a, a))
}

/// Deterministic initialization: truncated-normal embeddings (σ = 0.02),
/// scaled-uniform linear weights, zero biases, unit layernorm gains.
pub fn init_backbone<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Backbone<T>> {
    spec.validate()?;
    let d = spec.width;
    let base = StreamRng::new(seed, "backbone-init");

    let emb = |label: &str| {
        let mut r = base.fork(label);
        move |_: usize| T::of_f64(r.trunc_normal(0.02))
    };
    let patch_weight = Tensor::from_fn(vec![spec.patch_dim(), d], emb("patch-embed"));
    let patch_bias = Tensor::zeros(vec![d]);
    let pos_embed = Tensor::from_fn(vec![spec.tokens(), d], emb("pos-embed"));
    let cls_token = spec
        .use_class_token
        .then(|| Tensor::from_fn(vec![1, d], emb("cls-token")));

    let hidden = spec.hidden();
    let mut blocks = Vec::with_capacity(spec.depth);
    for i in 1..=spec.depth {
        let mut r = base.fork(&format!("block{i}"));
        blocks.push(BlockParams {
            ln1_gain: Tensor::filled(vec![d], T::one()),
            ln1_bias: Tensor::zeros(vec![d]),
            wqkv: Tensor::from_fn(vec![d, 3 * d], xavier_uniform(&mut r, d, 3 * d)),
            bqkv: Tensor::zeros(vec![3 * d]),
            wo: Tensor::from_fn(vec![d, d], xavier_uniform(&mut r, d, d)),
            bo: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], T::one()),
            ln2_bias: Tensor::zeros(vec![d]),
            w1: Tensor::from_fn(vec![d, hidden], xavier_uniform(&mut r, d, hidden)),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::from_fn(vec![hidden, d], xavier_uniform(&mut r, hidden, d)),
            b2: Tensor::zeros(vec![d]),
        });
    }

    let head = (spec.num_classes > 0).then(|| {
        let mut r = base.fork("head");
        (
            Tensor::from_fn(vec![d, spec.num_classes], xavier_uniform(&mut r, d, spec.num_classes)),
            Tensor::zeros(vec![spec.num_classes]),
        )
    });

    Ok(Backbone {
        spec: spec.clone(),
        patch_weight,
        patch_bias,
        pos_embed,
        cls_token,
        blocks,
        head,
        frozen: false,
        block_execs: AtomicU64::new(0),
    })
}

impl<T: Scalar> Backbone<T> {
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.head = None;
    }

    /// Block executions recorded so far (one per image per block).
    pub fn block_execs(&self) -> u64 {
        self.block_execs.load(Ordering::Relaxed)
    }

    pub fn reset_block_execs(&self) {
        self.block_execs.store(0, Ordering::Relaxed);
    }

    /// Named parameter tensors in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        if let Some(c) = &self.cls_token {
            out.push(("cls_token".to_string(), c));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("block{}", i + 1)));
        }
        if let Some((w, b)) = &self.head {
            out.push(("head.weight".to_string(), w));
            out.push(("head.bias".to_string(), b));
        }
        out
    }

    /// Hex SHA-256 over parameter names and payload bytes.
    pub fn param_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Register all parameters on a graph. `trainable` must be false for a
    /// frozen backbone.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> BackboneNodes {
        assert!(
            !(trainable && self.frozen),
            "frozen backbone cannot be registered as trainable"
        );
        BackboneNodes {
            patch_weight: reg_leaf(g, &self.patch_weight, trainable),
            patch_bias: reg_leaf(g, &self.patch_bias, trainable),
            pos_embed: reg_leaf(g, &self.pos_embed, trainable),
            cls_token: self
                .cls_token
                .as_ref()
                .map(|c| reg_leaf(g, c, trainable)),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.register(g, trainable))
                .collect(),
            head: self
                .head
                .as_ref()
                .map(|(w, b)| (reg_leaf(g, w, trainable), reg_leaf(g, b, trainable))),
        }
    }

    /// Mutable flat parameter list matching `BackboneNodes::param_list`.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.pos_embed,
        ];
        if let Some(c) = self.cls_token.as_mut() {
            out.push(c);
        }
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wqkv,
                &mut b.bqkv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        if let Some((w, b)) = self.head.as_mut() {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Embedding stage: patchify, project, optionally mask patch rows, add
    /// class token and positional embeddings. Returns layer-0 tokens
    /// `[batch·k, d]`.
    pub fn embed_graph(
        &self,
        g: &mut Graph<T>,
        x: &ImageBatch<T>,
        nodes: &BackboneNodes,
        mask: Option<(&[usize], NodeId)>,
    ) -> Result<NodeId> {
        if x.side != self.spec.image {
            return Err(Error::Config(format!(
                "image side {} does not match spec image {}",
                x.side, self.spec.image
            )));
        }
        let batch = x.len();
        let patches = g.constant(x.patchify(self.spec.patch));
        let tok = g.matmul(patches, nodes.patch_weight)?;
        let mut tok = g.add_bias(tok, nodes.patch_bias)?;
        if let Some((rows, mask_token)) = mask {
            tok = g.replace_rows(tok, mask_token, rows.to_vec())?;
        }
        if let Some(cls) = nodes.cls_token {
            tok = g.prepend_row_per_image(tok, cls, batch, self.spec.num_patches())?;
        }
        g.add_tiled_rows(tok, nodes.pos_embed, batch)
    }

    /// Blocks `from+1 ..= to` applied to `[batch·k, d]` rows.
    pub fn blocks_graph(
        &self,
        g: &mut Graph<T>,
        mut h: NodeId,
        nodes: &BackboneNodes,
        from: usize,
        to: usize,
        batch: usize,
    ) -> Result<NodeId> {
        let tokens = self.spec.tokens();
        for b in from..to {
            h = block_forward(g, h, &nodes.blocks[b], batch, tokens, self.spec.heads)?;
            self.block_execs
                .fetch_add(batch as u64, Ordering::Relaxed);
        }
        Ok(h)
    }

    fn check_layer(&self, n: usize) -> Result<()> {
        if n > self.spec.depth {
            return Err(Error::Config(format!(
                "layer index {n} out of range 0..={}",
                self.spec.depth
            )));
        }
        Ok(())
    }

    /// R^n: embedding plus blocks `1..=n` (no-grad).
    pub fn run_prefix(&self, x: &ImageBatch<T>, n: usize) -> Result<FeatureMapBatch<T>> {
        self.check_layer(n)?;
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false);
        let tok = self.embed_graph(&mut g, x, &nodes, None)?;
        let out = self.blocks_graph(&mut g, tok, &nodes, 0, n, x.len())?;
        Ok(FeatureMapBatch {
            values: g.value(out).clone(),
            batch: x.len(),
            layer_index: n,
            layout: self.spec.layout(),
        })
    }

    fn check_compat(&self, a: &FeatureMapBatch<T>, n: usize) -> Result<()> {
        if a.layer_index != n {
            return Err(Error::Compatibility(format!(
                "feature map is at layer {}, suffix expects layer {n}",
                a.layer_index
            )));
        }
        if a.layout != self.spec.layout() {
            return Err(Error::Compatibility(format!(
                "feature layout {:?} does not match backbone layout {:?}",
                a.layout,
                self.spec.layout()
            )));
        }
        if a.dim() != self.spec.width {
            return Err(Error::Compatibility(format!(
                "feature dim {} does not match backbone width {}",
                a.dim(),
                self.spec.width
            )));
        }
        Ok(())
    }

    /// T^N: blocks `n+1..=N` applied to layer-n features (no-grad).
    pub fn run_suffix(&self, a: &FeatureMapBatch<T>, n: usize) -> Result<FeatureMapBatch<T>> {
        self.check_layer(n)?;
        self.check_compat(a, n)?;
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false);
        let input = g.constant(a.values.clone());
        let out = self.blocks_graph(&mut g, input, &nodes, n, self.spec.depth, a.batch)?;
        Ok(FeatureMapBatch {
            values: g.value(out).clone(),
            batch: a.batch,
            layer_index: self.spec.depth,
            layout: a.layout,
        })
    }

    /// Pooled per-image vectors: the class token when present, else the mean
    /// over patch tokens.
    pub fn pool(a: &FeatureMapBatch<T>) -> Tensor<T> {
        let (k, d) = (a.tokens(), a.dim());
        let mut out = Tensor::zeros(vec![a.batch, d]);
        for b in 0..a.batch {
            let rows = a.sample_rows(b);
            let dst = &mut out.data_mut()[b * d..(b + 1) * d];
            if a.layout.has_class_token {
                dst.copy_from_slice(&rows[..d]);
            } else {
                let inv = T::one() / T::of_f64(k as f64);
                for t in 0..k {
                    for j in 0..d {
                        dst[j] = dst[j] + rows[t * d + j];
                    }
                }
                for v in dst.iter_mut() {
                    *v = *v * inv;
                }
            }
        }
        out
    }

    /// In-graph pooling over a `[batch·k, d]` node.
    pub fn pool_graph(&self, g: &mut Graph<T>, h: NodeId, batch: usize) -> Result<NodeId> {
        let k = self.spec.tokens();
        if self.spec.use_class_token {
            let rows: Vec<usize> = (0..batch).map(|b| b * k).collect();
            g.gather_rows(h, rows)
        } else {
            g.mean_pool_per_image(h, batch, k)
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── checkpointing ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    frozen: bool,
    scalar: String,
}

pub fn save_checkpoint<T: Scalar>(b: &Backbone<T>, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(CheckpointMeta {
        spec: b.spec.clone(),
        frozen: b.frozen,
        scalar: T::DTYPE.to_string(),
    })?;
    let sections: Vec<Section> = b
        .named_params()
        .iter()
        .map(|(name, t)| Section::from_tensor(name, t))
        .collect();
    container::save(path, "backbone", meta, &sections)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Backbone<T>> {
    let (header, sections) = container::load(path)?;
    if header.kind != "backbone" {
        return Err(Error::Container(format!(
            "expected a backbone checkpoint, found kind '{}'",
            header.kind
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(header.spec)?;
    meta.spec.validate()?;
    let mut fresh = init_backbone::<T>(&meta.spec, 0)?;

    let take = |name: &str, want: &[usize]| -> Result<Tensor<T>> {
        let s = container::section(&sections, name)?;
        let t: Tensor<T> = s.to_tensor()?;
        if t.shape() != want {
            return Err(Error::Container(format!(
                "section '{name}' has shape {:?}, spec implies {:?}",
                t.shape(),
                want
            )));
        }
        Ok(t)
    };

    fresh.patch_weight = take("patch_embed.weight", fresh.patch_weight.shape())?;
    fresh.patch_bias = take("patch_embed.bias", fresh.patch_bias.shape())?;
    fresh.pos_embed = take("pos_embed", fresh.pos_embed.shape())?;
    if fresh.cls_token.is_some() {
        fresh.cls_token = Some(take("cls_token", &[1, meta.spec.width])?);
    }
    for i in 0..meta.spec.depth {
        let p = format!("block{}", i + 1);
        let b = &mut fresh.blocks[i];
        b.ln1_gain = take(&format!("{p}.ln1.gain"), b.ln1_gain.shape())?;
        b.ln1_bias = take(&format!("{p}.ln1.bias"), b.ln1_bias.shape())?;
        b.wqkv = take(&format!("{p}.attn.wqkv"), b.wqkv.shape())?;
        b.bqkv = take(&format!("{p}.attn.bqkv"), b.bqkv.shape())?;
        b.wo = take(&format!("{p}.attn.wo"), b.wo.shape())?;
        b.bo = take(&format!("{p}.attn.bo"), b.bo.shape())?;
        b.ln2_gain = take(&format!("{p}.ln2.gain"), b.ln2_gain.shape())?;
        b.ln2_bias = take(&format!("{p}.ln2.bias"), b.ln2_bias.shape())?;
        b.w1 = take(&format!("{p}.mlp.w1"), b.w1.shape())?;
        b.b1 = take(&format!("{p}.mlp.b1"), b.b1.shape())?;
        b.w2 = take(&format!("{p}.mlp.w2"), b.w2.shape())?;
        b.b2 = take(&format!("{p}.mlp.b2"), b.b2.shape())?;
    }
    if sections.iter().any(|s| s.name == "head.weight") {
        fresh.head = Some((
            take("head.weight", &[meta.spec.width, meta.spec.num_classes])?,
            take("head.bias", &[meta.spec.num_classes])?,
        ));
    } else {
        fresh.head = None;
    }
    fresh.frozen = meta.frozen;
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> ModelSpec {
        ModelSpec {
            depth: 3,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            patch: 8,
            image: 16,
            use_class_token: false,
            num_classes: 0,
            objective_tag: Objective::Supervised,
        }
    }

    pub(crate) fn random_images(spec: &ModelSpec, batch: usize, seed: u64) -> ImageBatch<f32> {
        let mut r = StreamRng::new(seed, "images");
        ImageBatch::new(
            Tensor::from_fn(vec![batch, spec.image * spec.image * 3], |_| {
                r.uniform(0.0, 1.0) as f32
            }),
            spec.image,
        )
        .unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = tiny_spec();
        let a = init_backbone::<f32>(&spec, 5).unwrap();
        let b = init_backbone::<f32>(&spec, 5).unwrap();
        let c = init_backbone::<f32>(&spec, 6).unwrap();
        assert_eq!(a.param_digest(), b.param_digest());
        assert_ne!(a.param_digest(), c.param_digest());
    }

    #[test]
    fn token_count_arithmetic() {
        let mut spec = tiny_spec();
        spec.image = 32;
        spec.patch = 8;
        spec.use_class_token = false;
        assert_eq!(spec.tokens(), 16);
        spec.use_class_token = true;
        assert_eq!(spec.tokens(), 17);
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut spec = tiny_spec();
        spec.image = 30; // not divisible by patch 8
        let err = init_backbone::<f32>(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn prefix_zero_has_token_shape() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 1).unwrap();
        let x = random_images(&spec, 2, 9);
        let a0 = b.run_prefix(&x, 0).unwrap();
        assert_eq!(a0.values.shape(), &[2 * spec.tokens(), spec.width]);
        assert_eq!(a0.sample_matrix(0).shape(), &[spec.width, spec.tokens()]);
    }

    #[test]
    fn composition_identity_bit_exact_at_every_layer() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 2).unwrap();
        let x = random_images(&spec, 2, 3);
        let full = b.run_prefix(&x, spec.depth).unwrap();
        for n in 0..=spec.depth {
            let a = b.run_prefix(&x, n).unwrap();
            let resumed = b.run_suffix(&a, n).unwrap();
            assert_eq!(
                resumed.values.data(),
                full.values.data(),
                "composition differs at split {n}"
            );
        }
    }

    #[test]
    fn suffix_at_depth_is_identity() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 2).unwrap();
        let x = random_images(&spec, 1, 3);
        let a = b.run_prefix(&x, spec.depth).unwrap();
        let out = b.run_suffix(&a, spec.depth).unwrap();
        assert_eq!(out.values.data(), a.values.data());
    }

    #[test]
    fn batch_equals_stacked_single_calls() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 4).unwrap();
        let x = random_images(&spec, 2, 7);
        let batch = b.run_prefix(&x, 2).unwrap();
        for i in 0..2 {
            let row = x.pixels.data()[i * x.pixels.cols()..(i + 1) * x.pixels.cols()].to_vec();
            let single = ImageBatch::new(
                Tensor::new(vec![1, x.pixels.cols()], row).unwrap(),
                spec.image,
            )
            .unwrap();
            let one = b.run_prefix(&single, 2).unwrap();
            assert_eq!(one.values.data(), batch.sample_rows(i));
        }
    }

    #[test]
    fn layer_out_of_range_is_config_error() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 0).unwrap();
        let x = random_images(&spec, 1, 0);
        assert!(b.run_prefix(&x, spec.depth + 1).is_err());
    }

    #[test]
    fn suffix_rejects_wrong_layer_or_width() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 0).unwrap();
        let x = random_images(&spec, 1, 0);
        let a = b.run_prefix(&x, 1).unwrap();
        assert!(matches!(
            b.run_suffix(&a, 2),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn pool_of_constant_features_is_the_constant() {
        let spec = tiny_spec();
        let fm = FeatureMapBatch {
            values: Tensor::<f32>::filled(vec![spec.tokens(), spec.width], 0.625),
            batch: 1,
            layer_index: spec.depth,
            layout: spec.layout(),
        };
        let p = Backbone::pool(&fm);
        assert!(p.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn pool_selects_class_token_when_present() {
        let mut spec = tiny_spec();
        spec.use_class_token = true;
        let k = spec.tokens();
        let mut values = Tensor::<f32>::zeros(vec![k, spec.width]);
        for j in 0..spec.width {
            values.data_mut()[j] = j as f32; // class-token row
        }
        let fm = FeatureMapBatch {
            values,
            batch: 1,
            layer_index: spec.depth,
            layout: spec.layout(),
        };
        let p = Backbone::pool(&fm);
        for j in 0..spec.width {
            assert_eq!(p.data()[j], j as f32);
        }
    }

    #[test]
    fn pool_mean_matches_bruteforce_average() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 11).unwrap();
        let x = random_images(&spec, 2, 13);
        let a = b.run_prefix(&x, spec.depth).unwrap();
        let p = Backbone::pool(&a);
        for i in 0..2 {
            let rows = a.sample_rows(i);
            for j in 0..spec.width {
                let mut acc = 0.0f64;
                for t in 0..a.tokens() {
                    acc += rows[t * spec.width + j] as f64;
                }
                let want = (acc / a.tokens() as f64) as f32;
                let got = p.data()[i * spec.width + j];
                assert!((got - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("stchlab-bb-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 21).unwrap();
        let p1 = dir.join("a.stch1");
        let p2 = dir.join("b.stch1");
        save_checkpoint(&b, &p1).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.param_digest(), b.param_digest());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_checkpoint_is_corruption_error() {
        let dir = std::env::temp_dir().join(format!("stchlab-bbt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let b = init_backbone::<f32>(&tiny_spec(), 4).unwrap();
        let p = dir.join("t.stch1");
        save_checkpoint(&b, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn gradient_reaches_trainable_input_through_frozen_suffix() {
        let spec = tiny_spec();
        let mut bb = init_backbone::<f64>(&spec, 8).unwrap();
        bb.freeze();
        let k = spec.tokens();
        let mut r = StreamRng::new(5, "in");
        let a0 = Tensor::from_fn(vec![k, spec.width], |_| r.uniform(-0.5, 0.5));
        let err = crate::gradcheck::grad_check(
            &|g: &mut Graph<f64>, ps: &[NodeId]| {
                let nodes = bb.register(g, false);
                let out = bb.blocks_graph(g, ps[0], &nodes, 1, spec.depth, 1)?;
                g.sum_sq_scaled(out, 0.5)
            },
            &[a0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn block_exec_counter_counts_images_times_blocks() {
        let spec = tiny_spec();
        let b = init_backbone::<f32>(&spec, 0).unwrap();
        let x = random_images(&spec, 3, 1);
        b.reset_block_execs();
        b.run_prefix(&x, 2).unwrap();
        assert_eq!(b.block_execs(), 3 * 2);
    }
}
