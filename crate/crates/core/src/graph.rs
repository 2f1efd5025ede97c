//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records ops as they execute; each op appends one node holding
//! its output value, so node ids are already in topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node exactly
//! once. Gradients are only propagated along paths that reach a trainable
//! leaf, which is what lets a frozen backbone suffix carry activation
//! gradients to the stitch layer without paying for its own parameter
//! gradients.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf { trainable: bool },
    /// `[m,k] · [k,n]`
    Matmul { a: NodeId, b: NodeId },
    /// `[g,m,p] · [g,p,n]` batched over the leading extent.
    Bmm { a: NodeId, b: NodeId },
    /// `[g,m,p] · [g,n,p]ᵀ` batched.
    BmmNT { a: NodeId, b: NodeId },
    /// Broadcast row vector over the rows of a matrix.
    AddBias { x: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    /// Softmax over the last extent.
    Softmax { x: NodeId },
    /// Layernorm over the last extent, affine params `gain`/`bias`.
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// `[B·k, h·dh] → [B·h, k, dh]`
    ToHeads { x: NodeId, batch: usize, tokens: usize, heads: usize },
    /// Inverse of `ToHeads`.
    FromHeads { x: NodeId, batch: usize, tokens: usize, heads: usize },
    Reshape { x: NodeId },
    Transpose2d { x: NodeId },
    /// Column range of a 2-D tensor.
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Row-stack of two matrices with equal column count.
    ConcatRows { a: NodeId, b: NodeId },
    /// Copy with the given rows overwritten by a single broadcast row.
    ReplaceRows { x: NodeId, filler: NodeId, rows: Vec<usize> },
    /// Select rows by index.
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// `[B·k, d] → [B, d]`, mean over each image's token rows.
    MeanPoolPerImage { x: NodeId, batch: usize, tokens: usize },
    /// Add `[k, d]` to each image block of `[B·k, d]`.
    AddTiledRows { x: NodeId, p: NodeId, batch: usize },
    /// Insert one broadcast row in front of each image's token rows.
    PrependRowPerImage { x: NodeId, tok: NodeId, batch: usize, tokens: usize },
    /// Bilinear upsampling of `[B, h, w, C]` to `[B, H, W, C]`.
    Upsample2d { x: NodeId, batch: usize, h: usize, w: usize, out_h: usize, out_w: usize },
    /// Mean of squared differences over all elements.
    Mse { pred: NodeId, target: NodeId },
    /// `scale · Σ x²` — squared Frobenius norm with a constant factor.
    SumSqScaled { x: NodeId, scale: T },
    /// Mean cross-entropy of row logits against integer labels.
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    Sum { x: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Op-specific saved buffers (layernorm stats, softmax probs, ...).
    aux: Option<Vec<T>>,
}

/// Gradients returned by [`Graph::backward`], keyed by leaf node id.
#[derive(Debug)]
pub struct Grads<T> {
    entries: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.entries.get(id.0).and_then(|e| e.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.entries.get_mut(id.0).and_then(|e| e.take())
    }
}

/// Recorded computation over tensors.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf { trainable: true }, true, None)
    }

    /// Register a constant (non-trainable) leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf { trainable: false }, false, None)
    }

    /// Register a leaf, taking trainability from the tensor's flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        if value.requires_grad() {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push_unchecked(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        aux: Option<Vec<T>>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        aux: Option<Vec<T>>,
    ) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        Ok(self.push_unchecked(value, op, requires_grad, aux))
    }

    // ── op builders ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::gemm_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("matmul", out, Op::Matmul { a, b }, rg, None)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (g, m, p, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(vec![g, m, n]);
        for i in 0..g {
            kernels::gemm_acc(
                &self.nodes[a.0].value.data()[i * m * p..(i + 1) * m * p],
                &self.nodes[b.0].value.data()[i * p * n..(i + 1) * p * n],
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                m,
                p,
                n,
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("bmm", out, Op::Bmm { a, b }, rg, None)
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("bmm_nt", &sa, &sb));
        }
        let (g, m, p, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = Tensor::zeros(vec![g, m, n]);
        for i in 0..g {
            kernels::gemm_nt_acc(
                &self.nodes[a.0].value.data()[i * m * p..(i + 1) * m * p],
                &self.nodes[b.0].value.data()[i * n * p..(i + 1) * n * p],
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                m,
                p,
                n,
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("bmm_nt", out, Op::BmmNT { a, b }, rg, None)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let cols = *sx.last().unwrap();
        if sb != vec![cols] {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let bv = self.nodes[bias.0].value.data().to_vec();
        let mut out = self.nodes[x.0].value.clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push("add_bias", out, Op::AddBias { x, bias }, rg, None)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = f(*o, v);
        }
        Ok((out, self.requires_grad(a) || self.requires_grad(b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b }, rg, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, rg) = self.elementwise("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b }, rg, None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b }, rg, None)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let mut out = self.nodes[x.0].value.clone();
        for o in out.data_mut() {
            *o = *o * c;
        }
        let rg = self.requires_grad(x);
        self.push("scale", out, Op::Scale { x, c }, rg, None)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        kernels::relu(self.nodes[x.0].value.data(), out.data_mut());
        let rg = self.requires_grad(x);
        self.push("relu", out, Op::Relu { x }, rg, None)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        kernels::gelu(self.nodes[x.0].value.data(), out.data_mut());
        let rg = self.requires_grad(x);
        self.push("gelu", out, Op::Gelu { x }, rg, None)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let cols = *self.shape(x).last().unwrap();
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        kernels::softmax_rows(self.nodes[x.0].value.data(), out.data_mut(), cols);
        let rg = self.requires_grad(x);
        self.push("softmax", out, Op::Softmax { x }, rg, None)
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape("layernorm", &sx, self.shape(gain)));
        }
        let rows = self.nodes[x.0].value.len() / cols;
        let mut out = Tensor::zeros(sx);
        let mut stats = vec![T::zero(); 2 * rows];
        kernels::layernorm_rows(
            self.nodes[x.0].value.data(),
            self.nodes[gain.0].value.data(),
            self.nodes[bias.0].value.data(),
            out.data_mut(),
            &mut stats,
            cols,
        );
        let rg =
            self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push("layernorm", out, Op::LayerNorm { x, gain, bias }, rg, Some(stats))
    }

    pub fn to_heads(&mut self, x: NodeId, batch: usize, tokens: usize, heads: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if sx != vec![batch * tokens, d] || d % heads != 0 {
            return Err(Error::shape("to_heads", &sx, &[batch * tokens, d]));
        }
        let dh = d / heads;
        let xv = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(vec![batch * heads, tokens, dh]);
        {
            let o = out.data_mut();
            for b in 0..batch {
                for t in 0..tokens {
                    let src = (b * tokens + t) * d;
                    for h in 0..heads {
                        let dst = ((b * heads + h) * tokens + t) * dh;
                        o[dst..dst + dh].copy_from_slice(&xv[src + h * dh..src + (h + 1) * dh]);
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push("to_heads", out, Op::ToHeads { x, batch, tokens, heads }, rg, None)
    }

    pub fn from_heads(&mut self, x: NodeId, batch: usize, tokens: usize, heads: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[0] != batch * heads || sx[1] != tokens {
            return Err(Error::shape("from_heads", &sx, &[batch * heads, tokens]));
        }
        let dh = sx[2];
        let d = heads * dh;
        let xv = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(vec![batch * tokens, d]);
        {
            let o = out.data_mut();
            for b in 0..batch {
                for h in 0..heads {
                    for t in 0..tokens {
                        let src = ((b * heads + h) * tokens + t) * dh;
                        let dst = (b * tokens + t) * d + h * dh;
                        o[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push("from_heads", out, Op::FromHeads { x, batch, tokens, heads }, rg, None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        self.push("reshape", out, Op::Reshape { x }, rg, None)
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("transpose2d", &sx, &[0, 0]));
        }
        let out = self.nodes[x.0].value.transposed();
        let rg = self.requires_grad(x);
        self.push("transpose2d", out, Op::Transpose2d { x }, rg, None)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if sx.len() != 2 || start + len > cols {
            return Err(Error::shape("slice_cols", &sx, &[start, len]));
        }
        let rows = sx[0];
        let xv = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(vec![rows, len]);
        {
            let o = out.data_mut();
            for i in 0..rows {
                o[i * len..(i + 1) * len]
                    .copy_from_slice(&xv[i * cols + start..i * cols + start + len]);
            }
        }
        let rg = self.requires_grad(x);
        self.push("slice_cols", out, Op::SliceCols { x, start, len }, rg, None)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("concat_rows", &sa, &sb));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        data.extend_from_slice(self.nodes[b.0].value.data());
        let out = Tensor::new(vec![sa[0] + sb[0], sa[1]], data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("concat_rows", out, Op::ConcatRows { a, b }, rg, None)
    }

    pub fn replace_rows(&mut self, x: NodeId, filler: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if self.shape(filler) != [1, cols] || rows.iter().any(|&r| r >= sx[0]) {
            return Err(Error::shape("replace_rows", &sx, self.shape(filler)));
        }
        let fv = self.nodes[filler.0].value.data().to_vec();
        let mut out = self.nodes[x.0].value.clone();
        for &r in &rows {
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&fv);
        }
        let rg = self.requires_grad(x) || self.requires_grad(filler);
        self.push("replace_rows", out, Op::ReplaceRows { x, filler, rows }, rg, None)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if sx.len() != 2 || rows.iter().any(|&r| r >= sx[0]) {
            return Err(Error::shape("gather_rows", &sx, &[rows.len()]));
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(vec![rows.len(), cols]);
        for (i, &r) in rows.iter().enumerate() {
            out.data_mut()[i * cols..(i + 1) * cols]
                .copy_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires_grad(x);
        self.push("gather_rows", out, Op::GatherRows { x, rows }, rg, None)
    }

    pub fn mean_pool_per_image(&mut self, x: NodeId, batch: usize, tokens: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if sx != vec![batch * tokens, cols] {
            return Err(Error::shape("mean_pool_per_image", &sx, &[batch * tokens, cols]));
        }
        let inv = T::one() / T::of_f64(tokens as f64);
        let xv = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(vec![batch, cols]);
        {
            let o = out.data_mut();
            for b in 0..batch {
                for t in 0..tokens {
                    let src = (b * tokens + t) * cols;
                    for j in 0..cols {
                        o[b * cols + j] = o[b * cols + j] + xv[src + j];
                    }
                }
                for j in 0..cols {
                    o[b * cols + j] = o[b * cols + j] * inv;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push("mean_pool_per_image", out, Op::MeanPoolPerImage { x, batch, tokens }, rg, None)
    }

    pub fn add_tiled_rows(&mut self, x: NodeId, p: NodeId, batch: usize) -> Result<NodeId> {
        let (sx, sp) = (self.shape(x).to_vec(), self.shape(p).to_vec());
        if sp.len() != 2 || sx != vec![batch * sp[0], sp[1]] {
            return Err(Error::shape("add_tiled_rows", &sx, &sp));
        }
        let pv = self.nodes[p.0].value.data().to_vec();
        let mut out = self.nodes[x.0].value.clone();
        for block in out.data_mut().chunks_exact_mut(pv.len()) {
            for (o, &v) in block.iter_mut().zip(&pv) {
                *o = *o + v;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(p);
        self.push("add_tiled_rows", out, Op::AddTiledRows { x, p, batch }, rg, None)
    }

    pub fn prepend_row_per_image(
        &mut self,
        x: NodeId,
        tok: NodeId,
        batch: usize,
        tokens: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if sx != vec![batch * tokens, cols] || self.shape(tok) != [1, cols] {
            return Err(Error::shape("prepend_row_per_image", &sx, self.shape(tok)));
        }
        let tv = self.nodes[tok.0].value.data().to_vec();
        let xv = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(vec![batch * (tokens + 1), cols]);
        {
            let o = out.data_mut();
            for b in 0..batch {
                let dst = b * (tokens + 1) * cols;
                o[dst..dst + cols].copy_from_slice(&tv);
                let src = b * tokens * cols;
                o[dst + cols..dst + (tokens + 1) * cols]
                    .copy_from_slice(&xv[src..src + tokens * cols]);
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(tok);
        self.push("prepend_row_per_image", out, Op::PrependRowPerImage { x, tok, batch, tokens }, rg, None)
    }

    pub fn upsample2d(
        &mut self,
        x: NodeId,
        batch: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        if sx != vec![batch * h * w, c] || out_h < h || out_w < w {
            return Err(Error::shape("upsample2d", &sx, &[batch * h * w, c]));
        }
        let ys = kernels::bilinear_axis(h, out_h);
        let xs = kernels::bilinear_axis(w, out_w);
        let xv = self.nodes[x.0].value.data();
        let mut out = Tensor::zeros(vec![batch * out_h * out_w, c]);
        {
            let o = out.data_mut();
            for b in 0..batch {
                let base = b * h * w;
                for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                        let dst = ((b * out_h + oy) * out_w + ox) * c;
                        let s00 = (base + y0 * w + x0) * c;
                        let s01 = (base + y0 * w + x1) * c;
                        let s10 = (base + y1 * w + x0) * c;
                        let s11 = (base + y1 * w + x1) * c;
                        let (w00, w01, w10, w11) = (
                            T::of_f64(wy0 * wx0),
                            T::of_f64(wy0 * wx1),
                            T::of_f64(wy1 * wx0),
                            T::of_f64(wy1 * wx1),
                        );
                        for j in 0..c {
                            o[dst + j] = xv[s00 + j] * w00
                                + xv[s01 + j] * w01
                                + xv[s10 + j] * w10
                                + xv[s11 + j] * w11;
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push("upsample2d", out, Op::Upsample2d { x, batch, h, w, out_h, out_w }, rg, None)
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        if sp != st {
            return Err(Error::shape("mse", &sp, &st));
        }
        let n = T::of_f64(self.nodes[pred.0].value.len() as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.nodes[pred.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[target.0].value.data())
        {
            let d = p - t;
            acc = acc + d * d;
        }
        let out = Tensor::scalar(acc / n);
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        self.push("mse", out, Op::Mse { pred, target }, rg, None)
    }

    pub fn sum_sq_scaled(&mut self, x: NodeId, scale: T) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v * v;
        }
        let out = Tensor::scalar(acc * scale);
        let rg = self.requires_grad(x);
        self.push("sum_sq_scaled", out, Op::SumSqScaled { x, scale }, rg, None)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &sl, &[labels.len()]));
        }
        let classes = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let rows = sl[0];
        let mut probs = vec![T::zero(); rows * classes];
        kernels::softmax_rows(self.nodes[logits.0].value.data(), &mut probs, classes);
        let mut acc = T::zero();
        let lv = self.nodes[logits.0].value.data();
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * classes..(i + 1) * classes];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut lse = T::zero();
            for &v in row {
                lse = lse + (v - mx).exp();
            }
            acc = acc + (mx + lse.ln()) - row[label];
        }
        let out = Tensor::scalar(acc / T::of_f64(rows as f64));
        let rg = self.requires_grad(logits);
        self.push("cross_entropy", out, Op::CrossEntropy { logits, labels }, rg, Some(probs))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let out = Tensor::scalar(acc);
        let rg = self.requires_grad(x);
        self.push("sum", out, Op::Sum { x }, rg, None)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Consumes the graph; every trainable
    /// leaf that the root depends on receives its gradient in the result.
    pub fn backward(self, root: NodeId) -> Result<Grads<T>> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf { trainable: true }) {
                grads[idx] = Some(gout);
            }
        }

        let mut entries: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { trainable: true }) {
                if let Some(g) = grads[idx].take() {
                    entries.push(Some(
                        Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                    ));
                    continue;
                }
            }
            entries.push(None);
        }
        Ok(Grads { entries })
    }

    fn grad_slice<'a>(
        nodes: &[Node<T>],
        grads: &'a mut [Option<Vec<T>>],
        id: NodeId,
    ) -> Option<&'a mut [T]> {
        if !nodes[id.0].requires_grad {
            return None;
        }
        let len = nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b.0].value.shape()[1];
                if nodes[a.0].requires_grad {
                    // dA = dC·Bᵀ; materialize Bᵀ so the product runs on the
                    // fast non-reducing gemm path (B is a small weight).
                    let bt = nodes[b.0].value.transposed();
                    let da = Self::grad_slice(nodes, grads, *a).unwrap();
                    kernels::gemm_acc(gout, bt.data(), da, m, n, k);
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    let db = Self::grad_slice(nodes, grads, *b).unwrap();
                    kernels::gemm_tn_acc(av, gout, db, m, k, n);
                }
            }
            Op::Bmm { a, b } => {
                let sa = nodes[a.0].value.shape().to_vec();
                let sb = nodes[b.0].value.shape().to_vec();
                let (g, m, p, nn) = (sa[0], sa[1], sa[2], sb[2]);
                if nodes[a.0].requires_grad {
                    let bv = nodes[b.0].value.data();
                    let da = Self::grad_slice(nodes, grads, *a).unwrap();
                    for i in 0..g {
                        // dA[m,p] = dC[m,n] · B[p,n]ᵀ — B's stored layout already
                        // matches gemm_nt's transposed operand.
                        kernels::gemm_nt_acc(
                            &gout[i * m * nn..(i + 1) * m * nn],
                            &bv[i * p * nn..(i + 1) * p * nn],
                            &mut da[i * m * p..(i + 1) * m * p],
                            m,
                            nn,
                            p,
                        );
                    }
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    let db = Self::grad_slice(nodes, grads, *b).unwrap();
                    for i in 0..g {
                        kernels::gemm_tn_acc(
                            &av[i * m * p..(i + 1) * m * p],
                            &gout[i * m * nn..(i + 1) * m * nn],
                            &mut db[i * p * nn..(i + 1) * p * nn],
                            m,
                            p,
                            nn,
                        );
                    }
                }
            }
            Op::BmmNT { a, b } => {
                let sa = nodes[a.0].value.shape().to_vec();
                let sb = nodes[b.0].value.shape().to_vec();
                let (g, m, p, nn) = (sa[0], sa[1], sa[2], sb[1]);
                if nodes[a.0].requires_grad {
                    let bv = nodes[b.0].value.data();
                    let da = Self::grad_slice(nodes, grads, *a).unwrap();
                    for i in 0..g {
                        kernels::gemm_acc(
                            &gout[i * m * nn..(i + 1) * m * nn],
                            &bv[i * nn * p..(i + 1) * nn * p],
                            &mut da[i * m * p..(i + 1) * m * p],
                            m,
                            nn,
                            p,
                        );
                    }
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    let db = Self::grad_slice(nodes, grads, *b).unwrap();
                    for i in 0..g {
                        kernels::gemm_tn_acc(
                            &gout[i * m * nn..(i + 1) * m * nn],
                            &av[i * m * p..(i + 1) * m * p],
                            &mut db[i * nn * p..(i + 1) * nn * p],
                            m,
                            nn,
                            p,
                        );
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let cols = nodes[bias.0].value.len();
                if nodes[x.0].requires_grad {
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d = *d + g;
                    }
                }
                if nodes[bias.0].requires_grad {
                    let db = Self::grad_slice(nodes, grads, *bias).unwrap();
                    for row in gout.chunks_exact(cols) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if nodes[id.0].requires_grad {
                        let d = Self::grad_slice(nodes, grads, *id).unwrap();
                        for (dv, &g) in d.iter_mut().zip(gout) {
                            *dv = *dv + g;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if nodes[a.0].requires_grad {
                    let d = Self::grad_slice(nodes, grads, *a).unwrap();
                    for (dv, &g) in d.iter_mut().zip(gout) {
                        *dv = *dv + g;
                    }
                }
                if nodes[b.0].requires_grad {
                    let d = Self::grad_slice(nodes, grads, *b).unwrap();
                    for (dv, &g) in d.iter_mut().zip(gout) {
                        *dv = *dv - g;
                    }
                }
            }
            Op::Mul { a, b } => {
                if nodes[a.0].requires_grad {
                    let bv = nodes[b.0].value.data();
                    let d = Self::grad_slice(nodes, grads, *a).unwrap();
                    for ((dv, &g), &v) in d.iter_mut().zip(gout).zip(bv) {
                        *dv = *dv + g * v;
                    }
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    let d = Self::grad_slice(nodes, grads, *b).unwrap();
                    for ((dv, &g), &v) in d.iter_mut().zip(gout).zip(av) {
                        *dv = *dv + g * v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if nodes[x.0].requires_grad {
                    let d = Self::grad_slice(nodes, grads, *x).unwrap();
                    for (dv, &g) in d.iter_mut().zip(gout) {
                        *dv = *dv + g * *c;
                    }
                }
            }
            Op::Relu { x } => {
                if nodes[x.0].requires_grad {
                    let xv = nodes[x.0].value.data();
                    let d = Self::grad_slice(nodes, grads, *x).unwrap();
                    kernels::relu_backward(xv, gout, d);
                }
            }
            Op::Gelu { x } => {
                if nodes[x.0].requires_grad {
                    let xv = nodes[x.0].value.data();
                    let d = Self::grad_slice(nodes, grads, *x).unwrap();
                    kernels::gelu_backward(xv, gout, d);
                }
            }
            Op::Softmax { x } => {
                if nodes[x.0].requires_grad {
                    let cols = *node.value.shape().last().unwrap();
                    let yv = node.value.data();
                    let d = Self::grad_slice(nodes, grads, *x).unwrap();
                    kernels::softmax_backward(yv, gout, d, cols);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let cols = *node.value.shape().last().unwrap();
                let stats = node.aux.as_ref().expect("layernorm stats");
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data().to_vec();
                // Gain/bias grads are accumulated first into temporaries to
                // avoid double borrows of the grads vec.
                let want_g = nodes[gain.0].requires_grad;
                let want_b = nodes[bias.0].requires_grad;
                let mut tg = vec![T::zero(); cols];
                let mut tb = vec![T::zero(); cols];
                if nodes[x.0].requires_grad {
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    kernels::layernorm_backward(
                        xv,
                        &gv,
                        stats,
                        gout,
                        dx,
                        want_g.then_some(&mut tg[..]),
                        want_b.then_some(&mut tb[..]),
                        cols,
                    );
                } else {
                    let mut scratch = vec![T::zero(); xv.len()];
                    kernels::layernorm_backward(
                        xv,
                        &gv,
                        stats,
                        gout,
                        &mut scratch,
                        want_g.then_some(&mut tg[..]),
                        want_b.then_some(&mut tb[..]),
                        cols,
                    );
                }
                if want_g {
                    let dg = Self::grad_slice(nodes, grads, *gain).unwrap();
                    for (d, &v) in dg.iter_mut().zip(&tg) {
                        *d = *d + v;
                    }
                }
                if want_b {
                    let db = Self::grad_slice(nodes, grads, *bias).unwrap();
                    for (d, &v) in db.iter_mut().zip(&tb) {
                        *d = *d + v;
                    }
                }
            }
            Op::ToHeads { x, batch, tokens, heads } => {
                if nodes[x.0].requires_grad {
                    let d = nodes[x.0].value.shape()[1];
                    let dh = d / heads;
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            let dst = (b * tokens + t) * d;
                            for h in 0..*heads {
                                let src = ((b * heads + h) * tokens + t) * dh;
                                for j in 0..dh {
                                    dx[dst + h * dh + j] = dx[dst + h * dh + j] + gout[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::FromHeads { x, batch, tokens, heads } => {
                if nodes[x.0].requires_grad {
                    let dh = nodes[x.0].value.shape()[2];
                    let d = heads * dh;
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*tokens {
                                let dst = ((b * heads + h) * tokens + t) * dh;
                                let src = (b * tokens + t) * d + h * dh;
                                for j in 0..dh {
                                    dx[dst + j] = dx[dst + j] + gout[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if nodes[x.0].requires_grad {
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d = *d + g;
                    }
                }
            }
            Op::Transpose2d { x } => {
                if nodes[x.0].requires_grad {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + gout[j * r + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if nodes[x.0].requires_grad {
                    let cols = nodes[x.0].value.shape()[1];
                    let rows = nodes[x.0].value.shape()[0];
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for i in 0..rows {
                        for j in 0..*len {
                            dx[i * cols + start + j] = dx[i * cols + start + j] + gout[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = nodes[a.0].value.len();
                if nodes[a.0].requires_grad {
                    let da = Self::grad_slice(nodes, grads, *a).unwrap();
                    for (d, &g) in da.iter_mut().zip(&gout[..na]) {
                        *d = *d + g;
                    }
                }
                if nodes[b.0].requires_grad {
                    let db = Self::grad_slice(nodes, grads, *b).unwrap();
                    for (d, &g) in db.iter_mut().zip(&gout[na..]) {
                        *d = *d + g;
                    }
                }
            }
            Op::ReplaceRows { x, filler, rows } => {
                let cols = *node.value.shape().last().unwrap();
                if nodes[x.0].requires_grad {
                    let replaced: std::collections::HashSet<usize> = rows.iter().copied().collect();
                    let total_rows = nodes[x.0].value.len() / cols;
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for r in 0..total_rows {
                        if replaced.contains(&r) {
                            continue;
                        }
                        for j in 0..cols {
                            dx[r * cols + j] = dx[r * cols + j] + gout[r * cols + j];
                        }
                    }
                }
                if nodes[filler.0].requires_grad {
                    let df = Self::grad_slice(nodes, grads, *filler).unwrap();
                    for &r in rows {
                        for j in 0..cols {
                            df[j] = df[j] + gout[r * cols + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if nodes[x.0].requires_grad {
                    let cols = *node.value.shape().last().unwrap();
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..cols {
                            dx[r * cols + j] = dx[r * cols + j] + gout[i * cols + j];
                        }
                    }
                }
            }
            Op::MeanPoolPerImage { x, batch, tokens } => {
                if nodes[x.0].requires_grad {
                    let cols = *node.value.shape().last().unwrap();
                    let inv = T::one() / T::of_f64(*tokens as f64);
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            let dst = (b * tokens + t) * cols;
                            for j in 0..cols {
                                dx[dst + j] = dx[dst + j] + gout[b * cols + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::AddTiledRows { x, p, batch } => {
                if nodes[x.0].requires_grad {
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d = *d + g;
                    }
                }
                if nodes[p.0].requires_grad {
                    let plen = nodes[p.0].value.len();
                    let dp = Self::grad_slice(nodes, grads, *p).unwrap();
                    for b in 0..*batch {
                        for (d, &g) in dp.iter_mut().zip(&gout[b * plen..(b + 1) * plen]) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::PrependRowPerImage { x, tok, batch, tokens } => {
                let cols = *node.value.shape().last().unwrap();
                if nodes[x.0].requires_grad {
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for b in 0..*batch {
                        let src = (b * (tokens + 1) + 1) * cols;
                        let dst = b * tokens * cols;
                        for j in 0..tokens * cols {
                            dx[dst + j] = dx[dst + j] + gout[src + j];
                        }
                    }
                }
                if nodes[tok.0].requires_grad {
                    let dt = Self::grad_slice(nodes, grads, *tok).unwrap();
                    for b in 0..*batch {
                        let src = b * (tokens + 1) * cols;
                        for j in 0..cols {
                            dt[j] = dt[j] + gout[src + j];
                        }
                    }
                }
            }
            Op::Upsample2d { x, batch, h, w, out_h, out_w } => {
                if nodes[x.0].requires_grad {
                    let c = *node.value.shape().last().unwrap();
                    let ys = kernels::bilinear_axis(*h, *out_h);
                    let xs = kernels::bilinear_axis(*w, *out_w);
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for b in 0..*batch {
                        let base = b * h * w;
                        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                                let src = ((b * out_h + oy) * out_w + ox) * c;
                                let d00 = (base + y0 * w + x0) * c;
                                let d01 = (base + y0 * w + x1) * c;
                                let d10 = (base + y1 * w + x0) * c;
                                let d11 = (base + y1 * w + x1) * c;
                                let (w00, w01, w10, w11) = (
                                    T::of_f64(wy0 * wx0),
                                    T::of_f64(wy0 * wx1),
                                    T::of_f64(wy1 * wx0),
                                    T::of_f64(wy1 * wx1),
                                );
                                for j in 0..c {
                                    let g = gout[src + j];
                                    dx[d00 + j] = dx[d00 + j] + g * w00;
                                    dx[d01 + j] = dx[d01 + j] + g * w01;
                                    dx[d10 + j] = dx[d10 + j] + g * w10;
                                    dx[d11 + j] = dx[d11 + j] + g * w11;
                                }
                            }
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let g = gout[0];
                let n = T::of_f64(nodes[pred.0].value.len() as f64);
                let two = T::of_f64(2.0);
                if nodes[pred.0].requires_grad {
                    let tv = nodes[target.0].value.data();
                    let pv = nodes[pred.0].value.data();
                    let diffs: Vec<T> = pv.iter().zip(tv).map(|(&p, &t)| p - t).collect();
                    let dp = Self::grad_slice(nodes, grads, *pred).unwrap();
                    for (d, df) in dp.iter_mut().zip(&diffs) {
                        *d = *d + two * *df / n * g;
                    }
                }
                if nodes[target.0].requires_grad {
                    let tv = nodes[target.0].value.data();
                    let pv = nodes[pred.0].value.data();
                    let diffs: Vec<T> = pv.iter().zip(tv).map(|(&p, &t)| p - t).collect();
                    let dt = Self::grad_slice(nodes, grads, *target).unwrap();
                    for (d, df) in dt.iter_mut().zip(&diffs) {
                        *d = *d - two * *df / n * g;
                    }
                }
            }
            Op::SumSqScaled { x, scale } => {
                if nodes[x.0].requires_grad {
                    let g = gout[0];
                    let two = T::of_f64(2.0);
                    let xv = nodes[x.0].value.data().to_vec();
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for (d, &v) in dx.iter_mut().zip(&xv) {
                        *d = *d + two * *scale * v * g;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if nodes[logits.0].requires_grad {
                    let g = gout[0];
                    let classes = nodes[logits.0].value.shape()[1];
                    let inv_n = T::one() / T::of_f64(labels.len() as f64);
                    let probs = node.aux.as_ref().expect("ce probs");
                    let dl = Self::grad_slice(nodes, grads, *logits).unwrap();
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let ind = if j == label { T::one() } else { T::zero() };
                            dl[i * classes + j] =
                                dl[i * classes + j] + (probs[i * classes + j] - ind) * inv_n * g;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if nodes[x.0].requires_grad {
                    let g = gout[0];
                    let dx = Self::grad_slice(nodes, grads, *x).unwrap();
                    for d in dx.iter_mut() {
                        *d = *d + g;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::<f64>::eye(3));
        let x = g.constant(Tensor::from_fn(vec![3, 5], |i| i as f64 * 0.25 - 1.0));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::zeros(vec![2, 2]));
        let err = g.backward(w).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot { .. }));
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_w() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let root = g.sum(sq).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    /// 2x2 linear layer through MSE, gradients hand-derived beforehand:
    /// y = xW + c with x=[1,2], W=[[0.3,0.1],[-0.2,0.4]], c=[0.05,-0.15],
    /// b=[0.5,-1] gives e = y-b = (-0.55, 1.75), L = mean(e²) = 1.6825,
    /// dW = xᵀe, dc = e.
    #[test]
    fn mse_linear_matches_hand_derivation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap());
        let w = g.param(Tensor::new(vec![2, 2], vec![0.3, 0.1, -0.2, 0.4]).unwrap());
        let c = g.param(Tensor::new(vec![2], vec![0.05, -0.15]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_bias(xw, c).unwrap();
        let loss = g.mse(y, b).unwrap();
        assert!((g.value(loss).item() - 1.6825).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let dw = grads.get(w).unwrap();
        let dc = grads.get(c).unwrap();
        for (got, want) in dw.data().iter().zip(&[-0.55, 1.75, -1.1, 3.5]) {
            assert!((got - want).abs() < 1e-12, "dw {got} vs {want}");
        }
        for (got, want) in dc.data().iter().zip(&[-0.55, 1.75]) {
            assert!((got - want).abs() < 1e-12, "dc {got} vs {want}");
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::<f64>::zeros(vec![4, 7]));
        let loss = g.cross_entropy(logits, vec![0, 3, 5, 6]).unwrap();
        assert!((g.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.cross_entropy(logits, vec![0, 3]).is_err());
    }

    #[test]
    fn non_finite_output_is_refused() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1], vec![3.0e38f32]).unwrap());
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn frozen_path_gets_no_parameter_gradient() {
        let mut g = Graph::new();
        let frozen = g.constant(Tensor::<f64>::eye(2));
        let w = g.param(Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let h = g.matmul(w, frozen).unwrap();
        let root = g.sum_sq_scaled(h, 1.0).unwrap();
        let grads = g.backward(root).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(frozen).is_none());
    }
}
