//! Wengert tape: records forward operations, replays them in reverse for
//! gradients.
//!
//! Values live in the tape arena; [`TensorId`] indexes into it. Leaves are
//! registered with a `requires_grad` flag; frozen leaves never accumulate
//! gradient, so their reported gradient stays zero. Every forward output is
//! checked for NaN/Inf and reported as an error instead of propagating.

use super::kernels as k;
use super::{Scalar, Shape, Tensor};
use crate::error::{EvccError, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Padding for the depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Wrap-around padding; used by the shift-equivariance test mode.
    Circular,
}

enum Op<T> {
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    MatMulNT { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    AddBias { x: TensorId, bias: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Affine { x: TensorId, mul: T, out: TensorId },
    ScaleByScalar { x: TensorId, s: TensorId, out: TensorId },
    RowScaleTokens { x: TensorId, s: TensorId, out: TensorId },
    RowScale { x: TensorId, s: TensorId, out: TensorId },
    SliceCols { x: TensorId, start: usize, out: TensorId },
    Gelu { x: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    Softmax { x: TensorId, axis: usize, out: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64, out: TensorId },
    ImagePatches { x: TensorId, p: usize, out: TensorId },
    TokenPatches { x: TensorId, h: usize, w: usize, p: usize, out: TensorId },
    DwConv3x3 { x: TensorId, w: TensorId, h: usize, wid: usize, pad: PadMode, out: TensorId },
    SplitHeads { x: TensorId, heads: usize, out: TensorId },
    MergeHeads { x: TensorId, heads: usize, out: TensorId },
    GatherTokens { x: TensorId, idx: Vec<Vec<usize>>, out: TensorId },
    MeanTokens { x: TensorId, out: TensorId },
    ConcatTokens { parts: Vec<TensorId>, out: TensorId },
    ConcatLast { parts: Vec<TensorId>, out: TensorId },
    Unsqueeze { x: TensorId, out: TensorId },
    SqueezeLast { x: TensorId, out: TensorId },
    CrossEntropyMean { logits: TensorId, labels: Vec<usize>, out: TensorId },
    AddScaled { a: TensorId, b: TensorId, c: T, out: TensorId },
    SumAll { x: TensorId, out: TensorId },
}

pub struct Tape<T: Scalar> {
    vals: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    leaf_no_grad: Vec<bool>,
    ops: Vec<Op<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            grads: Vec::new(),
            leaf_no_grad: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    /// Register a leaf tensor. Frozen leaves (`requires_grad == false`)
    /// never accumulate gradient.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.vals.len());
        self.vals.push(t);
        self.grads.push(None);
        self.leaf_no_grad.push(!requires_grad);
        id
    }

    /// Register a non-trainable input (images, constants).
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.leaf(t, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.vals[id.0]
    }

    /// Gradient buffer, if any flowed to this tensor.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as a tensor, zeros when nothing flowed.
    pub fn grad_tensor(&self, id: TensorId) -> Tensor<T> {
        let shape = self.vals[id.0].shape();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::new(shape, vec![T::ZERO; shape.numel()]).expect("grad shape"),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.vals.len()
    }

    fn push(&mut self, name: &'static str, t: Tensor<T>) -> Result<TensorId> {
        if !t.all_finite() {
            return Err(EvccError::NonFinite(name.to_string()));
        }
        let id = TensorId(self.vals.len());
        self.vals.push(t);
        self.grads.push(None);
        self.leaf_no_grad.push(false);
        Ok(id)
    }

    fn shape(&self, id: TensorId) -> Shape {
        self.vals[id.0].shape()
    }

    // ---- forward op builders -------------------------------------------

    /// Matrix product. Accepts [m,k]x[k,n], [B,m,k]x[k,n] (shared rhs), and
    /// [B,m,k]x[B,k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, kk, n, rhs_batched) = match (sa.rank(), sb.rank()) {
            (2, 2) => (1, sa.dims()[0], sa.dims()[1], sb.dims()[1], false),
            (3, 2) => (sa.dims()[0], sa.dims()[1], sa.dims()[2], sb.dims()[1], false),
            (3, 3) if sa.dims()[0] == sb.dims()[0] => {
                (sa.dims()[0], sa.dims()[1], sa.dims()[2], sb.dims()[2], true)
            }
            _ => {
                return Err(EvccError::Dimension(format!(
                    "matmul: incompatible ranks/batches {:?} x {:?}",
                    sa, sb
                )))
            }
        };
        let b_k = if rhs_batched { sb.dims()[1] } else { sb.dims()[0] };
        if b_k != kk {
            return Err(EvccError::Dimension(format!(
                "matmul: inner extents differ, {:?} x {:?}",
                sa, sb
            )));
        }
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let av = self.vals[a.0].data();
            let bv = self.vals[b.0].data();
            let out_slices: Vec<&mut [T]> = out.chunks_mut(m * n).collect();
            k::for_each_batch_slices(out_slices, |bi, out_b| {
                let a_b = &av[bi * m * kk..(bi + 1) * m * kk];
                let b_b = if rhs_batched {
                    &bv[bi * kk * n..(bi + 1) * kk * n]
                } else {
                    bv
                };
                k::matmul_2d(a_b, b_b, out_b, m, kk, n);
            });
        }
        let shape = if sa.rank() == 2 {
            Shape::of(&[m, n])
        } else {
            Shape::of(&[batch, m, n])
        };
        let out = self.push("matmul", Tensor::new(shape, out)?)?;
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// Batched a · b^T: [B,m,k] x [B,n,k] -> [B,m,n].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 3 || sb.rank() != 3 || sa.dims()[0] != sb.dims()[0]
            || sa.dims()[2] != sb.dims()[2]
        {
            return Err(EvccError::Dimension(format!(
                "matmul_nt: want [B,m,k]x[B,n,k], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (batch, m, kk) = (sa.dims()[0], sa.dims()[1], sa.dims()[2]);
        let n = sb.dims()[1];
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let av = self.vals[a.0].data();
            let bv = self.vals[b.0].data();
            let out_slices: Vec<&mut [T]> = out.chunks_mut(m * n).collect();
            k::for_each_batch_slices(out_slices, |bi, out_b| {
                k::matmul_2d_nt(
                    &av[bi * m * kk..(bi + 1) * m * kk],
                    &bv[bi * n * kk..(bi + 1) * n * kk],
                    out_b,
                    m,
                    kk,
                    n,
                );
            });
        }
        let out = self.push("matmul_nt", Tensor::from_vec(&[batch, m, n], out)?)?;
        self.ops.push(Op::MatMulNT { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(EvccError::Dimension(format!(
                "add: shapes differ {:?} vs {:?}",
                sa, sb
            )));
        }
        let data: Vec<T> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = self.push("add", Tensor::new(sa, data)?)?;
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// x + bias with bias broadcast over leading axes; the bias shape must
    /// equal a suffix of the x shape (e.g. [d] against [B,N,d], or [N,d]
    /// against [B,N,d] for positional embeddings).
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let suffix_ok = sb.rank() <= sx.rank()
            && sx.dims()[sx.rank() - sb.rank()..] == *sb.dims();
        if !suffix_ok {
            return Err(EvccError::Dimension(format!(
                "add_bias: bias {:?} is not a suffix of {:?}",
                sb, sx
            )));
        }
        let d = sb.numel();
        let bv = self.vals[bias.0].data().to_vec();
        let data: Vec<T> = self.vals[x.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        let out = self.push("add_bias", Tensor::new(sx, data)?)?;
        self.ops.push(Op::AddBias { x, bias, out });
        Ok(out)
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(EvccError::Dimension(format!(
                "mul: shapes differ {:?} vs {:?}",
                sa, sb
            )));
        }
        let data: Vec<T> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = self.push("mul", Tensor::new(sa, data)?)?;
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// mul * x + add, element-wise with constants.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let (m, c) = (T::from_f64(mul), T::from_f64(add));
        let sx = self.shape(x);
        let data: Vec<T> = self.vals[x.0].data().iter().map(|&v| m * v + c).collect();
        let out = self.push("affine", Tensor::new(sx, data)?)?;
        self.ops.push(Op::Affine { x, mul: m, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.affine(x, c, 0.0)
    }

    /// x scaled by a learnable scalar s (shape [1]).
    pub fn scale_by_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.shape(s).numel() != 1 {
            return Err(EvccError::Dimension(format!(
                "scale_by_scalar: scale must be a single element, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.vals[s.0].data()[0];
        let sx = self.shape(x);
        let data: Vec<T> = self.vals[x.0].data().iter().map(|&v| v * sv).collect();
        let out = self.push("scale_by_scalar", Tensor::new(sx, data)?)?;
        self.ops.push(Op::ScaleByScalar { x, s, out });
        Ok(out)
    }

    /// Token-wise scaling: x[b,i,:] * s[b,i] for x [B,n,d], s [B,n].
    pub fn row_scale_tokens(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.rank() != 3 || ss.rank() != 2 || sx.dims()[..2] != ss.dims()[..2] {
            return Err(EvccError::Dimension(format!(
                "row_scale_tokens: want [B,n,d] with [B,n], got {:?} with {:?}",
                sx, ss
            )));
        }
        let d = sx.last();
        let xv = self.vals[x.0].data();
        let sv = self.vals[s.0].data();
        let data: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / d])
            .collect();
        let out = self.push("row_scale_tokens", Tensor::new(sx, data)?)?;
        self.ops.push(Op::RowScaleTokens { x, s, out });
        Ok(out)
    }

    /// Row-wise scaling: x[b,:] * s[b,0] for x [B,m], s [B,1].
    pub fn row_scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.rank() != 2 || ss.rank() != 2 || ss.dims()[1] != 1 || sx.dims()[0] != ss.dims()[0] {
            return Err(EvccError::Dimension(format!(
                "row_scale: want [B,m] with [B,1], got {:?} with {:?}",
                sx, ss
            )));
        }
        let m = sx.dims()[1];
        let xv = self.vals[x.0].data();
        let sv = self.vals[s.0].data();
        let data: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / m])
            .collect();
        let out = self.push("row_scale", Tensor::new(sx, data)?)?;
        self.ops.push(Op::RowScale { x, s, out });
        Ok(out)
    }

    /// Column slice of a rank-2 tensor: x[:, start..start+len].
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 2 || start + len > sx.dims()[1] || len == 0 {
            return Err(EvccError::Dimension(format!(
                "slice_cols: [{},{}) out of {:?}",
                start,
                start + len,
                sx
            )));
        }
        let (rows, cols) = (sx.dims()[0], sx.dims()[1]);
        let xv = self.vals[x.0].data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let out = self.push("slice_cols", Tensor::from_vec(&[rows, len], data)?)?;
        self.ops.push(Op::SliceCols { x, start, out });
        Ok(out)
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        let data: Vec<T> = self.vals[x.0].data().iter().map(|&v| k::gelu(v)).collect();
        let out = self.push("gelu", Tensor::new(sx, data)?)?;
        self.ops.push(Op::Gelu { x, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        let data: Vec<T> = self.vals[x.0].data().iter().map(|&v| k::sigmoid(v)).collect();
        let out = self.push("sigmoid", Tensor::new(sx, data)?)?;
        self.ops.push(Op::Sigmoid { x, out });
        Ok(out)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if axis >= sx.rank() {
            return Err(EvccError::Dimension(format!(
                "softmax: axis {} out of range for {:?}",
                axis, sx
            )));
        }
        let dims = sx.dims();
        let l = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let xv = self.vals[x.0].data();
        let mut data = vec![T::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * l + j) * inner + i;
                let mut mx = xv[at(0)];
                for j in 1..l {
                    mx = mx.maximum(xv[at(j)]);
                }
                let mut denom = T::ZERO;
                for j in 0..l {
                    let e = (xv[at(j)] - mx).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..l {
                    data[at(j)] = data[at(j)] / denom;
                }
            }
        }
        let out = self.push("softmax", Tensor::new(sx, data)?)?;
        self.ops.push(Op::Softmax { x, axis, out });
        Ok(out)
    }

    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let rank = self.shape(x).rank();
        self.softmax(x, rank - 1)
    }

    /// LayerNorm over the last axis with learnable gain/bias of width d.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.shape(x);
        let d = sx.last();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(id);
            if s.rank() != 1 || s.dims()[0] != d {
                return Err(EvccError::Dimension(format!(
                    "layer_norm: {name} {:?} does not match last axis of {:?}",
                    s, sx
                )));
            }
        }
        let rows = sx.numel() / d;
        let xv = self.vals[x.0].data();
        let gv = self.vals[gain.0].data();
        let bv = self.vals[bias.0].data();
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps_t = T::from_f64(eps);
        let mut data = vec![T::ZERO; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = T::ONE / (var + eps_t).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let out = self.push("layer_norm", Tensor::new(sx, data)?)?;
        self.ops.push(Op::LayerNorm { x, gain, bias, eps, out });
        Ok(out)
    }

    /// Split an image [B,C,H,W] into non-overlapping p x p patches:
    /// [B, (H/p)*(W/p), C*p*p]. Patch interior flattens as (c, py, px).
    pub fn image_patches(&mut self, x: TensorId, p: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 4 {
            return Err(EvccError::Dimension(format!(
                "image_patches: want [B,C,H,W], got {:?}",
                sx
            )));
        }
        let [b, c, h, w] = [sx.dims()[0], sx.dims()[1], sx.dims()[2], sx.dims()[3]];
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(EvccError::Config(format!(
                "image_patches: {h}x{w} not divisible by patch {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let pd = c * p * p;
        let xv = self.vals[x.0].data();
        let mut data = vec![T::ZERO; b * n * pd];
        for bi in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    let t = py * gw + px;
                    for ci in 0..c {
                        for iy in 0..p {
                            for ix in 0..p {
                                let src = ((bi * c + ci) * h + py * p + iy) * w + px * p + ix;
                                let dst = (bi * n + t) * pd + (ci * p + iy) * p + ix;
                                data[dst] = xv[src];
                            }
                        }
                    }
                }
            }
        }
        let out = self.push("image_patches", Tensor::from_vec(&[b, n, pd], data)?)?;
        self.ops.push(Op::ImagePatches { x, p, out });
        Ok(out)
    }

    /// Regroup a channel-last token grid [B, h*w, C] into p x p patches:
    /// [B, (h/p)*(w/p), p*p*C]. Patch interior flattens as (dy, dx, c).
    pub fn token_patches(&mut self, x: TensorId, h: usize, w: usize, p: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 3 || sx.dims()[1] != h * w {
            return Err(EvccError::Dimension(format!(
                "token_patches: grid {h}x{w} does not match {:?}",
                sx
            )));
        }
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(EvccError::Config(format!(
                "token_patches: {h}x{w} not divisible by patch {p}"
            )));
        }
        let (b, c) = (sx.dims()[0], sx.dims()[2]);
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let pd = p * p * c;
        let xv = self.vals[x.0].data();
        let mut data = vec![T::ZERO; b * n * pd];
        for bi in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    let t = py * gw + px;
                    for dy in 0..p {
                        for dx in 0..p {
                            let src_tok = (py * p + dy) * w + px * p + dx;
                            let src = (bi * h * w + src_tok) * c;
                            let dst = (bi * n + t) * pd + (dy * p + dx) * c;
                            data[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                        }
                    }
                }
            }
        }
        let out = self.push("token_patches", Tensor::from_vec(&[b, n, pd], data)?)?;
        self.ops.push(Op::TokenPatches { x, h, w, p, out });
        Ok(out)
    }

    /// Depthwise 3x3 convolution over a channel-last token grid
    /// [B, h*w, C] with kernel [C, 9]; stride 1, output same shape.
    pub fn depthwise_conv3x3(
        &mut self,
        x: TensorId,
        weight: TensorId,
        h: usize,
        wid: usize,
        pad: PadMode,
    ) -> Result<TensorId> {
        let sx = self.shape(x);
        let sw = self.shape(weight);
        if sx.rank() != 3 || sx.dims()[1] != h * wid {
            return Err(EvccError::Dimension(format!(
                "depthwise_conv3x3: grid {h}x{wid} does not match {:?}",
                sx
            )));
        }
        let c = sx.dims()[2];
        if sw.rank() != 2 || sw.dims() != [c, 9] {
            return Err(EvccError::Dimension(format!(
                "depthwise_conv3x3: kernel {:?}, want [{c},9]",
                sw
            )));
        }
        let b = sx.dims()[0];
        let xv = self.vals[x.0].data();
        let wv = self.vals[weight.0].data();
        let mut data = vec![T::ZERO; xv.len()];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..wid {
                    let dst = (bi * h * wid + y * wid + xx) * c;
                    for (ky, kx) in K3X3 {
                        let Some((sy, sx_)) = pad_coord(y, xx, ky, kx, h, wid, pad) else {
                            continue;
                        };
                        let src = (bi * h * wid + sy * wid + sx_) * c;
                        let kidx = ((ky + 1) * 3 + kx + 1) as usize;
                        for ci in 0..c {
                            data[dst + ci] += xv[src + ci] * wv[ci * 9 + kidx];
                        }
                    }
                }
            }
        }
        let out = self.push("depthwise_conv3x3", Tensor::new(sx, data)?)?;
        self.ops.push(Op::DwConv3x3 { x, w: weight, h, wid, pad, out });
        Ok(out)
    }

    /// [B,N,d] -> [B*heads, N, d/heads].
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 3 {
            return Err(EvccError::Dimension(format!(
                "split_heads: want rank 3, got {:?}",
                sx
            )));
        }
        let (b, n, d) = (sx.dims()[0], sx.dims()[1], sx.dims()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(EvccError::Config(format!(
                "split_heads: dim {d} not divisible by heads {heads}"
            )));
        }
        let dh = d / heads;
        let xv = self.vals[x.0].data();
        let mut data = vec![T::ZERO; xv.len()];
        for bi in 0..b {
            for hi in 0..heads {
                for i in 0..n {
                    let src = (bi * n + i) * d + hi * dh;
                    let dst = ((bi * heads + hi) * n + i) * dh;
                    data[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let out = self.push("split_heads", Tensor::from_vec(&[b * heads, n, dh], data)?)?;
        self.ops.push(Op::SplitHeads { x, heads, out });
        Ok(out)
    }

    /// [B*heads, N, dh] -> [B, N, dh*heads]; inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 3 || !sx.dims()[0].is_multiple_of(heads) {
            return Err(EvccError::Dimension(format!(
                "merge_heads: want [B*{heads},N,dh], got {:?}",
                sx
            )));
        }
        let (bh, n, dh) = (sx.dims()[0], sx.dims()[1], sx.dims()[2]);
        let b = bh / heads;
        let d = dh * heads;
        let xv = self.vals[x.0].data();
        let mut data = vec![T::ZERO; xv.len()];
        for bi in 0..b {
            for hi in 0..heads {
                for i in 0..n {
                    let src = ((bi * heads + hi) * n + i) * dh;
                    let dst = (bi * n + i) * d + hi * dh;
                    data[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let out = self.push("merge_heads", Tensor::from_vec(&[b, n, d], data)?)?;
        self.ops.push(Op::MergeHeads { x, heads, out });
        Ok(out)
    }

    /// Select tokens per sample: x [B,n,d] (or [B,n]) with one ascending or
    /// arbitrary index list per sample, all the same length.
    pub fn gather_tokens(&mut self, x: TensorId, idx: Vec<Vec<usize>>) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 2 && sx.rank() != 3 {
            return Err(EvccError::Dimension(format!(
                "gather_tokens: want rank 2 or 3, got {:?}",
                sx
            )));
        }
        let b = sx.dims()[0];
        let n = sx.dims()[1];
        let d = if sx.rank() == 3 { sx.dims()[2] } else { 1 };
        if idx.len() != b {
            return Err(EvccError::Argument(format!(
                "gather_tokens: {} index lists for batch {b}",
                idx.len()
            )));
        }
        let kk = idx[0].len();
        if kk == 0 {
            return Err(EvccError::Argument("gather_tokens: empty index list".into()));
        }
        for list in &idx {
            if list.len() != kk {
                return Err(EvccError::Argument(
                    "gather_tokens: ragged index lists".into(),
                ));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= n) {
                return Err(EvccError::Argument(format!(
                    "gather_tokens: index {bad} out of {n}"
                )));
            }
        }
        let xv = self.vals[x.0].data();
        let mut data = vec![T::ZERO; b * kk * d];
        for (bi, list) in idx.iter().enumerate() {
            for (i_new, &i_old) in list.iter().enumerate() {
                let src = (bi * n + i_old) * d;
                let dst = (bi * kk + i_new) * d;
                data[dst..dst + d].copy_from_slice(&xv[src..src + d]);
            }
        }
        let shape = if sx.rank() == 3 {
            Shape::of(&[b, kk, d])
        } else {
            Shape::of(&[b, kk])
        };
        let out = self.push("gather_tokens", Tensor::new(shape, data)?)?;
        self.ops.push(Op::GatherTokens { x, idx, out });
        Ok(out)
    }

    /// Mean over the token axis: [B,n,d] -> [B,d].
    pub fn mean_tokens(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 3 {
            return Err(EvccError::Dimension(format!(
                "mean_tokens: want [B,n,d], got {:?}",
                sx
            )));
        }
        let (b, n, d) = (sx.dims()[0], sx.dims()[1], sx.dims()[2]);
        let inv = T::from_f64(1.0 / n as f64);
        let xv = self.vals[x.0].data();
        let mut data = vec![T::ZERO; b * d];
        for bi in 0..b {
            for i in 0..n {
                let src = (bi * n + i) * d;
                for j in 0..d {
                    data[bi * d + j] += xv[src + j];
                }
            }
            for j in 0..d {
                data[bi * d + j] = data[bi * d + j] * inv;
            }
        }
        let out = self.push("mean_tokens", Tensor::from_vec(&[b, d], data)?)?;
        self.ops.push(Op::MeanTokens { x, out });
        Ok(out)
    }

    /// Concatenate token sequences along axis 1: parts [B,k_i,d] -> [B,sum k_i,d].
    pub fn concat_tokens(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(EvccError::Argument("concat_tokens: no parts".into()));
        }
        let first = self.shape(parts[0]);
        if first.rank() != 3 {
            return Err(EvccError::Dimension(format!(
                "concat_tokens: want rank 3, got {:?}",
                first
            )));
        }
        let (b, d) = (first.dims()[0], first.dims()[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.rank() != 3 || s.dims()[0] != b || s.dims()[2] != d {
                return Err(EvccError::Dimension(format!(
                    "concat_tokens: part {:?} does not match [{b},_,{d}]",
                    s
                )));
            }
            total += s.dims()[1];
        }
        let mut data = vec![T::ZERO; b * total * d];
        for bi in 0..b {
            let mut off = 0;
            for &p in parts {
                let s = self.shape(p);
                let ki = s.dims()[1];
                let pv = self.vals[p.0].data();
                let src = bi * ki * d;
                let dst = (bi * total + off) * d;
                data[dst..dst + ki * d].copy_from_slice(&pv[src..src + ki * d]);
                off += ki;
            }
        }
        let out = self.push("concat_tokens", Tensor::from_vec(&[b, total, d], data)?)?;
        self.ops.push(Op::ConcatTokens { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// Concatenate rank-2 tensors along the last axis: [B,d_i] -> [B,sum d_i].
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(EvccError::Argument("concat_last: no parts".into()));
        }
        let b = self.shape(parts[0]).dims()[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.rank() != 2 || s.dims()[0] != b {
                return Err(EvccError::Dimension(format!(
                    "concat_last: part {:?} does not match batch {b}",
                    s
                )));
            }
            total += s.dims()[1];
        }
        let mut data = vec![T::ZERO; b * total];
        for bi in 0..b {
            let mut off = 0;
            for &p in parts {
                let di = self.shape(p).dims()[1];
                let pv = self.vals[p.0].data();
                data[bi * total + off..bi * total + off + di]
                    .copy_from_slice(&pv[bi * di..(bi + 1) * di]);
                off += di;
            }
        }
        let out = self.push("concat_last", Tensor::from_vec(&[b, total], data)?)?;
        self.ops.push(Op::ConcatLast { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// [B,d] -> [B,1,d].
    pub fn unsqueeze_tokens(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 2 {
            return Err(EvccError::Dimension(format!(
                "unsqueeze_tokens: want rank 2, got {:?}",
                sx
            )));
        }
        let t = Tensor::from_vec(
            &[sx.dims()[0], 1, sx.dims()[1]],
            self.vals[x.0].data().to_vec(),
        )?;
        let out = self.push("unsqueeze_tokens", t)?;
        self.ops.push(Op::Unsqueeze { x, out });
        Ok(out)
    }

    /// [B,n,1] -> [B,n].
    pub fn squeeze_last(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.rank() != 3 || sx.dims()[2] != 1 {
            return Err(EvccError::Dimension(format!(
                "squeeze_last: want [B,n,1], got {:?}",
                sx
            )));
        }
        let t = Tensor::from_vec(
            &[sx.dims()[0], sx.dims()[1]],
            self.vals[x.0].data().to_vec(),
        )?;
        let out = self.push("squeeze_last", t)?;
        self.ops.push(Op::SqueezeLast { x, out });
        Ok(out)
    }

    /// Mean cross-entropy over the batch with log-sum-exp stabilization.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let sx = self.shape(logits);
        if sx.rank() != 2 {
            return Err(EvccError::Dimension(format!(
                "cross_entropy: want [B,C], got {:?}",
                sx
            )));
        }
        let (b, c) = (sx.dims()[0], sx.dims()[1]);
        if labels.len() != b {
            return Err(EvccError::Argument(format!(
                "cross_entropy: {} labels for batch {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(EvccError::Argument(format!(
                "cross_entropy: label {bad} out of {c} classes"
            )));
        }
        let xv = self.vals[logits.0].data();
        let mut total = T::ZERO;
        for (bi, &y) in labels.iter().enumerate() {
            let row = &xv[bi * c..(bi + 1) * c];
            let mut mx = row[0];
            for &v in &row[1..] {
                mx = mx.maximum(v);
            }
            let mut sum = T::ZERO;
            for &v in row {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            total += lse - row[y];
        }
        total = total * T::from_f64(1.0 / b as f64);
        let out = self.push("cross_entropy", Tensor::scalar(total))?;
        self.ops.push(Op::CrossEntropyMean { logits, labels: labels.to_vec(), out });
        Ok(out)
    }

    /// a + c*b for same-shape tensors and constant c.
    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, c: f64) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(EvccError::Dimension(format!(
                "add_scaled: shapes differ {:?} vs {:?}",
                sa, sb
            )));
        }
        let ct = T::from_f64(c);
        let data: Vec<T> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| x + ct * y)
            .collect();
        let out = self.push("add_scaled", Tensor::new(sa, data)?)?;
        self.ops.push(Op::AddScaled { a, b, c: ct, out });
        Ok(out)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut total = T::ZERO;
        for &v in self.vals[x.0].data() {
            total += v;
        }
        let out = self.push("sum_all", Tensor::scalar(total))?;
        self.ops.push(Op::SumAll { x, out });
        Ok(out)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates gradients on every
    /// reachable leaf registered with `requires_grad`. May be called once
    /// per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(EvccError::Argument(
                "backward already ran on this tape".into(),
            ));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(EvccError::Argument(format!(
                "backward: loss must be scalar, got {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::ONE]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        Ok(())
    }

    fn take_out_grad(&self, out: TensorId) -> Option<Vec<T>> {
        self.grads[out.0].clone()
    }

    fn acc(&mut self, id: TensorId, f: impl FnOnce(&[T], &mut [T])) {
        if self.leaf_no_grad[id.0] {
            return;
        }
        let n = self.vals[id.0].numel();
        let g = self.grads[id.0].get_or_insert_with(|| vec![T::ZERO; n]);
        f(self.vals[id.0].data(), g);
    }

    fn backward_op(&mut self, op: &Op<T>) {
        match op {
            Op::MatMul { a, b, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let rhs_batched = sb.rank() == 3;
                let (batch, m, kk) = if sa.rank() == 2 {
                    (1, sa.dims()[0], sa.dims()[1])
                } else {
                    (sa.dims()[0], sa.dims()[1], sa.dims()[2])
                };
                let n = sb.last();
                let bv = self.vals[b.0].data().to_vec();
                self.acc(*a, |_, ga| {
                    for bi in 0..batch {
                        let d_b = &d[bi * m * n..(bi + 1) * m * n];
                        let b_b = if rhs_batched {
                            &bv[bi * kk * n..(bi + 1) * kk * n]
                        } else {
                            &bv[..]
                        };
                        let mut da = vec![T::ZERO; m * kk];
                        k::matmul_2d_nt(d_b, b_b, &mut da, m, n, kk);
                        for (g, v) in ga[bi * m * kk..(bi + 1) * m * kk].iter_mut().zip(&da) {
                            *g += *v;
                        }
                    }
                });
                let av = self.vals[a.0].data().to_vec();
                self.acc(*b, |_, gb| {
                    for bi in 0..batch {
                        let d_b = &d[bi * m * n..(bi + 1) * m * n];
                        let a_b = &av[bi * m * kk..(bi + 1) * m * kk];
                        let gb_b = if rhs_batched {
                            &mut gb[bi * kk * n..(bi + 1) * kk * n]
                        } else {
                            &mut gb[..]
                        };
                        k::matmul_2d_tn_acc(a_b, d_b, gb_b, m, kk, n);
                    }
                });
            }
            Op::MatMulNT { a, b, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sa = self.shape(*a);
                let (batch, m, kk) = (sa.dims()[0], sa.dims()[1], sa.dims()[2]);
                let n = self.shape(*b).dims()[1];
                let bv = self.vals[b.0].data().to_vec();
                self.acc(*a, |_, ga| {
                    for bi in 0..batch {
                        let mut da = vec![T::ZERO; m * kk];
                        k::matmul_2d(
                            &d[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * n * kk..(bi + 1) * n * kk],
                            &mut da,
                            m,
                            n,
                            kk,
                        );
                        for (g, v) in ga[bi * m * kk..(bi + 1) * m * kk].iter_mut().zip(&da) {
                            *g += *v;
                        }
                    }
                });
                let av = self.vals[a.0].data().to_vec();
                self.acc(*b, |_, gb| {
                    for bi in 0..batch {
                        k::matmul_2d_tn_acc(
                            &d[bi * m * n..(bi + 1) * m * n],
                            &av[bi * m * kk..(bi + 1) * m * kk],
                            &mut gb[bi * n * kk..(bi + 1) * n * kk],
                            m,
                            n,
                            kk,
                        );
                    }
                });
            }
            Op::Add { a, b, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                self.acc(*a, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += v;
                    }
                });
                self.acc(*b, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += v;
                    }
                });
            }
            Op::AddBias { x, bias, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let dlen = self.shape(*bias).numel();
                self.acc(*x, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += v;
                    }
                });
                self.acc(*bias, |_, g| {
                    for (i, &v) in d.iter().enumerate() {
                        g[i % dlen] += v;
                    }
                });
            }
            Op::Mul { a, b, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let bv = self.vals[b.0].data().to_vec();
                self.acc(*a, |_, g| {
                    for ((g, &dv), &ov) in g.iter_mut().zip(&d).zip(&bv) {
                        *g += dv * ov;
                    }
                });
                let av = self.vals[a.0].data().to_vec();
                self.acc(*b, |_, g| {
                    for ((g, &dv), &ov) in g.iter_mut().zip(&d).zip(&av) {
                        *g += dv * ov;
                    }
                });
            }
            Op::Affine { x, mul, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let m = *mul;
                self.acc(*x, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += m * v;
                    }
                });
            }
            Op::ScaleByScalar { x, s, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sv = self.vals[s.0].data()[0];
                self.acc(*x, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += sv * v;
                    }
                });
                let xv = self.vals[x.0].data().to_vec();
                self.acc(*s, |_, g| {
                    let mut acc = T::ZERO;
                    for (&dv, &xvv) in d.iter().zip(&xv) {
                        acc += dv * xvv;
                    }
                    g[0] += acc;
                });
            }
            Op::RowScaleTokens { x, s, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let dlast = self.shape(*x).last();
                let sv = self.vals[s.0].data().to_vec();
                self.acc(*x, |_, g| {
                    for (i, (g, &dv)) in g.iter_mut().zip(&d).enumerate() {
                        *g += dv * sv[i / dlast];
                    }
                });
                let xv = self.vals[x.0].data().to_vec();
                self.acc(*s, |_, g| {
                    for (row, g) in g.iter_mut().enumerate() {
                        let mut acc = T::ZERO;
                        for j in 0..dlast {
                            acc += d[row * dlast + j] * xv[row * dlast + j];
                        }
                        *g += acc;
                    }
                });
            }
            Op::RowScale { x, s, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let m = self.shape(*x).dims()[1];
                let sv = self.vals[s.0].data().to_vec();
                self.acc(*x, |_, g| {
                    for (i, (g, &dv)) in g.iter_mut().zip(&d).enumerate() {
                        *g += dv * sv[i / m];
                    }
                });
                let xv = self.vals[x.0].data().to_vec();
                self.acc(*s, |_, g| {
                    for (row, g) in g.iter_mut().enumerate() {
                        let mut acc = T::ZERO;
                        for j in 0..m {
                            acc += d[row * m + j] * xv[row * m + j];
                        }
                        *g += acc;
                    }
                });
            }
            Op::SliceCols { x, start, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let cols = self.shape(*x).dims()[1];
                let len = self.shape(*out).dims()[1];
                let start = *start;
                self.acc(*x, |_, g| {
                    for (r, chunk) in d.chunks(len).enumerate() {
                        for (j, &v) in chunk.iter().enumerate() {
                            g[r * cols + start + j] += v;
                        }
                    }
                });
            }
            Op::Gelu { x, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                self.acc(*x, |xv, g| {
                    for ((g, &dv), &v) in g.iter_mut().zip(&d).zip(xv) {
                        *g += dv * k::gelu_grad(v);
                    }
                });
            }
            Op::Sigmoid { x, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let ov = self.vals[out.0].data().to_vec();
                self.acc(*x, |_, g| {
                    for ((g, &dv), &o) in g.iter_mut().zip(&d).zip(&ov) {
                        *g += dv * o * (T::ONE - o);
                    }
                });
            }
            Op::Softmax { x, axis, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let dims = self.shape(*x);
                let l = dims.dims()[*axis];
                let outer: usize = dims.dims()[..*axis].iter().product();
                let inner: usize = dims.dims()[*axis + 1..].iter().product();
                let ov = self.vals[out.0].data().to_vec();
                self.acc(*x, |_, g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * l + j) * inner + i;
                            let mut dot = T::ZERO;
                            for j in 0..l {
                                dot += d[at(j)] * ov[at(j)];
                            }
                            for j in 0..l {
                                g[at(j)] += ov[at(j)] * (d[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps, out } => {
                self.backward_layer_norm(*x, *gain, *bias, *eps, *out);
            }
            Op::ImagePatches { x, p, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sx = self.shape(*x);
                let [b, c, h, w] = [sx.dims()[0], sx.dims()[1], sx.dims()[2], sx.dims()[3]];
                let p = *p;
                let (gh, gw) = (h / p, w / p);
                let n = gh * gw;
                let pd = c * p * p;
                self.acc(*x, |_, g| {
                    for bi in 0..b {
                        for py in 0..gh {
                            for px in 0..gw {
                                let t = py * gw + px;
                                for ci in 0..c {
                                    for iy in 0..p {
                                        for ix in 0..p {
                                            let src =
                                                ((bi * c + ci) * h + py * p + iy) * w + px * p + ix;
                                            let dst = (bi * n + t) * pd + (ci * p + iy) * p + ix;
                                            g[src] += d[dst];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::TokenPatches { x, h, w, p, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sx = self.shape(*x);
                let (b, c) = (sx.dims()[0], sx.dims()[2]);
                let (h, w, p) = (*h, *w, *p);
                let (gh, gw) = (h / p, w / p);
                let n = gh * gw;
                let pd = p * p * c;
                self.acc(*x, |_, g| {
                    for bi in 0..b {
                        for py in 0..gh {
                            for px in 0..gw {
                                let t = py * gw + px;
                                for dy in 0..p {
                                    for dx in 0..p {
                                        let src_tok = (py * p + dy) * w + px * p + dx;
                                        let src = (bi * h * w + src_tok) * c;
                                        let dst = (bi * n + t) * pd + (dy * p + dx) * c;
                                        for ci in 0..c {
                                            g[src + ci] += d[dst + ci];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::DwConv3x3 { x, w, h, wid, pad, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sx = self.shape(*x);
                let (b, c) = (sx.dims()[0], sx.dims()[2]);
                let (h, wid, pad) = (*h, *wid, *pad);
                let wv = self.vals[w.0].data().to_vec();
                self.acc(*x, |_, g| {
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..wid {
                                let dst = (bi * h * wid + y * wid + xx) * c;
                                for (ky, kx) in K3X3 {
                                    let Some((sy, sx_)) = pad_coord(y, xx, ky, kx, h, wid, pad)
                                    else {
                                        continue;
                                    };
                                    let src = (bi * h * wid + sy * wid + sx_) * c;
                                    let kidx = ((ky + 1) * 3 + kx + 1) as usize;
                                    for ci in 0..c {
                                        g[src + ci] += d[dst + ci] * wv[ci * 9 + kidx];
                                    }
                                }
                            }
                        }
                    }
                });
                let xv = self.vals[x.0].data().to_vec();
                self.acc(*w, |_, g| {
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..wid {
                                let dst = (bi * h * wid + y * wid + xx) * c;
                                for (ky, kx) in K3X3 {
                                    let Some((sy, sx_)) = pad_coord(y, xx, ky, kx, h, wid, pad)
                                    else {
                                        continue;
                                    };
                                    let src = (bi * h * wid + sy * wid + sx_) * c;
                                    let kidx = ((ky + 1) * 3 + kx + 1) as usize;
                                    for ci in 0..c {
                                        g[ci * 9 + kidx] += d[dst + ci] * xv[src + ci];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sx = self.shape(*x);
                let (b, n, dd) = (sx.dims()[0], sx.dims()[1], sx.dims()[2]);
                let heads = *heads;
                let dh = dd / heads;
                self.acc(*x, |_, g| {
                    for bi in 0..b {
                        for hi in 0..heads {
                            for i in 0..n {
                                let src = (bi * n + i) * dd + hi * dh;
                                let dst = ((bi * heads + hi) * n + i) * dh;
                                for j in 0..dh {
                                    g[src + j] += d[dst + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sx = self.shape(*x);
                let (bh, n, dh) = (sx.dims()[0], sx.dims()[1], sx.dims()[2]);
                let heads = *heads;
                let b = bh / heads;
                let dd = dh * heads;
                self.acc(*x, |_, g| {
                    for bi in 0..b {
                        for hi in 0..heads {
                            for i in 0..n {
                                let src = ((bi * heads + hi) * n + i) * dh;
                                let dst = (bi * n + i) * dd + hi * dh;
                                for j in 0..dh {
                                    g[src + j] += d[dst + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherTokens { x, idx, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sx = self.shape(*x);
                let n = sx.dims()[1];
                let dd = if sx.rank() == 3 { sx.dims()[2] } else { 1 };
                let kk = idx[0].len();
                self.acc(*x, |_, g| {
                    for (bi, list) in idx.iter().enumerate() {
                        for (i_new, &i_old) in list.iter().enumerate() {
                            let src = (bi * kk + i_new) * dd;
                            let dst = (bi * n + i_old) * dd;
                            for j in 0..dd {
                                g[dst + j] += d[src + j];
                            }
                        }
                    }
                });
            }
            Op::MeanTokens { x, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let sx = self.shape(*x);
                let (b, n, dd) = (sx.dims()[0], sx.dims()[1], sx.dims()[2]);
                let inv = T::from_f64(1.0 / n as f64);
                self.acc(*x, |_, g| {
                    for bi in 0..b {
                        for i in 0..n {
                            for j in 0..dd {
                                g[(bi * n + i) * dd + j] += d[bi * dd + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::ConcatTokens { parts, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let so = self.shape(*out);
                let (b, total, dd) = (so.dims()[0], so.dims()[1], so.dims()[2]);
                let mut off = 0;
                for &p in parts {
                    let ki = self.shape(p).dims()[1];
                    let local = off;
                    self.acc(p, |_, g| {
                        for bi in 0..b {
                            for i in 0..ki {
                                let src = (bi * total + local + i) * dd;
                                let dst = (bi * ki + i) * dd;
                                for j in 0..dd {
                                    g[dst + j] += d[src + j];
                                }
                            }
                        }
                    });
                    off += ki;
                }
            }
            Op::ConcatLast { parts, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let so = self.shape(*out);
                let (b, total) = (so.dims()[0], so.dims()[1]);
                let mut off = 0;
                for &p in parts {
                    let di = self.shape(p).dims()[1];
                    let local = off;
                    self.acc(p, |_, g| {
                        for bi in 0..b {
                            for j in 0..di {
                                g[bi * di + j] += d[bi * total + local + j];
                            }
                        }
                    });
                    off += di;
                }
            }
            Op::Unsqueeze { x, out } | Op::SqueezeLast { x, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                self.acc(*x, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += v;
                    }
                });
            }
            Op::CrossEntropyMean { logits, labels, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let scale = d[0] * T::from_f64(1.0 / labels.len() as f64);
                let c = self.shape(*logits).dims()[1];
                let labels = labels.clone();
                self.acc(*logits, |xv, g| {
                    for (bi, &y) in labels.iter().enumerate() {
                        let row = &xv[bi * c..(bi + 1) * c];
                        let mut mx = row[0];
                        for &v in &row[1..] {
                            mx = mx.maximum(v);
                        }
                        let mut sum = T::ZERO;
                        for &v in row {
                            sum += (v - mx).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / sum;
                            let ind = if j == y { T::ONE } else { T::ZERO };
                            g[bi * c + j] += scale * (p - ind);
                        }
                    }
                });
            }
            Op::AddScaled { a, b, c, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let c = *c;
                self.acc(*a, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += v;
                    }
                });
                self.acc(*b, |_, g| {
                    for (g, &v) in g.iter_mut().zip(&d) {
                        *g += c * v;
                    }
                });
            }
            Op::SumAll { x, out } => {
                let Some(d) = self.take_out_grad(*out) else { return };
                let dv = d[0];
                self.acc(*x, |_, g| {
                    for g in g.iter_mut() {
                        *g += dv;
                    }
                });
            }
        }
    }

    fn backward_layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64, out: TensorId) {
        let Some(d) = self.take_out_grad(out) else { return };
        let sx = self.shape(x);
        let dd = sx.last();
        let rows = sx.numel() / dd;
        let inv_d = T::from_f64(1.0 / dd as f64);
        let eps_t = T::from_f64(eps);
        let gv = self.vals[gain.0].data().to_vec();
        let xv = self.vals[x.0].data().to_vec();

        // Per-row statistics recomputed from the saved input.
        let mut means = vec![T::ZERO; rows];
        let mut rstds = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * dd..(r + 1) * dd];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            means[r] = mean;
            rstds[r] = T::ONE / (var + eps_t).sqrt();
        }

        self.acc(gain, |_, g| {
            for r in 0..rows {
                for j in 0..dd {
                    let xhat = (xv[r * dd + j] - means[r]) * rstds[r];
                    g[j] += d[r * dd + j] * xhat;
                }
            }
        });
        self.acc(bias, |_, g| {
            for r in 0..rows {
                for j in 0..dd {
                    g[j] += d[r * dd + j];
                }
            }
        });
        self.acc(x, |_, g| {
            for r in 0..rows {
                let mut mean_dxhat = T::ZERO;
                let mut mean_dxhat_xhat = T::ZERO;
                for j in 0..dd {
                    let xhat = (xv[r * dd + j] - means[r]) * rstds[r];
                    let dxhat = d[r * dd + j] * gv[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat = mean_dxhat * inv_d;
                mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                for j in 0..dd {
                    let xhat = (xv[r * dd + j] - means[r]) * rstds[r];
                    let dxhat = d[r * dd + j] * gv[j];
                    g[r * dd + j] += rstds[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        });
    }
}

const K3X3: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn pad_coord(
    y: usize,
    x: usize,
    ky: isize,
    kx: isize,
    h: usize,
    w: usize,
    pad: PadMode,
) -> Option<(usize, usize)> {
    match pad {
        PadMode::Zero => {
            let sy = y as isize + ky;
            let sx = x as isize + kx;
            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                None
            } else {
                Some((sy as usize, sx as usize))
            }
        }
        PadMode::Circular => Some((
            (y as isize + ky).rem_euclid(h as isize) as usize,
            (x as isize + kx).rem_euclid(w as isize) as usize,
        )),
    }
}
