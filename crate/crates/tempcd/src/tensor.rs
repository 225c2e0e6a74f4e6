//! Dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every executed operation in order; [`Tape::backward`]
//! walks that record in reverse and accumulates gradients onto leaves created
//! with [`Tape::leaf`]. Storage is row-major `Vec<f64>`, broadcasting is
//! numpy-style trailing-dimension alignment, and there are no strided views:
//! every op materializes its output.
//!
//! Gradient accumulation is additive across uses of a leaf and across repeated
//! `backward` calls; the caller resets with [`Tape::reset_grads`] when needed.

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Global numeric mode. `F32` keeps f64 storage but rounds every op output
/// through f32, emulating single precision end to end.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Reads `TEMPCD_PRECISION` (32 or 64); defaults to F64.
    pub fn from_env() -> Precision {
        match std::env::var("TEMPCD_PRECISION").ok().as_deref() {
            Some("32") => Precision::F32,
            _ => Precision::F64,
        }
    }
}

/// One recorded tensor: value, shape, and the op that produced it.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Minimum { a: TensorId, b: TensorId },
    Maximum { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Relu { a: TensorId },
    Abs { a: TensorId },
    Sigmoid { a: TensorId },
    Softplus { a: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    PowConst { a: TensorId, p: f64 },
    MatMul { a: TensorId, b: TensorId },
    TransposeLast2 { a: TensorId },
    Reshape { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    CosineSim { a: TensorId, b: TensorId, eps: f64 },
    Concat { parts: Vec<TensorId>, axis: usize },
    Gather { a: TensorId, axis: usize, indices: Vec<usize> },
    SumAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    StraightThroughOnehot { a: TensorId },
}

/// Execution-ordered gradient graph.
pub struct Tape {
    nodes: Vec<Tensor>,
    precision: Precision,
    /// Test hook: deliberately corrupts the matmul backward rule so the
    /// finite-difference harness can prove it detects broken gradients.
    #[doc(hidden)]
    pub corrupt_matmul_backward: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast shape under trailing-dimension alignment; panics on conflict.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcastable",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Row-major strides with 0 for broadcast (size-1) dims, padded to `ndim`.
fn broadcast_strides(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Sums `grad` (shaped like `from`) down to `to`, undoing broadcast expansion.
fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let ndim = from.len();
    let strides = broadcast_strides(to, ndim);
    let mut out = vec![0.0; numel(to)];
    let mut coords = vec![0usize; ndim];
    for (flat, g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % from[d];
            rem /= from[d];
        }
        let idx: usize = coords.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out[idx] += g;
    }
    out
}

fn matmul_2d(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Tape {
        Tape { nodes: Vec::new(), precision, corrupt_matmul_backward: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// New gradient-tracked leaf.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.push_leaf(data, shape, true)
    }

    /// New constant (no gradient flows into it).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.push_leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], &[1])
    }

    fn push_leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.nodes.push(Tensor {
            data,
            shape: shape.to_vec(),
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push(&mut self, mut data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> TensorId {
        if self.precision == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        #[cfg(debug_assertions)]
        {
            for (i, v) in data.iter().enumerate() {
                debug_assert!(
                    v.is_finite(),
                    "non-finite value {} at flat index {} produced by {:?}",
                    v,
                    i,
                    op
                );
            }
        }
        self.nodes.push(Tensor { data, shape, requires_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn reset_grads(&mut self) {
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
    }

    fn flows(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Elementwise (broadcasting) ──────────────────────────────────────

    fn binary_map(&mut self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64, op: Op) -> TensorId {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b));
        let ndim = out_shape.len();
        let sa = broadcast_strides(self.shape(a), ndim);
        let sb = broadcast_strides(self.shape(b), ndim);
        let n = numel(&out_shape);
        let mut out = vec![0.0; n];
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut coords = vec![0usize; ndim];
        for (flat, o) in out.iter_mut().enumerate() {
            let mut rem = flat;
            for d in (0..ndim).rev() {
                coords[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
            let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
            *o = f(ad[ia], bd[ib]);
        }
        let rg = self.flows(a) || self.flows(b);
        self.push(out, out_shape, op, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map(a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Elementwise min; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map(a, b, f64::min, Op::Minimum { a, b })
    }

    /// Elementwise max; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map(a, b, f64::max, Op::Maximum { a, b })
    }

    fn unary_map(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.flows(a);
        self.push(data, shape, op, rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary_map(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, f64::abs, Op::Abs { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    /// ln(1+exp(x)) in overflow-safe form.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, f64::ln, Op::Log { a })
    }

    pub fn pow_const(&mut self, a: TensorId, p: f64) -> TensorId {
        self.unary_map(a, |x| x.powf(p), Op::PowConst { a, p })
    }

    // ── Contraction and shape ───────────────────────────────────────────

    /// Batched matmul: `a` is `[..,m,k]`, `b` is `[..,k,n]`; leading batch
    /// dims broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2, got {:?} x {:?}", ash, bsh);
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, kb, "matmul inner dimensions disagree: {:?} x {:?}", ash, bsh);
        let batch = broadcast_shape(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);
        let nb = numel(&batch);
        let ndim = batch.len();
        let sa = broadcast_strides(&ash[..ash.len() - 2], ndim);
        let sb = broadcast_strides(&bsh[..bsh.len() - 2], ndim);
        let mut out = vec![0.0; nb * m * n];
        let mut coords = vec![0usize; ndim];
        for bi in 0..nb {
            let mut rem = bi;
            for d in (0..ndim).rev() {
                coords[d] = rem % batch[d];
                rem /= batch[d];
            }
            let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
            let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
            matmul_2d(
                &self.nodes[a.0].data[ia * m * k..(ia + 1) * m * k],
                &self.nodes[b.0].data[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let rg = self.flows(a) || self.flows(b);
        self.push(out, shape, Op::MatMul { a, b }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: TensorId) -> TensorId {
        let sh = self.shape(a).to_vec();
        assert!(sh.len() >= 2, "transpose_last2 needs rank >= 2, got {:?}", sh);
        let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let nb = numel(&sh[..sh.len() - 2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for b in 0..nb {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = src[base + i * n + j];
                }
            }
        }
        let mut shape = sh;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.flows(a);
        self.push(out, shape, Op::TransposeLast2 { a }, rg)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        assert_eq!(
            numel(self.shape(a)),
            numel(shape),
            "reshape from {:?} to {:?} changes element count",
            self.shape(a),
            shape
        );
        let data = self.nodes[a.0].data.clone();
        let rg = self.flows(a);
        self.push(data, shape.to_vec(), Op::Reshape { a }, rg)
    }

    // ── Normalization and similarity ────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.shape(a).to_vec();
        assert!(axis < shape.len(), "softmax axis {} invalid for shape {:?}", axis, shape);
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.flows(a);
        self.push(out, shape, Op::Softmax { a, axis }, rg)
    }

    /// Per-vector normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> TensorId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("layer_norm input must have rank >= 1");
        assert_eq!(self.shape(gain), &[c], "layer_norm gain must be [{}], got {:?}", c, self.shape(gain));
        assert_eq!(self.shape(bias), &[c], "layer_norm bias must be [{}], got {:?}", c, self.shape(bias));
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; src.len()];
        for v in 0..src.len() / c {
            let s = &src[v * c..(v + 1) * c];
            let mean = s.iter().sum::<f64>() / c as f64;
            let var = s.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                out[v * c + i] = (s[i] - mean) * inv * g[i] + b[i];
            }
        }
        let rg = self.flows(x) || self.flows(gain) || self.flows(bias);
        self.push(out, shape, Op::LayerNorm { x, gain, bias, eps }, rg)
    }

    /// Cosine similarity of two vectors; `eps` is added to each norm.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId, eps: f64) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "cosine_sim lengths disagree: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        assert_eq!(self.shape(a).len(), 1, "cosine_sim expects vectors");
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
        let na = ad.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
        let nb = bd.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
        let rg = self.flows(a) || self.flows(b);
        self.push(vec![dot / (na * nb)], vec![1], Op::CosineSim { a, b, eps }, rg)
    }

    // ── Assembly ────────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len(), "concat axis {} invalid for shape {:?}", axis, first);
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.shape(p);
            assert_eq!(sh.len(), first.len(), "concat rank mismatch: {:?} vs {:?}", first, sh);
            for d in 0..first.len() {
                if d != axis {
                    assert_eq!(sh[d], first[d], "concat shapes differ off-axis: {:?} vs {:?}", first, sh);
                }
            }
            axis_total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let mut offset = 0;
            for &p in parts {
                let plen = self.shape(p)[axis];
                let src = &self.nodes[p.0].data;
                let chunk = plen * inner;
                out[o * axis_total * inner + offset..o * axis_total * inner + offset + chunk]
                    .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
                offset += chunk;
            }
        }
        let rg = parts.iter().any(|&p| self.flows(p));
        self.push(out, shape, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Index-select along `axis`; backward scatter-adds into the source.
    pub fn gather(&mut self, a: TensorId, axis: usize, indices: &[usize]) -> TensorId {
        let sh = self.shape(a).to_vec();
        assert!(axis < sh.len(), "gather axis {} invalid for shape {:?}", axis, sh);
        for &i in indices {
            assert!(i < sh[axis], "gather index {} out of bounds for axis of size {}", i, sh[axis]);
        }
        let (outer, len, inner) = split_axis(&sh, axis);
        let mut shape = sh;
        shape[axis] = indices.len();
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; numel(&shape)];
        for o in 0..outer {
            for (j, &idx) in indices.iter().enumerate() {
                out[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner]
                    .copy_from_slice(&src[(o * len + idx) * inner..(o * len + idx + 1) * inner]);
            }
        }
        let rg = self.flows(a);
        self.push(out, shape, Op::Gather { a, axis, indices: indices.to_vec() }, rg)
    }

    /// Contiguous range along `axis`.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let indices: Vec<usize> = (start..start + len).collect();
        self.gather(a, axis, &indices)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Sums along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let sh = self.shape(a).to_vec();
        assert!(axis < sh.len(), "sum axis {} invalid for shape {:?}", axis, sh);
        let (outer, len, inner) = split_axis(&sh, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = sh;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.flows(a);
        self.push(out, shape, Op::SumAxis { a, axis }, rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.flows(a);
        self.push(vec![s], vec![1], Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ── Discrete selection ──────────────────────────────────────────────

    /// Forward: exact one-hot at the argmax of a relaxed distribution (ties
    /// resolve to the lowest index). Backward: the gradient passes through
    /// unchanged, so upstream sees the relaxed distribution's Jacobian.
    pub fn straight_through_onehot(&mut self, a: TensorId) -> TensorId {
        let sh = self.shape(a).to_vec();
        assert_eq!(sh.len(), 1, "straight_through_onehot expects a vector, got {:?}", sh);
        let src = &self.nodes[a.0].data;
        let best = argmax(src);
        let mut out = vec![0.0; src.len()];
        out[best] = 1.0;
        let rg = self.flows(a);
        self.push(out, sh, Op::StraightThroughOnehot { a }, rg)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits each node exactly once in
    /// reverse execution order, using scratch buffers for interior nodes;
    /// only leaf gradients persist, accumulating additively across calls.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            numel(self.shape(loss)),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = scratch[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            let out_shape = self.nodes[i].shape.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match node.grad {
                        Some(ref mut g) => {
                            for (acc, v) in g.iter_mut().zip(&grad) {
                                *acc += v;
                            }
                        }
                        None => node.grad = Some(grad),
                    }
                }
                Op::Add { a, b } => {
                    self.spread_reduced(&mut scratch, a, &grad, &out_shape);
                    self.spread_reduced(&mut scratch, b, &grad, &out_shape);
                }
                Op::Sub { a, b } => {
                    self.spread_reduced(&mut scratch, a, &grad, &out_shape);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.spread_reduced(&mut scratch, b, &neg, &out_shape);
                }
                Op::Mul { a, b } => {
                    let (da, db) = self.binary_partials(a, b, &out_shape, &grad, |x, y, g| (g * y, g * x));
                    self.spread_reduced(&mut scratch, a, &da, &out_shape);
                    self.spread_reduced(&mut scratch, b, &db, &out_shape);
                }
                Op::Div { a, b } => {
                    let (da, db) =
                        self.binary_partials(a, b, &out_shape, &grad, |x, y, g| (g / y, -g * x / (y * y)));
                    self.spread_reduced(&mut scratch, a, &da, &out_shape);
                    self.spread_reduced(&mut scratch, b, &db, &out_shape);
                }
                Op::Minimum { a, b } => {
                    let (da, db) = self.binary_partials(a, b, &out_shape, &grad, |x, y, g| {
                        if x <= y {
                            (g, 0.0)
                        } else {
                            (0.0, g)
                        }
                    });
                    self.spread_reduced(&mut scratch, a, &da, &out_shape);
                    self.spread_reduced(&mut scratch, b, &db, &out_shape);
                }
                Op::Maximum { a, b } => {
                    let (da, db) = self.binary_partials(a, b, &out_shape, &grad, |x, y, g| {
                        if x >= y {
                            (g, 0.0)
                        } else {
                            (0.0, g)
                        }
                    });
                    self.spread_reduced(&mut scratch, a, &da, &out_shape);
                    self.spread_reduced(&mut scratch, b, &db, &out_shape);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::Abs { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::Sigmoid { a } => {
                    let da: Vec<f64> =
                        grad.iter().zip(&self.nodes[i].data).map(|(g, &s)| g * s * (1.0 - s)).collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::Softplus { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g / (1.0 + (-x).exp()))
                        .collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::Exp { a } => {
                    let da: Vec<f64> = grad.iter().zip(&self.nodes[i].data).map(|(g, &e)| g * e).collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::Log { a } => {
                    let da: Vec<f64> = grad.iter().zip(&self.nodes[a.0].data).map(|(g, &x)| g / x).collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::PowConst { a, p } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * p * x.powf(p - 1.0))
                        .collect();
                    self.spread(&mut scratch, a, &da);
                }
                Op::MatMul { a, b } => self.matmul_backward(&mut scratch, i, a, b, &grad),
                Op::TransposeLast2 { a } => {
                    let (m, n) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                    let nb = numel(&out_shape[..out_shape.len() - 2]);
                    let mut da = vec![0.0; grad.len()];
                    for bi in 0..nb {
                        let base = bi * m * n;
                        for r in 0..m {
                            for c in 0..n {
                                da[base + c * m + r] = grad[base + r * n + c];
                            }
                        }
                    }
                    self.spread(&mut scratch, a, &da);
                }
                Op::Reshape { a } => self.spread(&mut scratch, a, &grad),
                Op::Softmax { a, axis } => {
                    let (outer, len, inner) = split_axis(&out_shape, axis);
                    let s = &self.nodes[i].data;
                    let mut da = vec![0.0; grad.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let dot: f64 = (0..len).map(|j| grad[at(j)] * s[at(j)]).sum();
                            for j in 0..len {
                                da[at(j)] = s[at(j)] * (grad[at(j)] - dot);
                            }
                        }
                    }
                    self.spread(&mut scratch, a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    self.layer_norm_backward(&mut scratch, x, gain, bias, eps, &grad)
                }
                Op::CosineSim { a, b, eps } => {
                    let g = grad[0];
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
                    let ra = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let rb = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let na = ra + eps;
                    let nb = rb + eps;
                    let mut da = vec![0.0; ad.len()];
                    let mut db = vec![0.0; bd.len()];
                    for j in 0..ad.len() {
                        let mut ga = bd[j] / (na * nb);
                        if ra > 0.0 {
                            ga -= dot / (na * na * nb) * (ad[j] / ra);
                        }
                        let mut gb = ad[j] / (na * nb);
                        if rb > 0.0 {
                            gb -= dot / (na * nb * nb) * (bd[j] / rb);
                        }
                        da[j] = g * ga;
                        db[j] = g * gb;
                    }
                    self.spread(&mut scratch, a, &da);
                    self.spread(&mut scratch, b, &db);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(&out_shape, axis);
                    let mut offset = 0;
                    for &p in &parts {
                        let plen = self.nodes[p.0].shape[axis];
                        let chunk = plen * inner;
                        let mut dp = vec![0.0; self.nodes[p.0].data.len()];
                        for o in 0..outer {
                            dp[o * chunk..(o + 1) * chunk].copy_from_slice(
                                &grad[o * total * inner + offset..o * total * inner + offset + chunk],
                            );
                        }
                        self.spread(&mut scratch, p, &dp);
                        offset += chunk;
                    }
                }
                Op::Gather { a, axis, indices } => {
                    let src_shape = self.nodes[a.0].shape.clone();
                    let (outer, len, inner) = split_axis(&src_shape, axis);
                    let mut da = vec![0.0; numel(&src_shape)];
                    for o in 0..outer {
                        for (j, &idx) in indices.iter().enumerate() {
                            for ii in 0..inner {
                                da[(o * len + idx) * inner + ii] +=
                                    grad[(o * indices.len() + j) * inner + ii];
                            }
                        }
                    }
                    self.spread(&mut scratch, a, &da);
                }
                Op::SumAxis { a, axis } => {
                    let src_shape = self.nodes[a.0].shape.clone();
                    let (outer, len, inner) = split_axis(&src_shape, axis);
                    let mut da = vec![0.0; numel(&src_shape)];
                    for o in 0..outer {
                        for j in 0..len {
                            for ii in 0..inner {
                                da[(o * len + j) * inner + ii] = grad[o * inner + ii];
                            }
                        }
                    }
                    self.spread(&mut scratch, a, &da);
                }
                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.nodes[a.0].data.len()];
                    self.spread(&mut scratch, a, &da);
                }
                Op::StraightThroughOnehot { a } => self.spread(&mut scratch, a, &grad),
            }
        }
    }

    fn binary_partials(
        &self,
        a: TensorId,
        b: TensorId,
        out_shape: &[usize],
        grad: &[f64],
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) -> (Vec<f64>, Vec<f64>) {
        let ndim = out_shape.len();
        let sa = broadcast_strides(&self.nodes[a.0].shape, ndim);
        let sb = broadcast_strides(&self.nodes[b.0].shape, ndim);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut da = vec![0.0; grad.len()];
        let mut db = vec![0.0; grad.len()];
        let mut coords = vec![0usize; ndim];
        for flat in 0..grad.len() {
            let mut rem = flat;
            for d in (0..ndim).rev() {
                coords[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
            let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
            let (ga, gb) = f(ad[ia], bd[ib], grad[flat]);
            da[flat] = ga;
            db[flat] = gb;
        }
        (da, db)
    }

    /// Reduce an output-shaped gradient to the operand's shape, then add it
    /// to the operand's scratch buffer.
    fn spread_reduced(
        &self,
        scratch: &mut [Option<Vec<f64>>],
        id: TensorId,
        grad: &[f64],
        out_shape: &[usize],
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let reduced = reduce_to_shape(grad, out_shape, &self.nodes[id.0].shape);
        self.spread(scratch, id, &reduced);
    }

    fn spread(&self, scratch: &mut [Option<Vec<f64>>], id: TensorId, grad: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match scratch[id.0] {
            Some(ref mut g) => {
                for (acc, v) in g.iter_mut().zip(grad) {
                    *acc += v;
                }
            }
            None => scratch[id.0] = Some(grad.to_vec()),
        }
    }

    fn matmul_backward(
        &self,
        scratch: &mut [Option<Vec<f64>>],
        out: usize,
        a: TensorId,
        b: TensorId,
        grad: &[f64],
    ) {
        let out_shape = self.nodes[out].shape.clone();
        let ash = self.nodes[a.0].shape.clone();
        let bsh = self.nodes[b.0].shape.clone();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let batch = &out_shape[..out_shape.len() - 2];
        let nb = numel(batch);
        let ndim = batch.len();
        let sa = broadcast_strides(&ash[..ash.len() - 2], ndim);
        let sb = broadcast_strides(&bsh[..bsh.len() - 2], ndim);
        let corrupt = if self.corrupt_matmul_backward { 1.5 } else { 1.0 };
        let mut da = vec![0.0; self.nodes[a.0].data.len()];
        let mut db = vec![0.0; self.nodes[b.0].data.len()];
        let mut coords = vec![0usize; ndim];
        for bi in 0..nb {
            let mut rem = bi;
            for d in (0..ndim).rev() {
                coords[d] = rem % batch[d];
                rem /= batch[d];
            }
            let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
            let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
            let g = &grad[bi * m * n..(bi + 1) * m * n];
            let av = &self.nodes[a.0].data[ia * m * k..(ia + 1) * m * k];
            let bv = &self.nodes[b.0].data[ib * k * n..(ib + 1) * k * n];
            // dA = dY · Bᵀ
            let das = &mut da[ia * m * k..(ia + 1) * m * k];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j] * corrupt;
                    if gij == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        das[i * k + p] += gij * bv[p * n + j];
                    }
                }
            }
            // dB = Aᵀ · dY
            let dbs = &mut db[ib * k * n..(ib + 1) * k * n];
            for p in 0..k {
                for i in 0..m {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        dbs[p * n + j] += aip * g[i * n + j];
                    }
                }
            }
        }
        self.spread(scratch, a, &da);
        self.spread(scratch, b, &db);
    }

    fn layer_norm_backward(
        &self,
        scratch: &mut [Option<Vec<f64>>],
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
        grad: &[f64],
    ) {
        let c = *self.nodes[x.0].shape.last().unwrap();
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gain.0].data;
        let mut dx = vec![0.0; xd.len()];
        let mut dgain = vec![0.0; c];
        let mut dbias = vec![0.0; c];
        for v in 0..xd.len() / c {
            let xs = &xd[v * c..(v + 1) * c];
            let gs = &grad[v * c..(v + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let xhat: Vec<f64> = xs.iter().map(|&x| (x - mean) * inv).collect();
            let mut dxhat = vec![0.0; c];
            for j in 0..c {
                dgain[j] += gs[j] * xhat[j];
                dbias[j] += gs[j];
                dxhat[j] = gs[j] * gd[j];
            }
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            let cf = c as f64;
            for j in 0..c {
                dx[v * c + j] = inv / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
            }
        }
        self.spread(scratch, x, &dx);
        self.spread(scratch, gain, &dgain);
        self.spread(scratch, bias, &dbias);
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// `(product of dims before axis, axis dim, product of dims after)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
