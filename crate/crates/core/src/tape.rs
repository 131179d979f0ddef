//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters come
//! from a borrowed [`ParamStore`] and are never copied; they occupy the
//! first variable slots of the tape. [`Tape::backward`] walks the recorded
//! nodes once in reverse order and accumulates gradients additively, so a
//! value consumed twice receives the sum of both contributions.
//!
//! Every operation checks shapes and rejects non-finite results.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Logit written into masked slots before a softmax or a score readout.
pub const MASKED_LOGIT: f64 = -1e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ClampMin(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    RowMax { x: Var, argmax: Vec<usize> },
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Abs(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    MaskCols { x: Var, mask: Vec<bool> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Patchify { x: Var, height: usize, width: usize, patch: usize },
    Varifocal { scores: Var, dscores: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
    n_params: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.get(Var(id.0))
    }

    /// One gradient per parameter, zero where the loss does not depend on it.
    pub fn into_param_grads(mut self) -> Vec<Tensor> {
        self.grads.truncate(self.n_params);
        self.grads
            .into_iter()
            .zip(self.shapes)
            .map(|(g, shape)| match g {
                Some(g) => Tensor::new(&shape, g).expect("gradient shape"),
                None => Tensor::zeros(&shape),
            })
            .collect()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: params.tensors(),
            nodes: Vec::new(),
        }
    }

    /// A tape without parameters.
    pub fn detached() -> Tape<'static> {
        Tape {
            params: &[],
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.params.len(), "parameter not on this tape");
        Var(id.0)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        if v.0 < self.params.len() {
            &self.params[v.0]
        } else {
            &self.nodes[v.0 - self.params.len()].value
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        v.0 < self.params.len() || self.nodes[v.0 - self.params.len()].requires_grad
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.len() - 1)
    }

    /// Copies a value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.len() - 1))
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, name)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_const", a, |x| x + c, Op::AddConst(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.map("clamp_min", a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// `x[m,n] + b[n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).len() != n {
            return shape_err("add_row", format!("row of {} for width {n}", self.value(b).len()));
        }
        let (vx, vb) = (self.value(x).data(), self.value(b).data());
        let mut data = vx.to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (o, &bv) in row.iter_mut().zip(vb) {
                *o += bv;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    /// `x[m,n] * r[n]` with `r` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(r).len() != n {
            return shape_err("mul_row", format!("row of {} for width {n}", self.value(r).len()));
        }
        let (vx, vr) = (self.value(x).data(), self.value(r).data());
        let mut data = vx.to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (o, &rv) in row.iter_mut().zip(vr) {
                *o *= rv;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("mul_row", out, Op::MulRow(x, r), &[x, r])
    }

    /// `x[m,n] * c[m,1]` with `c` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(c).len() != m {
            return shape_err("mul_col", format!("column of {} for height {m}", self.value(c).len()));
        }
        let (vx, vc) = (self.value(x).data(), self.value(c).data());
        let mut data = vx.to_vec();
        for (row, &cv) in data.chunks_mut(n.max(1)).zip(vc) {
            for o in row.iter_mut() {
                *o *= cv;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("mul_col", out, Op::MulCol(x, c), &[x, c])
    }

    /// Adds a single-element tensor to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "add_scalar")?;
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|v| v + sv).collect())?;
        self.push("add_scalar", out, Op::AddScalar(x, s), &[x, s])
    }

    /// Multiplies every entry by a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "mul_scalar")?;
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|v| v * sv).collect())?;
        self.push("mul_scalar", out, Op::MulScalar(x, s), &[x, s])
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return shape_err(op, format!("expected one element, got {:?}", t.shape()));
        }
        Ok(t.data()[0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Row-wise softmax. Masked columns get logit [`MASKED_LOGIT`], come out as
    /// exactly zero and receive exactly zero gradient.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(mask) = mask {
            if mask.len() != n {
                return shape_err("softmax_rows", format!("mask of {} for width {n}", mask.len()));
            }
            if !mask.iter().any(|&v| v) && m > 0 {
                return Err(Error::DegenerateMask { op: "softmax_rows" });
            }
        }
        let vx = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let src = &vx[i * n..(i + 1) * n];
            let dst = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] = match mask {
                    Some(mk) if !mk[j] => MASKED_LOGIT,
                    _ => src[j],
                };
            }
            let max = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in dst.iter_mut() {
                *v = math::exp(*v - max);
                sum += *v;
            }
            for (j, v) in dst.iter_mut().enumerate() {
                *v = match mask {
                    Some(mk) if !mk[j] => 0.0,
                    _ => *v / sum,
                };
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("softmax_rows", out, Op::Softmax(x), &[x])
    }

    /// Per-row maximum over valid columns, shaped `[m, 1]`.
    pub fn row_max(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(mask) = mask {
            if mask.len() != n {
                return shape_err("row_max", format!("mask of {} for width {n}", mask.len()));
            }
        }
        let vx = self.value(x).data();
        let mut argmax = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let best = (0..n)
                .filter(|&j| mask.is_none_or(|mk| mk[j]))
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                })
                .ok_or(Error::DegenerateMask { op: "row_max" })?;
            argmax.push(best);
            data.push(row[best]);
        }
        let out = Tensor::new(&[m, 1], data)?;
        self.push("row_max", out, Op::RowMax { x, argmax }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, math::sigmoid, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, |v| v * math::sigmoid(v), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, f64::abs, Op::Abs(x))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let vx = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + eps);
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(&[m, n], xhat.clone())?;
        self.push("layer_norm_rows", out, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("l2_normalize_rows needs eps > 0, got {eps}")));
        }
        let (m, n) = self.value(x).dims2()?;
        let vx = self.value(x).data();
        let mut data = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let norm = math::sqrt(row.iter().map(|v| v * v).sum());
            let denom = norm.max(eps);
            for j in 0..n {
                data[i * n + j] = row[j] / denom;
            }
            norms.push(norm);
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("l2_normalize_rows", out, Op::L2Normalize { x, norms, eps }, &[x])
    }

    /// Overwrites columns whose mask entry is false with [`MASKED_LOGIT`].
    pub fn mask_cols(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if mask.len() != n {
            return shape_err("mask_cols", format!("mask of {} for width {n}", mask.len()));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                if !mask[j] {
                    data[i * n + j] = MASKED_LOGIT;
                }
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("mask_cols", out, Op::MaskCols { x, mask: mask.to_vec() }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return shape_err("concat_cols", format!("row counts {m} and {pm}"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return shape_err("gather_rows", format!("row {bad} out of {m}"));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(&[index.len(), n], data)?;
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        self.push("gather_rows", out, op, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return shape_err("slice_cols", format!("{start}..{} of width {n}", start + len));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&vx.row(i)[start..start + len]);
        }
        let out = Tensor::new(&[m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Rearranges a `[3, H, W]` image into non-overlapping `patch × patch`
    /// tiles: one row per tile (row-major over the tile grid), columns
    /// ordered channel, then patch row, then patch column.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [c, height, width] = shape[..] else {
            return shape_err("patchify", format!("expected [3, H, W], got {shape:?}"));
        };
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return shape_err("patchify", format!("{height}x{width} not divisible by {patch}"));
        }
        let (gh, gw) = (height / patch, width / patch);
        let feat = c * patch * patch;
        let vx = self.value(x).data();
        let mut data = vec![0.0; gh * gw * feat];
        for_each_patch_pixel(c, height, width, patch, |dst, src| data[dst] = vx[src]);
        let out = Tensor::new(&[gh * gw, feat], data)?;
        let op = Op::Patchify {
            x,
            height,
            width,
            patch,
        };
        self.push("patchify", out, op, &[x])
    }

    /// Varifocal alignment loss on raw similarity scores.
    ///
    /// `targets` holds the soft target `u` per entry (0 for negatives),
    /// `valid` marks the columns that take part; the sum is divided by
    /// `normalizer`. Log arguments are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn varifocal_loss(
        &mut self,
        scores: Var,
        targets: &Tensor,
        valid: &[bool],
        alpha: f64,
        gamma: f64,
        normalizer: f64,
    ) -> Result<Var> {
        let vs = self.value(scores);
        vs.check_same_shape(targets, "varifocal_loss")?;
        let (m, n) = vs.dims2()?;
        if valid.len() != n {
            return shape_err("varifocal_loss", format!("mask of {} for width {n}", valid.len()));
        }
        if normalizer <= 0.0 {
            return Err(Error::Contract(format!("loss normalizer must be positive, got {normalizer}")));
        }
        let mut total = 0.0;
        let mut dscores = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                if !valid[j] {
                    continue;
                }
                let k = i * n + j;
                let s = vs.data()[k];
                let u = targets.data()[k];
                let (l, d) = varifocal_term(s, u, alpha, gamma);
                total += l;
                dscores[k] = d / normalizer;
            }
        }
        let out = Tensor::scalar(total / normalizer);
        self.push("varifocal_loss", out, Op::Varifocal { scores, dscores }, &[scores])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let p = self.params.len();
        let total = self.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; total];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (p..=loss.0).rev() {
            let node = &self.nodes[idx - p];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = (0..total).map(|i| self.value(Var(i)).shape().to_vec()).collect();
        Ok(Gradients {
            shapes,
            grads,
            n_params: p,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / vb[k];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a = |k: usize| if is_max { va[k] >= vb[k] } else { va[k] <= vb[k] };
                self.acc(grads, *a, |ga| {
                    for k in 0..g.len() {
                        if pick_a(k) {
                            ga[k] += g[k];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for k in 0..g.len() {
                        if !pick_a(k) {
                            gb[k] += g[k];
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |ga| axpy(ga, g, *c)),
            Op::AddConst(a) => self.acc(grads, *a, |ga| axpy(ga, g, 1.0)),
            Op::ClampMin(a, lo) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for k in 0..g.len() {
                        if va[k] > *lo {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = node.value.cols().max(1);
                self.acc(grads, *x, |gx| axpy(gx, g, 1.0));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let n = node.value.cols().max(1);
                let (vx, vr) = (self.value(*x).data(), self.value(*r).data());
                self.acc(grads, *x, |gx| {
                    for (k, gv) in g.iter().enumerate() {
                        gx[k] += gv * vr[k % n];
                    }
                });
                self.acc(grads, *r, |gr| {
                    for (k, gv) in g.iter().enumerate() {
                        gr[k % n] += gv * vx[k];
                    }
                });
            }
            Op::MulCol(x, c) => {
                let n = node.value.cols().max(1);
                let (vx, vc) = (self.value(*x).data(), self.value(*c).data());
                self.acc(grads, *x, |gx| {
                    for (k, gv) in g.iter().enumerate() {
                        gx[k] += gv * vc[k / n];
                    }
                });
                self.acc(grads, *c, |gc| {
                    for (k, gv) in g.iter().enumerate() {
                        gc[k / n] += gv * vx[k];
                    }
                });
            }
            Op::AddScalar(x, s) => {
                self.acc(grads, *x, |gx| axpy(gx, g, 1.0));
                self.acc(grads, *s, |gs| gs[0] += g.iter().sum::<f64>());
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                let vx = self.value(*x).data();
                self.acc(grads, *x, |gx| axpy(gx, g, sv));
                self.acc(grads, *s, |gs| {
                    gs[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matmul lhs");
                let n = node.value.cols();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| gemm_nt(g, vb, ga, m, n, k));
                self.acc(grads, *b, |gb| gemm_tn(va, g, gb, k, m, n));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("transpose input");
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.cols().max(1);
                self.acc(grads, *x, |gx| {
                    for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RowMax { x, argmax } => {
                let n = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (i, &j) in argmax.iter().enumerate() {
                        gx[i * n + j] += g[i];
                    }
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        let s = math::sigmoid(vx[k]);
                        gx[k] += g[k] * s * (1.0 + vx[k] * (1.0 - s));
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            gx[k] += g[k];
                        } else if vx[k] < 0.0 {
                            gx[k] -= g[k];
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = node.value.cols().max(1);
                let nf = n as f64;
                self.acc(grads, *x, |gx| {
                    for (i, &is) in inv_std.iter().enumerate() {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &xhat[i * n..(i + 1) * n];
                        let sg: f64 = gr.iter().sum();
                        let sgx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += is / nf * (nf * gr[j] - sg - xr[j] * sgx);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms, eps } => {
                let n = node.value.cols().max(1);
                self.acc(grads, *x, |gx| {
                    for (i, &norm) in norms.iter().enumerate() {
                        let gr = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        if norm > *eps {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                gx[i * n + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                gx[i * n + j] += gr[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::MaskCols { x, mask } => {
                let n = mask.len().max(1);
                self.acc(grads, *x, |gx| {
                    for (k, gv) in g.iter().enumerate() {
                        if mask[k % n] {
                            gx[k] += gv;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    self.acc(grads, p, |gp| axpy(gp, slice, 1.0));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let pn = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for (i, row) in gp.chunks_mut(pn.max(1)).enumerate() {
                            axpy(row, &g[i * n + col..i * n + col + pn], 1.0);
                        }
                    });
                    col += pn;
                }
            }
            Op::GatherRows { x, index } => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let len = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for (i, row) in g.chunks(len.max(1)).enumerate() {
                        axpy(&mut gx[i * n + start..i * n + start + len], row, 1.0);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| {
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Patchify {
                x,
                height,
                width,
                patch,
            } => {
                let c = self.value(*x).shape()[0];
                self.acc(grads, *x, |gx| {
                    for_each_patch_pixel(c, *height, *width, *patch, |dst, src| gx[src] += g[dst]);
                });
            }
            Op::Varifocal { scores, dscores } => {
                self.acc(grads, *scores, |gs| axpy(gs, dscores, g[0]));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let len = self.value(v).len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn for_each_patch_pixel(
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
    mut f: impl FnMut(usize, usize),
) {
    let gw = width / patch;
    let feat = channels * patch * patch;
    for y in 0..height {
        let (py, dy) = (y / patch, y % patch);
        for x in 0..width {
            let (px, dx) = (x / patch, x % patch);
            let token = py * gw + px;
            for ch in 0..channels {
                let dst = token * feat + ch * patch * patch + dy * patch + dx;
                let src = (ch * height + y) * width + x;
                f(dst, src);
            }
        }
    }
}

/// Loss and d(loss)/d(score) of one varifocal entry.
pub(crate) fn varifocal_term(s: f64, u: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    const CLAMP: f64 = 1e-12;
    let theta = math::sigmoid(s);
    let tc = theta.clamp(CLAMP, 1.0 - CLAMP);
    if u > 0.0 {
        let l = -u * (u * math::ln(tc) + (1.0 - u) * math::ln(1.0 - tc));
        (l, -u * (u - theta))
    } else {
        let log1m = math::ln(1.0 - tc);
        let tg = math::powf(theta, gamma);
        let l = -alpha * tg * log1m;
        let d = -alpha * (gamma * tg * (1.0 - theta) * log1m - tg * theta);
        (l, d)
    }
}
