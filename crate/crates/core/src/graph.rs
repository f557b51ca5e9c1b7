//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Ops are
//! methods returning a [`Var`] handle; each records enough information for
//! the backward sweep. Creation order is a topological order, so
//! [`Graph::backward`] is a single reverse walk with fixed, sequential
//! gradient accumulation — two identical passes produce bit-identical
//! gradients. The tape is single-use: `backward` consumes the graph.
//!
//! Graphs built with [`Graph::inference`] skip all recording; the same model
//! code then runs as a plain evaluator (used for grid evaluation, where
//! chunks of queries are processed on independent graphs, possibly from
//! several threads).

use std::collections::HashMap;

use crate::kernels::{self, Conv2dDims, Conv3dDims};
use crate::nn::Parameter;
use crate::{Error, Result, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Interpolation stencil entry: flat spatial address plus weight.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub base: usize,
    pub w: T,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        eps: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv2dDims,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        c_in: usize,
        c_out: usize,
        h: usize,
        w_sp: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv3dDims,
    },
    ConvT3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        c_in: usize,
        c_out: usize,
        dep: usize,
        h: usize,
        w_sp: usize,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<u32>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        idx: Vec<usize>,
    },
    MaxRowsGrouped {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Transpose2d(Var),
    SumAll(Var),
    MeanAll(Var),
    Rope {
        x: Var,
        /// Rotation angles per rotated channel pair, row-major (rows, 3*group/2).
        angles: Vec<T>,
        group: usize,
    },
    GridSample {
        grid: Var,
        /// `taps_per_row` stencil entries per output row; addresses are
        /// spatial (channel stride applied separately).
        taps: Vec<Tap<T>>,
        taps_per_row: usize,
        chan_stride: usize,
    },
    ScatterMeanGrid {
        feat: Var,
        /// Per feature row: compact cell ids (plane * spatial + offset), one
        /// per plane (triplane) or exactly one (voxel).
        cells: Vec<usize>,
        cells_per_row: usize,
        /// Spatial cells per plane (R² or R³) and per-plane block stride in
        /// the output buffer; element address is
        /// `(cell / spatial) * block + cell % spatial + channel * chan_stride`.
        spatial: usize,
        block: usize,
        chan_stride: usize,
        /// 1 / number of points in the cell, indexed by compact cell id.
        inv_count: Vec<T>,
    },
    GroupedLogits {
        q: Var,
        k: Var,
        group: usize,
        heads: usize,
        scale: T,
    },
    GroupedWeightedSum {
        wts: Var,
        v: Var,
        heads: usize,
    },
    WindowLogits {
        q: Var,
        k: Var,
        wsize: usize,
        heads: usize,
        scale: T,
    },
    WindowWeightedSum {
        wts: Var,
        v: Var,
        wsize: usize,
        heads: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    PlaneExchange {
        t: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients returned by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    by_name: HashMap<String, Vec<T>>,
    by_var: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a named parameter leaf (zeros if it was bound but
    /// unreached by the loss).
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.by_name.get(name).map(|v| v.as_slice())
    }

    /// Gradient of an explicit requires-grad leaf.
    pub fn of_var(&self, v: Var) -> Option<&[T]> {
        self.by_var.get(&v.0).map(|g| g.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(String, Var)>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph: ops touching a requires-grad leaf become
    /// differentiable.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            recording: true,
        }
    }

    /// A non-recording graph; `backward` on it is an error.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        debug_assert!(
            value.is_finite(),
            "non-finite value out of op {:?}",
            std::mem::discriminant(&op)
        );
        let needs_grad = needs_grad && self.recording;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            // Aux payloads are only kept where the backward pass can use them.
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Var(id)
    }

    /// Insert a constant (non-differentiable) tensor.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a leaf; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let needs = requires_grad && self.recording;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(id)
    }

    /// Bind a parameter as a named leaf. Its gradient is retrievable from
    /// [`Grads::get`] under the parameter's name after `backward`.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        let v = self.leaf(p.value.clone(), true);
        if self.recording {
            self.bindings.push((p.name.clone(), v));
        }
        v
    }

    fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::invalid(format!("{op}: expected rank-2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ───────────────────────── elementwise ─────────────────────────

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(t, Op::MulScalar(a, s), needs)
    }

    /// `x` of shape (..., d) plus a length-d row broadcast over leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| {
            Error::invalid("add_row: rank-0 input")
        })?;
        if self.shape(row) != [d] {
            return Err(Self::shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, &rv) in chunk.iter_mut().zip(&r) {
                *v += rv;
            }
        }
        let t = Tensor::from_vec(self.shape(x), data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::AddRow(x, row), needs))
    }

    /// `x` of shape (..., d) times a length-d row broadcast over leading axes.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| {
            Error::invalid("mul_row: rank-0 input")
        })?;
        if self.shape(row) != [d] {
            return Err(Self::shape_err("mul_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, &rv) in chunk.iter_mut().zip(&r) {
                *v *= rv;
            }
        }
        let t = Tensor::from_vec(self.shape(x), data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::MulRow(x, row), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.maximum(T::ZERO));
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid_scalar);
        let needs = self.needs(x);
        self.push(t, Op::Sigmoid(x), needs)
    }

    // ───────────────────────── matmul ─────────────────────────

    /// (m,k) · (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Self::shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::from_vec(&[m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul(a, b), needs))
    }

    /// (m,k) · (n,k)ᵀ -> (m,n)
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Self::shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::from_vec(&[m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatmulNT(a, b), needs))
    }

    // ───────────────────────── normalization ─────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::invalid("softmax: rank-0 input"))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().fold(row[0], |a, &b| a.maximum(b));
            let mut sum = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::from_vec(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax(x), needs))
    }

    /// Layer normalization over the last axis (no affine; compose with
    /// `mul_row`/`add_row` for gain and bias).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let eps = T::from_f64(1e-5);
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::invalid("layer_norm: rank-0 input"))?;
        if d == 0 {
            return Err(Error::invalid("layer_norm: empty last axis"));
        }
        let inv_d = T::ONE / T::from_usize(d);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let mut mean = T::ZERO;
            for &v in row.iter() {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &v in row.iter() {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = T::ONE / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let t = Tensor::from_vec(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::LayerNorm { x, eps }, needs))
    }

    // ───────────────────────── convolutions ─────────────────────────

    /// 2D convolution, stride 1, pad k/2 (shape preserving). `x` is
    /// (B,C,H,W), `w` is (O,C,k,k) with k in {1,3}, bias (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Self::shape_err("conv2d", &xs, &ws));
        }
        let k = ws[2];
        if k != 1 && k != 3 {
            return Err(Error::invalid(format!("conv2d: kernel {k} not in {{1,3}}")));
        }
        let dims = Conv2dDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
            k,
        };
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(Self::shape_err("conv2d bias", self.shape(b), &ws));
            }
        }
        let mut out = vec![T::ZERO; dims.batch * dims.c_out * dims.h * dims.w];
        kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
            dims,
        );
        let t = Tensor::from_vec(&[dims.batch, dims.c_out, dims.h, dims.w], out)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }, needs))
    }

    /// Transposed 2D convolution with 2x2 kernel and stride 2 (exact 2x
    /// upsampling). `x` is (B,C,h,w), `w` is (C,O,2,2), output (B,O,2h,2w).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != 2 || ws[3] != 2 {
            return Err(Self::shape_err("conv_transpose2d", &xs, &ws));
        }
        let (batch, c_in, h, w_sp) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[1];
        let (oh, ow) = (2 * h, 2 * w_sp);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::ZERO; batch * c_out * oh * ow];
        crate::exec::for_each_chunk_mut(
            &mut out,
            oh * ow,
            batch * c_out * h * w_sp * c_in * 4,
            |bo, plane| {
                let (bi, o) = (bo / c_out, bo % c_out);
                if let Some(bias) = &bd {
                    let bv = bias[o];
                    for v in plane.iter_mut() {
                        *v += bv;
                    }
                }
                for c in 0..c_in {
                    let xp = &xd[(bi * c_in + c) * h * w_sp..(bi * c_in + c + 1) * h * w_sp];
                    let wk = &wd[(c * c_out + o) * 4..(c * c_out + o + 1) * 4];
                    for y in 0..h {
                        for xx in 0..w_sp {
                            let xv = xp[y * w_sp + xx];
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    plane[(2 * y + dy) * ow + 2 * xx + dx] +=
                                        xv * wk[dy * 2 + dx];
                                }
                            }
                        }
                    }
                }
            },
        );
        let t = Tensor::from_vec(&[batch, c_out, oh, ow], out)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            t,
            Op::ConvT2d {
                x,
                w,
                b,
                batch,
                c_in,
                c_out,
                h,
                w_sp,
            },
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2. Requires even H and W.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::invalid(format!("maxpool2d: bad shape {xs:?}")));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; batch * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..batch * c {
            let xp = &xd[bc * h * w..(bc + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = xp[(2 * y) * w + 2 * xx];
                    let mut besti = (2 * y) * w + 2 * xx;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (2 * y + dy) * w + 2 * xx + dx;
                            if xp[i] > best {
                                best = xp[i];
                                besti = i;
                            }
                        }
                    }
                    out[bc * oh * ow + y * ow + xx] = best;
                    argmax[bc * oh * ow + y * ow + xx] = (bc * h * w + besti) as u32;
                }
            }
        }
        let t = Tensor::from_vec(&[batch, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, needs))
    }

    /// 3D convolution, stride 1, pad k/2. `x` is (B,C,D,H,W), `w` is
    /// (O,C,k,k,k) with k in {1,3}.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Self::shape_err("conv3d", &xs, &ws));
        }
        let k = ws[2];
        if k != 1 && k != 3 {
            return Err(Error::invalid(format!("conv3d: kernel {k} not in {{1,3}}")));
        }
        let dims = Conv3dDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            dep: xs[2],
            h: xs[3],
            w: xs[4],
            k,
        };
        let mut out = vec![T::ZERO; dims.batch * dims.c_out * dims.dep * dims.h * dims.w];
        kernels::conv3d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
            dims,
        );
        let t = Tensor::from_vec(&[dims.batch, dims.c_out, dims.dep, dims.h, dims.w], out)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(t, Op::Conv3d { x, w, b, dims }, needs))
    }

    /// Transposed 3D convolution with 2x2x2 kernel and stride 2.
    /// `x` is (B,C,D,H,W), `w` is (C,O,2,2,2), output (B,O,2D,2H,2W).
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[0] || ws[2..] != [2, 2, 2] {
            return Err(Self::shape_err("conv_transpose3d", &xs, &ws));
        }
        let (batch, c_in, dep, h, w_sp) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let c_out = ws[1];
        let (od, oh, ow) = (2 * dep, 2 * h, 2 * w_sp);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::ZERO; batch * c_out * od * oh * ow];
        crate::exec::for_each_chunk_mut(
            &mut out,
            od * oh * ow,
            batch * c_out * dep * h * w_sp * c_in * 8,
            |bo, plane| {
                let (bi, o) = (bo / c_out, bo % c_out);
                if let Some(bias) = &bd {
                    let bv = bias[o];
                    for v in plane.iter_mut() {
                        *v += bv;
                    }
                }
                let vol = dep * h * w_sp;
                for c in 0..c_in {
                    let xp = &xd[(bi * c_in + c) * vol..(bi * c_in + c + 1) * vol];
                    let wk = &wd[(c * c_out + o) * 8..(c * c_out + o + 1) * 8];
                    for z in 0..dep {
                        for y in 0..h {
                            for xx in 0..w_sp {
                                let xv = xp[(z * h + y) * w_sp + xx];
                                for dz in 0..2 {
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            plane[((2 * z + dz) * oh + 2 * y + dy) * ow
                                                + 2 * xx
                                                + dx] += xv * wk[(dz * 2 + dy) * 2 + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            },
        );
        let t = Tensor::from_vec(&[batch, c_out, od, oh, ow], out)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            t,
            Op::ConvT3d {
                x,
                w,
                b,
                c_in,
                c_out,
                dep,
                h,
                w_sp,
            },
            needs,
        ))
    }

    /// 2x2x2 max pooling with stride 2. Requires even D, H, W.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || xs[2] % 2 != 0 || xs[3] % 2 != 0 || xs[4] % 2 != 0 {
            return Err(Error::invalid(format!("maxpool3d: bad shape {xs:?}")));
        }
        let (batch, c, dep, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (dep / 2, h / 2, w / 2);
        let xd = self.value(x).data();
        let vol = dep * h * w;
        let ovol = od * oh * ow;
        let mut out = vec![T::ZERO; batch * c * ovol];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..batch * c {
            let xp = &xd[bc * vol..(bc + 1) * vol];
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let first = ((2 * z) * h + 2 * y) * w + 2 * xx;
                        let mut best = xp[first];
                        let mut besti = first;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    if xp[i] > best {
                                        best = xp[i];
                                        besti = i;
                                    }
                                }
                            }
                        }
                        let oi = bc * ovol + (z * oh + y) * ow + xx;
                        out[oi] = best;
                        argmax[oi] = (bc * vol + besti) as u32;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[batch, c, od, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaxPool3d { x, argmax }, needs))
    }

    // ───────────────────────── row reindexing ─────────────────────────

    /// Select rows of a rank-2 tensor: out[i] = x[idx[i]].
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_vec(&[idx.len(), d], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Accumulate rows into a zero tensor of `out_rows` rows:
    /// out[idx[i]] += x[i], accumulated in index order.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (m, d) = self.dims2(x, "scatter_add_rows")?;
        if idx.len() != m {
            return Err(Error::invalid(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                m
            )));
        }
        for &i in idx {
            if i >= out_rows {
                return Err(Error::IndexOutOfBounds {
                    op: "scatter_add_rows",
                    index: i,
                    len: out_rows,
                });
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; out_rows * d];
        for (r, &i) in idx.iter().enumerate() {
            let src = &xd[r * d..(r + 1) * d];
            let dst = &mut out[i * d..(i + 1) * d];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
        let t = Tensor::from_vec(&[out_rows, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Op::ScatterAddRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Max over fixed-size groups of consecutive rows:
    /// x (n*k, d) -> out (n, d). Ties keep the first row.
    pub fn max_rows_grouped(&mut self, x: Var, k: usize) -> Result<Var> {
        let (nk, d) = self.dims2(x, "max_rows_grouped")?;
        if k == 0 || nk % k != 0 {
            return Err(Error::invalid(format!(
                "max_rows_grouped: {nk} rows not divisible by group {k}"
            )));
        }
        let n = nk / k;
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; n * d];
        let mut argmax = vec![0u32; n * d];
        for i in 0..n {
            for c in 0..d {
                let mut best = xd[(i * k) * d + c];
                let mut besti = i * k;
                for r in i * k + 1..(i + 1) * k {
                    if xd[r * d + c] > best {
                        best = xd[r * d + c];
                        besti = r;
                    }
                }
                out[i * d + c] = best;
                argmax[i * d + c] = besti as u32;
            }
        }
        let t = Tensor::from_vec(&[n, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaxRowsGrouped { x, argmax }, needs))
    }

    // ───────────────────────── shape ops ─────────────────────────

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat: empty input list"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Self::shape_err("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let mut offset = 0;
        for &v in xs {
            let len = self.shape(v)[axis];
            let vd = self.value(v).data();
            for o in 0..outer {
                let src = &vd[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let t = Tensor::from_vec(&out_shape, out)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(format!(
                "narrow: [{start}, {start}+{len}) on axis {axis} of {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let t = Tensor::from_vec(&out_shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Op::Narrow {
                x,
                axis,
                start,
                len,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose2d")?;
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose2d(x), needs))
    }

    // ───────────────────────── reductions ─────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(acc / T::from_usize(n.max(1))),
            Op::MeanAll(x),
            needs,
        )
    }

    // ───────────────────────── domain-specific ops ─────────────────────────

    /// Rotary embedding for 3D coordinates; see [`crate::attention`] for the
    /// channel layout. `angles` has one entry per rotated channel pair per
    /// row; `group` is the (even) per-axis channel count.
    pub(crate) fn rope_raw(&mut self, x: Var, angles: Vec<T>, group: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "rope")?;
        debug_assert_eq!(angles.len(), n * 3 * (group / 2));
        if 3 * group > d {
            return Err(Error::invalid(format!(
                "rope: 3 groups of {group} exceed feature dim {d}"
            )));
        }
        let mut data = self.value(x).data().to_vec();
        apply_rope(&mut data, &angles, n, d, group, false);
        let t = Tensor::from_vec(&[n, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Rope { x, angles, group }, needs))
    }

    /// Linear interpolation gather from a feature grid; forward value is
    /// `out[r, c] = sum_tap w * grid[tap.base + c * chan_stride]`.
    pub(crate) fn grid_sample_raw(
        &mut self,
        grid: Var,
        taps: Vec<Tap<T>>,
        taps_per_row: usize,
        chan_stride: usize,
        rows: usize,
        channels: usize,
    ) -> Result<Var> {
        debug_assert_eq!(taps.len(), rows * taps_per_row);
        let gd = self.value(grid).data();
        let out = crate::exec::map_range(rows, rows * taps_per_row * channels, |r| {
            let row_taps = &taps[r * taps_per_row..(r + 1) * taps_per_row];
            let mut row = vec![T::ZERO; channels];
            for tap in row_taps {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += tap.w * gd[tap.base + c * chan_stride];
                }
            }
            row
        })
        .into_iter()
        .flatten()
        .collect();
        let t = Tensor::from_vec(&[rows, channels], out)?;
        let needs = self.needs(grid);
        Ok(self.push(
            t,
            Op::GridSample {
                grid,
                taps,
                taps_per_row,
                chan_stride,
            },
            needs,
        ))
    }

    /// Scatter-mean of point features into grid cells. `cells` holds
    /// `cells_per_row` compact cell ids per feature row; `inv_count` is the
    /// reciprocal point count per cell (zero for empty cells).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn scatter_mean_grid_raw(
        &mut self,
        feat: Var,
        cells: Vec<usize>,
        cells_per_row: usize,
        spatial: usize,
        block: usize,
        chan_stride: usize,
        inv_count: Vec<T>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let (n, d) = self.dims2(feat, "scatter_mean_grid")?;
        debug_assert_eq!(cells.len(), n * cells_per_row);
        let fd = self.value(feat).data();
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; numel];
        // Index-order accumulation keeps the scatter deterministic.
        for r in 0..n {
            let frow = &fd[r * d..(r + 1) * d];
            for &cell in &cells[r * cells_per_row..(r + 1) * cells_per_row] {
                let inv = inv_count[cell];
                let base = (cell / spatial) * block + cell % spatial;
                for (c, &f) in frow.iter().enumerate() {
                    out[base + c * chan_stride] += f * inv;
                }
            }
        }
        let t = Tensor::from_vec(out_shape, out)?;
        let needs = self.needs(feat);
        Ok(self.push(
            t,
            Op::ScatterMeanGrid {
                feat,
                cells,
                cells_per_row,
                spatial,
                block,
                chan_stride,
                inv_count,
            },
            needs,
        ))
    }

    /// Scaled per-group attention logits. `q` is (m, dm); `k` is (m·g, dm);
    /// output is (m·heads, g) so a plain last-axis softmax normalizes each
    /// query-head. Row q·heads+h holds head h of query q.
    pub fn grouped_logits(
        &mut self,
        q: Var,
        k: Var,
        group: usize,
        heads: usize,
    ) -> Result<Var> {
        let (m, dm) = self.dims2(q, "grouped_logits")?;
        let (mg, dk) = self.dims2(k, "grouped_logits")?;
        if dm != dk || mg != m * group || heads == 0 || dm % heads != 0 {
            return Err(Self::shape_err("grouped_logits", self.shape(q), self.shape(k)));
        }
        let hd = dm / heads;
        let scale = T::ONE / T::from_f64((hd as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut out = vec![T::ZERO; m * heads * group];
        crate::exec::for_each_chunk_mut(&mut out, heads * group, m * heads * group * hd, |qi, rows| {
            let qrow = &qd[qi * dm..(qi + 1) * dm];
            for h in 0..heads {
                let qh = &qrow[h * hd..(h + 1) * hd];
                for j in 0..group {
                    let krow = &kd[(qi * group + j) * dm..(qi * group + j + 1) * dm];
                    let kh = &krow[h * hd..(h + 1) * hd];
                    let mut acc = T::ZERO;
                    for (&a, &b) in qh.iter().zip(kh) {
                        acc += a * b;
                    }
                    rows[h * group + j] = acc * scale;
                }
            }
        });
        let t = Tensor::from_vec(&[m * heads, group], out)?;
        let needs = self.needs(q) || self.needs(k);
        Ok(self.push(
            t,
            Op::GroupedLogits {
                q,
                k,
                group,
                heads,
                scale,
            },
            needs,
        ))
    }

    /// Per-group attention readout: out (m, dm) with
    /// out[q, h-slice] = Σ_j wts[q·heads+h, j] · v[q·g+j, h-slice].
    pub fn grouped_weighted_sum(&mut self, wts: Var, v: Var, heads: usize) -> Result<Var> {
        let (mh, group) = self.dims2(wts, "grouped_weighted_sum")?;
        let (mg, dm) = self.dims2(v, "grouped_weighted_sum")?;
        if heads == 0 || mh % heads != 0 || dm % heads != 0 {
            return Err(Self::shape_err(
                "grouped_weighted_sum",
                self.shape(wts),
                self.shape(v),
            ));
        }
        let m = mh / heads;
        if mg != m * group {
            return Err(Self::shape_err(
                "grouped_weighted_sum",
                self.shape(wts),
                self.shape(v),
            ));
        }
        let hd = dm / heads;
        let wd = self.value(wts).data();
        let vd = self.value(v).data();
        let mut out = vec![T::ZERO; m * dm];
        crate::exec::for_each_chunk_mut(&mut out, dm, m * dm * group, |qi, row| {
            for h in 0..heads {
                let wrow = &wd[(qi * heads + h) * group..(qi * heads + h + 1) * group];
                for (j, &wv) in wrow.iter().enumerate() {
                    let vh = &vd[(qi * group + j) * dm + h * hd..(qi * group + j) * dm + (h + 1) * hd];
                    for (o, &x) in row[h * hd..(h + 1) * hd].iter_mut().zip(vh) {
                        *o += wv * x;
                    }
                }
            }
        });
        let t = Tensor::from_vec(&[m, dm], out)?;
        let needs = self.needs(wts) || self.needs(v);
        Ok(self.push(t, Op::GroupedWeightedSum { wts, v, heads }, needs))
    }

    /// Attention logits over uniform windows of consecutive rows: token i
    /// attends within rows [⌊i/wsize⌋·wsize, ...+wsize). `q` and `k` are
    /// (n, dm) with n divisible by wsize; output is (n·heads, wsize), row
    /// i·heads+h holding head h of token i, ready for a last-axis softmax.
    pub fn window_logits(&mut self, q: Var, k: Var, wsize: usize, heads: usize) -> Result<Var> {
        let (n, dm) = self.dims2(q, "window_logits")?;
        if self.shape(k) != [n, dm] {
            return Err(Self::shape_err("window_logits", self.shape(q), self.shape(k)));
        }
        if wsize == 0 || n % wsize != 0 || heads == 0 || dm % heads != 0 {
            return Err(Error::invalid(format!(
                "window_logits: n={n} wsize={wsize} heads={heads} dm={dm}"
            )));
        }
        let hd = dm / heads;
        let scale = T::ONE / T::from_f64((hd as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut out = vec![T::ZERO; n * heads * wsize];
        crate::exec::for_each_chunk_mut(&mut out, heads * wsize, n * heads * wsize * hd, |i, rows| {
            let win = i / wsize;
            let qrow = &qd[i * dm..(i + 1) * dm];
            for h in 0..heads {
                let qh = &qrow[h * hd..(h + 1) * hd];
                for j in 0..wsize {
                    let krow = &kd[(win * wsize + j) * dm..(win * wsize + j) * dm + dm];
                    let kh = &krow[h * hd..(h + 1) * hd];
                    let mut acc = T::ZERO;
                    for (&a, &b) in qh.iter().zip(kh) {
                        acc += a * b;
                    }
                    rows[h * wsize + j] = acc * scale;
                }
            }
        });
        let t = Tensor::from_vec(&[n * heads, wsize], out)?;
        let needs = self.needs(q) || self.needs(k);
        Ok(self.push(
            t,
            Op::WindowLogits {
                q,
                k,
                wsize,
                heads,
                scale,
            },
            needs,
        ))
    }

    /// Readout companion of [`Graph::window_logits`]: out (n, dm) with
    /// out[i, h-slice] = Σ_j wts[i·heads+h, j] · v[win(i)·wsize+j, h-slice].
    pub fn window_weighted_sum(
        &mut self,
        wts: Var,
        v: Var,
        wsize: usize,
        heads: usize,
    ) -> Result<Var> {
        let (nh, w2) = self.dims2(wts, "window_weighted_sum")?;
        let (n, dm) = self.dims2(v, "window_weighted_sum")?;
        if heads == 0
            || nh != n * heads
            || w2 != wsize
            || n % wsize != 0
            || dm % heads != 0
        {
            return Err(Self::shape_err(
                "window_weighted_sum",
                self.shape(wts),
                self.shape(v),
            ));
        }
        let hd = dm / heads;
        let wd = self.value(wts).data();
        let vd = self.value(v).data();
        let mut out = vec![T::ZERO; n * dm];
        crate::exec::for_each_chunk_mut(&mut out, dm, n * dm * wsize, |i, row| {
            let win = i / wsize;
            for h in 0..heads {
                let wrow = &wd[(i * heads + h) * wsize..(i * heads + h + 1) * wsize];
                for (j, &wv) in wrow.iter().enumerate() {
                    let vh = &vd[(win * wsize + j) * dm + h * hd
                        ..(win * wsize + j) * dm + (h + 1) * hd];
                    for (o, &x) in row[h * hd..(h + 1) * hd].iter_mut().zip(vh) {
                        *o += wv * x;
                    }
                }
            }
        });
        let t = Tensor::from_vec(&[n, dm], out)?;
        let needs = self.needs(wts) || self.needs(v);
        Ok(self.push(
            t,
            Op::WindowWeightedSum {
                wts,
                v,
                wsize,
                heads,
            },
            needs,
        ))
    }

    /// Numerically stable binary cross entropy from logits, averaged over all
    /// elements. Targets must be 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n {
            return Err(Error::invalid(format!(
                "bce_with_logits: {n} logits vs {} targets",
                targets.len()
            )));
        }
        for &t in targets {
            if t != T::ZERO && t != T::ONE {
                return Err(Error::invalid("bce_with_logits: targets must be 0 or 1"));
            }
        }
        let ld = self.value(logits).data();
        let mut acc = T::ZERO;
        for (&x, &t) in ld.iter().zip(targets) {
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            acc += x.maximum(T::ZERO) - x * t + (T::ONE + (-x.abs()).exp()).ln();
        }
        let loss = acc / T::from_usize(n.max(1));
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Cross-plane information exchange input for triplane latents:
    /// each plane is concatenated with the axis-reduced (mean) maps of the
    /// other two planes, aligned by the shared axis.
    /// (3, d, R, R) -> (3, 3d, R, R).
    pub fn plane_exchange(&mut self, t: Var) -> Result<Var> {
        let s = self.shape(t).to_vec();
        if s.len() != 4 || s[0] != 3 || s[2] != s[3] {
            return Err(Error::invalid(format!("plane_exchange: bad shape {s:?}")));
        }
        let (d, r) = (s[1], s[2]);
        let td = self.value(t).data();
        let mut out = vec![T::ZERO; 3 * 3 * d * r * r];
        plane_exchange_forward(td, &mut out, d, r);
        let tens = Tensor::from_vec(&[3, 3 * d, r, r], out)?;
        let needs = self.needs(t);
        Ok(self.push(tens, Op::PlaneExchange { t }, needs))
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the graph; every bound
    /// parameter receives an (accumulated) gradient entry, as does every
    /// requires-grad leaf.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if !self.recording {
            return Err(Error::invalid("backward on an inference graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            // Re-store leaf gradients for collection below.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut by_name: HashMap<String, Vec<T>> = HashMap::new();
        for (name, var) in &self.bindings {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| vec![T::ZERO; self.nodes[var.0].value.numel()]);
            match by_name.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => {
                    by_name.insert(name.clone(), g);
                }
            }
        }
        let mut by_var = HashMap::new();
        for (id, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                if self.nodes[id].needs_grad && matches!(self.nodes[id].op, Op::Leaf) {
                    by_var.insert(id, g);
                }
            }
        }
        Ok(Grads { by_name, by_var })
    }

    fn accum(grads: &mut [Option<Vec<T>>], target: Var, numel: usize, f: impl FnOnce(&mut [T])) {
        let slot = grads[target.0].get_or_insert_with(|| vec![T::ZERO; numel]);
        f(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let numel_of = |v: Var| self.nodes[v.0].value.numel();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accum(grads, *a, numel_of(*a), |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, numel_of(*b), |gb| {
                        for (x, &y) in gb.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accum(grads, *a, numel_of(*a), |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, numel_of(*b), |gb| {
                        for (x, &y) in gb.iter_mut().zip(g) {
                            *x -= y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.needs(*a) {
                    Self::accum(grads, *a, numel_of(*a), |ga| {
                        for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(bd) {
                            *x += y * bv;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, numel_of(*b), |gb| {
                        for ((x, &y), &av) in gb.iter_mut().zip(g).zip(ad) {
                            *x += y * av;
                        }
                    });
                }
            }
            Op::MulScalar(a, s) => {
                if self.needs(*a) {
                    let s = *s;
                    Self::accum(grads, *a, numel_of(*a), |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y * s;
                        }
                    });
                }
            }
            Op::AddRow(x, row) => {
                let d = self.nodes[row.0].value.numel();
                if self.needs(*x) {
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for (a, &b) in gx.iter_mut().zip(g) {
                            *a += b;
                        }
                    });
                }
                if self.needs(*row) {
                    Self::accum(grads, *row, d, |gr| {
                        for chunk in g.chunks(d) {
                            for (a, &b) in gr.iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::MulRow(x, row) => {
                let d = self.nodes[row.0].value.numel();
                let rd = self.nodes[row.0].value.data();
                let xd = self.nodes[x.0].value.data();
                if self.needs(*x) {
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for (chunk, gchunk) in gx.chunks_mut(d).zip(g.chunks(d)) {
                            for ((a, &b), &rv) in chunk.iter_mut().zip(gchunk).zip(rd) {
                                *a += b * rv;
                            }
                        }
                    });
                }
                if self.needs(*row) {
                    Self::accum(grads, *row, d, |gr| {
                        for (gchunk, xchunk) in g.chunks(d).zip(xd.chunks(d)) {
                            for ((a, &b), &xv) in gr.iter_mut().zip(gchunk).zip(xchunk) {
                                *a += b * xv;
                            }
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.needs(*a) {
                    Self::accum(grads, *a, m * k, |ga| {
                        kernels::matmul_nt(g, bd, ga, m, n, k);
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, k * n, |gb| {
                        kernels::matmul_tn(ad, g, gb, m, k, n);
                    });
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[0];
                let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.needs(*a) {
                    Self::accum(grads, *a, m * k, |ga| {
                        kernels::matmul(g, bd, ga, m, n, k);
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, n * k, |gb| {
                        kernels::matmul_tn(g, ad, gb, m, n, k);
                    });
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xd = self.nodes[x.0].value.data();
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(xd) {
                            if xv > T::ZERO {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let yd = self.nodes[id].value.data();
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for ((a, &b), &y) in gx.iter_mut().zip(g).zip(yd) {
                            *a += b * y * (T::ONE - y);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let yd = self.nodes[id].value.data();
                    let d = *self.nodes[id].value.shape().last().unwrap();
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for ((grow, yrow), gxrow) in
                            g.chunks(d).zip(yd.chunks(d)).zip(gx.chunks_mut(d))
                        {
                            let mut dot = T::ZERO;
                            for (&gv, &yv) in grow.iter().zip(yrow) {
                                dot += gv * yv;
                            }
                            for ((a, &gv), &yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                                *a += yv * (gv - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, eps } => {
                if self.needs(*x) {
                    let xd = self.nodes[x.0].value.data();
                    let yd = self.nodes[id].value.data();
                    let d = *self.nodes[id].value.shape().last().unwrap();
                    let inv_d = T::ONE / T::from_usize(d);
                    let eps = *eps;
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for ((grow, (xrow, yrow)), gxrow) in g
                            .chunks(d)
                            .zip(xd.chunks(d).zip(yd.chunks(d)))
                            .zip(gx.chunks_mut(d))
                        {
                            let mut mean = T::ZERO;
                            for &v in xrow {
                                mean += v;
                            }
                            mean *= inv_d;
                            let mut var = T::ZERO;
                            for &v in xrow {
                                let c = v - mean;
                                var += c * c;
                            }
                            var *= inv_d;
                            let rstd = T::ONE / (var + eps).sqrt();
                            let mut mean_g = T::ZERO;
                            let mut mean_gy = T::ZERO;
                            for (&gv, &yv) in grow.iter().zip(yrow) {
                                mean_g += gv;
                                mean_gy += gv * yv;
                            }
                            mean_g *= inv_d;
                            mean_gy *= inv_d;
                            for ((a, &gv), &yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                                *a += rstd * (gv - mean_g - yv * mean_gy);
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                let dims = *dims;
                let mut gx = vec![T::ZERO; numel_of(*x)];
                let mut gw = vec![T::ZERO; numel_of(*w)];
                let mut gb = b.map(|b| vec![T::ZERO; numel_of(b)]);
                kernels::conv2d_backward(xd, wd, g, &mut gx, &mut gw, gb.as_deref_mut(), dims);
                if self.needs(*x) {
                    Self::accum(grads, *x, gx.len(), |s| add_assign(s, &gx));
                }
                if self.needs(*w) {
                    Self::accum(grads, *w, gw.len(), |s| add_assign(s, &gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    if self.needs(*b) {
                        Self::accum(grads, *b, gb.len(), |s| add_assign(s, &gb));
                    }
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                batch,
                c_in,
                c_out,
                h,
                w_sp,
            } => {
                let (batch, c_in, c_out, h, w_sp) = (*batch, *c_in, *c_out, *h, *w_sp);
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                let ow = 2 * w_sp;
                let oh = 2 * h;
                if self.needs(*x) {
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        crate::exec::for_each_chunk_mut(
                            gx,
                            h * w_sp,
                            batch * c_in * h * w_sp * c_out * 4,
                            |bc, plane| {
                                let (bi, c) = (bc / c_in, bc % c_in);
                                for o in 0..c_out {
                                    let gp = &g[(bi * c_out + o) * oh * ow
                                        ..(bi * c_out + o + 1) * oh * ow];
                                    let wk = &wd[(c * c_out + o) * 4..(c * c_out + o + 1) * 4];
                                    for y in 0..h {
                                        for xx in 0..w_sp {
                                            let mut acc = T::ZERO;
                                            for dy in 0..2 {
                                                for dx in 0..2 {
                                                    acc += wk[dy * 2 + dx]
                                                        * gp[(2 * y + dy) * ow + 2 * xx + dx];
                                                }
                                            }
                                            plane[y * w_sp + xx] += acc;
                                        }
                                    }
                                }
                            },
                        );
                    });
                }
                if self.needs(*w) {
                    Self::accum(grads, *w, numel_of(*w), |gw| {
                        for bi in 0..batch {
                            for c in 0..c_in {
                                let xp = &xd[(bi * c_in + c) * h * w_sp
                                    ..(bi * c_in + c + 1) * h * w_sp];
                                for o in 0..c_out {
                                    let gp = &g[(bi * c_out + o) * oh * ow
                                        ..(bi * c_out + o + 1) * oh * ow];
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            let mut acc = T::ZERO;
                                            for y in 0..h {
                                                for xx in 0..w_sp {
                                                    acc += xp[y * w_sp + xx]
                                                        * gp[(2 * y + dy) * ow + 2 * xx + dx];
                                                }
                                            }
                                            gw[(c * c_out + o) * 4 + dy * 2 + dx] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        Self::accum(grads, *b, c_out, |gb| {
                            for bi in 0..batch {
                                for o in 0..c_out {
                                    let gp = &g[(bi * c_out + o) * oh * ow
                                        ..(bi * c_out + o + 1) * oh * ow];
                                    let mut acc = T::ZERO;
                                    for &v in gp {
                                        acc += v;
                                    }
                                    gb[o] += acc;
                                }
                            }
                        });
                    }
                }
            }
            Op::MaxPool2d { x, argmax } | Op::MaxPool3d { x, argmax } => {
                if self.needs(*x) {
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            gx[src as usize] += gv;
                        }
                    });
                }
            }
            Op::Conv3d { x, w, b, dims } => {
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                let dims = *dims;
                let mut gx = vec![T::ZERO; numel_of(*x)];
                let mut gw = vec![T::ZERO; numel_of(*w)];
                let mut gb = b.map(|b| vec![T::ZERO; numel_of(b)]);
                kernels::conv3d_backward(xd, wd, g, &mut gx, &mut gw, gb.as_deref_mut(), dims);
                if self.needs(*x) {
                    Self::accum(grads, *x, gx.len(), |s| add_assign(s, &gx));
                }
                if self.needs(*w) {
                    Self::accum(grads, *w, gw.len(), |s| add_assign(s, &gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    if self.needs(*b) {
                        Self::accum(grads, *b, gb.len(), |s| add_assign(s, &gb));
                    }
                }
            }
            Op::ConvT3d {
                x,
                w,
                b,
                c_in,
                c_out,
                dep,
                h,
                w_sp,
            } => {
                let (c_in, c_out, dep, h, w_sp) = (*c_in, *c_out, *dep, *h, *w_sp);
                let batch = self.nodes[x.0].value.shape()[0];
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                let (od, oh, ow) = (2 * dep, 2 * h, 2 * w_sp);
                let vol = dep * h * w_sp;
                let ovol = od * oh * ow;
                if self.needs(*x) {
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for bi in 0..batch {
                            for c in 0..c_in {
                                let plane =
                                    &mut gx[(bi * c_in + c) * vol..(bi * c_in + c + 1) * vol];
                                for o in 0..c_out {
                                    let gp = &g[(bi * c_out + o) * ovol
                                        ..(bi * c_out + o + 1) * ovol];
                                    let wk = &wd[(c * c_out + o) * 8..(c * c_out + o + 1) * 8];
                                    for z in 0..dep {
                                        for y in 0..h {
                                            for xx in 0..w_sp {
                                                let mut acc = T::ZERO;
                                                for dz in 0..2 {
                                                    for dy in 0..2 {
                                                        for dx in 0..2 {
                                                            acc += wk[(dz * 2 + dy) * 2 + dx]
                                                                * gp[((2 * z + dz) * oh
                                                                    + 2 * y
                                                                    + dy)
                                                                    * ow
                                                                    + 2 * xx
                                                                    + dx];
                                                        }
                                                    }
                                                }
                                                plane[(z * h + y) * w_sp + xx] += acc;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.needs(*w) {
                    Self::accum(grads, *w, numel_of(*w), |gw| {
                        for bi in 0..batch {
                            for c in 0..c_in {
                                let xp = &xd[(bi * c_in + c) * vol..(bi * c_in + c + 1) * vol];
                                for o in 0..c_out {
                                    let gp = &g[(bi * c_out + o) * ovol
                                        ..(bi * c_out + o + 1) * ovol];
                                    for dz in 0..2 {
                                        for dy in 0..2 {
                                            for dx in 0..2 {
                                                let mut acc = T::ZERO;
                                                for z in 0..dep {
                                                    for y in 0..h {
                                                        for xx in 0..w_sp {
                                                            acc += xp[(z * h + y) * w_sp + xx]
                                                                * gp[((2 * z + dz) * oh
                                                                    + 2 * y
                                                                    + dy)
                                                                    * ow
                                                                    + 2 * xx
                                                                    + dx];
                                                        }
                                                    }
                                                }
                                                gw[(c * c_out + o) * 8 + (dz * 2 + dy) * 2 + dx] +=
                                                    acc;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        Self::accum(grads, *b, c_out, |gb| {
                            for bi in 0..batch {
                                for o in 0..c_out {
                                    let gp = &g[(bi * c_out + o) * ovol
                                        ..(bi * c_out + o + 1) * ovol];
                                    let mut acc = T::ZERO;
                                    for &v in gp {
                                        acc += v;
                                    }
                                    gb[o] += acc;
                                }
                            }
                        });
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let d = self.nodes[id].value.shape()[1];
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for (r, &i) in idx.iter().enumerate() {
                            let src = &g[r * d..(r + 1) * d];
                            for (a, &b) in gx[i * d..(i + 1) * d].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if self.needs(*x) {
                    let d = self.nodes[id].value.shape()[1];
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for (r, &i) in idx.iter().enumerate() {
                            let src = &g[i * d..(i + 1) * d];
                            for (a, &b) in gx[r * d..(r + 1) * d].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::MaxRowsGrouped { x, argmax } => {
                if self.needs(*x) {
                    let d = self.nodes[id].value.shape()[1];
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for (i, (&src_row, &gv)) in argmax.iter().zip(g).enumerate() {
                            let c = i % d;
                            gx[src_row as usize * d + c] += gv;
                        }
                    });
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if self.needs(v) {
                        Self::accum(grads, v, numel_of(v), |gv| {
                            for o in 0..outer {
                                let src_start = (o * axis_total + offset) * inner;
                                let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                                for (a, &b) in
                                    dst.iter_mut().zip(&g[src_start..src_start + len * inner])
                                {
                                    *a += b;
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for o in 0..outer {
                            let dst_start = (o * xs[*axis] + start) * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            for (a, &b) in
                                gx[dst_start..dst_start + len * inner].iter_mut().zip(src)
                            {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    Self::accum(grads, *x, numel_of(*x), |gx| add_assign(gx, g));
                }
            }
            Op::Transpose2d(x) => {
                if self.needs(*x) {
                    let s = self.nodes[id].value.shape();
                    let (n, m) = (s[0], s[1]);
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for j in 0..n {
                            for i in 0..m {
                                gx[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gv = g[0];
                    Self::accum(grads, *x, numel_of(*x), |gx| {
                        for a in gx.iter_mut() {
                            *a += gv;
                        }
                    });
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = numel_of(*x);
                    let gv = g[0] / T::from_usize(n.max(1));
                    Self::accum(grads, *x, n, |gx| {
                        for a in gx.iter_mut() {
                            *a += gv;
                        }
                    });
                }
            }
            Op::Rope { x, angles, group } => {
                if self.needs(*x) {
                    let s = self.nodes[id].value.shape();
                    let (n, d) = (s[0], s[1]);
                    let mut gg = g.to_vec();
                    apply_rope(&mut gg, angles, n, d, *group, true);
                    Self::accum(grads, *x, numel_of(*x), |gx| add_assign(gx, &gg));
                }
            }
            Op::GridSample {
                grid,
                taps,
                taps_per_row,
                chan_stride,
            } => {
                if self.needs(*grid) {
                    let channels = self.nodes[id].value.shape()[1];
                    Self::accum(grads, *grid, numel_of(*grid), |gg| {
                        for (r, row_taps) in taps.chunks(*taps_per_row).enumerate() {
                            let grow = &g[r * channels..(r + 1) * channels];
                            for tap in row_taps {
                                for (c, &gv) in grow.iter().enumerate() {
                                    gg[tap.base + c * chan_stride] += tap.w * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::ScatterMeanGrid {
                feat,
                cells,
                cells_per_row,
                spatial,
                block,
                chan_stride,
                inv_count,
            } => {
                if self.needs(*feat) {
                    let d = self.nodes[feat.0].value.shape()[1];
                    Self::accum(grads, *feat, numel_of(*feat), |gf| {
                        for (r, rcells) in cells.chunks(*cells_per_row).enumerate() {
                            let grow = &mut gf[r * d..(r + 1) * d];
                            for &cell in rcells {
                                let inv = inv_count[cell];
                                let base = (cell / spatial) * block + cell % spatial;
                                for (c, a) in grow.iter_mut().enumerate() {
                                    *a += g[base + c * chan_stride] * inv;
                                }
                            }
                        }
                    });
                }
            }
            Op::GroupedLogits {
                q,
                k,
                group,
                heads,
                scale,
            } => {
                let (group, heads, scale) = (*group, *heads, *scale);
                let dm = self.nodes[q.0].value.shape()[1];
                let m = self.nodes[q.0].value.shape()[0];
                let hd = dm / heads;
                let qd = self.nodes[q.0].value.data();
                let kd = self.nodes[k.0].value.data();
                if self.needs(*q) {
                    Self::accum(grads, *q, numel_of(*q), |gq| {
                        for qi in 0..m {
                            for h in 0..heads {
                                let grow = &g[(qi * heads + h) * group..(qi * heads + h + 1) * group];
                                for (j, &gv) in grow.iter().enumerate() {
                                    let kh = &kd[(qi * group + j) * dm + h * hd
                                        ..(qi * group + j) * dm + (h + 1) * hd];
                                    let dst = &mut gq[qi * dm + h * hd..qi * dm + (h + 1) * hd];
                                    for (a, &b) in dst.iter_mut().zip(kh) {
                                        *a += gv * scale * b;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.needs(*k) {
                    Self::accum(grads, *k, numel_of(*k), |gk| {
                        for qi in 0..m {
                            for h in 0..heads {
                                let grow = &g[(qi * heads + h) * group..(qi * heads + h + 1) * group];
                                let qh = &qd[qi * dm + h * hd..qi * dm + (h + 1) * hd];
                                for (j, &gv) in grow.iter().enumerate() {
                                    let dst = &mut gk[(qi * group + j) * dm + h * hd
                                        ..(qi * group + j) * dm + (h + 1) * hd];
                                    for (a, &b) in dst.iter_mut().zip(qh) {
                                        *a += gv * scale * b;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::GroupedWeightedSum { wts, v, heads } => {
                let heads = *heads;
                let group = self.nodes[wts.0].value.shape()[1];
                let dm = self.nodes[v.0].value.shape()[1];
                let m = self.nodes[wts.0].value.shape()[0] / heads;
                let hd = dm / heads;
                let wd = self.nodes[wts.0].value.data();
                let vd = self.nodes[v.0].value.data();
                if self.needs(*wts) {
                    Self::accum(grads, *wts, numel_of(*wts), |gw| {
                        for qi in 0..m {
                            for h in 0..heads {
                                let grow = &g[qi * dm + h * hd..qi * dm + (h + 1) * hd];
                                for j in 0..group {
                                    let vh = &vd[(qi * group + j) * dm + h * hd
                                        ..(qi * group + j) * dm + (h + 1) * hd];
                                    let mut acc = T::ZERO;
                                    for (&a, &b) in grow.iter().zip(vh) {
                                        acc += a * b;
                                    }
                                    gw[(qi * heads + h) * group + j] += acc;
                                }
                            }
                        }
                    });
                }
                if self.needs(*v) {
                    Self::accum(grads, *v, numel_of(*v), |gv| {
                        for qi in 0..m {
                            for h in 0..heads {
                                let grow = &g[qi * dm + h * hd..qi * dm + (h + 1) * hd];
                                let wrow =
                                    &wd[(qi * heads + h) * group..(qi * heads + h + 1) * group];
                                for (j, &wv) in wrow.iter().enumerate() {
                                    let dst = &mut gv[(qi * group + j) * dm + h * hd
                                        ..(qi * group + j) * dm + (h + 1) * hd];
                                    for (a, &b) in dst.iter_mut().zip(grow) {
                                        *a += wv * b;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::WindowLogits {
                q,
                k,
                wsize,
                heads,
                scale,
            } => {
                let (wsize, heads, scale) = (*wsize, *heads, *scale);
                let (n, dm) = {
                    let s = self.nodes[q.0].value.shape();
                    (s[0], s[1])
                };
                let hd = dm / heads;
                let qd = self.nodes[q.0].value.data();
                let kd = self.nodes[k.0].value.data();
                if self.needs(*q) {
                    Self::accum(grads, *q, numel_of(*q), |gq| {
                        crate::exec::for_each_chunk_mut(gq, dm, n * dm * wsize, |i, row| {
                            let win = i / wsize;
                            for h in 0..heads {
                                let grow = &g[(i * heads + h) * wsize
                                    ..(i * heads + h + 1) * wsize];
                                for (j, &gv) in grow.iter().enumerate() {
                                    let kh = &kd[(win * wsize + j) * dm + h * hd
                                        ..(win * wsize + j) * dm + (h + 1) * hd];
                                    for (a, &b) in
                                        row[h * hd..(h + 1) * hd].iter_mut().zip(kh)
                                    {
                                        *a += gv * scale * b;
                                    }
                                }
                            }
                        });
                    });
                }
                if self.needs(*k) {
                    Self::accum(grads, *k, numel_of(*k), |gk| {
                        crate::exec::for_each_chunk_mut(
                            gk,
                            wsize * dm,
                            n * dm * wsize,
                            |win, chunk| {
                                for ii in 0..wsize {
                                    let i = win * wsize + ii;
                                    let qrow = &qd[i * dm..(i + 1) * dm];
                                    for h in 0..heads {
                                        let grow = &g[(i * heads + h) * wsize
                                            ..(i * heads + h + 1) * wsize];
                                        let qh = &qrow[h * hd..(h + 1) * hd];
                                        for (j, &gv) in grow.iter().enumerate() {
                                            let dst = &mut chunk
                                                [j * dm + h * hd..j * dm + (h + 1) * hd];
                                            for (a, &b) in dst.iter_mut().zip(qh) {
                                                *a += gv * scale * b;
                                            }
                                        }
                                    }
                                }
                            },
                        );
                    });
                }
            }
            Op::WindowWeightedSum {
                wts,
                v,
                wsize,
                heads,
            } => {
                let (wsize, heads) = (*wsize, *heads);
                let (n, dm) = {
                    let s = self.nodes[v.0].value.shape();
                    (s[0], s[1])
                };
                let hd = dm / heads;
                let wd = self.nodes[wts.0].value.data();
                let vd = self.nodes[v.0].value.data();
                if self.needs(*wts) {
                    Self::accum(grads, *wts, numel_of(*wts), |gw| {
                        crate::exec::for_each_chunk_mut(
                            gw,
                            heads * wsize,
                            n * dm * wsize,
                            |i, rows| {
                                let win = i / wsize;
                                for h in 0..heads {
                                    let grow = &g[i * dm + h * hd..i * dm + (h + 1) * hd];
                                    for j in 0..wsize {
                                        let vh = &vd[(win * wsize + j) * dm + h * hd
                                            ..(win * wsize + j) * dm + (h + 1) * hd];
                                        let mut acc = T::ZERO;
                                        for (&a, &b) in grow.iter().zip(vh) {
                                            acc += a * b;
                                        }
                                        rows[h * wsize + j] += acc;
                                    }
                                }
                            },
                        );
                    });
                }
                if self.needs(*v) {
                    Self::accum(grads, *v, numel_of(*v), |gv| {
                        crate::exec::for_each_chunk_mut(
                            gv,
                            wsize * dm,
                            n * dm * wsize,
                            |win, chunk| {
                                for ii in 0..wsize {
                                    let i = win * wsize + ii;
                                    for h in 0..heads {
                                        let grow =
                                            &g[i * dm + h * hd..i * dm + (h + 1) * hd];
                                        let wrow = &wd[(i * heads + h) * wsize
                                            ..(i * heads + h + 1) * wsize];
                                        for (j, &wv) in wrow.iter().enumerate() {
                                            let dst = &mut chunk
                                                [j * dm + h * hd..j * dm + (h + 1) * hd];
                                            for (a, &b) in dst.iter_mut().zip(grow) {
                                                *a += wv * b;
                                            }
                                        }
                                    }
                                }
                            },
                        );
                    });
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.needs(*logits) {
                    let ld = self.nodes[logits.0].value.data();
                    let n = T::from_usize(ld.len().max(1));
                    let gv = g[0];
                    Self::accum(grads, *logits, numel_of(*logits), |gl| {
                        for ((a, &x), &t) in gl.iter_mut().zip(ld).zip(targets) {
                            *a += gv * (sigmoid_scalar(x) - t) / n;
                        }
                    });
                }
            }
            Op::PlaneExchange { t } => {
                if self.needs(*t) {
                    let s = self.nodes[t.0].value.shape();
                    let (d, r) = (s[1], s[2]);
                    Self::accum(grads, *t, numel_of(*t), |gt| {
                        plane_exchange_backward(g, gt, d, r);
                    });
                }
            }
        }
    }
}

#[inline]
fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// In-place rotary rotation of channel pairs. `angles` is (rows, 3*group/2)
/// row-major; `invert` applies the transpose (inverse) rotation.
#[allow(clippy::needless_range_loop)]
fn apply_rope<T: Scalar>(
    data: &mut [T],
    angles: &[T],
    rows: usize,
    d: usize,
    group: usize,
    invert: bool,
) {
    let pairs_per_axis = group / 2;
    let per_row = 3 * pairs_per_axis;
    for r in 0..rows {
        let row = &mut data[r * d..(r + 1) * d];
        let arow = &angles[r * per_row..(r + 1) * per_row];
        for axis in 0..3 {
            let base = axis * group;
            for j in 0..pairs_per_axis {
                let ang = arow[axis * pairs_per_axis + j];
                let (s, c) = (ang.sin(), ang.cos());
                let s = if invert { -s } else { s };
                let (x0, x1) = (row[base + 2 * j], row[base + 2 * j + 1]);
                row[base + 2 * j] = x0 * c - x1 * s;
                row[base + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

const PLANE_XY: usize = 0;
const PLANE_XZ: usize = 1;
const PLANE_YZ: usize = 2;

/// (target plane, source plane, reduce over rows?, place on rows?)
/// Reducing over rows yields a profile indexed by the source's columns;
/// reducing over columns yields one indexed by its rows. "Place on rows"
/// broadcasts the profile along the target's column axis.
const EXCHANGE_TABLE: [(usize, usize, bool, bool); 6] = [
    (PLANE_XY, PLANE_XZ, false, true),
    (PLANE_XY, PLANE_YZ, false, false),
    (PLANE_XZ, PLANE_XY, false, true),
    (PLANE_XZ, PLANE_YZ, true, false),
    (PLANE_YZ, PLANE_XY, true, true),
    (PLANE_YZ, PLANE_XZ, true, false),
];

fn plane_exchange_forward<T: Scalar>(t: &[T], out: &mut [T], d: usize, r: usize) {
    let rr = r * r;
    let inv_r = T::ONE / T::from_usize(r);
    // Own-plane passthrough occupies the first d channels of each target.
    for p in 0..3 {
        out[p * 3 * d * rr..p * 3 * d * rr + d * rr]
            .copy_from_slice(&t[p * d * rr..(p + 1) * d * rr]);
    }
    for (slot, &(target, src, reduce_rows, on_rows)) in EXCHANGE_TABLE.iter().enumerate() {
        let block = 1 + slot % 2; // channel block 1 or 2 within the target
        for c in 0..d {
            let sp = &t[(src * d + c) * rr..(src * d + c + 1) * rr];
            let mut profile = vec![T::ZERO; r];
            if reduce_rows {
                for i in 0..r {
                    for j in 0..r {
                        profile[j] += sp[i * r + j];
                    }
                }
            } else {
                for i in 0..r {
                    for j in 0..r {
                        profile[i] += sp[i * r + j];
                    }
                }
            }
            for v in profile.iter_mut() {
                *v *= inv_r;
            }
            let dst =
                &mut out[(target * 3 * d + block * d + c) * rr..(target * 3 * d + block * d + c + 1) * rr];
            for i in 0..r {
                for j in 0..r {
                    dst[i * r + j] = if on_rows { profile[i] } else { profile[j] };
                }
            }
        }
    }
}

fn plane_exchange_backward<T: Scalar>(g: &[T], gt: &mut [T], d: usize, r: usize) {
    let rr = r * r;
    let inv_r = T::ONE / T::from_usize(r);
    for p in 0..3 {
        for (a, &b) in gt[p * d * rr..(p + 1) * d * rr]
            .iter_mut()
            .zip(&g[p * 3 * d * rr..p * 3 * d * rr + d * rr])
        {
            *a += b;
        }
    }
    for (slot, &(target, src, reduce_rows, on_rows)) in EXCHANGE_TABLE.iter().enumerate() {
        let block = 1 + slot % 2;
        for c in 0..d {
            let gsl =
                &g[(target * 3 * d + block * d + c) * rr..(target * 3 * d + block * d + c + 1) * rr];
            let mut profile = vec![T::ZERO; r];
            for i in 0..r {
                for j in 0..r {
                    profile[if on_rows { i } else { j }] += gsl[i * r + j];
                }
            }
            for v in profile.iter_mut() {
                *v *= inv_r;
            }
            let dst = &mut gt[(src * d + c) * rr..(src * d + c + 1) * rr];
            if reduce_rows {
                for i in 0..r {
                    for j in 0..r {
                        dst[i * r + j] += profile[j];
                    }
                }
            } else {
                for i in 0..r {
                    for j in 0..r {
                        dst[i * r + j] += profile[i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(
            Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let a = g.constant(Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f64).collect()).unwrap());
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[4], vec![1., 2., 3., 4.]).unwrap(), true);
        let loss = g.sum_all(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of_var(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1., 2.]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of_var(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1., 2.]).unwrap(), true);
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_consumes_graph_and_inference_rejects() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap(), true);
        let y = g.sum_all(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn gather_scatter_adjoint() {
        // dot(gather(v, I), w) == dot(v, scatter_add(w, I))
        let mut rng = crate::Rng::new(99);
        let n = 23;
        let m = 41;
        let idx: Vec<usize> = (0..m).map(|_| rng.uniform_usize(n)).collect();
        let d = 5;
        let v: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..m * d).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let mut g = Graph::<f64>::new();
        let vv = g.constant(Tensor::from_vec(&[n, d], v.clone()).unwrap());
        let wv = g.constant(Tensor::from_vec(&[m, d], w.clone()).unwrap());
        let gathered = g.gather_rows(vv, &idx).unwrap();
        let scattered = g.scatter_add_rows(wv, &idx, n).unwrap();

        let lhs: f64 = g
            .value(gathered)
            .data()
            .iter()
            .zip(&w)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = g
            .value(scattered)
            .data()
            .iter()
            .zip(&v)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn gather_oob_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.gather_rows(x, &[0, 3]).unwrap_err();
        assert!(err.to_string().contains('3'), "{err}");
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = crate::Rng::new(4);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[16, 32], |_| rng.uniform(-2.0, 3.0)));
        let y = g.layer_norm(x).unwrap();
        for row in g.value(y).data().chunks(32) {
            let mean: f64 = row.iter().sum::<f64>() / 32.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::Rng::new(8);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[9, 7], |_| rng.uniform(-5.0, 5.0)));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_uniform_is_ln2() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[8]));
        let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2, 3], vec![5., 6., 7., 8., 9., 10.]).unwrap());
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 5]);
        let back = g.narrow(cat, 1, 2, 3).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
    }
}
