//! Reverse-mode differentiation over an append-only node arena.
//!
//! A [`Graph`] records every op as it runs; node ids are issued in
//! topological order, so the backward pass is a single reverse sweep.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, LerpTable};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{dims4, numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

type CustomBackward<F> = Box<dyn Fn(&Tensor<F>, &[F]) -> Vec<F>>;

enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GlobalPool {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        input: Var,
        factor: F,
    },
    Offset(Var),
    SumTo(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Nearest {
        input: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    Bilinear {
        input: Var,
        ty: LerpTable<F>,
        tx: LerpTable<F>,
    },
    Custom {
        input: Var,
        backward: CustomBackward<F>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalPool { .. } => "global_pool",
            Op::Linear { .. } => "linear",
            Op::Act { kind: Activation::Relu, .. } => "relu",
            Op::Act { kind: Activation::Sigmoid, .. } => "sigmoid",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Binary { .. } => "elementwise",
            Op::Scale { .. } => "scale",
            Op::Offset(_) => "offset",
            Op::SumTo(_) => "sum",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::Nearest { .. } => "upsample_nearest",
            Op::Bilinear { .. } => "resize_bilinear",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracks: bool,
    param: Option<usize>,
}

/// Computation graph for one forward/backward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracks: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            tracks,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls with the same name share one node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let idx = store
            .position(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        let v = self.variable(store.entry(idx).tensor.detached())?;
        self.nodes[v.0].param = Some(idx);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if groups == 0 || stride == 0 {
            return Err(Error::config("conv2d stride and groups must be positive"));
        }
        if !xs[1].is_multiple_of(groups) || !ws[0].is_multiple_of(groups) {
            return Err(Error::config(format!(
                "groups={groups} must divide Cin={} and Cout={}",
                xs[1], ws[0]
            )));
        }
        if ws[1] != xs[1] / groups {
            return Err(Error::dim(format!(
                "weight {ws:?} incompatible with input {xs:?} at groups={groups}"
            )));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {:?}",
                ws[2], ws[3], xs
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!(
                    "bias {:?} does not match Cout={}",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            groups,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let tracks =
            self.tracks(input) || self.tracks(weight) || bias.is_some_and(|b| self.tracks(b));
        let value = Tensor::new(&[geom.n, geom.cout, ho, wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            tracks,
        )
    }

    pub fn global_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_pool expects rank 4, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for plane in x.chunks(hw) {
            match mode {
                PoolMode::Avg => {
                    out.push(plane.iter().copied().sum::<F>() / F::from_usize(hw).unwrap())
                }
                PoolMode::Max => {
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(plane[best]);
                }
            }
        }
        let tracks = self.tracks(input);
        self.push(
            Tensor::new(&[n, c, 1, 1], out)?,
            Op::GlobalPool {
                input,
                mode,
                argmax,
            },
            tracks,
        )
    }

    /// `input[N, Din] * weight[Dout, Din]^T + bias[Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::dim(format!(
                "linear shapes incompatible: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::zero(); n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(bias).data());
        }
        F::gemm(
            n,
            din,
            dout,
            F::one(),
            self.value(input).data(),
            (din as isize, 1),
            self.value(weight).data(),
            (1, din as isize),
            F::one(),
            &mut out,
            (dout as isize, 1),
        );
        let tracks = self.tracks(input) || self.tracks(weight) || self.tracks(bias);
        self.push(
            Tensor::new(&[n, dout], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            tracks,
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let value = match kind {
            Activation::Relu => x.map(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::Sigmoid => x.map(sigmoid),
        };
        let tracks = self.tracks(input);
        self.push(value, Op::Act { input, kind }, tracks)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        let tracks = inputs.iter().any(|&v| self.tracks(v));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            tracks,
        )
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow(axis, start, len)?;
        let tracks = self.tracks(input);
        self.push(value, Op::Narrow { input, axis, start }, tracks)
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, input: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(Error::dim(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {s:?}"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(input, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let tracks = self.tracks(input);
        self.push(value, Op::Reshape(input), tracks)
    }

    /// Elementwise op; `b` may broadcast over size-1 extents of `a`.
    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (dims4(&sa), dims4(&sb));
        if sb.len() > sa.len() || (0..4).any(|d| db[d] != da[d] && db[d] != 1) {
            return Err(Error::dim(format!(
                "cannot broadcast {sb:?} onto {sa:?}"
            )));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); xa.len()];
        match kind {
            Binary::Add => broadcast_apply(da, db, xa, xb, &mut out, |x, y| x + y),
            Binary::Sub => broadcast_apply(da, db, xa, xb, &mut out, |x, y| x - y),
            Binary::Mul => broadcast_apply(da, db, xa, xb, &mut out, |x, y| x * y),
            Binary::Div => broadcast_apply(da, db, xa, xb, &mut out, |x, y| x / y),
        }
        let tracks = self.tracks(a) || self.tracks(b);
        self.push(Tensor::new(&sa, out)?, Op::Binary { a, b, kind }, tracks)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Result<Var> {
        let value = self.value(input).scale(factor);
        let tracks = self.tracks(input);
        self.push(value, Op::Scale { input, factor }, tracks)
    }

    pub fn add_scalar(&mut self, input: Var, offset: F) -> Result<Var> {
        let value = self.value(input).map(|v| v + offset);
        let tracks = self.tracks(input);
        self.push(value, Op::Offset(input), tracks)
    }

    /// Sums over the extents where `shape` is 1 (the reverse of broadcasting).
    pub fn sum_to(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (ds, dt) = (dims4(&s), dims4(shape));
        if shape.len() > s.len() || (0..4).any(|d| dt[d] != ds[d] && dt[d] != 1) {
            return Err(Error::dim(format!("cannot reduce {s:?} to {shape:?}")));
        }
        let mut out = vec![F::zero(); numel(shape)];
        let x = self.value(input).data();
        kernels::for_each_broadcast_block(ds, dt, |i0, j0, len, contiguous| {
            let xs = &x[i0..i0 + len];
            if contiguous {
                out[j0..j0 + len].iter_mut().zip(xs).for_each(|(o, &v)| *o += v);
            } else {
                out[j0] += xs.iter().copied().sum::<F>();
            }
        });
        let tracks = self.tracks(input);
        self.push(Tensor::new(shape, out)?, Op::SumTo(input), tracks)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.sum_to(input, &[1])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = F::from_usize(self.value(input).numel()).unwrap();
        let s = self.sum(input)?;
        self.scale(s, F::one() / n)
    }

    fn channel_planes(&self, input: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::dim(format!("expected rank 4, got {s:?}")));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Log-softmax across the channel axis of an `N x C x H x W` tensor.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let (n, c, hw) = self.channel_planes(input)?;
        let x = self.value(input).data();
        let mut out = vec![F::zero(); x.len()];
        for b in 0..n {
            for p in 0..hw {
                let at = |k: usize| (b * c + k) * hw + p;
                let m = (0..c).map(|k| x[at(k)]).fold(F::neg_infinity(), F::max);
                let lse = m + (0..c).map(|k| (x[at(k)] - m).exp()).sum::<F>().ln();
                for k in 0..c {
                    out[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let tracks = self.tracks(input);
        self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(input), tracks)
    }

    /// Softmax across the channel axis of an `N x C x H x W` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (n, c, hw) = self.channel_planes(input)?;
        let x = self.value(input).data();
        let mut out = vec![F::zero(); x.len()];
        for b in 0..n {
            for p in 0..hw {
                let at = |k: usize| (b * c + k) * hw + p;
                let m = (0..c).map(|k| x[at(k)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for k in 0..c {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    out[at(k)] /= z;
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let tracks = self.tracks(input);
        self.push(Tensor::new(&shape, out)?, Op::Softmax(input), tracks)
    }

    /// Nearest-neighbour resize of the spatial extents.
    pub fn upsample_nearest(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("upsample_nearest on {s:?}")));
        }
        let rows = kernels::nearest_table(s[2], out_h);
        let cols = kernels::nearest_table(s[3], out_w);
        let x = self.value(input).data();
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(s[0] * s[1] * out_h * out_w);
        for plane in x.chunks(h * w) {
            for &r in &rows {
                out.extend(cols.iter().map(|&c| plane[r * w + c]));
            }
        }
        let tracks = self.tracks(input);
        self.push(
            Tensor::new(&[s[0], s[1], out_h, out_w], out)?,
            Op::Nearest { input, rows, cols },
            tracks,
        )
    }

    /// Half-pixel bilinear resize of the spatial extents.
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("resize_bilinear on {s:?}")));
        }
        let ty = kernels::lerp_table(s[2], out_h);
        let tx = kernels::lerp_table(s[3], out_w);
        let out = kernels::bilinear_forward(
            self.value(input).data(),
            s[0] * s[1],
            (s[2], s[3]),
            (out_h, out_w),
            &ty,
            &tx,
        );
        let tracks = self.tracks(input);
        self.push(
            Tensor::new(&[s[0], s[1], out_h, out_w], out)?,
            Op::Bilinear { input, ty, tx },
            tracks,
        )
    }

    /// Unary op with caller-supplied forward value and vector-Jacobian product.
    ///
    /// `backward(input_value, upstream)` returns the gradient w.r.t. the input.
    pub fn custom(
        &mut self,
        input: Var,
        forward: impl FnOnce(&Tensor<F>) -> Tensor<F>,
        backward: impl Fn(&Tensor<F>, &[F]) -> Vec<F> + 'static,
    ) -> Result<Var> {
        let value = forward(self.value(input));
        let tracks = self.tracks(input);
        self.push(
            value,
            Op::Custom {
                input,
                backward: Box::new(backward),
            },
            tracks,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.tracks {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.tracks {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(p), Some(g)) = (node.param, grads.grads[i].as_deref()) {
                store.entry_mut(p).tensor.accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Vec<F>| {
            if !self.nodes[v.0].tracks {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
                None => grads[v.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = (
                    self.tracks(*input),
                    self.tracks(*weight),
                    bias.is_some_and(|b| self.tracks(b)),
                );
                let r = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    want,
                );
                if let Some(gx) = r.input {
                    acc(*input, gx);
                }
                if let Some(gw) = r.weight {
                    acc(*weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, r.bias) {
                    acc(*b, gb);
                }
            }
            Op::GlobalPool {
                input,
                mode,
                argmax,
            } => {
                let s = self.shape(*input);
                let hw = s[2] * s[3];
                let mut gx = vec![F::zero(); self.value(*input).numel()];
                match mode {
                    PoolMode::Avg => {
                        let inv = F::one() / F::from_usize(hw).unwrap();
                        for (plane, &gp) in gx.chunks_mut(hw).zip(g) {
                            plane.iter_mut().for_each(|v| *v = gp * inv);
                        }
                    }
                    PoolMode::Max => {
                        for (p, (&gp, &am)) in g.iter().zip(argmax).enumerate() {
                            gx[p * hw + am] = gp;
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = self.shape(*weight);
                let (dout, din) = (ws[0], ws[1]);
                let n = self.shape(*input)[0];
                if self.tracks(*input) {
                    let mut gx = vec![F::zero(); n * din];
                    F::gemm(
                        n,
                        dout,
                        din,
                        F::one(),
                        g,
                        (dout as isize, 1),
                        self.value(*weight).data(),
                        (din as isize, 1),
                        F::zero(),
                        &mut gx,
                        (din as isize, 1),
                    );
                    acc(*input, gx);
                }
                if self.tracks(*weight) {
                    let mut gw = vec![F::zero(); dout * din];
                    F::gemm(
                        dout,
                        n,
                        din,
                        F::one(),
                        g,
                        (1, dout as isize),
                        self.value(*input).data(),
                        (din as isize, 1),
                        F::zero(),
                        &mut gw,
                        (din as isize, 1),
                    );
                    acc(*weight, gw);
                }
                if self.tracks(*bias) {
                    let mut gb = vec![F::zero(); dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    acc(*bias, gb);
                }
            }
            Op::Act { input, kind } => {
                let gx = match kind {
                    Activation::Relu => self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gy)| if x > F::zero() { gy } else { F::zero() })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gy)| gy * y * (F::one() - y))
                        .collect(),
                };
                acc(*input, gx);
            }
            Op::Concat { inputs, axis } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.tracks(v) {
                        acc(v, gt.narrow(*axis, start, len)?.into_data());
                    }
                    start += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let (extent, len) = (s[*axis], node.value.shape()[*axis]);
                let mut gx = vec![F::zero(); self.value(*input).numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*input, gx);
            }
            Op::Reshape(input) => acc(*input, g.to_vec()),
            Op::Binary { a, b, kind } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (dims4(sa), dims4(sb));
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.tracks(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => {
                            let mut ga = vec![F::zero(); xa.len()];
                            broadcast_apply(da, db, g, xb, &mut ga, |u, y| u * y);
                            ga
                        }
                        Binary::Div => {
                            let mut ga = vec![F::zero(); xa.len()];
                            broadcast_apply(da, db, g, xb, &mut ga, |u, y| u / y);
                            ga
                        }
                    };
                    acc(*a, ga);
                }
                if self.tracks(*b) {
                    let mut gb = vec![F::zero(); xb.len()];
                    match kind {
                        Binary::Add => broadcast_reduce(da, db, g, xa, xb, &mut gb, |u, _, _| u),
                        Binary::Sub => broadcast_reduce(da, db, g, xa, xb, &mut gb, |u, _, _| -u),
                        Binary::Mul => broadcast_reduce(da, db, g, xa, xb, &mut gb, |u, x, _| u * x),
                        Binary::Div => {
                            broadcast_reduce(da, db, g, xa, xb, &mut gb, |u, x, y| -u * x / (y * y))
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale { input, factor } => acc(*input, g.iter().map(|&v| v * *factor).collect()),
            Op::Offset(input) => acc(*input, g.to_vec()),
            Op::SumTo(input) => {
                let ds = dims4(self.shape(*input));
                let dt = dims4(node.value.shape());
                let mut gx = vec![F::zero(); self.value(*input).numel()];
                kernels::for_each_broadcast_block(ds, dt, |i0, j0, len, contiguous| {
                    let dst = &mut gx[i0..i0 + len];
                    if contiguous {
                        dst.copy_from_slice(&g[j0..j0 + len]);
                    } else {
                        dst.fill(g[j0]);
                    }
                });
                acc(*input, gx);
            }
            Op::LogSoftmax(input) => {
                let (n, c, hw) = self.channel_planes(*input)?;
                let y = node.value.data();
                let mut gx = vec![F::zero(); y.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let at = |k: usize| (b * c + k) * hw + p;
                        let gsum: F = (0..c).map(|k| g[at(k)]).sum();
                        for k in 0..c {
                            gx[at(k)] = g[at(k)] - y[at(k)].exp() * gsum;
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::Softmax(input) => {
                let (n, c, hw) = self.channel_planes(*input)?;
                let y = node.value.data();
                let mut gx = vec![F::zero(); y.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let at = |k: usize| (b * c + k) * hw + p;
                        let dot: F = (0..c).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..c {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::Nearest { input, rows, cols } => {
                let s = self.shape(*input);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (rows.len(), cols.len());
                let mut gx = vec![F::zero(); self.value(*input).numel()];
                for (p, plane) in gx.chunks_mut(h * w).enumerate() {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    for (oy, &r) in rows.iter().enumerate() {
                        for (ox, &c) in cols.iter().enumerate() {
                            plane[r * w + c] += gp[oy * ow + ox];
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::Bilinear { input, ty, tx } => {
                let s = self.shape(*input);
                let os = node.value.shape();
                let gx = kernels::bilinear_backward(
                    g,
                    s[0] * s[1],
                    (s[2], s[3]),
                    (os[2], os[3]),
                    ty,
                    tx,
                );
                acc(*input, gx);
            }
            Op::Custom { input, backward } => {
                let gx = backward(self.value(*input), g);
                if gx.len() != self.value(*input).numel() {
                    return Err(Error::dim("custom backward returned wrong length"));
                }
                acc(*input, gx);
            }
        }
        Ok(())
    }
}

/// `out[i] = f(a[i], b[j])` with `b` broadcast from `db` onto `da`.
fn broadcast_apply<F: Scalar>(
    da: [usize; 4],
    db: [usize; 4],
    a: &[F],
    b: &[F],
    out: &mut [F],
    f: impl Fn(F, F) -> F,
) {
    kernels::for_each_broadcast_block(da, db, |i0, j0, len, contiguous| {
        let (o, x) = (&mut out[i0..i0 + len], &a[i0..i0 + len]);
        if contiguous {
            for ((o, &x), &y) in o.iter_mut().zip(x).zip(&b[j0..j0 + len]) {
                *o = f(x, y);
            }
        } else {
            let y = b[j0];
            for (o, &x) in o.iter_mut().zip(x) {
                *o = f(x, y);
            }
        }
    });
}

/// `out[j] += f(g[i], a[i], b[j])` summed over every `i` that broadcasts to `j`.
fn broadcast_reduce<F: Scalar>(
    da: [usize; 4],
    db: [usize; 4],
    g: &[F],
    a: &[F],
    b: &[F],
    out: &mut [F],
    f: impl Fn(F, F, F) -> F,
) {
    kernels::for_each_broadcast_block(da, db, |i0, j0, len, contiguous| {
        let (gs, xs) = (&g[i0..i0 + len], &a[i0..i0 + len]);
        if contiguous {
            for (((o, &u), &x), &y) in out[j0..j0 + len].iter_mut().zip(gs).zip(xs).zip(&b[j0..j0 + len]) {
                *o += f(u, x, y);
            }
        } else {
            let y = b[j0];
            out[j0] += gs.iter().zip(xs).map(|(&u, &x)| f(u, x, y)).sum::<F>();
        }
    });
}

pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}
