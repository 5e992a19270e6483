use rand::Rng;

use super::conv::{self, ConvGeom};
use super::linalg::{gemm, Mat, Scalar};
use super::norm;
use super::shape_ops::{inverse_axes, permute_data};
use super::{numel_of, validate_axes, RngState, Tensor};
use crate::error::{CtsError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics updated by training-mode batch norm.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Softmax { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Bmm { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    Sum { x: Var },
    /// Fused scalar op whose input gradient was computed during forward.
    Precomputed { x: Var, dx: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of a forward computation, replayed backwards for gradients.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

struct GradSink<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn add(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.numel());
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::from_parts(vec![0], Vec::new()))
    }

    // ------------------------------------------------------------------ ops

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(CtsError::config(format!(
                "conv2d expects 4-d input and weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        if xs[1] != ws[1] {
            return Err(CtsError::config(format!(
                "conv2d channel mismatch: input {:?} has {} channels, weight {:?} expects {}",
                xs, xs[1], ws, ws[1]
            )));
        }
        let k = ws[2];
        if ws[3] != k || k % 2 == 0 {
            return Err(CtsError::config(format!("conv2d needs an odd square kernel, got {:?}", ws)));
        }
        if bs != [ws[0]] {
            return Err(CtsError::config(format!(
                "conv2d bias {:?} does not match {} output channels",
                bs, ws[0]
            )));
        }
        if xs[2] + 2 * padding < k || xs[3] + 2 * padding < k {
            return Err(CtsError::config(format!(
                "conv2d kernel {} larger than padded input {:?}",
                k, xs
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            pad: padding,
            h_out: xs[2] + 2 * padding - k + 1,
            w_out: xs[3] + 2 * padding - k + 1,
        };
        let out = conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let shape = vec![geom.n, geom.c_out, geom.h_out, geom.w_out];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(CtsError::config(format!("max_pool2 expects NCHW, got {:?}", s)));
        }
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(CtsError::config(format!(
                "max_pool2 needs even spatial extents, got {}x{}",
                s[2], s[3]
            )));
        }
        let (out, argmax) = conv::max_pool2_forward(&s, self.value(x).data());
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Batch norm over NCHW input. In training mode batch statistics are
    /// used and `stats` is updated with momentum; in eval mode `stats` is
    /// read only.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_, T>,
        training: bool,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(CtsError::config(format!("batch_norm2d expects NCHW, got {:?}", s)));
        }
        let c = s[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(CtsError::config(format!(
                    "batch_norm2d {} shape {:?} does not match {} channels",
                    name,
                    self.shape(v),
                    c
                )));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(CtsError::config("batch_norm2d running stats have wrong length"));
        }
        let count = s[0] * s[2] * s[3];
        if training && count < 2 {
            return Err(CtsError::config(format!(
                "batch_norm2d in training mode needs N*H*W >= 2, got {:?}",
                s
            )));
        }
        let mut batch = Vec::new();
        let fixed = (!training).then_some((&*stats.mean, &*stats.var));
        let out = norm::batch_norm_forward(
            &s,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            fixed,
            &mut batch,
        );
        if training {
            let mom = T::from_f64(norm::BN_MOMENTUM);
            let unbias = T::from_f64((count) as f64) / T::from_f64((count - 1) as f64);
            for (ch, (mean, var)) in batch.into_iter().enumerate() {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean;
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var * unbias;
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
            batch_stats: training,
        };
        Ok(self.push(Tensor::from_parts(s, out.y), op, &[x, gamma, beta]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| CtsError::config("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(CtsError::config(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last extent {}",
                self.shape(gamma),
                self.shape(beta),
                d
            )));
        }
        let out = norm::layer_norm_forward(
            d,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let op = Op::LayerNorm { x, gamma, beta, xhat: out.xhat, inv_std: out.inv_std };
        Ok(self.push(Tensor::from_parts(s, out.y), op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| CtsError::config("softmax on a scalar"))?;
        let y = norm::softmax_rows(d, self.value(x).data());
        Ok(self.push(Tensor::from_parts(s, y), Op::Softmax { x }, &[x]))
    }

    /// Inverted dropout: identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CtsError::config(format!("dropout rate {} outside [0, 1)", p)));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let y: Vec<T> = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::Dropout { x, mask }, &[x]))
    }

    /// Per-token affine map `x W + b` with `W: [d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().ok_or_else(|| CtsError::config("linear on a scalar"))?;
        if ws.len() != 2 || ws[0] != d_in {
            return Err(CtsError::config(format!(
                "linear weight {:?} does not accept input {:?} (last extent {})",
                ws, xs, d_in
            )));
        }
        let d_out = ws[1];
        if self.shape(b) != [d_out] {
            return Err(CtsError::config(format!(
                "linear bias {:?} does not match output width {}",
                self.shape(b),
                d_out
            )));
        }
        let rows = numel_of(&xs) / d_in;
        let mut out = Vec::with_capacity(rows * d_out);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            d_in,
            d_out,
            Mat::n(self.value(x).data()),
            Mat::n(self.value(w).data()),
            T::one(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        validate_axes(self.shape(x), axes)?;
        let y = self.value(x).permuted(axes)?;
        Ok(self.push(y, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// `[N, c, H, W]` to `[N, (H/s)(W/s), s*s*c]`.
    ///
    /// Tokens enumerate the `s x s` patches in row-major grid order; inside a
    /// token the channel vectors of the patch pixels are concatenated in
    /// row-major pixel order.
    pub fn patch_flatten(&mut self, x: Var, side: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(CtsError::config(format!("patch_flatten expects NCHW, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if side == 0 || h % side != 0 || w % side != 0 {
            return Err(CtsError::config(format!(
                "patch side {} does not divide spatial extent {}x{}",
                side, h, w
            )));
        }
        let (gh, gw) = (h / side, w / side);
        let t = self.reshape(x, &[n, c, gh, side, gw, side])?;
        let t = self.permute(t, &[0, 2, 4, 3, 5, 1])?;
        self.reshape(t, &[n, gh * gw, side * side * c])
    }

    /// Exact inverse of [`Tape::patch_flatten`].
    pub fn patch_unflatten(
        &mut self,
        x: Var,
        channels: usize,
        height: usize,
        width: usize,
        side: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if side == 0 || height % side != 0 || width % side != 0 {
            return Err(CtsError::config(format!(
                "patch side {} does not divide spatial extent {}x{}",
                side, height, width
            )));
        }
        let (gh, gw) = (height / side, width / side);
        if s.len() != 3 || s[1] != gh * gw || s[2] != side * side * channels {
            return Err(CtsError::config(format!(
                "tokens {:?} cannot be unflattened to {}x{}x{} with patch side {}",
                s, channels, height, width, side
            )));
        }
        let t = self.reshape(x, &[s[0], gh, gw, side, side, channels])?;
        let t = self.permute(t, &[0, 5, 1, 3, 2, 4])?;
        self.reshape(t, &[s[0], channels, height, width])
    }

    /// `a + b`, where `b`'s shape equals a trailing suffix of `a`'s shape
    /// (broadcast over the leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(CtsError::config(format!("cannot add {:?} to {:?}", sb, sa)));
        }
        let bd = self.value(b).data();
        let inner = bd.len().max(1);
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(inner) {
            chunk.iter_mut().zip(bd).for_each(|(o, &v)| *o = *o + v);
        }
        Ok(self.push(Tensor::from_parts(sa, out), Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CtsError::config(format!(
                "elementwise product needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor }, &[x])
    }

    /// Batched matrix product over identical leading axes:
    /// `[.., m, k] x [.., k, n]`, or `[.., m, k] x [.., n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || CtsError::config(format!("bmm shape mismatch: {:?} x {:?} (trans_b={})", sa, sb, trans_b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return Err(bad());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        super::parallel::for_each_chunk(&mut out, m * n, |i, c| {
            let am = &ad[i * m * k..(i + 1) * m * k];
            let bm = &bd[i * k * n..(i + 1) * k * n];
            let bmat = if trans_b { Mat::t(bm) } else { Mat::n(bm) };
            gemm(m, k, n, Mat::n(am), bmat, T::zero(), c);
        });
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Bmm { a, b, trans_b, m, k, n },
            &[a, b],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `x`.
    pub(crate) fn push_precomputed(&mut self, x: Var, value: T, dx: Vec<T>) -> Var {
        debug_assert_eq!(dx.len(), self.value(x).numel());
        self.push(Tensor::scalar(value), Op::Precomputed { x, dx }, &[x])
    }

    // ------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`, accumulating into the `grad` of
    /// every leaf that requires gradients. Calling it twice without
    /// resetting doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(CtsError::usage("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(CtsError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let mut sink = GradSink { nodes: &self.nodes, grads: &mut grads };
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            backprop(&node.op, &node.value, g, &mut sink);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Clears stored gradients of all leaves.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }
}

fn backprop<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: Vec<T>, sink: &mut GradSink<'_, T>) {
    let nodes = sink.nodes;
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let want = (sink.wants(*x), sink.wants(*w), sink.wants(*b));
            let grads = conv::conv2d_backward(geom, val(*x).data(), val(*w).data(), &g, want);
            if let Some(dx) = grads.dx {
                sink.add(*x, dx);
            }
            if let Some(dw) = grads.dw {
                sink.add(*w, dw);
            }
            if let Some(db) = grads.db {
                sink.add(*b, db);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = vec![T::zero(); val(*x).numel()];
            for (&src, &gv) in argmax.iter().zip(&g) {
                dx[src] = dx[src] + gv;
            }
            sink.add(*x, dx);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let r = norm::batch_norm_backward(
                out.shape(),
                &g,
                val(*gamma).data(),
                xhat,
                inv_std,
                *batch_stats,
            );
            sink.add(*x, r.dx);
            sink.add(*gamma, r.dgamma);
            sink.add(*beta, r.dbeta);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = *out.shape().last().unwrap();
            let r = norm::layer_norm_backward(d, &g, val(*gamma).data(), xhat, inv_std);
            sink.add(*x, r.dx);
            sink.add(*gamma, r.dgamma);
            sink.add(*beta, r.dbeta);
        }
        Op::Relu { x } => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(&g)
                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            sink.add(*x, dx);
        }
        Op::Softmax { x } => {
            let d = *out.shape().last().unwrap();
            sink.add(*x, norm::softmax_rows_backward(d, out.data(), &g));
        }
        Op::Dropout { x, mask } => {
            sink.add(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
        }
        Op::Linear { x, w, b } => {
            let ws = val(*w).shape();
            let (d_in, d_out) = (ws[0], ws[1]);
            let rows = g.len() / d_out;
            if sink.wants(*x) {
                let mut dx = vec![T::zero(); rows * d_in];
                gemm(rows, d_out, d_in, Mat::n(&g), Mat::t(val(*w).data()), T::zero(), &mut dx);
                sink.add(*x, dx);
            }
            if sink.wants(*w) {
                let mut dw = vec![T::zero(); d_in * d_out];
                gemm(d_in, rows, d_out, Mat::t(val(*x).data()), Mat::n(&g), T::zero(), &mut dw);
                sink.add(*w, dw);
            }
            if sink.wants(*b) {
                let mut db = vec![T::zero(); d_out];
                for row in g.chunks(d_out) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                sink.add(*b, db);
            }
        }
        Op::Reshape { x } => sink.add(*x, g),
        Op::Permute { x, axes } => {
            let (_, dx) = permute_data(out.shape(), &g, &inverse_axes(axes));
            sink.add(*x, dx);
        }
        Op::Add { a, b } => {
            if sink.wants(*b) {
                let inner = val(*b).numel().max(1);
                let mut db = vec![T::zero(); inner];
                for chunk in g.chunks(inner) {
                    db.iter_mut().zip(chunk).for_each(|(o, &v)| *o = *o + v);
                }
                sink.add(*b, db);
            }
            sink.add(*a, g);
        }
        Op::Mul { a, b } => {
            if sink.wants(*a) {
                let da = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                sink.add(*a, da);
            }
            if sink.wants(*b) {
                let db = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                sink.add(*b, db);
            }
        }
        Op::Scale { x, factor } => {
            sink.add(*x, g.into_iter().map(|v| v * *factor).collect());
        }
        Op::Bmm { a, b, trans_b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let batch = g.len() / (m * n);
            if sink.wants(*a) {
                let bd = val(*b).data();
                let mut da = vec![T::zero(); batch * m * k];
                super::parallel::for_each_chunk(&mut da, m * k, |i, dst| {
                    let gm = &g[i * m * n..(i + 1) * m * n];
                    let bm = &bd[i * k * n..(i + 1) * k * n];
                    // dA = dC B^T, with B stored [k,n] or [n,k]
                    let bmat = if *trans_b { Mat::n(bm) } else { Mat::t(bm) };
                    gemm(m, n, k, Mat::n(gm), bmat, T::zero(), dst);
                });
                sink.add(*a, da);
            }
            if sink.wants(*b) {
                let ad = val(*a).data();
                let mut db = vec![T::zero(); batch * k * n];
                super::parallel::for_each_chunk(&mut db, k * n, |i, dst| {
                    let gm = &g[i * m * n..(i + 1) * m * n];
                    let am = &ad[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // dB [n,k] = dC^T A
                        gemm(n, m, k, Mat::t(gm), Mat::n(am), T::zero(), dst);
                    } else {
                        // dB [k,n] = A^T dC
                        gemm(k, m, n, Mat::t(am), Mat::n(gm), T::zero(), dst);
                    }
                });
                sink.add(*b, db);
            }
        }
        Op::Sum { x } => {
            let n = val(*x).numel();
            sink.add(*x, vec![g[0]; n]);
        }
        Op::Precomputed { x, dx } => {
            let s = g[0];
            sink.add(*x, dx.iter().map(|&v| v * s).collect());
        }
    }
}
