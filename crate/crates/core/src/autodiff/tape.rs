use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Input {
        watched: bool,
    },
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    AvgPool2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    Radial(Var),
    NegLog1mExp {
        x: Var,
        floor: F,
    },
    Column {
        x: Var,
        k: usize,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    Select {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of watched inputs, returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Grads<F> {
    inputs: HashMap<Var, Tensor<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.inputs.get(&v)
    }
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a reverse sweep visits each node after all of its consumers.
#[derive(Clone, Debug)]
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    frozen_grads: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return dim_err(op, a, b);
    }
    Ok(())
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<F: Real> Tape<F> {
    /// A tape that accumulates gradients into every reachable parameter,
    /// frozen ones included.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen_grads: true,
        }
    }

    /// A tape that skips gradient work for frozen parameters entirely.
    pub fn trainable_only() -> Self {
        Tape {
            frozen_grads: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    ///
    /// Two evaluations with equal patterns lie in the same linear region of
    /// every ReLU, which is what finite-difference checks need to know.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > F::zero()));
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input { watched: false }, false)
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn watch(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input { watched: true }, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let needs = p.trainable || self.frozen_grads;
        let v = self.push(p.value.clone(), Op::Param(id), needs);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    /// `y[i,j] = Σ_k w[j,k]·x[i,k] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return dim_err("linear", xs, ws);
        }
        if bs != [ws[0]] {
            return dim_err("linear bias", ws, bs);
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::zero(); n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            F::one(),
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![n, dout], out)?,
            Op::Linear { x, w, b },
            needs,
        ))
    }

    /// Cross-correlation of `x: [n,c,h,w]` with `k: [o,c,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return dim_err("conv2d", &xs, &ks);
        }
        let geo = ConvGeometry::new(&xs, &ks, stride, pad)?;
        let mut out = vec![F::zero(); geo.n * geo.o * geo.p()];
        let mut col = vec![
            F::zero();
            if geo.is_pointwise() {
                0
            } else {
                geo.ckk() * geo.p()
            }
        ];
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let in_len = geo.c * geo.h * geo.w;
        let out_len = geo.o * geo.p();
        for s in 0..geo.n {
            let xs_ = &xv[s * in_len..(s + 1) * in_len];
            let cols: &[F] = if geo.is_pointwise() {
                xs_
            } else {
                geo.im2col(xs_, &mut col);
                &col
            };
            gemm(
                geo.o,
                geo.ckk(),
                geo.p(),
                kv,
                false,
                cols,
                false,
                F::zero(),
                &mut out[s * out_len..(s + 1) * out_len],
            );
        }
        let needs = self.needs(x) || self.needs(k);
        let t = Tensor::new(vec![geo.n, geo.o, geo.oh, geo.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, stride, pad }, needs))
    }

    /// Per-channel `x·scale[c] + shift[c]` for `x: [n,c,...]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(scale) != [xs[1]] || self.shape(shift) != [xs[1]] {
            return dim_err("channel_affine", xs, self.shape(scale));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = *v * sc[ch] + sh[ch];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, needs))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let src = self.value(x);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("unary op preserves shape");
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            Op::Relu(x),
            |v| if v > F::zero() { v } else { F::zero() },
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::AddScalar(x, c), |v| v + c)
    }

    /// `−ln(1 − exp(−max(x, floor)))`, evaluated as `−ln(−expm1(−x))`.
    pub fn neg_log1m_exp(&mut self, x: Var, floor: F) -> Var {
        self.unary(x, Op::NegLog1mExp { x, floor }, |v| {
            let h = if v > floor { v } else { floor };
            -(-(-h).exp_m1()).ln()
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Mean over the spatial axes of `[n,c,h,w]`, giving `[n,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return dim_err("global_avg_pool", xs, &[0, 0, 0, 0]);
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = F::one() / F::of(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<F>() * inv)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(x), needs))
    }

    /// Non-overlapping 2×2 mean pooling of `[n,c,h,w]` with even `h`, `w`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "avg_pool2 needs [n,c,even,even], got {xs:?}"
            )));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = F::of(0.25);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() / 4);
        for plane in src.chunks(h * w) {
            for oy in 0..oh {
                let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..ow {
                    out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
                }
            }
        }
        let needs = self.needs(x);
        let t = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2(x), needs))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    fn reduce_last(&mut self, x: Var, op: Op<F>, f: impl Fn(&[F]) -> F) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs
            .last()
            .ok_or_else(|| Error::Contract("last-axis reduction of a scalar".into()))?;
        let shape = xs[..xs.len() - 1].to_vec();
        let data = self.value(x).data().chunks(d.max(1)).map(f).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    /// Sum along the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        self.reduce_last(x, Op::SumLast(x), |r| r.iter().copied().sum())
    }

    /// `sqrt(‖z‖² + 1) − 1` along the last axis, computed as
    /// `‖z‖² / (sqrt(‖z‖² + 1) + 1)` to stay exact near the origin.
    pub fn radial(&mut self, z: Var) -> Result<Var> {
        self.reduce_last(z, Op::Radial(z), |r| {
            let s: F = r.iter().map(|&v| v * v).sum();
            s / ((s + F::one()).sqrt() + F::one())
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean over all entries (the batch mean of a per-sample vector).
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let m = v.data().iter().copied().sum::<F>() / F::of(v.len() as f64);
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), needs))
    }

    /// Column `k` of an `[n,K]` matrix.
    pub fn column(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || k >= xs[1] {
            return dim_err("column", xs, &[k]);
        }
        let kk = xs[1];
        let data = self.value(x).data().chunks(kk).map(|r| r[k]).collect();
        let n = xs[0];
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n], data)?, Op::Column { x, k }, needs))
    }

    /// Multiply every leading-axis row of `x` by the matching entry of `w: [n]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.is_empty() || ws != [xs[0]] {
            return dim_err("scale_rows", xs, ws);
        }
        let mut out = self.value(x).clone();
        let inner = out.row_len();
        let wv = self.value(w).data();
        for (row, &s) in out.data_mut().chunks_mut(inner.max(1)).zip(wv) {
            for v in row {
                *v *= s;
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::ScaleRows { x, w }, needs))
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        same_shape("select", self.shape(a), self.shape(b))?;
        if mask.len() != self.value(a).len() {
            return dim_err("select mask", self.shape(a), &[mask.len()]);
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = mask
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy of `logits: [n,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return dim_err("cross_entropy", ls, &[labels.len()]);
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} outside {c} classes")));
        }
        let mut total = F::zero();
        for (row, &l) in self.value(logits).data().chunks(c).zip(labels) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
            total += lse - row[l];
        }
        let loss = total / F::of(labels.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating `∂loss/∂p` into the
    /// gradient of every parameter that participates. Returns the gradients
    /// of watched inputs.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Grads<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        let mut out = Grads::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, store, Var(i), &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        store: &mut ParamStore<F>,
        me: Var,
        out: &mut Grads<F>,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<F>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing.data_mut(), t.data()),
                slot @ None => *slot = Some(t),
            }
        };
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Input { watched } => {
                if *watched {
                    out.inputs.insert(me, g);
                }
            }
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                add_into(p.grad.data_mut(), gd);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        gd,
                        false,
                        wv.data(),
                        false,
                        F::zero(),
                        &mut dx,
                    );
                    acc(*x, Tensor::new(vec![n, din], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); dout * din];
                    gemm(dout, n, din, gd, true, xv.data(), false, F::zero(), &mut dw);
                    acc(*w, Tensor::new(vec![dout, din], dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); dout];
                    for row in gd.chunks(dout) {
                        add_into(&mut db, row);
                    }
                    acc(*b, Tensor::from_vec(db));
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let geo = ConvGeometry::new(xv.shape(), kv.shape(), *stride, *pad)?;
                let (need_x, need_k) = (self.needs(*x), self.needs(*k));
                let in_len = geo.c * geo.h * geo.w;
                let out_len = geo.o * geo.p();
                let mut dk = vec![F::zero(); if need_k { kv.len() } else { 0 }];
                let mut dx = vec![F::zero(); if need_x { xv.len() } else { 0 }];
                let buf_len = if geo.is_pointwise() {
                    0
                } else {
                    geo.ckk() * geo.p()
                };
                let mut col = vec![F::zero(); buf_len];
                let mut dcol = vec![F::zero(); if need_x { buf_len } else { 0 }];
                for s in 0..geo.n {
                    let xs_ = &xv.data()[s * in_len..(s + 1) * in_len];
                    let gs = &gd[s * out_len..(s + 1) * out_len];
                    if need_k {
                        let cols: &[F] = if geo.is_pointwise() {
                            xs_
                        } else {
                            geo.im2col(xs_, &mut col);
                            &col
                        };
                        gemm(
                            geo.o,
                            geo.p(),
                            geo.ckk(),
                            gs,
                            false,
                            cols,
                            true,
                            F::one(),
                            &mut dk,
                        );
                    }
                    if need_x {
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        if geo.is_pointwise() {
                            gemm(
                                geo.ckk(),
                                geo.o,
                                geo.p(),
                                kv.data(),
                                true,
                                gs,
                                false,
                                F::zero(),
                                dxs,
                            );
                        } else {
                            gemm(
                                geo.ckk(),
                                geo.o,
                                geo.p(),
                                kv.data(),
                                true,
                                gs,
                                false,
                                F::zero(),
                                &mut dcol,
                            );
                            geo.col2im(&dcol, dxs);
                        }
                    }
                }
                if need_k {
                    acc(*k, Tensor::new(kv.shape().to_vec(), dk)?);
                }
                if need_x {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                let sc = self.value(*scale).data();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let s = sc[i % c];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*x, dx);
                }
                if self.needs(*scale) || self.needs(*shift) {
                    let mut dsc = vec![F::zero(); c];
                    let mut dsh = vec![F::zero(); c];
                    for (i, (gc, xc)) in gd.chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                        let ch = i % c;
                        for (&gv, &xvv) in gc.iter().zip(xc) {
                            dsc[ch] += gv * xvv;
                            dsh[ch] += gv;
                        }
                    }
                    acc(*scale, Tensor::from_vec(dsc));
                    acc(*shift, Tensor::from_vec(dsh));
                }
            }
            Op::Relu(x) => {
                let data = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| if yv > F::zero() { gv } else { F::zero() })
                    .collect();
                acc(*x, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = F::one() / F::of(hw as f64);
                let mut dx = Vec::with_capacity(hw * gd.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                acc(*x, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let ow = w / 2;
                let quarter = F::of(0.25);
                let mut dx = vec![F::zero(); xs.iter().product()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(gd.chunks(h * w / 4)) {
                    for iy in 0..h {
                        for ix in 0..w {
                            plane[iy * w + ix] = gp[(iy / 2) * ow + ix / 2] * quarter;
                        }
                    }
                }
                acc(*x, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                let neg = Tensor::new(g.shape().to_vec(), gd.iter().map(|&v| -v).collect())?;
                acc(*a, g);
                acc(*b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(&gv, &v)| gv * v).collect();
                let db = gd.iter().zip(av.data()).map(|(&gv, &v)| gv * v).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                acc(*b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(
                    *x,
                    Tensor::new(g.shape().to_vec(), gd.iter().map(|&v| v * c).collect())?,
                );
            }
            Op::AddScalar(x, _) => acc(*x, g),
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = F::of(2.0);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| two * v * gv)
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Sqrt(x) => {
                let half = F::of(0.5);
                let d = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * half / yv)
                    .collect();
                acc(*x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                acc(*x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = gd.iter().zip(xv.data()).map(|(&gv, &v)| gv / v).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().expect("softmax output has an axis");
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in gd.chunks(d).zip(y.data().chunks(d)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SumLast(x) => {
                let xs = self.shape(*x);
                let d = *xs.last().expect("checked in forward");
                let mut dx = Vec::with_capacity(gd.len() * d);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv, d));
                }
                acc(*x, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::Radial(z) => {
                let zv = self.value(*z);
                let d = *zv.shape().last().expect("checked in forward");
                let mut dz = Vec::with_capacity(zv.len());
                for (&gv, row) in gd.iter().zip(zv.data().chunks(d)) {
                    let s: F = row.iter().map(|&v| v * v).sum();
                    let inv = gv / (s + F::one()).sqrt();
                    dz.extend(row.iter().map(|&v| v * inv));
                }
                acc(*z, Tensor::new(zv.shape().to_vec(), dz)?);
            }
            Op::Sum(x) => {
                let gv = gd[0];
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = gd[0] / F::of(xv.len() as f64);
                acc(*x, Tensor::full(xv.shape(), gv));
            }
            Op::NegLog1mExp { x, floor } => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| {
                        if v > *floor {
                            -gv / v.exp_m1()
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Column { x, k } => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                let kk = xs[1];
                for (row, &gv) in dx.data_mut().chunks_mut(kk).zip(gd) {
                    row[*k] = gv;
                }
                acc(*x, dx);
            }
            Op::ScaleRows { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let inner = xv.row_len().max(1);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (row, &s) in dx.data_mut().chunks_mut(inner).zip(wv.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let dw = gd
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            Op::Select { mask, a, b } => {
                let zero = F::zero();
                let da = mask
                    .iter()
                    .zip(gd)
                    .map(|(&m, &gv)| if m { gv } else { zero })
                    .collect();
                let db = mask
                    .iter()
                    .zip(gd)
                    .map(|(&m, &gv)| if m { zero } else { gv })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da)?);
                acc(*b, Tensor::new(g.shape().to_vec(), db)?);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let c = lv.shape()[1];
                let scale = gd[0] / F::of(labels.len() as f64);
                let mut dl = Vec::with_capacity(lv.len());
                for (row, &l) in lv.data().chunks(c).zip(labels) {
                    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let z: F = row.iter().map(|&v| (v - m).exp()).sum();
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - m).exp() / z;
                        let t = if j == l { F::one() } else { F::zero() };
                        dl.push((p - t) * scale);
                    }
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} not in {{1,3}}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let span = size + 2 * pad;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "conv2d output size ({size}+2*{pad}-{k})/{stride}+1 is not a positive integer"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        let oh = out(h, kh)?;
        let ow = out(w, kw)?;
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<F: Real>(&self, x: &[F], col: &mut [F]) {
        let p = self.p();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * p;
                    let dst = &mut col[row..row + p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                F::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, col: &[F], dx: &mut [F]) {
        let p = self.p();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * p;
                    let src = &col[row..row + p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
