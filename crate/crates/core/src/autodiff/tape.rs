//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are only ever appended, so a node's
//! inputs always precede it and the backward sweep is a single reverse scan.

use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Shape, Tensor};
use crate::error::{CsdError, Result};

/// Stabilizer added to every denominator of [`Tape::div`].
pub const DIV_EPS: f32 = 1e-4;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// `a / (b + eps)`
    Div { eps: f32 },
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T: Real = f32> {
    /// Normalize with batch statistics.
    Train { eps: f32 },
    /// Normalize with supplied running statistics.
    Eval {
        mean: &'a [T],
        var: &'a [T],
        eps: f32,
    },
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Real = f32> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T: Real> {
    Leaf,
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Affine {
        a: Var,
        scale: f32,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    LeakyRelu {
        a: Var,
        slope: f32,
    },
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    SmoothL1(Var),
    Clamp {
        a: Var,
        lo: f32,
        hi: f32,
    },
    MaxPool {
        a: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Crop {
        a: Var,
        sample: usize,
        top: usize,
        left: usize,
    },
    Narrow {
        a: Var,
        start: usize,
    },
    MeanAll(Var),
    MeanPerSample(Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { op, .. } => match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div { .. } => "div",
            },
            Op::Affine { .. } => "affine",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::SmoothL1(_) => "smooth_l1",
            Op::Clamp { .. } => "clamp",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Upsample(_) => "upsample_nearest2x",
            Op::Concat { .. } => "concat_channels",
            Op::Crop { .. } => "crop",
            Op::Narrow { .. } => "narrow_channels",
            Op::MeanAll(_) => "mean_all",
            Op::MeanPerSample(_) => "mean_per_sample",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; populated on leaves that require grad.
    grad: Option<Vec<T>>,
    label: Option<String>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::with_checks(false)
    }
}

impl Tape<f32> {
    pub fn new() -> Self {
        Self::with_checks(false)
    }

    /// A tape that rejects non-finite operands at every operation.
    pub fn debug() -> Self {
        Self::with_checks(true)
    }
}

impl<T: Real> Tape<T> {
    /// `check_finite` makes every operation reject non-finite operands.
    pub fn with_checks(check_finite: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Attaches a name used in diagnostics.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// A constant copy of `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// First recorded node holding a NaN or infinity, described for diagnostics.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.label {
                Some(l) => format!("node {i} ({}, {l}) {:?}", n.op.name(), n.value.shape()),
                None => format!("node {i} ({}) {:?}", n.op.name(), n.value.shape()),
            })
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        if self.check_finite {
            for v in vars {
                if !self.nodes[v.0].value.is_finite() {
                    return Err(CsdError::NonFinite {
                        what: format!("input to {op} (node {})", v.0),
                    });
                }
            }
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    // ---- elementwise -------------------------------------------------------

    /// Elementwise binary op. `b` may broadcast: each of its extents must
    /// equal `a`'s or be 1.
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let name = Op::<T>::Binary { a, b, op }.name();
        self.check(name, &[a, b])?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        let bc = Broadcast::new(name, sa, sb)?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(av.len());
        bc.for_each(|i, j| {
            let (x, y) = (av[i], bv[j]);
            out.push(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div { eps } => x / (y + T::lit(eps as f64)),
            });
        });
        let value = Tensor::new(sa, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary { a, b, op }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// `a / (b + DIV_EPS)`
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.div_eps(a, b, DIV_EPS)
    }

    pub fn div_eps(&mut self, a: Var, b: Var, eps: f32) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div { eps })
    }

    /// `scale * a + offset`
    pub fn affine(&mut self, a: Var, scale: f32, offset: f32) -> Var {
        let (s, o) = (T::lit(scale as f64), T::lit(offset as f64));
        self.unary(a, Op::Affine { a, scale }, |x| s * x + o)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let k = T::lit(slope as f64);
        self.unary(a, Op::LeakyRelu { a, slope }, |x| if x > T::zero() { x } else { k * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `0.5 u²` for `|u| ≤ 1`, `|u| − 0.5` otherwise.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let half = T::lit(0.5);
        self.unary(a, Op::SmoothL1(a), |u| {
            if u.abs() <= T::one() {
                half * u * u
            } else {
                u.abs() - half
            }
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let (l, h) = (T::lit(lo as f64), T::lit(hi as f64));
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.max(l).min(h))
    }

    // ---- layers ------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check("conv2d", &[x, w])?;
        let xs = self.shape(x);
        let ws = self.shape(w).0;
        if stride == 0 {
            return Err(CsdError::invalid("conv2d", "stride must be at least 1"));
        }
        if ws[1] != xs.c() {
            return Err(CsdError::invalid(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs.c(), ws[1]),
            ));
        }
        if xs.h() + 2 * pad < ws[2] || xs.w() + 2 * pad < ws[3] {
            return Err(CsdError::invalid("conv2d", format!("kernel larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.value(b).numel() != ws[0] {
                return Err(CsdError::invalid("conv2d", "bias length differs from output channels"));
            }
        }
        let geom = ConvGeom {
            input: xs,
            weight: ws,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.output(), out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Per-channel batch normalization. In training mode the observed batch
    /// statistics are returned so the caller can update running estimates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check("batchnorm2d", &[x, gamma, beta])?;
        let xs = self.shape(x);
        let c = xs.c();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(CsdError::invalid("batchnorm2d", format!("parameters do not match {c} channels")));
        }
        let xv = self.value(x).data();
        let (mean, var, eps, train, stats) = match mode {
            BnMode::Train { eps } => {
                let (m, v) = kernels::channel_stats(xs, xv);
                let stats = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                    count: xs.n() * xs.plane(),
                };
                (m, v, eps, true, Some(stats))
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(CsdError::invalid("batchnorm2d", "running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), eps, false, None)
            }
        };
        let eps = T::lit(eps as f64);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = kernels::map_channels(xs, xv, |ch, v| (v - mean[ch]) * inv_std[ch]);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let c_of = |i: usize| (i / xs.plane()) % c;
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| g[c_of(i)] * h + bt[c_of(i)]).collect();
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        self.check("maxpool2x2", &[a])?;
        let s = self.shape(a);
        if s.h() % 2 != 0 || s.w() % 2 != 0 {
            return Err(CsdError::invalid(
                "maxpool2x2",
                format!("odd spatial extent {s:?}; pad or resize first"),
            ));
        }
        let (out, argmax) = kernels::maxpool2x2(s, self.value(a).data());
        let value = Tensor::new(Shape::new(s.n(), s.c(), s.h() / 2, s.w() / 2), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaxPool { a, argmax }, rg))
    }

    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        self.check("upsample_nearest2x", &[a])?;
        let s = self.shape(a);
        let out = kernels::upsample_nearest2x(s, self.value(a).data());
        let value = Tensor::new(Shape::new(s.n(), s.c(), 2 * s.h(), 2 * s.w()), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Upsample(a), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(CsdError::ShapeMismatch {
                op: "concat_channels",
                left: sa.0,
                right: sb.0,
            });
        }
        let (pa, pb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for n in 0..sa.n() {
            out.extend_from_slice(&av[n * pa..][..pa]);
            out.extend_from_slice(&bv[n * pb..][..pb]);
        }
        let value = Tensor::new(sa.with_channels(sa.c() + sb.c()), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Channels `start..start + len` of `a`.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if len == 0 || start + len > s.c() {
            return Err(CsdError::invalid(
                "narrow_channels",
                format!("channels {start}..{} out of {}", start + len, s.c()),
            ));
        }
        let p = s.plane();
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(s.n() * len * p);
        for n in 0..s.n() {
            out.extend_from_slice(&av[(n * s.c() + start) * p..][..len * p]);
        }
        let value = Tensor::new(s.with_channels(len), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Narrow { a, start }, rg))
    }

    /// Window `(top..top+height, left..left+width)` of one sample, all
    /// channels: 1×C×height×width.
    pub fn crop(&mut self, a: Var, sample: usize, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if sample >= s.n() || height == 0 || width == 0 || top + height > s.h() || left + width > s.w() {
            return Err(CsdError::invalid(
                "crop",
                format!("window {height}x{width} at ({top},{left}) of sample {sample} outside {s:?}"),
            ));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(s.c() * height * width);
        for c in 0..s.c() {
            let base = (sample * s.c() + c) * s.plane();
            for y in top..top + height {
                out.extend_from_slice(&av[base + y * s.w() + left..][..width]);
            }
        }
        let value = Tensor::new(Shape::new(1, s.c(), height, width), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Crop { a, sample, top, left }, rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let m = T::lit(v.iter().map(|&x| x.f64()).sum::<f64>() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::MeanAll(a), rg)
    }

    /// Mean over (channel, height, width) for each sample: N×1×1×1.
    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let per = s.numel() / s.n();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(per)
            .map(|c| T::lit(c.iter().map(|&x| x.f64()).sum::<f64>() / per as f64))
            .collect();
        let value = Tensor::new(Shape::new(s.n(), 1, 1, 1), out).expect("per-sample shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanPerSample(a), rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
    /// Repeated calls add to existing gradients until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(CsdError::invalid("backward", format!("loss must be scalar, got {ls:?}")));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<T>| accumulate(&mut grads[v.0], contrib);

        match &node.op {
            Op::Leaf => {}
            Op::Binary { a, b, op } => {
                let (a, b) = (*a, *b);
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let bc = Broadcast::new("backward", sa, sb).expect("validated in forward");
                let av = val(a);
                let bv = val(b);
                let mut ga = wants(a).then(|| vec![T::zero(); av.len()]);
                let mut gb = wants(b).then(|| vec![T::zero(); bv.len()]);
                let mut k = 0;
                bc.for_each(|ia, ib| {
                    let go = g[k];
                    k += 1;
                    let (da, db) = match op {
                        BinaryOp::Add => (go, go),
                        BinaryOp::Sub => (go, -go),
                        BinaryOp::Mul => (go * bv[ib], go * av[ia]),
                        BinaryOp::Div { eps } => {
                            let d = bv[ib] + T::lit(*eps as f64);
                            (go / d, -go * av[ia] / (d * d))
                        }
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + db;
                    }
                });
                if let Some(ga) = ga {
                    send(a, ga);
                }
                if let Some(gb) = gb {
                    send(b, gb);
                }
            }
            Op::Affine { a, scale } => {
                let s = T::lit(*scale as f64);
                send(*a, g.iter().map(|&x| x * s).collect())
            }
            Op::Conv { x, w, b, geom } => {
                let need = (wants(*x), wants(*w), b.is_some_and(wants));
                let cg = kernels::conv2d_backward(geom, val(*x), val(*w), g, need);
                if let Some(gx) = cg.x {
                    send(*x, gx);
                }
                if let Some(gw) = cg.w {
                    send(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.b) {
                    send(*b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = nodes[x.0].value.shape();
                let gam = val(*gamma);
                let (sum_g, sum_gx) = kernels::channel_sums(s, g, xhat);
                if wants(*gamma) {
                    send(*gamma, sum_gx.iter().map(|&v| T::lit(v)).collect());
                }
                if wants(*beta) {
                    send(*beta, sum_g.iter().map(|&v| T::lit(v)).collect());
                }
                if wants(*x) {
                    let p = s.plane();
                    let c = s.c();
                    let m = T::lit((s.n() * p) as f64);
                    let gx: Vec<T> = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(k, (&go, &xh))| {
                            let ch = (k / p) % c;
                            if *train {
                                let dxhat_sum = gam[ch] * T::lit(sum_g[ch]);
                                let dxhat_xhat_sum = gam[ch] * T::lit(sum_gx[ch]);
                                inv_std[ch] / m * (m * gam[ch] * go - dxhat_sum - xh * dxhat_xhat_sum)
                            } else {
                                go * gam[ch] * inv_std[ch]
                            }
                        })
                        .collect();
                    send(*x, gx);
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                send(*a, g.iter().zip(av).map(|(&go, &x)| if x > T::zero() { go } else { T::zero() }).collect());
            }
            Op::LeakyRelu { a, slope } => {
                let av = val(*a);
                let k = T::lit(*slope as f64);
                send(
                    *a,
                    g.iter().zip(av).map(|(&go, &x)| if x > T::zero() { go } else { go * k }).collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(&go, &s)| go * s * (T::one() - s)).collect());
            }
            Op::Abs(a) => {
                let av = val(*a);
                send(*a, g.iter().zip(av).map(|(&go, &x)| go * sign(x)).collect());
            }
            Op::Square(a) => {
                let av = val(*a);
                send(*a, g.iter().zip(av).map(|(&go, &x)| (go + go) * x).collect());
            }
            Op::SmoothL1(a) => {
                let av = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&go, &u)| if u.abs() <= T::one() { go * u } else { go * sign(u) })
                        .collect(),
                );
            }
            Op::Clamp { a, lo, hi } => {
                let av = val(*a);
                let (l, h) = (T::lit(*lo as f64), T::lit(*hi as f64));
                send(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&go, &x)| if x > l && x < h { go } else { T::zero() })
                        .collect(),
                );
            }
            Op::MaxPool { a, argmax } => {
                let mut ga = vec![T::zero(); nodes[a.0].value.numel()];
                for (&go, &k) in g.iter().zip(argmax) {
                    ga[k as usize] = ga[k as usize] + go;
                }
                send(*a, ga);
            }
            Op::Upsample(a) => {
                let s = nodes[a.0].value.shape();
                send(*a, kernels::upsample_nearest2x_backward(s, g));
            }
            Op::Concat { a, b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (pa, pb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for n in 0..sa.n() {
                    let chunk = &g[n * (pa + pb)..][..pa + pb];
                    ga.extend_from_slice(&chunk[..pa]);
                    gb.extend_from_slice(&chunk[pa..]);
                }
                if wants(*a) {
                    send(*a, ga);
                }
                if wants(*b) {
                    send(*b, gb);
                }
            }
            Op::Crop { a, sample, top, left } => {
                let s = nodes[a.0].value.shape();
                let o = node.value.shape();
                let mut ga = vec![T::zero(); s.numel()];
                for c in 0..s.c() {
                    let base = (sample * s.c() + c) * s.plane();
                    for y in 0..o.h() {
                        let src = &g[(c * o.h() + y) * o.w()..][..o.w()];
                        ga[base + (top + y) * s.w() + left..][..o.w()].copy_from_slice(src);
                    }
                }
                send(*a, ga);
            }
            Op::Narrow { a, start } => {
                let s = nodes[a.0].value.shape();
                let len = node.value.shape().c();
                let p = s.plane();
                let mut ga = vec![T::zero(); s.numel()];
                for n in 0..s.n() {
                    ga[(n * s.c() + start) * p..][..len * p].copy_from_slice(&g[n * len * p..][..len * p]);
                }
                send(*a, ga);
            }
            Op::MeanAll(a) => {
                let n = nodes[a.0].value.numel();
                send(*a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::MeanPerSample(a) => {
                let s = nodes[a.0].value.shape();
                let per = s.numel() / s.n();
                let d = T::lit(per as f64);
                let ga = (0..s.numel()).map(|k| g[k / per] / d).collect();
                send(*a, ga);
            }
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(contrib),
    }
}

/// Index mapping from an output element to the broadcast operand.
struct Broadcast {
    shape: Shape,
    /// Strides of the broadcast operand, zero on extents of 1.
    strides: [usize; 4],
}

impl Broadcast {
    fn new(op: &'static str, a: Shape, b: Shape) -> Result<Self> {
        let mut strides = [0usize; 4];
        let mut acc = 1;
        for d in (0..4).rev() {
            let (ea, eb) = (a.0[d], b.0[d]);
            if eb != ea && eb != 1 {
                return Err(CsdError::ShapeMismatch {
                    op,
                    left: a.0,
                    right: b.0,
                });
            }
            strides[d] = if eb == 1 && ea != 1 { 0 } else { acc };
            acc *= eb;
        }
        Ok(Broadcast { shape: a, strides })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [n, c, h, w] = self.shape.0;
        let [sn, sc, sh, sw] = self.strides;
        let mut i = 0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    let row = a * sn + b * sc + y * sh;
                    for x in 0..w {
                        f(i, row + x * sw);
                        i += 1;
                    }
                }
            }
        }
    }
}
