//! Tape-recorded computation graph with reverse-mode gradients.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction and a single reverse sweep visits every op once.
//! Gradients of leaves accumulate across `backward` calls until
//! [`Graph::zero_grads`] is called; intermediate gradients are scratch.

use super::kernels::{self, ConvGeom};
use super::tensor::{Shape, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::prob;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Symbol range modelled by the factorized prior.
pub const FACTORIZED_MIN: i32 = -64;
pub const FACTORIZED_MAX: i32 = 63;
pub const FACTORIZED_SYMBOLS: usize = (FACTORIZED_MAX - FACTORIZED_MIN + 1) as usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LeakyRelu { x: Var, slope: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    /// Pass-through gradient: additive noise, straight-through rounding, clamping.
    Identity { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool { x: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SliceChannels { x: Var, start: usize },
    Softplus { x: Var },
    GaussianLikelihood { y: Var, mu: Var, sigma: Var, floored: Vec<bool> },
    FactorizedLikelihood { z: Var, logits: Var, probs: Vec<f64>, floored: Vec<bool> },
    RateBits { parts: Vec<Var>, batch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Storage precision of node values.
///
/// Values are held as f64; under `F32` every op output is rounded to the
/// nearest f32, which is the normal training mode. `F64` keeps the full
/// result and serves as the reference for finite-difference checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shape {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        value.check_finite(what)?;
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- convolution -------------------------------------------------------

    fn conv_checks(&self, x: Var, w: Var, b: Option<Var>, stride: usize, k_axis_in: usize) -> Result<ConvGeom> {
        let ws = self.shape(w);
        if ws.h != ws.w || ws.h == 0 {
            return dim_err(format!("kernel must be square and non-empty, got {ws}"));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let xs = self.shape(x);
        if k_axis_in != xs.c {
            return dim_err(format!("weight {ws} expects {k_axis_in} input channels, input is {xs}"));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            let expect = if k_axis_in == ws.c { ws.n } else { ws.c };
            if bs.numel() != expect {
                return dim_err(format!("bias has {} elements, expected {expect}", bs.numel()));
            }
        }
        Ok(ConvGeom { k: ws.h, stride, pad: 0 })
    }

    /// 2-D cross-correlation. `w` is `[c_out, c_in, k, k]`, `b` has `c_out` elements.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let ws = self.shape(w);
        let mut geom = self.conv_checks(x, w, b, stride, ws.c)?;
        geom.pad = padding;
        let xs = self.shape(x);
        let (oh, ow) = match (geom.conv_out(xs.h), geom.conv_out(xs.w)) {
            (Some(h), Some(w)) => (h, w),
            _ => return dim_err(format!("kernel {} too large for input {xs} with padding {padding}", geom.k)),
        };
        let out = {
            let bias = b.map(|b| self.value(b).data());
            kernels::gather(self.value(x), self.value(w).data(), bias, ws.n, oh, ow, geom)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, rg, "conv2d")
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] for the same
    /// weight tensor. `w` is `[c_in, c_out, k, k]`, `b` has `c_out` elements.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ws = self.shape(w);
        let mut geom = self.conv_checks(x, w, b, stride, ws.n)?;
        geom.pad = padding;
        let xs = self.shape(x);
        let (oh, ow) = match (geom.tconv_out(xs.h), geom.tconv_out(xs.w)) {
            (Some(h), Some(w)) => (h, w),
            _ => return dim_err(format!("padding {padding} too large for transposed conv on {xs}")),
        };
        let out = {
            let bias = b.map(|b| self.value(b).data());
            kernels::scatter(self.value(x), self.value(w).data(), bias, ws.c, oh, ow, geom)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::ConvTranspose2d { x, w, b, geom }, rg, "conv_transpose2d")
    }

    // ---- elementwise -------------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!("slope {slope} outside [0, 1)")));
        }
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg, "leaky_relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub { a, b }, rg, "sub")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x) && s != 0.0;
        self.push(out, Op::Scale { x, s }, rg, "scale")
    }

    /// `x + noise` with identity gradient with respect to `x`.
    pub fn add_noise(&mut self, x: Var, noise: &Tensor) -> Result<Var> {
        let t = self.value(x);
        same_shape(t, noise, "add_noise")?;
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Identity { x }, rg, "add_noise")
    }

    /// Rounds to nearest (ties to even) in the forward pass, identity gradient.
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(super::round_symbol);
        let rg = self.rg(x);
        self.push(out, Op::Identity { x }, rg, "round_ste")
    }

    /// Clamps to `[lo, hi]` in the forward pass, identity gradient.
    pub fn clamp_ste(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Identity { x }, rg, "clamp_ste")
    }

    /// `softplus(x) + SIGMA_MIN`, a strictly positive scale.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| prob::softplus(v) + prob::SIGMA_MIN);
        let rg = self.rg(x);
        self.push(out, Op::Softplus { x }, rg, "softplus")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if start + len > s.c || len == 0 {
            return dim_err(format!("channel slice {start}+{len} outside {s}"));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&t.data()[base..base + len * plane]);
        }
        let out = Tensor::new(Shape::new(s.n, len, s.h, s.w), data)?;
        let rg = self.rg(x);
        self.push(out, Op::SliceChannels { x, start }, rg, "slice_channels")
    }

    // ---- pooling -----------------------------------------------------------

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 {
            return dim_err(format!("max_pool2 needs even spatial dims, got {s}"));
        }
        let (out, argmax) = kernels::max_pool2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg, "max_pool2")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let plane = s.plane();
        let data = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(Shape::new(s.n, s.c, 1, 1), data)?;
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool { x }, rg, "global_avg_pool")
    }

    // ---- reductions and losses --------------------------------------------

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum_f64() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg, "reduce_mean")
    }

    /// Sum of squared differences divided by the batch size.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mse_loss")?;
        let sq: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x - y;
                d * d
            })
            .sum();
        let n = ta.shape().n as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(sq / n), Op::Mse { a, b }, rg, "mse_loss")
    }

    /// Mean (over the batch) softmax cross-entropy in nats. `logits` is `(N, K, 1, 1)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.h != 1 || s.w != 1 {
            return dim_err(format!("logits must be (N, K, 1, 1), got {s}"));
        }
        if labels.len() != s.n {
            return dim_err(format!("{} labels for batch of {}", labels.len(), s.n));
        }
        let k = s.c;
        let mut probs = Vec::with_capacity(s.n * k);
        let mut loss = 0.0f64;
        for (n, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::InvalidArgument(format!("label {label} out of range for {k} classes")));
            }
            let row = &t.data()[n * k..(n + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += z.ln() + max - row[label];
            probs.extend(exps.iter().map(|e| e / z));
        }
        let out = Tensor::scalar(loss / s.n as f64);
        let rg = self.rg(logits);
        self.push(out, Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }, rg, "softmax_cross_entropy")
    }

    /// Probability mass of the unit interval around `y` under `N(mu, sigma^2)`,
    /// floored at [`prob::P_FLOOR`].
    pub fn gaussian_likelihood(&mut self, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (ty, tm, ts) = (self.value(y), self.value(mu), self.value(sigma));
        same_shape(ty, tm, "gaussian_likelihood mu")?;
        same_shape(ty, ts, "gaussian_likelihood sigma")?;
        let n = ty.numel();
        let mut data = Vec::with_capacity(n);
        let mut floored = Vec::with_capacity(n);
        for i in 0..n {
            let s = ts.data()[i];
            if !(s > 0.0) {
                return Err(Error::Numeric(format!("non-positive scale {s} at element {i}")));
            }
            let d = ty.data()[i] - tm.data()[i];
            let p = prob::gaussian_mass(d, s);
            if p < prob::P_FLOOR {
                data.push(prob::P_FLOOR);
                floored.push(true);
            } else {
                data.push(p);
                floored.push(false);
            }
        }
        let out = Tensor::new(ty.shape(), data)?;
        let rg = self.rg(y) || self.rg(mu) || self.rg(sigma);
        self.push(out, Op::GaussianLikelihood { y, mu, sigma, floored }, rg, "gaussian_likelihood")
    }

    /// Likelihood of `z` under a per-channel piecewise-linear CDF whose
    /// knots sit at half-integers over `[FACTORIZED_MIN, FACTORIZED_MAX]`.
    /// `logits` is `(C, FACTORIZED_SYMBOLS, 1, 1)`; the per-symbol masses are
    /// its softmax along the symbol axis.
    pub fn factorized_likelihood(&mut self, z: Var, logits: Var) -> Result<Var> {
        let (tz, tl) = (self.value(z), self.value(logits));
        let zs = tz.shape();
        let ls = tl.shape();
        if ls.n != zs.c || ls.c != FACTORIZED_SYMBOLS || ls.plane() != 1 {
            return dim_err(format!("prior logits {ls} do not fit hyper-latent {zs}"));
        }
        let probs = factorized_masses(tl);
        let plane = zs.plane();
        let mut data = Vec::with_capacity(zs.numel());
        let mut floored = Vec::with_capacity(zs.numel());
        for (i, &v) in tz.data().iter().enumerate() {
            let c = (i / plane) % zs.c;
            let p = factorized_lookup(&probs[c * FACTORIZED_SYMBOLS..(c + 1) * FACTORIZED_SYMBOLS], v).0;
            if p < prob::P_FLOOR {
                data.push(prob::P_FLOOR);
                floored.push(true);
            } else {
                data.push(p);
                floored.push(false);
            }
        }
        let out = Tensor::new(zs, data)?;
        let rg = self.rg(z) || self.rg(logits);
        self.push(out, Op::FactorizedLikelihood { z, logits, probs, floored }, rg, "factorized_likelihood")
    }

    /// `Σ -log2 p` over every probability tensor, divided by `batch`.
    pub fn rate_bits(&mut self, parts: &[Var], batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut total = 0.0f64;
        for &p in parts {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                if !(v > 0.0) || v > 1.0 {
                    return Err(Error::Numeric(format!("probability {v} at element {i} outside (0, 1]")));
                }
                total += prob::bits(v);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::scalar(total / batch as f64);
        self.push(out, Op::RateBits { parts: parts.to_vec(), batch }, rg, "rate_bits")
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar loss into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).shape().is_scalar() {
            return dim_err(format!("backward needs a scalar loss, got {}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape();
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            for (input, gi) in self.backward_op(i, &g)? {
                accumulate(&mut grads[input.0], gi);
            }
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let xs = self.shape(*x);
                if self.rg(*x) {
                    let dx = kernels::scatter(&gt, self.value(*w).data(), None, xs.c, xs.h, xs.w, *geom);
                    out.push((*x, dx.into_data()));
                }
                if self.rg(*w) {
                    out.push((*w, kernels::weight_grad(&gt, self.value(*x), *geom)));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, kernels::channel_sums(&gt)));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let xs = self.shape(*x);
                if self.rg(*x) {
                    let dx = kernels::gather(&gt, self.value(*w).data(), None, xs.c, xs.h, xs.w, *geom);
                    out.push((*x, dx.into_data()));
                }
                if self.rg(*w) {
                    out.push((*w, kernels::weight_grad(self.value(*x), &gt, *geom)));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, kernels::channel_sums(&gt)));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&g, &v)| if v >= 0.0 { g } else { g * slope }).collect();
                out.push((*x, d));
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Scale { x, s } => out.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Identity { x } => out.push((*x, g.to_vec())),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0] / ta.shape().n as f64;
                let da: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| k * (x - y))
                    .collect();
                if self.rg(*b) {
                    out.push((*b, da.iter().map(|v| -v).collect()));
                }
                if self.rg(*a) {
                    out.push((*a, da));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0f64; self.value(*x).numel()];
                for (&gv, &idx) in g.iter().zip(argmax) {
                    d[idx as usize] += gv;
                }
                out.push((*x, d));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let mut d = Vec::with_capacity(s.numel());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                out.push((*x, d));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = self.shape(*logits).c;
                let n = labels.len() as f64;
                let scale = g[0] / n;
                let mut d: Vec<f64> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] = (probs[row * k + label] - 1.0) * scale;
                }
                out.push((*logits, d));
            }
            Op::SliceChannels { x, start } => {
                let s = self.shape(*x);
                let os = node.value.shape();
                let plane = s.plane();
                let mut d = vec![0.0f64; s.numel()];
                for n in 0..s.n {
                    let dst = (n * s.c + start) * plane;
                    let src = n * os.c * plane;
                    d[dst..dst + os.c * plane].copy_from_slice(&g[src..src + os.c * plane]);
                }
                out.push((*x, d));
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&g, &v)| g * prob::sigmoid(v)).collect();
                out.push((*x, d));
            }
            Op::GaussianLikelihood { y, mu, sigma, floored } => {
                let (ty, tm, ts) = (self.value(*y), self.value(*mu), self.value(*sigma));
                let n = ty.numel();
                let mut dd = vec![0.0f64; n];
                let mut ds = vec![0.0f64; n];
                for i in 0..n {
                    if floored[i] {
                        continue;
                    }
                    let d = ty.data()[i] - tm.data()[i];
                    let (gd, gs) = prob::gaussian_mass_grad(d, ts.data()[i]);
                    dd[i] = g[i] * gd;
                    ds[i] = g[i] * gs;
                }
                if self.rg(*mu) {
                    out.push((*mu, dd.iter().map(|v| -v).collect()));
                }
                if self.rg(*y) {
                    out.push((*y, dd));
                }
                if self.rg(*sigma) {
                    out.push((*sigma, ds));
                }
            }
            Op::FactorizedLikelihood { z, logits, probs, floored } => {
                let tz = self.value(*z);
                let zs = tz.shape();
                let plane = zs.plane();
                let mut dz = vec![0.0f64; tz.numel()];
                let mut dp = vec![0.0f64; probs.len()];
                for (i, &v) in tz.data().iter().enumerate() {
                    if floored[i] {
                        continue;
                    }
                    let c = (i / plane) % zs.c;
                    let row = &probs[c * FACTORIZED_SYMBOLS..(c + 1) * FACTORIZED_SYMBOLS];
                    let (_, slot, frac, slope) = factorized_lookup(row, v);
                    let gv = g[i];
                    dz[i] = gv * slope;
                    dp[c * FACTORIZED_SYMBOLS + slot] += gv * (1.0 - frac);
                    if slot + 1 < FACTORIZED_SYMBOLS {
                        dp[c * FACTORIZED_SYMBOLS + slot + 1] += gv * frac;
                    }
                }
                if self.rg(*z) {
                    out.push((*z, dz));
                }
                if self.rg(*logits) {
                    let mut dl = vec![0.0f64; probs.len()];
                    for c in 0..zs.c {
                        let r = c * FACTORIZED_SYMBOLS..(c + 1) * FACTORIZED_SYMBOLS;
                        let dot: f64 = probs[r.clone()].iter().zip(&dp[r.clone()]).map(|(p, d)| p * d).sum();
                        for j in r {
                            dl[j] = (probs[j] * (dp[j] - dot)) as f64;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::RateBits { parts, batch } => {
                let k = g[0] / *batch as f64;
                for &p in parts {
                    if self.rg(p) {
                        let d = self.value(p).data().iter().map(|&v| k * prob::bits_grad(v)).collect();
                        out.push((p, d));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Softmax over the symbol axis of `(C, FACTORIZED_SYMBOLS, 1, 1)` logits.
pub fn factorized_masses(logits: &Tensor) -> Vec<f64> {
    let mut probs = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(FACTORIZED_SYMBOLS) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    probs
}

/// Evaluates the interpolated mass at `v`; returns `(mass, slot, frac, d mass / d v)`.
fn factorized_lookup(row: &[f64], v: f64) -> (f64, usize, f64, f64) {
    let lo = FACTORIZED_MIN as f64;
    let hi = FACTORIZED_MAX as f64;
    let x = v;
    let inside = x > lo && x < hi;
    let pos = x.clamp(lo, hi) - lo;
    let slot = (pos.floor() as usize).min(FACTORIZED_SYMBOLS - 1);
    let frac = pos - slot as f64;
    let next = row.get(slot + 1).copied().unwrap_or(0.0);
    let mass = row[slot] * (1.0 - frac) + next * frac;
    let slope = if inside { next - row[slot] } else { 0.0 };
    (mass, slot, frac, slope)
}
