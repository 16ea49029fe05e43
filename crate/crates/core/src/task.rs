//! Synthetic shape-classification task standing in for a pretrained
//! vision network.
//!
//! Each sample shows one large shape whose type is the label, a couple of
//! small distractor shapes, and a textured background. The classifier is
//! a four-stage conv/pool trunk with a global-average-pooled linear head;
//! the outputs of the second and fourth pooling layers double as feature
//! taps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::optim::{collect_grads, Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::{fingerprint_of, init_layers, Bound, LayerSpec, ModelParams, LEAKY_SLOPE};
use crate::{parallel, rng};

pub const MAX_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; MAX_CLASSES] = ["circle", "square", "triangle", "cross"];

#[derive(Clone, Debug, PartialEq)]
pub struct ProxySample {
    /// `1 x 3 x H x W`, values on the 8-bit grid in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

// ---- rendering -------------------------------------------------------------

#[derive(Clone, Copy)]
struct Placed {
    kind: usize,
    cx: f64,
    cy: f64,
    size: f64,
    angle: f64,
    color: [f64; 3],
}

fn rotate(x: f64, y: f64, a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

fn sd_box(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let qx = x.abs() - hx;
    let qy = y.abs() - hy;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn sd_triangle(x: f64, y: f64, r: f64) -> f64 {
    // equilateral, circumradius-ish r, pointing up
    let k = 3f64.sqrt();
    let mut px = x.abs() - r;
    let mut py = -y + r / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * r, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

impl Placed {
    fn signed_distance(&self, px: f64, py: f64) -> f64 {
        let (x, y) = rotate(px - self.cx, py - self.cy, self.angle);
        let s = self.size;
        match self.kind {
            0 => (x * x + y * y).sqrt() - s,
            1 => sd_box(x, y, 0.8 * s, 0.8 * s),
            2 => sd_triangle(x, y, 1.1 * s),
            _ => sd_box(x, y, s, 0.3 * s).min(sd_box(x, y, 0.3 * s, s)),
        }
    }
}

fn random_color(r: &mut impl Rng) -> [f64; 3] {
    let mut c = [r.gen::<f64>(), r.gen::<f64>(), r.gen::<f64>()];
    let i = r.gen_range(0..3);
    c[i] = 0.85 + 0.15 * c[i];
    c
}

fn render(index: u64, seed: u64, size: usize, label: usize, classes: usize) -> Tensor {
    let mut r = rng::indexed_stream(seed, "proxy.sample", index);
    let sz = size as f64;
    let bg_a = [r.gen::<f64>() * 0.5, r.gen::<f64>() * 0.5, r.gen::<f64>() * 0.5];
    let bg_b = [r.gen::<f64>() * 0.5, r.gen::<f64>() * 0.5, r.gen::<f64>() * 0.5];
    let (f1, f2) = (r.gen_range(2.0..6.0) / sz, r.gen_range(2.0..6.0) / sz);
    let (ph1, ph2) = (r.gen_range(0.0..6.3), r.gen_range(0.0..6.3));
    let theta = r.gen_range(0.0..std::f64::consts::PI);
    let main = Placed {
        kind: label,
        cx: sz * r.gen_range(0.35..0.65),
        cy: sz * r.gen_range(0.35..0.65),
        size: sz * r.gen_range(0.2..0.3),
        angle: r.gen_range(-0.4..0.4),
        color: random_color(&mut r),
    };
    let mut shapes = Vec::new();
    for _ in 0..2 {
        shapes.push(Placed {
            kind: r.gen_range(0..classes),
            cx: sz * r.gen_range(0.1..0.9),
            cy: sz * r.gen_range(0.1..0.9),
            size: sz * r.gen_range(0.04..0.07),
            angle: r.gen_range(0.0..6.3),
            color: random_color(&mut r),
        });
    }
    shapes.push(main);
    let noise: Vec<f64> = (0..size * size).map(|_| r.gen::<f64>() * 0.06 - 0.03).collect();
    let mut data = vec![0.0; 3 * size * size];
    for yi in 0..size {
        for xi in 0..size {
            let (px, py) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let (u, _) = rotate(px, py, theta);
            let t = 0.5 + 0.25 * (f1 * u * std::f64::consts::TAU + ph1).sin() + 0.25 * (f2 * py * std::f64::consts::TAU + ph2).sin();
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = bg_a[c] * t + bg_b[c] * (1.0 - t) + noise[yi * size + xi];
            }
            for s in &shapes {
                let alpha = (0.5 - s.signed_distance(px, py)).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for (v, col) in rgb.iter_mut().zip(s.color) {
                        *v = *v * (1.0 - alpha) + col * alpha;
                    }
                }
            }
            for c in 0..3 {
                data[(c * size + yi) * size + xi] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(Shape::new(1, 3, size, size), data).expect("render shape")
}

/// Sample `index` of the dataset identified by `seed`; labels cycle through
/// the classes so any prefix is balanced within one.
pub fn proxy_sample(seed: u64, index: u64, image_size: usize, classes: usize) -> ProxySample {
    let label = (index % classes as u64) as usize;
    ProxySample { image: render(index, seed, image_size, label, classes), label }
}

pub fn generate_proxy_dataset(seed: u64, count: usize, image_size: usize, classes: usize) -> Result<Vec<ProxySample>> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::Config(format!("class count {classes} outside [2, {MAX_CLASSES}]")));
    }
    if image_size < 16 || !image_size.is_multiple_of(16) {
        return dim_err(format!("image size {image_size} must be a positive multiple of 16"));
    }
    Ok(parallel::map_indexed(count, |i| proxy_sample(seed, i as u64, image_size, classes)))
}

/// Images of `samples` stacked into one batch tensor, plus labels.
pub fn batch_of(samples: &[&ProxySample]) -> Result<(Tensor, Vec<usize>)> {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Ok((Tensor::stack(&imgs)?, samples.iter().map(|s| s.label).collect()))
}

// ---- network ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub classes: usize,
    pub channels: [usize; 4],
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { classes: 4, channels: [8, 16, 32, 32] }
    }
}

impl TaskConfig {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.channels;
        vec![
            LayerSpec::conv("task.c0", 3, c[0], 3, 1),
            LayerSpec::conv("task.c1", c[0], c[1], 3, 1),
            LayerSpec::conv("task.c2", c[1], c[2], 3, 1),
            LayerSpec::conv("task.c3", c[2], c[3], 3, 1),
            LayerSpec::conv("task.head", c[3], self.classes, 1, 1),
        ]
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint_of(&format!("icm-task/1;K={};ch={:?};act=leaky{LEAKY_SLOPE}", self.classes, self.channels))
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) || self.channels.contains(&0) {
            return Err(Error::Config(format!("invalid task network configuration {self:?}")));
        }
        Ok(())
    }
}

/// Graph handles of one task-network forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TaskOutputs {
    pub f2: Var,
    pub f4: Var,
    pub logits: Var,
}

pub fn task_forward(g: &mut Graph, b: &Bound, x: Var) -> Result<TaskOutputs> {
    let s = g.shape(x);
    if s.c != 3 || !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) || s.h == 0 {
        return dim_err(format!("task network needs Nx3xHxW with H, W multiples of 16, got {s}"));
    }
    // centre pixels to [-1, 1]; there is no normalization layer
    let offset = Tensor::full(s, -0.5);
    let centred = g.add_noise(x, &offset)?;
    let mut h = g.scale(centred, 2.0)?;
    let mut taps = Vec::with_capacity(4);
    for i in 0..4 {
        h = b.conv(g, &format!("task.c{i}"), h, 1, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        h = g.max_pool2(h)?;
        taps.push(h);
    }
    let pooled = g.global_avg_pool(h)?;
    let logits = b.conv(g, "task.head", pooled, 1, 0)?;
    Ok(TaskOutputs { f2: taps[1], f4: taps[3], logits })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskNetwork {
    pub config: TaskConfig,
    pub params: ModelParams,
    frozen: bool,
}

impl TaskNetwork {
    pub fn build(config: TaskConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::new(config.fingerprint());
        init_layers(&mut params, &config.layers(), seed)?;
        Ok(TaskNetwork { config, params, frozen: false })
    }

    /// Wraps loaded parameters; the result is frozen.
    pub fn from_params(config: TaskConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if params.fingerprint() != &config.fingerprint() {
            return Err(Error::FingerprintMismatch("task parameters do not match the task configuration".into()));
        }
        Ok(TaskNetwork { config, params, frozen: true })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Binds the weights as constants (never trainable once frozen).
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let trainable = !self.frozen;
        self.params.bind(g, |_| trainable)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, |_| false)?;
        let xv = g.constant(x.clone())?;
        let out = task_forward(&mut g, &b, xv)?;
        Ok(g.value(out.logits).clone())
    }

    /// `(F2, F4)`: outputs of the second and fourth pooling layers.
    pub fn feature_taps(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, |_| false)?;
        let xv = g.constant(x.clone())?;
        let out = task_forward(&mut g, &b, xv)?;
        Ok((g.value(out.f2).clone(), g.value(out.f4).clone()))
    }

    /// Argmax predictions, lowest class on ties.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok(l.data().chunks(self.config.classes).map(argmax).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of the frozen network on `xhat`; gradients flow only
/// into whatever produced `xhat`.
pub fn task_loss(g: &mut Graph, net: &TaskNetwork, xhat: Var, labels: &[usize]) -> Result<Var> {
    if !net.is_frozen() {
        return Err(Error::InvalidArgument("task loss requires a frozen network".into()));
    }
    let b = net.bind(g)?;
    let out = task_forward(g, &b, xhat)?;
    g.softmax_cross_entropy(out.logits, labels)
}

/// Fraction of correct argmax predictions.
pub fn task_metric(net: &TaskNetwork, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if images.is_empty() {
        return Ok(0.0);
    }
    let preds = parallel::map_indexed(images.len(), |i| net.predict(&images[i]));
    let mut correct = 0usize;
    for (p, &l) in preds.into_iter().zip(labels) {
        if p?[0] == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig { epochs: 12, batch_size: 16, learning_rate: 5e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskTrainReport {
    /// Mean training cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Deterministic permutation of `0..n` for `epoch`.
pub fn shuffled(n: usize, seed: u64, label: &str, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::indexed_stream(seed, label, epoch));
    idx
}

/// Trains the classifier with Adam and returns it frozen.
pub fn train_task_network(
    data: &[ProxySample],
    config: TaskConfig,
    train: &TaskTrainConfig,
) -> Result<(TaskNetwork, TaskTrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("task training set".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut net = TaskNetwork::build(config, train.seed)?;
    let mut opt = Optimizer::new(OptimizerConfig { kind: OptimizerKind::Adam, ..Default::default() });
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let order = shuffled(data.len(), train.seed, "task.shuffle", epoch as u64);
        // cosine decay to a tenth of the base rate
        let frac = epoch as f64 / train.epochs.max(1) as f64;
        let lr = train.learning_rate * (0.55 + 0.45 * (std::f64::consts::PI * frac).cos());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(train.batch_size) {
            let samples: Vec<&ProxySample> = chunk.iter().map(|&i| &data[i]).collect();
            let (x, labels) = batch_of(&samples)?;
            let mut g = Graph::new();
            let b = net.params.bind(&mut g, |_| true)?;
            let xv = g.constant(x)?;
            let out = task_forward(&mut g, &b, xv)?;
            let loss = g.softmax_cross_entropy(out.logits, &labels)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch: epoch as u32, detail: format!("task loss {lv}") });
            }
            g.backward(loss)?;
            opt.step(&mut net.params, &collect_grads(&g, &b), lr)?;
            total += lv;
            batches += 1;
        }
        epoch_loss.push(total / batches as f64);
    }
    net.freeze();
    Ok((net, TaskTrainReport { epoch_loss }))
}
