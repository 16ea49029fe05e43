//! Per-image optimization of the latent through the frozen decoder and
//! entropy model.
//!
//! The objective is `w_rate * rate + w_p * L_p`, where `L_p` compares task
//! network features of the original and the reconstruction. Rounding uses a
//! straight-through estimator so the forward pass sees exactly the tensors
//! the bitstream will carry. Labels are never consulted.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::autodiff::{FACTORIZED_MAX, FACTORIZED_MIN};
use crate::codec::{decode_forward, Codec, PRIOR_LOGITS};
use crate::entropy::{hyper_decode, hyper_encode};
use crate::error::{Error, Result};
use crate::imageio::csv_err;
use crate::task::{task_forward, TaskNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub w_rate: f64,
    pub w_p: f64,
    pub iterations: usize,
    /// Largest per-element move of the first trial step.
    pub step_size: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { w_rate: 1.0, w_p: 0.1, iterations: 30, step_size: 1.0, backtrack: 0.5, max_halvings: 8 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_rate >= 0.0
            && self.w_p >= 0.0
            && self.step_size > 0.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid fine-tuning configuration {self:?}")));
        }
        Ok(())
    }
}

/// `L_p = (ΣΔF2² + ΣΔF4²) / N` with the original's features as constants.
pub fn proxy_feature_loss(g: &mut Graph, extractor: &TaskNetwork, x: &Tensor, xhat: Var) -> Result<Var> {
    if !extractor.is_frozen() {
        return Err(Error::InvalidArgument("feature extractor must be frozen".into()));
    }
    if g.shape(xhat) != x.shape() {
        return Err(Error::Dimension(format!("original {} vs reconstruction {}", x.shape(), g.shape(xhat))));
    }
    let (t2, t4) = extractor.feature_taps(x)?;
    let b = extractor.bind(g)?;
    let out = task_forward(g, &b, xhat)?;
    let c2 = g.constant(t2)?;
    let c4 = g.constant(t4)?;
    let l2 = g.mse_loss(out.f2, c2)?;
    let l4 = g.mse_loss(out.f4, c4)?;
    g.add(l2, l4)
}

/// Value of [`proxy_feature_loss`] for two images.
pub fn proxy_feature_distance(extractor: &TaskNetwork, x: &Tensor, xhat: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(xhat.clone())?;
    let l = proxy_feature_loss(&mut g, extractor, x, v)?;
    Ok(g.value(l).item())
}

/// Builds `L_inf` for latent `y` (a graph leaf) and returns it.
fn objective(g: &mut Graph, codec: &Codec, extractor: &TaskNetwork, x: &Tensor, y: Var, cfg: &FinetuneConfig) -> Result<Var> {
    let c = &codec.config;
    let b = codec.params.bind(g, |_| false)?;
    let yhat = g.round_ste(y)?;
    let z = hyper_encode(g, &b, c, y)?;
    let zr = g.round_ste(z)?;
    let zhat = g.clamp_ste(zr, f64::from(FACTORIZED_MIN), f64::from(FACTORIZED_MAX))?;
    let (mu, sigma) = hyper_decode(g, &b, c, zhat)?;
    let py = g.gaussian_likelihood(yhat, mu, sigma)?;
    let pz = g.factorized_likelihood(zhat, b.var(PRIOR_LOGITS)?)?;
    let n = g.shape(y).n;
    let rate = g.rate_bits(&[py, pz], n)?;
    let xhat = decode_forward(g, &b, c, yhat)?;
    let xhat = g.clamp_ste(xhat, 0.0, 1.0)?;
    let lp = proxy_feature_loss(g, extractor, x, xhat)?;
    let r = g.scale(rate, cfg.w_rate)?;
    let p = g.scale(lp, cfg.w_p)?;
    g.add(r, p)
}

/// `(L_inf, dL_inf/dy)` at `y`.
pub fn objective_and_grad(codec: &Codec, extractor: &TaskNetwork, x: &Tensor, y: &Tensor, cfg: &FinetuneConfig) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let yv = g.leaf(y.clone(), true)?;
    let l = objective(&mut g, codec, extractor, x, yv, cfg)?;
    let value = g.value(l).item();
    g.backward(l)?;
    let grad = g.grad(yv).cloned().unwrap_or_else(|| Tensor::zeros(y.shape()));
    Ok((value, grad))
}

pub fn objective_value(codec: &Codec, extractor: &TaskNetwork, x: &Tensor, y: &Tensor, cfg: &FinetuneConfig) -> Result<f64> {
    let mut g = Graph::new();
    let yv = g.constant(y.clone())?;
    let l = objective(&mut g, codec, extractor, x, yv, cfg)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub y: Tensor,
    /// `L_inf` before the first iteration and after each one.
    pub trace: Vec<f64>,
}

/// Gradient descent on `y` with a backtracking line search: each iteration
/// tries a max-norm-normalized step and halves it until `L_inf` strictly
/// drops, keeping `y` unchanged if no trial succeeds.
pub fn finetune_latent(codec: &Codec, extractor: &TaskNetwork, x: &Tensor, y: &Tensor, cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    cfg.validate()?;
    let mut y = y.clone();
    let (mut current, mut grad) = objective_and_grad(codec, extractor, x, &y, cfg)?;
    if !current.is_finite() {
        return Err(Error::Numeric(format!("initial objective is {current}")));
    }
    let mut trace = vec![current];
    for _ in 0..cfg.iterations {
        let gmax = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut accepted = None;
        if gmax > 0.0 && gmax.is_finite() {
            let mut step = cfg.step_size / gmax;
            for _ in 0..=cfg.max_halvings {
                let trial = Tensor::from_fn(y.shape(), |i| (y.data()[i] - step * grad.data()[i]) as f32 as f64);
                // a failed evaluation counts as no improvement
                if let Ok(v) = objective_value(codec, extractor, x, &trial, cfg) {
                    if v.is_finite() && v < current {
                        accepted = Some(trial);
                        break;
                    }
                }
                step *= cfg.backtrack;
            }
        }
        if let Some(t) = accepted {
            match objective_and_grad(codec, extractor, x, &t, cfg) {
                Ok((v, g)) if v.is_finite() => {
                    y = t;
                    current = v;
                    grad = g;
                }
                _ => {
                    trace.push(current);
                    break;
                }
            }
        }
        trace.push(current);
    }
    Ok(FinetuneResult { y, trace })
}

/// One row of the before/after comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub set: String,
    pub n_images: usize,
    pub bpp_before: f64,
    pub bpp_after: f64,
    pub metric_before: f64,
    pub metric_after: f64,
}

impl FinetuneRow {
    pub fn bpp_delta(&self) -> f64 {
        self.bpp_after - self.bpp_before
    }

    pub fn metric_delta(&self) -> f64 {
        self.metric_after - self.metric_before
    }
}

/// Builds a row from per-image `(bpp, correct)` measurements.
pub fn finetune_report(set: &str, before: &[(f64, f64)], after: &[(f64, f64)]) -> Result<FinetuneRow> {
    if before.len() != after.len() {
        return Err(Error::InvalidArgument(format!("{} images before but {} after", before.len(), after.len())));
    }
    if before.is_empty() {
        return Err(Error::Empty("fine-tuning report".into()));
    }
    let n = before.len() as f64;
    let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / n;
    Ok(FinetuneRow {
        set: set.to_string(),
        n_images: before.len(),
        bpp_before: mean(before, |p| p.0),
        bpp_after: mean(after, |p| p.0),
        metric_before: mean(before, |p| p.1),
        metric_after: mean(after, |p| p.1),
    })
}

pub fn emit_report(rows: &[FinetuneRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["set", "n_images", "bpp_before", "bpp_after", "metric_before", "metric_after"]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn parse_report(text: &str) -> Result<Vec<FinetuneRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Text table with base and fine-tuned columns, three decimals.
pub fn render_report(rows: &[FinetuneRow], metric_name: &str) -> String {
    let mut s = format!(
        "{:<12} | {:>8} {:>8} | {:>8} {:>8}\n",
        "Rate range", "BPP", metric_name, "BPP", metric_name
    );
    s.push_str(&format!("{:<12} | {:^17} | {:^17}\n", "", "Base model", "Fine-tuned"));
    for r in rows {
        s.push_str(&format!(
            "{:<12} | {:>8.3} {:>8.3} | {:>8.3} {:>8.3}\n",
            r.set, r.bpp_before, r.metric_before, r.bpp_after, r.metric_after
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(set: &str, b: f64, m: f64, b2: f64, m2: f64) -> FinetuneRow {
        FinetuneRow { set: set.into(), n_images: 10, bpp_before: b, bpp_after: b2, metric_before: m, metric_after: m2 }
    }

    #[test]
    fn report_round_trip_and_layout() {
        let rows = vec![row("Low", 0.054, 0.162, 0.052, 0.162), row("High", 0.301, 0.209, 0.282, 0.222)];
        let text = emit_report(&rows).unwrap();
        assert_eq!(parse_report(&text).unwrap(), rows);
        let table = render_report(&rows, "AP");
        assert!(table.lines().nth(2).unwrap().contains("0.054    0.162 |    0.052    0.162"));
        assert!(emit_report(&[]).unwrap().starts_with("set,n_images"));
    }

    #[test]
    fn identical_measurements_give_zero_delta() {
        let m = [(0.3, 1.0), (0.5, 0.0)];
        let r = finetune_report("all", &m, &m).unwrap();
        assert_eq!((r.bpp_delta(), r.metric_delta()), (0.0, 0.0));
        assert_eq!(r.bpp_before, 0.4);
        assert!(finetune_report("all", &m, &m[..1]).is_err());
    }
}
