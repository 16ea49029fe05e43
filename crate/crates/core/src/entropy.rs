//! Mean-scale hyperprior: hyper transforms, quantization and likelihoods.

use rand::Rng;

use crate::autodiff::{factorized_masses, round_symbol, Graph, Shape, Tensor, Var, FACTORIZED_MAX, FACTORIZED_MIN, FACTORIZED_SYMBOLS};
use crate::codec::{CodecConfig, PRIOR_LOGITS};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ModelParams, LEAKY_SLOPE};
use crate::prob;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizerMode {
    AdditiveNoise,
    Round,
}

/// Per-element Gaussian parameters of the latent.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

pub(crate) fn init_prior(p: &mut ModelParams, cfg: &CodecConfig) -> Result<()> {
    // Laplacian-shaped start so early rates are not the uniform 7 bits
    let logits = Tensor::from_fn(Shape::new(cfg.hyper_channels, FACTORIZED_SYMBOLS, 1, 1), |i| {
        let s = (i % FACTORIZED_SYMBOLS) as i32 + FACTORIZED_MIN;
        -0.5 * f64::from(s.abs())
    });
    p.insert(PRIOR_LOGITS, logits)
}

/// Uniform noise in `[-1/2, 1/2)`, drawn element by element from `rng`.
pub fn uniform_noise(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() - 0.5) as f32 as f64)
}

pub fn quantize(t: &Tensor, mode: QuantizerMode, rng: &mut impl Rng) -> Tensor {
    match mode {
        QuantizerMode::Round => t.map(round_symbol),
        QuantizerMode::AdditiveNoise => {
            let n = uniform_noise(t.shape(), rng);
            Tensor::from_fn(t.shape(), |i| t.data()[i] + n.data()[i])
        }
    }
}

/// Graph version of [`quantize`]; both modes have identity gradient.
pub fn quantize_var(g: &mut Graph, x: Var, mode: QuantizerMode, rng: &mut impl Rng) -> Result<Var> {
    match mode {
        QuantizerMode::Round => g.round_ste(x),
        QuantizerMode::AdditiveNoise => {
            let noise = uniform_noise(g.shape(x), rng);
            g.add_noise(x, &noise)
        }
    }
}

fn act(g: &mut Graph, x: Var) -> Result<Var> {
    g.leaky_relu(x, LEAKY_SLOPE)
}

pub fn hyper_encode(g: &mut Graph, b: &Bound, cfg: &CodecConfig, y: Var) -> Result<Var> {
    let s = g.shape(y);
    if s.c != cfg.latent_channels || !s.h.is_multiple_of(4) || !s.w.is_multiple_of(4) || s.h == 0 || s.w == 0 {
        return dim_err(format!("hyper encoder input {s} must have {} channels and dims divisible by 4", cfg.latent_channels));
    }
    let h = b.conv(g, "henc.c0", y, 1, 1)?;
    let h = act(g, h)?;
    let h = b.conv(g, "henc.c1", h, 2, 1)?;
    let h = act(g, h)?;
    b.conv(g, "henc.c2", h, 2, 1)
}

/// Returns `(mu, sigma)` with `sigma = softplus(raw) + 1e-6`.
pub fn hyper_decode(g: &mut Graph, b: &Bound, cfg: &CodecConfig, z: Var) -> Result<(Var, Var)> {
    let s = g.shape(z);
    if s.c != cfg.hyper_channels {
        return dim_err(format!("hyper decoder input {s} must have {} channels", cfg.hyper_channels));
    }
    let h = b.tconv(g, "hdec.c0", z, 2, 1)?;
    let h = act(g, h)?;
    let h = b.tconv(g, "hdec.c1", h, 2, 1)?;
    let h = act(g, h)?;
    let out = b.conv(g, "hdec.c2", h, 1, 1)?;
    let l = cfg.latent_channels;
    let mu = g.slice_channels(out, 0, l)?;
    let raw = g.slice_channels(out, l, l)?;
    let sigma = g.softplus(raw)?;
    Ok((mu, sigma))
}

/// Clamps rounded hyper-latents into the modelled symbol range.
pub fn clamp_hyper(z: &Tensor) -> Tensor {
    z.map(|v| v.clamp(f64::from(FACTORIZED_MIN), f64::from(FACTORIZED_MAX)))
}

/// Non-graph hyper decode of rounded hyper-latents.
pub fn gaussian_params(params: &ModelParams, cfg: &CodecConfig, zhat: &Tensor) -> Result<GaussianParams> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false)?;
    let z = g.constant(zhat.clone())?;
    let (mu, sigma) = hyper_decode(&mut g, &b, cfg, z)?;
    Ok(GaussianParams { mu: g.value(mu).clone(), sigma: g.value(sigma).clone() })
}

pub fn gaussian_likelihood(yhat: &Tensor, gp: &GaussianParams) -> Result<Tensor> {
    let mut g = Graph::with_precision(crate::autodiff::Precision::F64);
    let y = g.constant(yhat.clone())?;
    let mu = g.constant(gp.mu.clone())?;
    let s = g.constant(gp.sigma.clone())?;
    let p = g.gaussian_likelihood(y, mu, s)?;
    Ok(g.value(p).clone())
}

/// Per-channel symbol masses of the factorized prior, row-major `(Cz, symbols)`.
pub fn prior_masses(params: &ModelParams) -> Result<Vec<f64>> {
    Ok(factorized_masses(params.get(PRIOR_LOGITS)?))
}

pub fn factorized_likelihood(zhat: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::with_precision(crate::autodiff::Precision::F64);
    let z = g.constant(zhat.clone())?;
    let l = g.constant(logits.clone())?;
    let p = g.factorized_likelihood(z, l)?;
    Ok(g.value(p).clone())
}

/// `Σ -log2 P` over both tensors, divided by the batch size of `latent_p`.
pub fn rate_loss(latent_p: &Tensor, hyper_p: &Tensor) -> Result<f64> {
    let n = latent_p.shape().n.max(1);
    let mut total = 0.0;
    for t in [latent_p, hyper_p] {
        for (i, &p) in t.data().iter().enumerate() {
            if !(p > 0.0) || p > 1.0 {
                return Err(Error::Numeric(format!("probability {p} at element {i} outside (0, 1]")));
            }
            total += prob::bits(p);
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::build_codec;

    #[test]
    fn rounding_is_ties_to_even() {
        let t = Tensor::new(Shape::new(1, 1, 1, 4), vec![2.5, 3.5, -0.5, 1.2]).unwrap();
        let mut r = crate::rng::stream(0, "q");
        assert_eq!(quantize(&t, QuantizerMode::Round, &mut r).data(), &[2.0, 4.0, -0.0, 1.0]);
        let n = quantize(&t, QuantizerMode::AdditiveNoise, &mut r);
        for (a, b) in n.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5);
        }
    }

    #[test]
    fn gaussian_reference_values() {
        let s = Shape::new(1, 1, 1, 3);
        let y = Tensor::new(s, vec![0.0, 0.0, 10.0]).unwrap();
        let gp = GaussianParams {
            mu: Tensor::zeros(s),
            sigma: Tensor::new(s, vec![1.0, 0.01, 1.0]).unwrap(),
        };
        let p = gaussian_likelihood(&y, &gp).unwrap();
        assert!((p.data()[0] - 0.382_924_922_548_026).abs() < 1e-9);
        assert!((p.data()[1] - 1.0).abs() < 1e-12);
        assert_eq!(p.data()[2], prob::P_FLOOR);
    }

    #[test]
    fn rate_loss_examples() {
        let half = Tensor::full(Shape::new(1, 1, 1, 6), 0.5);
        let hyper = Tensor::full(Shape::new(1, 1, 1, 2), 0.5);
        assert_eq!(rate_loss(&half, &hyper).unwrap(), 8.0);
        let one = Tensor::full(Shape::new(1, 1, 1, 3), 1.0);
        assert_eq!(rate_loss(&one, &one).unwrap(), 0.0);
        let q = Tensor::full(Shape::new(1, 1, 1, 4), 0.25);
        let empty = Tensor::zeros(Shape::new(1, 0, 1, 1));
        assert_eq!(rate_loss(&q, &empty).unwrap(), 8.0);
        assert!(rate_loss(&Tensor::zeros(Shape::new(1, 1, 1, 1)), &empty).is_err());
    }

    #[test]
    fn hyper_shapes_and_positive_scales() {
        let cfg = CodecConfig { latent_channels: 32, ..CodecConfig::small() };
        let p = build_codec(&cfg, 4).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false).unwrap();
        let mut r = crate::rng::stream(1, "y");
        let y = g.constant(Tensor::from_fn(Shape::new(1, 32, 4, 4), |_| r.gen_range(-3.0..3.0))).unwrap();
        let z = hyper_encode(&mut g, &b, &cfg, y).unwrap();
        assert_eq!(g.shape(z), Shape::new(1, cfg.hyper_channels, 1, 1));
        let (mu, sigma) = hyper_decode(&mut g, &b, &cfg, z).unwrap();
        assert_eq!(g.shape(mu), Shape::new(1, 32, 4, 4));
        assert!(g.value(sigma).data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn prior_masses_sum_to_one() {
        let p = build_codec(&CodecConfig::small(), 0).unwrap();
        let m = prior_masses(&p).unwrap();
        for row in m.chunks(FACTORIZED_SYMBOLS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
