//! Analysis/synthesis transforms and the hyperprior networks.
//!
//! Encoder: `log2(df)` stride-2 convolutions; every stage but the last is
//! followed by an activation and `residual_blocks_per_stage` residual
//! blocks (`x + conv(act(conv(x)))`). The decoder mirrors it with
//! transposed convolutions. The hyper networks downsample the latent by a
//! further factor of 4.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{fingerprint_of, init_layers, Bound, Fingerprint, LayerSpec, ModelParams, LEAKY_SLOPE};

pub const INPUT_CHANNELS: usize = 3;
pub const HYPER_DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub base_filters: usize,
    pub downsample_factor: usize,
    pub residual_blocks_per_stage: usize,
    pub hyper_channels: usize,
    pub hyper_filters: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_channels: 128,
            base_filters: 64,
            downsample_factor: 16,
            residual_blocks_per_stage: 1,
            hyper_channels: 64,
            hyper_filters: 64,
        }
    }
}

impl CodecConfig {
    /// Small configuration used for desk-scale training runs.
    pub fn small() -> Self {
        CodecConfig {
            latent_channels: 16,
            base_filters: 12,
            downsample_factor: 8,
            residual_blocks_per_stage: 1,
            hyper_channels: 8,
            hyper_filters: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let df = self.downsample_factor;
        if df < 2 || !df.is_power_of_two() {
            return Err(Error::Config(format!("downsample_factor {df} must be a power of two >= 2")));
        }
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("base_filters", self.base_filters),
            ("hyper_channels", self.hyper_channels),
            ("hyper_filters", self.hyper_filters),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Image dimensions must be multiples of this.
    pub fn total_downsample(&self) -> usize {
        self.downsample_factor * HYPER_DOWNSAMPLE
    }

    pub fn descriptor(&self) -> String {
        format!(
            "icm-codec/1;L={};F={};df={};R={};Cz={};Fh={};act=leaky{LEAKY_SLOPE}",
            self.latent_channels,
            self.base_filters,
            self.downsample_factor,
            self.residual_blocks_per_stage,
            self.hyper_channels,
            self.hyper_filters
        )
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_of(&self.descriptor())
    }

    pub fn check_image_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = self.total_downsample();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return dim_err(format!(
                "image {w}x{h} is not a multiple of {m}; pad it to {}x{}",
                w.div_ceil(m).max(1) * m,
                h.div_ceil(m).max(1) * m
            ));
        }
        Ok(())
    }

    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> Shape {
        let df = self.downsample_factor;
        Shape::new(n, self.latent_channels, h / df, w / df)
    }

    pub fn hyper_shape(&self, n: usize, h: usize, w: usize) -> Shape {
        let m = self.total_downsample();
        Shape::new(n, self.hyper_channels, h / m, w / m)
    }

    fn residual_layers(&self, prefix: &str, out: &mut Vec<LayerSpec>) {
        let f = self.base_filters;
        for r in 0..self.residual_blocks_per_stage {
            out.push(LayerSpec::conv(format!("{prefix}.res{r}.c1"), f, f, 3, 1));
            out.push(LayerSpec::conv(format!("{prefix}.res{r}.c2"), f, f, 3, 1));
        }
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let (f, s) = (self.base_filters, self.stages());
        let mut v = Vec::new();
        for i in 0..s {
            let cin = if i == 0 { INPUT_CHANNELS } else { f };
            let cout = if i + 1 == s { self.latent_channels } else { f };
            v.push(LayerSpec::conv(format!("enc.s{i}.down"), cin, cout, 4, 2));
            if i + 1 < s {
                self.residual_layers(&format!("enc.s{i}"), &mut v);
            }
        }
        v
    }

    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let (f, s) = (self.base_filters, self.stages());
        let mut v = Vec::new();
        for i in 0..s {
            let cin = if i == 0 { self.latent_channels } else { f };
            let cout = if i + 1 == s { INPUT_CHANNELS } else { f };
            v.push(LayerSpec::tconv(format!("dec.s{i}.up"), cin, cout, 4, 2));
            if i + 1 < s {
                self.residual_layers(&format!("dec.s{i}"), &mut v);
            }
        }
        v
    }

    pub fn hyper_layers(&self) -> Vec<LayerSpec> {
        let (l, fh, cz) = (self.latent_channels, self.hyper_filters, self.hyper_channels);
        vec![
            LayerSpec::conv("henc.c0", l, fh, 3, 1),
            LayerSpec::conv("henc.c1", fh, fh, 4, 2),
            LayerSpec::conv("henc.c2", fh, cz, 4, 2),
            LayerSpec::tconv("hdec.c0", cz, fh, 4, 2),
            LayerSpec::tconv("hdec.c1", fh, fh, 4, 2),
            LayerSpec::conv("hdec.c2", fh, 2 * l, 3, 1),
        ]
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v = self.encoder_layers();
        v.extend(self.decoder_layers());
        v.extend(self.hyper_layers());
        v
    }
}

/// Name of the factorized prior's logits tensor, `(Cz, symbols, 1, 1)`.
pub const PRIOR_LOGITS: &str = "prior.logits";

/// Initializes every codec tensor: transforms, hyper networks and prior.
pub fn build_codec(config: &CodecConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut p = ModelParams::new(config.fingerprint());
    init_layers(&mut p, &config.layers(), seed)?;
    // residual branches start small so each block is close to identity
    for (name, t) in p.iter_mut() {
        if name.ends_with(".c2.w") && (name.starts_with("enc.") || name.starts_with("dec.")) {
            t.data_mut().iter_mut().for_each(|v| *v = (*v * 0.1) as f32 as f64);
        }
    }
    // start the reconstruction near mid-grey
    let last = format!("dec.s{}.up", config.stages() - 1);
    p.get_mut(&format!("{last}.b"))?.data_mut().fill(0.5);
    p.get_mut(&format!("{last}.w"))?.data_mut().iter_mut().for_each(|v| *v = (*v * 0.1) as f32 as f64);
    crate::entropy::init_prior(&mut p, config)?;
    Ok(p)
}

fn act(g: &mut Graph, x: Var) -> Result<Var> {
    g.leaky_relu(x, LEAKY_SLOPE)
}

fn residual_stack(g: &mut Graph, b: &Bound, cfg: &CodecConfig, prefix: &str, mut x: Var) -> Result<Var> {
    for r in 0..cfg.residual_blocks_per_stage {
        let h = b.conv(g, &format!("{prefix}.res{r}.c1"), x, 1, 1)?;
        let h = act(g, h)?;
        let h = b.conv(g, &format!("{prefix}.res{r}.c2"), h, 1, 1)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

/// `y = E(x)`.
pub fn encode_forward(g: &mut Graph, b: &Bound, cfg: &CodecConfig, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let df = cfg.downsample_factor;
    if s.c != INPUT_CHANNELS || !s.h.is_multiple_of(df) || !s.w.is_multiple_of(df) || s.h == 0 || s.w == 0 {
        return dim_err(format!("encoder input {s} must be Nx3xHxW with H, W multiples of {df}"));
    }
    let stages = cfg.stages();
    let offset = Tensor::full(s, -0.5);
    let mut h = g.add_noise(x, &offset)?;
    for i in 0..stages {
        h = b.conv(g, &format!("enc.s{i}.down"), h, 2, 1)?;
        if i + 1 < stages {
            h = act(g, h)?;
            h = residual_stack(g, b, cfg, &format!("enc.s{i}"), h)?;
        }
    }
    Ok(h)
}

/// `x̂ = D(ŷ)` without the output clamp.
pub fn decode_forward(g: &mut Graph, b: &Bound, cfg: &CodecConfig, y: Var) -> Result<Var> {
    let s = g.shape(y);
    if s.c != cfg.latent_channels || s.h == 0 || s.w == 0 {
        return dim_err(format!("decoder input {s} must have {} channels", cfg.latent_channels));
    }
    let stages = cfg.stages();
    let mut h = y;
    for i in 0..stages {
        h = b.tconv(g, &format!("dec.s{i}.up"), h, 2, 1)?;
        if i + 1 < stages {
            h = act(g, h)?;
            h = residual_stack(g, b, cfg, &format!("dec.s{i}"), h)?;
        }
    }
    Ok(h)
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ModelParams,
}

impl Codec {
    pub fn new(config: CodecConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if params.fingerprint() != &config.fingerprint() {
            return Err(Error::FingerprintMismatch(
                "parameters were built for a different codec configuration".into(),
            ));
        }
        Ok(Codec { config, params })
    }

    pub fn build(config: CodecConfig, seed: u64) -> Result<Self> {
        let params = build_codec(&config, seed)?;
        Ok(Codec { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, |_| false)?;
        let xv = g.constant(x.clone())?;
        let y = encode_forward(&mut g, &b, &self.config, xv)?;
        Ok(g.value(y).clone())
    }

    /// Decoded image clamped to `[0, 1]`.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, |_| false)?;
        let yv = g.constant(y.clone())?;
        let x = decode_forward(&mut g, &b, &self.config, yv)?;
        Ok(g.value(x).map(|v| v.clamp(0.0, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig {
            latent_channels: 8,
            base_filters: 16,
            downsample_factor: 4,
            residual_blocks_per_stage: 1,
            hyper_channels: 4,
            hyper_filters: 8,
        }
    }

    #[test]
    fn default_config_is_inside_budget() {
        let n = build_codec(&CodecConfig::default(), 0).unwrap().param_count();
        assert_eq!(n, 1_466_179);
    }

    #[test]
    fn tiny_count_matches_closed_form() {
        let c = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        // encoder: 3->16 down, res(16,16)x2, 16->8 down
        let enc = c(4, 3, 16) + 2 * c(3, 16, 16) + c(4, 16, 8);
        let dec = c(4, 8, 16) + 2 * c(3, 16, 16) + c(4, 16, 3);
        let hyp = c(3, 8, 8) + c(4, 8, 8) + c(4, 8, 4) + c(4, 4, 8) + c(4, 8, 8) + c(3, 8, 16);
        let prior = 4 * crate::autodiff::FACTORIZED_SYMBOLS;
        assert_eq!(build_codec(&tiny(), 1).unwrap().param_count(), enc + dec + hyp + prior);
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(build_codec(&tiny(), 9).unwrap(), build_codec(&tiny(), 9).unwrap());
        assert_ne!(build_codec(&tiny(), 9).unwrap(), build_codec(&tiny(), 10).unwrap());
    }

    #[test]
    fn shapes_follow_downsampling() {
        let cfg = CodecConfig { latent_channels: 32, downsample_factor: 16, ..tiny() };
        let codec = Codec::build(cfg, 3).unwrap();
        let x = Tensor::full(Shape::new(1, 3, 64, 64), 0.3);
        let y = codec.encode(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 32, 4, 4));
        let xh = codec.decode(&y).unwrap();
        assert_eq!(xh.shape(), Shape::new(1, 3, 64, 64));
        assert!(xh.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(codec.encode(&x).unwrap(), y);
        assert!(codec.encode(&Tensor::zeros(Shape::new(1, 3, 60, 64))).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(CodecConfig { downsample_factor: 12, ..tiny() }.validate().is_err());
        assert!(CodecConfig { latent_channels: 0, ..tiny() }.validate().is_err());
    }
}
