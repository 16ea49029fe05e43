//! Image to bitstream and back.

use crate::autodiff::{round_symbol, Graph, Shape, Tensor};
use crate::bitstream::Bitstream;
use crate::codec::{encode_forward, Codec};
use crate::coding;
use crate::entropy::{self, clamp_hyper, gaussian_params, hyper_encode};
use crate::error::{dim_err, Error, Result};
use crate::parallel;

/// An encoded image together with the quantized tensors it carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub bitstream: Bitstream,
    pub yhat: Tensor,
    pub zhat: Tensor,
}

impl Encoded {
    pub fn bpp(&self) -> f64 {
        self.bitstream.bpp().expect("encoded images have positive dimensions")
    }
}

fn single_image(x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.n != 1 || s.c != 3 {
        return dim_err(format!("expected a 1x3xHxW image, got {s}"));
    }
    Ok((s.h, s.w))
}

/// Rounded hyper-latent for a (continuous) latent.
pub fn hyper_latent(codec: &Codec, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = codec.params.bind(&mut g, |_| false)?;
    let yv = g.constant(y.clone())?;
    let z = hyper_encode(&mut g, &b, &codec.config, yv)?;
    Ok(clamp_hyper(&g.value(z).map(round_symbol)))
}

pub fn encode_image(codec: &Codec, x: &Tensor) -> Result<Encoded> {
    let (h, w) = single_image(x)?;
    codec.config.check_image_dims(h, w)?;
    let mut g = Graph::new();
    let b = codec.params.bind(&mut g, |_| false)?;
    let xv = g.constant(x.clone())?;
    let y = encode_forward(&mut g, &b, &codec.config, xv)?;
    let y = g.value(y).clone();
    encode_latent(codec, &y, w, h)
}

/// Quantizes and entropy-codes a continuous latent of a `width x height` image.
pub fn encode_latent(codec: &Codec, y: &Tensor, width: usize, height: usize) -> Result<Encoded> {
    let expect = codec.config.latent_shape(1, height, width);
    if y.shape() != expect {
        return dim_err(format!("latent {} does not match {expect} for a {width}x{height} image", y.shape()));
    }
    let zhat = hyper_latent(codec, y)?;
    let yhat = y.map(round_symbol);
    encode_quantized(codec, yhat, zhat, width, height)
}

pub fn encode_quantized(codec: &Codec, yhat: Tensor, zhat: Tensor, width: usize, height: usize) -> Result<Encoded> {
    let gp = gaussian_params(&codec.params, &codec.config, &zhat)?;
    let tables = coding::hyper_tables(&entropy::prior_masses(&codec.params)?)?;
    let dims = |s: Shape| [s.c as u32, s.h as u32, s.w as u32];
    let bitstream = Bitstream {
        width: width as u32,
        height: height as u32,
        latent_shape: dims(yhat.shape()),
        hyper_shape: dims(zhat.shape()),
        model_id: codec.params.content_hash(),
        hyper_payload: coding::encode_hyper(&zhat, &tables)?,
        latent_payload: coding::encode_latent(&yhat, &gp)?,
    };
    Ok(Encoded { bitstream, yhat, zhat })
}

/// Recovers `(ŷ, ẑ)` from a container produced by the same model.
pub fn decode_latents(codec: &Codec, bs: &Bitstream) -> Result<(Tensor, Tensor)> {
    if bs.model_id != codec.params.content_hash() {
        return Err(Error::FingerprintMismatch(format!(
            "bitstream was produced by model {}, decoder has {}",
            crate::params::hex(&bs.model_id[..8]),
            crate::params::hex(&codec.params.content_hash()[..8])
        )));
    }
    let (w, h) = (bs.width as usize, bs.height as usize);
    codec.config.check_image_dims(h, w).map_err(|e| Error::CorruptStream(e.to_string()))?;
    let ls = codec.config.latent_shape(1, h, w);
    let hs = codec.config.hyper_shape(1, h, w);
    let shape_of = |d: [u32; 3]| Shape::new(1, d[0] as usize, d[1] as usize, d[2] as usize);
    if shape_of(bs.latent_shape) != ls || shape_of(bs.hyper_shape) != hs {
        return Err(Error::CorruptStream("declared tensor shapes do not match the image size".into()));
    }
    let tables = coding::hyper_tables(&entropy::prior_masses(&codec.params)?)?;
    let zhat = coding::decode_hyper(&bs.hyper_payload, &tables, hs)?;
    let gp = gaussian_params(&codec.params, &codec.config, &zhat)?;
    let yhat = coding::decode_latent(&bs.latent_payload, &gp)?;
    Ok((yhat, zhat))
}

pub fn decode_image(codec: &Codec, bs: &Bitstream) -> Result<Tensor> {
    let (yhat, _) = decode_latents(codec, bs)?;
    codec.decode(&yhat)
}

/// Parses, entropy-decodes and re-encodes a serialized container.
pub fn reencode(codec: &Codec, bytes: &[u8]) -> Result<Vec<u8>> {
    let bs = Bitstream::parse(bytes)?;
    let (yhat, zhat) = decode_latents(codec, &bs)?;
    let again = encode_quantized(codec, yhat, zhat, bs.width as usize, bs.height as usize)?;
    Ok(again.bitstream.serialize())
}

/// Rate estimate in bits `(latent, hyper)` from the quantized coding tables.
pub fn estimated_bits(codec: &Codec, yhat: &Tensor, zhat: &Tensor) -> Result<(f64, f64)> {
    let gp = gaussian_params(&codec.params, &codec.config, zhat)?;
    let tables = coding::hyper_tables(&entropy::prior_masses(&codec.params)?)?;
    let lp = coding::latent_probabilities(yhat, &gp)?;
    let hp = coding::hyper_probabilities(zhat, &tables)?;
    let empty = Tensor::zeros(Shape::new(1, 0, 1, 1));
    Ok((entropy::rate_loss(&lp, &empty)?, entropy::rate_loss(&hp, &empty)?))
}

/// Encodes independent images, in parallel when enabled.
pub fn encode_batch(codec: &Codec, images: &[Tensor]) -> Vec<Result<Encoded>> {
    parallel::map_indexed(images.len(), |i| encode_image(codec, &images[i]))
}
