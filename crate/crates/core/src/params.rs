//! Named parameter sets and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub type Fingerprint = [u8; 32];

/// SHA-256 of a canonical architecture description.
pub fn fingerprint_of(descriptor: &str) -> Fingerprint {
    Sha256::digest(descriptor.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Layer name to tensor, plus the fingerprint of the architecture that
/// produced the names and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    fingerprint: Fingerprint,
}

impl ModelParams {
    pub fn new(fingerprint: Fingerprint) -> Self {
        ModelParams { tensors: BTreeMap::new(), fingerprint }
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Duplicate(format!("parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and f32 values; identifies a trained model.
    pub fn content_hash(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(self.fingerprint);
        for (name, t) in &self.tensors {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape().dims() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Inserts every tensor as a leaf; `trainable` decides which ones receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.leaf(t.clone(), trainable(name))?);
        }
        Ok(Bound { vars })
    }
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn tconv(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        g.conv_transpose2d(x, w, Some(b), stride, pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// One convolution layer of an architecture listing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        LayerSpec { name: name.into(), kind: LayerKind::Conv, cin, cout, k, stride }
    }

    pub fn tconv(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        LayerSpec { name: name.into(), kind: LayerKind::ConvTranspose, cin, cout, k, stride }
    }

    pub fn weight_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv => Shape::new(self.cout, self.cin, self.k, self.k),
            LayerKind::ConvTranspose => Shape::new(self.cin, self.cout, self.k, self.k),
        }
    }
}

/// LeakyReLU slope used by every network in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Kaiming-uniform weights and zero biases, one named stream per layer.
pub fn init_layers(params: &mut ModelParams, layers: &[LayerSpec], seed: u64) -> Result<()> {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    for l in layers {
        let fan_in = match l.kind {
            LayerKind::Conv => l.cin * l.k * l.k,
            // each output sees cin * (k / stride)^2 taps
            LayerKind::ConvTranspose => (l.cin * l.k * l.k / (l.stride * l.stride)).max(1),
        } as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let mut r = rng::stream(seed, &l.name);
        let w = Tensor::from_fn(l.weight_shape(), |_| r.gen_range(-bound..bound) as f32 as f64);
        params.insert(format!("{}.w", l.name), w)?;
        params.insert(format!("{}.b", l.name), Tensor::zeros(Shape::new(1, l.cout, 1, 1)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_count() {
        let mut p = ModelParams::new([0; 32]);
        assert_eq!(p.param_count(), 0);
        init_layers(&mut p, &[LayerSpec::conv("c", 3, 64, 3, 1)], 0).unwrap();
        assert_eq!(p.param_count(), 1792);
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut p = ModelParams::new([1; 32]);
        init_layers(&mut p, &[LayerSpec::conv("c", 2, 2, 3, 1)], 5).unwrap();
        let h = p.content_hash();
        p.get_mut("c.b").unwrap().data_mut()[0] = 1.0;
        assert_ne!(h, p.content_hash());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::new([0; 32]);
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }
}
