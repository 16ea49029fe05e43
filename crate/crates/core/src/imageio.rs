//! 8-bit RGB image files and on-disk datasets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::task::ProxySample;

pub const MANIFEST: &str = "labels.csv";

/// Reads a PNG or binary PPM as a `1 x 3 x H x W` tensor scaled by 1/255.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(p[c]) / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data).expect("pixel count matches shape")
}

/// Round-half-up 8-bit quantization after clamping to `[0, 1]`.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<image::RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return dim_err(format!("expected a 1x3xHxW image, got {s}"));
    }
    Ok(image::RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| to_u8(t.get(0, c, y as usize, x as usize));
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    tensor_to_rgb(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: u64,
    pub file: String,
    pub label: usize,
}

/// Writes `sample_<index>.png` files plus a `labels.csv` manifest into `dir`.
pub fn write_dataset(dir: &Path, samples: &[ProxySample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:05}.png");
        save_png(&dir.join(&file), &s.image)?;
        w.serialize(ManifestRecord { index: i as u64, file, label: s.label }).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let mut r = csv::Reader::from_path(dir.join(MANIFEST)).map_err(csv_err)?;
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<ProxySample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|rec| Ok(ProxySample { image: load_image(&dir.join(&rec.file))?, label: rec.label }))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::generate_proxy_dataset;

    #[test]
    fn dataset_round_trips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_proxy_dataset(3, 6, 32, 4).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
        assert_eq!(read_manifest(dir.path()).unwrap()[5].label, 1);
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(2.0), 255);
        assert_eq!(to_u8(1.5 / 255.0), 2);
    }
}
