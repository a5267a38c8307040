//! Image ingestion, pixel/tensor conversion and layout helpers.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;

use crate::error::{LmdError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub path: PathBuf,
    pub label: Option<usize>,
    /// `H × W × 3` in `[-1, 1]`.
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
    pub target_size: (usize, usize),
    /// Sorted class directory names (labeled layout only).
    pub classes: Vec<String>,
    /// Files that looked like images but failed to decode.
    pub skipped: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.items.iter().map(|i| &i.image).collect()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|i| i.label).collect()
    }
}

fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| LmdError::io(dir, e))? {
        out.push(entry.map_err(|e| LmdError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads a flat directory of images, or a directory-per-class layout when
/// `labeled`. Items come out in lexicographic path order.
pub fn load_dataset(root: &Path, target_size: (usize, usize), labeled: bool) -> Result<ImageDataset> {
    if !root.is_dir() {
        return Err(LmdError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut candidates: Vec<(PathBuf, Option<usize>)> = Vec::new();
    let mut classes = Vec::new();
    if labeled {
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let label = classes.len();
            classes.push(dir.file_name().unwrap().to_string_lossy().into_owned());
            for p in sorted_entries(&dir)?.into_iter().filter(|p| is_image_path(p)) {
                candidates.push((p, Some(label)));
            }
        }
    } else {
        for p in sorted_entries(root)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_path(p))
        {
            candidates.push((p, None));
        }
    }
    candidates.sort_by(|a, b| a.0.cmp(&b.0));

    let mut items = Vec::with_capacity(candidates.len());
    let mut skipped = 0;
    for (path, label) in candidates {
        match image::open(&path) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let rgb = resize_bilinear(&rgb, target_size.1 as u32, target_size.0 as u32);
                items.push(DatasetItem {
                    path,
                    label,
                    image: to_tensor(&rgb),
                });
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    Ok(ImageDataset {
        root: root.to_path_buf(),
        items,
        target_size,
        classes,
        skipped,
    })
}

/// `[0, 255] → [-1, 1]`, laid out `H × W × 3`.
pub fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer")
}

/// `[-1, 1] → [0, 255]`, clamping first and rounding halves away from zero.
pub fn from_tensor(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(LmdError::shape("from_tensor", s, &[0, 0, 3]));
    }
    let raw = t
        .data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(s[1] as u32, s[0] as u32, raw).expect("sized buffer"))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    from_tensor(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| LmdError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| LmdError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(to_tensor(&img.to_rgb8()))
}

/// Bilinear resize with half-pixel centres (corners not aligned).
pub fn resize_bilinear(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (in_w, in_h) = img.dimensions();
    if (in_w, in_h) == (out_w, out_h) {
        return img.clone();
    }
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    let src = |o: u32, scale: f64, n: u32| -> (u32, u32, f64) {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as u32;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    RgbImage::from_fn(out_w, out_h, |x, y| {
        let (x0, x1, fx) = src(x, sx, in_w);
        let (y0, y1, fy) = src(y, sy, in_h);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let v = |xx, yy| img.get_pixel(xx, yy)[c] as f64;
            let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
            let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
            *out = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Mirrors an `H × W × C` tensor left to right.
pub fn hflip(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(LmdError::shape("hflip", t.shape(), &[0, 0, 0]));
    }
    let (w, c) = (t.shape()[1], t.shape()[2]);
    Ok(Tensor::from_fn(t.shape().to_vec(), |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        t.data()[(y * w + (w - 1 - x)) * c + ch]
    }))
}

/// `H × W × C` tensors → one `[B, C, H, W]` tensor.
pub fn stack_nchw(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| LmdError::InvalidArgument("empty batch".into()))?;
    if first.rank() != 3 {
        return Err(LmdError::shape("stack", first.shape(), &[0, 0, 0]));
    }
    let (h, w, c) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let mut data = Vec::with_capacity(items.len() * h * w * c);
    for t in items {
        if t.shape() != first.shape() {
            return Err(LmdError::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![items.len(), h, w, c], data)?.permute(&[0, 3, 1, 2])
}

/// Inverse of [`stack_nchw`].
pub fn unstack_nchw(t: &Tensor) -> Result<Vec<Tensor>> {
    if t.rank() != 4 {
        return Err(LmdError::shape("unstack", t.shape(), &[0, 0, 0, 0]));
    }
    let nhwc = t.permute(&[0, 2, 3, 1])?;
    let s = nhwc.shape().to_vec();
    let per = s[1] * s[2] * s[3];
    Ok(nhwc
        .data()
        .chunks(per)
        .map(|c| Tensor::new(vec![s[1], s[2], s[3]], c.to_vec()).unwrap())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_clamp() {
        let img = RgbImage::from_raw(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let t = to_tensor(&img);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[3], 1.0);
        let over = Tensor::full(vec![1, 1, 3], 1.5);
        assert_eq!(from_tensor(&over).unwrap().as_raw(), &[255, 255, 255]);
        let under = Tensor::full(vec![1, 1, 3], -7.0);
        assert_eq!(from_tensor(&under).unwrap().as_raw(), &[0, 0, 0]);
    }

    #[test]
    fn every_channel_value_round_trips() {
        let raw: Vec<u8> = (0..=255u8).flat_map(|v| [v, 255 - v, v / 2]).collect();
        let img = RgbImage::from_raw(256, 1, raw.clone()).unwrap();
        assert_eq!(from_tensor(&to_tensor(&img)).unwrap().as_raw(), &raw);
    }

    #[test]
    fn stack_round_trip() {
        let a = Tensor::from_fn(vec![2, 3, 3], |i| i as f64);
        let b = Tensor::from_fn(vec![2, 3, 3], |i| -(i as f64));
        let s = stack_nchw(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 3, 2, 3]);
        assert_eq!(unstack_nchw(&s).unwrap(), vec![a, b]);
    }

    #[test]
    fn hflip_twice_is_identity() {
        let t = Tensor::from_fn(vec![2, 3, 3], |i| i as f64);
        let f = hflip(&t).unwrap();
        assert_eq!(&f.data()[..3], &[6.0, 7.0, 8.0]);
        assert_eq!(hflip(&f).unwrap(), t);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = RgbImage::from_pixel(5, 7, Rgb([10, 20, 30]));
        assert_eq!(resize_bilinear(&img, 5, 7), img);
        let small = resize_bilinear(&img, 2, 3);
        assert!(small.pixels().all(|p| p.0 == [10, 20, 30]));
    }

    #[test]
    fn resize_half_pixel_centres() {
        // 4 -> 2 downscale samples at source 0.5 and 2.5
        let img = RgbImage::from_fn(4, 1, |x, _| Rgb([(x * 40) as u8, 0, 0]));
        let out = resize_bilinear(&img, 2, 1);
        assert_eq!(out.get_pixel(0, 0)[0], 20);
        assert_eq!(out.get_pixel(1, 0)[0], 100);
    }
}
