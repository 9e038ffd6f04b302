//! Image decoding, encoding and bilinear resampling.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Source coordinate and blend weight for half-pixel-centred resampling.
fn source_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize of a channel-last image.
pub fn resize_bilinear(img: &ArrayView3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    if (h, w) == (height, width) {
        return img.to_owned();
    }
    let rows: Vec<_> = (0..height).map(|y| source_taps(y, h, height)).collect();
    let cols: Vec<_> = (0..width).map(|x| source_taps(x, w, width)).collect();
    Array3::from_shape_fn((height, width, c), |(y, x, ch)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
        let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Bilinear resize of a single-channel map.
pub fn resize_map(map: &ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let img = map.to_owned().into_shape_with_order((h, w, 1)).unwrap();
    resize_bilinear(&img.view(), height, width)
        .into_shape_with_order((height, width))
        .unwrap()
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let raw = rgb.into_raw();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        raw[(y * w as usize + x) * 3 + c] as f64 / 255.0
    }))
}

pub fn to_rgb8(img: &ArrayView3<f64>) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            quantize(img[[y, x, 0]]),
            quantize(img[[y, x, 1]]),
            quantize(img[[y, x, 2]]),
        ])
    })
}

pub fn save_png(img: &ArrayView3<f64>, path: &Path) -> Result<()> {
    to_rgb8(img).save(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let img = Array3::from_shape_fn((4, 3, 3), |(y, x, c)| (y + x + c) as f64 / 10.0);
        assert_eq!(resize_bilinear(&img.view(), 4, 3), img);
    }

    #[test]
    fn upsampling_a_constant_stays_constant() {
        let map = Array2::from_elem((2, 3), 0.7);
        let up = resize_map(&map.view(), 8, 12);
        assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let map = Array2::from_shape_vec((1, 4), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let down = resize_map(&map.view(), 1, 2);
        assert!((down[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((down[[0, 1]] - 2.5).abs() < 1e-12);
    }
}
