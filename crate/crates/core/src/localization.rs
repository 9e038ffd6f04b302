//! Weakly supervised attribute localization: pixel-level gradient activation
//! maps, thresholding and a single enclosing box per attribute.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::imaging::{quantize, resize_map};
use crate::datamodel::{BoundingBox, Dataset, Sample};
use crate::error::Result;
use crate::metrics::{iou, LocalizationReport};
use crate::model::SspNet;
use crate::nn::sigmoid;

/// `ReLU(Σ_k G^k ⊙ A^k)` with `A`, `G` as `(h, w, C)`: every pixel weighted
/// by its own gradient.
pub fn gradcam_p_map(activations: &ArrayView3<f64>, gradients: &ArrayView3<f64>) -> Array2<f64> {
    (activations * gradients).sum_axis(Axis(2)).mapv(|v| v.max(0.0))
}

/// Original Grad-CAM: channel weights are spatial means of the gradient.
pub fn gradcam_map(activations: &ArrayView3<f64>, gradients: &ArrayView3<f64>) -> Array2<f64> {
    let alpha = gradients
        .mean_axis(Axis(0))
        .unwrap()
        .mean_axis(Axis(0))
        .unwrap();
    activations
        .map_axis(Axis(2), |px| px.dot(&alpha))
        .mapv(|v| v.max(0.0))
}

/// Min-max scaling to `[0, 1]`. A map whose maximum is not positive becomes
/// all zeros; a constant positive map becomes all ones.
pub fn normalize(map: &ArrayView2<f64>) -> Array2<f64> {
    let max = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = map.fold(f64::INFINITY, |a, &b| a.min(b));
    if !(max > 0.0) {
        return Array2::zeros(map.raw_dim());
    }
    if max == min {
        return Array2::ones(map.raw_dim());
    }
    map.mapv(|v| (v - min) / (max - min))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeHeatmap {
    pub attribute: usize,
    /// Raw non-negative response on the selected level's grid.
    pub map: Array2<f64>,
    /// Normalized response resized to the image grid.
    pub upsampled: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub mask: Array2<bool>,
    pub tau: f64,
}

pub fn binarize(heatmap: &ArrayView2<f64>, tau: f64) -> BinaryMask {
    BinaryMask {
        mask: heatmap.mapv(|v| v >= tau),
        tau,
    }
}

/// Tightest half-open box around every true pixel, or `None` for an empty
/// mask. Disconnected foreground still yields one box.
pub fn external_rect(mask: &BinaryMask) -> Option<BoundingBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &on) in mask.mask.indexed_iter() {
        if !on {
            continue;
        }
        bounds = Some(match bounds {
            None => (c, r, c, r),
            Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
        });
    }
    bounds.map(|(x0, y0, x1, y1)| BoundingBox::new(x0, y0, x1 + 1, y1 + 1))
}

fn heatmap_from(attribute: usize, raw: Array2<f64>, height: usize, width: usize) -> AttributeHeatmap {
    let norm = normalize(&raw.view());
    let upsampled = resize_map(&norm.view(), height, width).mapv(|v| v.clamp(0.0, 1.0));
    AttributeHeatmap {
        attribute,
        map: raw,
        upsampled,
    }
}

/// Pixel-level gradient heatmap of attribute `j` on the selected level, plus
/// the attribute's logit.
pub fn gradcam_p(model: &SspNet, sample: &Sample, j: usize) -> Result<(AttributeHeatmap, f64)> {
    let (a, g, logit) = model.attribute_gradient(sample, j)?;
    let raw = gradcam_p_map(&a.view(), &g.view());
    Ok((heatmap_from(j, raw, sample.height(), sample.width()), logit))
}

/// Channel-averaged counterpart of [`gradcam_p`].
pub fn gradcam(model: &SspNet, sample: &Sample, j: usize) -> Result<(AttributeHeatmap, f64)> {
    let (a, g, logit) = model.attribute_gradient(sample, j)?;
    let raw = gradcam_map(&a.view(), &g.view());
    Ok((heatmap_from(j, raw, sample.height(), sample.width()), logit))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
    pub confidence: f64,
}

/// Heatmap, binarize at `tau`, enclose; confidence is the sigmoid of the
/// attribute logit.
pub fn localize(
    model: &SspNet,
    sample: &Sample,
    attributes: &[usize],
    tau: f64,
) -> Result<IndexMap<usize, Localization>> {
    Ok(localize_sweep(model, sample, attributes, &[tau])?
        .pop()
        .unwrap())
}

/// [`localize`] at several thresholds; heatmaps are computed once.
pub fn localize_sweep(
    model: &SspNet,
    sample: &Sample,
    attributes: &[usize],
    taus: &[f64],
) -> Result<Vec<IndexMap<usize, Localization>>> {
    Ok(localize_with_heatmaps(model, sample, attributes, taus)?.1)
}

/// [`localize_sweep`] that also returns the heatmaps, in `attributes` order.
pub fn localize_with_heatmaps(
    model: &SspNet,
    sample: &Sample,
    attributes: &[usize],
    taus: &[f64],
) -> Result<(Vec<AttributeHeatmap>, Vec<IndexMap<usize, Localization>>)> {
    let maps = attributes
        .iter()
        .map(|&j| gradcam_p(model, sample, j))
        .collect::<Result<Vec<_>>>()?;
    let located = taus
        .iter()
        .map(|&tau| {
            maps.iter()
                .map(|(h, logit)| {
                    let mask = binarize(&h.upsampled.view(), tau);
                    (
                        h.attribute,
                        Localization {
                            bbox: external_rect(&mask),
                            confidence: sigmoid(*logit),
                        },
                    )
                })
                .collect()
        })
        .collect();
    Ok((maps.into_iter().map(|(h, _)| h).collect(), located))
}

/// Localization quality on every positive attribute that has a
/// ground-truth box: per threshold, `(confidence, IoU)` pairs summarized per
/// attribute. A missing predicted box scores IoU 0.
pub fn evaluate_localization(
    model: &SspNet,
    data: &Dataset,
    taus: &[f64],
) -> Result<Vec<LocalizationReport>> {
    let pairs = localization_pairs(model, data, taus)?;
    Ok(taus
        .iter()
        .zip(&pairs)
        .map(|(&tau, p)| LocalizationReport::from_pairs(&data.schema.attributes, p, tau))
        .collect())
}

/// Raw `(confidence, IoU)` pairs, indexed `[tau][attribute]`.
pub fn localization_pairs(
    model: &SspNet,
    data: &Dataset,
    taus: &[f64],
) -> Result<Vec<Vec<Vec<(f64, f64)>>>> {
    let m = data.schema.num_attributes();
    let mut pairs = vec![vec![Vec::new(); m]; taus.len()];
    for sample in &data.samples {
        let attrs: Vec<usize> = sample
            .gt_boxes
            .keys()
            .copied()
            .filter(|&j| sample.labels[j] == 1)
            .collect();
        let located = localize_sweep(model, sample, &attrs, taus)?;
        for (t, per_attr) in located.iter().enumerate() {
            for (&j, loc) in per_attr {
                let score = loc.bbox.map_or(0.0, |b| iou(&b, &sample.gt_boxes[&j]));
                pairs[t][j].push((loc.confidence, score));
            }
        }
    }
    Ok(pairs)
}

/// Heatmap in red with per-pixel alpha over the grayscale image, the box
/// stroked in green.
pub fn render_overlay(
    image: &ArrayView3<f64>,
    heatmap: &ArrayView2<f64>,
    bbox: Option<BoundingBox>,
) -> image::RgbImage {
    let (h, w, _) = image.dim();
    let mut out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let gray = 0.299 * image[[y, x, 0]] + 0.587 * image[[y, x, 1]] + 0.114 * image[[y, x, 2]];
        let a = heatmap[[y, x]].clamp(0.0, 1.0) * 0.6;
        image::Rgb([
            quantize(gray * (1.0 - a) + a),
            quantize(gray * (1.0 - a)),
            quantize(gray * (1.0 - a)),
        ])
    });
    if let Some(b) = bbox {
        let green = image::Rgb([0, 255, 0]);
        for x in b.x_min..b.x_max {
            out.put_pixel(x as u32, b.y_min as u32, green);
            out.put_pixel(x as u32, (b.y_max - 1) as u32, green);
        }
        for y in b.y_min..b.y_max {
            out.put_pixel(b.x_min as u32, y as u32, green);
            out.put_pixel((b.x_max - 1) as u32, y as u32, green);
        }
    }
    out
}
