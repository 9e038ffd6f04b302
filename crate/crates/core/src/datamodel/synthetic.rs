use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::imaging::quantize;
use super::{
    default_keypoint_groups, default_prior_regions, AttributeSchema, BoundingBox, Dataset, Group,
    Keypoint, PriorRegion, Sample, Split, NUM_KEYPOINTS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchTexture {
    Solid,
    /// Horizontal one-pixel stripes alternating the colour with black.
    Stripes,
    /// One-pixel checkerboard of the colour and its complement.
    Checker,
    /// Additive colour offset over the whole image; the patch size is ignored.
    Cast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDescriptor {
    pub color: [f64; 3],
    /// `[height, width]` in pixels.
    pub size: [usize; 2],
    pub texture: PatchTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAttribute {
    pub name: String,
    pub group: String,
    pub patch: PatchDescriptor,
    pub presence: f64,
    /// Probability that a negative sample carries the same patch outside the
    /// group's band.
    #[serde(default)]
    pub distractor: f64,
    /// Range of the per-sample blend weight of the patch over the image.
    #[serde(default = "full_opacity")]
    pub opacity: [f64; 2],
    /// Range of the per-sample size multiplier of the patch.
    #[serde(default = "full_opacity")]
    pub scale: [f64; 2],
}

fn full_opacity() -> [f64; 2] {
    [1.0, 1.0]
}

/// Description of a synthetic pedestrian dataset with planted attribute
/// patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub attributes: Vec<SyntheticAttribute>,
    /// Half-width of the uniform pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Random-coloured background blobs per image (2 to 5 pixels a side).
    #[serde(default)]
    pub clutter: usize,
    #[serde(default)]
    pub prior_regions: Option<IndexMap<Group, PriorRegion>>,
}

fn default_noise() -> f64 {
    0.04
}

fn attr(name: &str, group: Group, color: [f64; 3], size: [usize; 2], texture: PatchTexture, distractor: f64) -> SyntheticAttribute {
    SyntheticAttribute {
        name: name.into(),
        group: group.name().into(),
        patch: PatchDescriptor {
            color,
            size,
            texture,
        },
        presence: 0.5,
        distractor,
        opacity: full_opacity(),
        scale: full_opacity(),
    }
}

impl SyntheticSpec {
    /// Eight attributes, two per group, on 64x48 images. Part attributes
    /// appear as distractors outside their band in some negatives; every
    /// patch is blended in with a per-sample opacity in [0.5, 1] and resized
    /// by a per-sample factor in [0.7, 1.4].
    pub fn standard(num_samples: usize) -> Self {
        use PatchTexture::*;
        let mut spec = Self {
            num_samples,
            image_size: [64, 48],
            attributes: vec![
                attr("Hat", Group::Head, [0.9, 0.15, 0.15], [6, 10], Solid, 0.3),
                attr("Glasses", Group::Head, [0.1, 0.15, 0.85], [4, 10], Stripes, 0.3),
                attr("UpperLogo", Group::Torso, [0.95, 0.85, 0.1], [8, 8], Solid, 0.3),
                attr("UpperPlaid", Group::Torso, [0.1, 0.75, 0.2], [8, 10], Checker, 0.3),
                attr("Boots", Group::Bottom, [0.8, 0.1, 0.8], [6, 10], Solid, 0.3),
                attr("LowerStripe", Group::Bottom, [0.1, 0.8, 0.85], [10, 10], Stripes, 0.3),
                attr("HandBag", Group::All, [0.95, 0.95, 0.95], [12, 10], Checker, 0.0),
                attr("LongCoat", Group::All, [0.55, 0.35, 0.2], [24, 18], Solid, 0.0),
            ],
            noise: default_noise(),
            clutter: 3,
            prior_regions: None,
        };
        for a in &mut spec.attributes {
            a.opacity = [0.5, 1.0];
            a.scale = [0.7, 1.4];
        }
        spec
    }

    /// A fine 2x2 white mark in the head band against a faint global
    /// colour cast.
    pub fn scale_contrast(num_samples: usize) -> Self {
        use PatchTexture::*;
        Self {
            num_samples,
            image_size: [64, 48],
            attributes: vec![
                attr("Earring", Group::Head, [1.0, 1.0, 1.0], [2, 2], Solid, 0.0),
                attr("WarmLight", Group::All, [0.02, 0.01, -0.02], [64, 48], Cast, 0.0),
            ],
            noise: 0.08,
            clutter: 0,
            prior_regions: None,
        }
    }

    /// The schema implied by this spec: attributes in declaration order,
    /// default band priors and keypoint sets.
    pub fn schema(&self) -> Result<AttributeSchema> {
        let mut groups: IndexMap<Group, Vec<usize>> = IndexMap::new();
        for (i, a) in self.attributes.iter().enumerate() {
            let g: Group = a.group.parse().map_err(|_| {
                Error::Validation(format!("attribute {} bound to unknown group {:?}", a.name, a.group))
            })?;
            groups.entry(g).or_default().push(i);
        }
        groups.sort_keys();
        let regions = self.prior_regions.clone().unwrap_or_else(default_prior_regions);
        let prior_regions = groups.keys().map(|g| (*g, regions.get(g).copied().unwrap_or(PriorRegion::FULL))).collect();
        let kp = default_keypoint_groups();
        let keypoint_groups = groups.keys().map(|g| (*g, kp[g].clone())).collect();
        let schema = AttributeSchema {
            attributes: self.attributes.iter().map(|a| a.name.clone()).collect(),
            groups,
            prior_regions,
            keypoint_groups,
            input_size: self.image_size,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<AttributeSchema> {
        if self.num_samples == 0 {
            return Err(Error::Validation("num_samples must be positive".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Validation("no attributes declared".into()));
        }
        let schema = self.schema()?;
        let [h, w] = self.image_size;
        for a in &self.attributes {
            let [lo, hi] = a.opacity;
            let [slo, shi] = a.scale;
            if !(0.0..=1.0).contains(&a.presence)
                || !(0.0..=1.0).contains(&a.distractor)
                || !(0.0 <= lo && lo <= hi && hi <= 1.0)
                || !(0.0 < slo && slo <= shi)
            {
                return Err(Error::Validation(format!("attribute {} has a probability outside [0, 1] or an invalid scale range", a.name)));
            }
            if a.patch.texture == PatchTexture::Cast {
                continue;
            }
            let [ph, pw] = a.patch.size;
            let g: Group = a.group.parse()?;
            let band = schema.region(g).rows(h);
            if ph == 0 || pw == 0 || ph > band.len() || pw > w {
                return Err(Error::Validation(format!(
                    "patch {}x{} of {} does not fit its {} band of {} rows",
                    ph, pw, a.name, g, band.len()
                )));
            }
        }
        Ok(schema)
    }
}

// Canonical 16-point layout as (x, y) fractions of the image.
const SKELETON: [(f64, f64); NUM_KEYPOINTS] = [
    (0.43, 0.93), // 0 r ankle
    (0.43, 0.74), // 1 r knee
    (0.44, 0.54), // 2 r hip
    (0.56, 0.54), // 3 l hip
    (0.57, 0.74), // 4 l knee
    (0.57, 0.93), // 5 l ankle
    (0.50, 0.53), // 6 pelvis
    (0.50, 0.24), // 7 thorax
    (0.50, 0.17), // 8 upper neck
    (0.50, 0.05), // 9 head top
    (0.31, 0.52), // 10 r wrist
    (0.34, 0.39), // 11 r elbow
    (0.38, 0.25), // 12 r shoulder
    (0.62, 0.25), // 13 l shoulder
    (0.66, 0.39), // 14 l elbow
    (0.69, 0.52), // 15 l wrist
];

const LIMBS: [(usize, usize); 14] = [
    (0, 1),
    (1, 2),
    (2, 6),
    (6, 3),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (8, 9),
    (7, 12),
    (12, 11),
    (11, 10),
    (7, 13),
    (13, 14),
];

fn draw_segment(img: &mut Array3<f64>, a: (f64, f64), b: (f64, f64), radius: f64, color: [f64; 3]) {
    let (h, w, _) = img.dim();
    let (ax, ay) = a;
    let (bx, by) = b;
    let x0 = (ax.min(bx) - radius).floor().max(0.0) as usize;
    let x1 = ((ax.max(bx) + radius).ceil() as usize).min(w - 1);
    let y0 = (ay.min(by) - radius).floor().max(0.0) as usize;
    let y1 = ((ay.max(by) + radius).ceil() as usize).min(h - 1);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = (dx * dx + dy * dy).max(1e-9);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
            if cx * cx + cy * cy <= radius * radius {
                for c in 0..3 {
                    img[[y, x, c]] = color[c];
                }
            }
        }
    }
}

fn paint_patch(img: &mut Array3<f64>, b: &BoundingBox, patch: &PatchDescriptor, alpha: f64) {
    for y in b.y_min..b.y_max {
        for x in b.x_min..b.x_max {
            let (dy, dx) = (y - b.y_min, x - b.x_min);
            let px = match patch.texture {
                PatchTexture::Solid | PatchTexture::Cast => patch.color,
                PatchTexture::Stripes => {
                    if dy % 2 == 0 {
                        patch.color
                    } else {
                        [0.0; 3]
                    }
                }
                PatchTexture::Checker => {
                    if (dx + dy) % 2 == 0 {
                        patch.color
                    } else {
                        patch.color.map(|c| 1.0 - c)
                    }
                }
            };
            for c in 0..3 {
                img[[y, x, c]] = alpha * px[c] + (1.0 - alpha) * img[[y, x, c]];
            }
        }
    }
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

/// Rejection-samples a patch position with rows drawn from `rows` and
/// columns from `cols` (widened to the full `width` when the patch does not
/// fit), avoiding `taken` when possible.
fn place<R: Rng>(
    rng: &mut R,
    rows: &[std::ops::Range<usize>],
    cols: std::ops::Range<usize>,
    size: [usize; 2],
    width: usize,
    taken: &[BoundingBox],
) -> Option<BoundingBox> {
    let [ph, pw] = size;
    let candidates: Vec<&std::ops::Range<usize>> = rows.iter().filter(|r| r.len() >= ph).collect();
    if candidates.is_empty() || pw > width {
        return None;
    }
    let cols = if cols.len() >= pw { cols } else { 0..width };
    let mut last = None;
    for _ in 0..24 {
        let band = candidates[rng.gen_range(0..candidates.len())];
        let y = rng.gen_range(band.start..=band.end - ph);
        let x = rng.gen_range(cols.start..=cols.end - pw);
        let b = BoundingBox::new(x, y, x + pw, y + ph);
        if !taken.iter().any(|t| overlaps(t, &b)) {
            return Some(b);
        }
        last = Some(b);
    }
    last
}

/// Draws a dataset from `spec`. The output is a pure function of
/// `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let schema = spec.validate()?;
    let [h, w] = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Group> = spec
        .attributes
        .iter()
        .map(|a| a.group.parse())
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(spec.num_samples);
    for _ in 0..spec.num_samples {
        let base = rng.gen_range(0.35..0.55);
        let mut img = Array3::from_elem((h, w, 3), base);

        let shift_x = rng.gen_range(-0.05..0.05);
        let shift_y = rng.gen_range(-0.015..0.015);
        let keypoints: Vec<Keypoint> = SKELETON
            .iter()
            .map(|&(fx, fy)| {
                let x = (fx + shift_x + rng.gen_range(-0.02..0.02)) * w as f64;
                let y = (fy + shift_y + rng.gen_range(-0.015..0.015)) * h as f64;
                Keypoint {
                    x: x.clamp(0.0, (w - 1) as f64),
                    y: y.clamp(0.0, (h - 1) as f64),
                    in_frame: true,
                }
            })
            .collect();
        let body = [base * 0.55, base * 0.55, base * 0.6];
        let radius = w as f64 / 20.0;
        for &(a, b) in &LIMBS {
            let pa = (keypoints[a].x, keypoints[a].y);
            let pb = (keypoints[b].x, keypoints[b].y);
            draw_segment(&mut img, pa, pb, radius, body);
        }
        let head = (keypoints[9].x, keypoints[9].y + h as f64 * 0.05);
        draw_segment(&mut img, head, head, w as f64 / 12.0, body);

        for _ in 0..spec.clutter {
            let (bh, bw) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
            let y = rng.gen_range(0..=h.saturating_sub(bh));
            let x = rng.gen_range(0..=w.saturating_sub(bw));
            let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let blob = BoundingBox::new(x, y, (x + bw).min(w), (y + bh).min(h));
            let patch = PatchDescriptor {
                color,
                size: [bh, bw],
                texture: PatchTexture::Solid,
            };
            paint_patch(&mut img, &blob, &patch, 1.0);
        }

        let labels: Vec<u8> = spec
            .attributes
            .iter()
            .map(|a| rng.gen_bool(a.presence) as u8)
            .collect();
        // Worn attributes stay on the body's horizontal span.
        let body_cols = (w as f64 * 0.15).round() as usize..(w as f64 * 0.85).round() as usize;
        let mut taken = Vec::new();
        let mut gt_boxes = BTreeMap::new();
        let mut cast = [0.0; 3];
        for (j, a) in spec.attributes.iter().enumerate() {
            let band = schema.region(groups[j]).rows(h);
            if a.patch.texture == PatchTexture::Cast {
                if labels[j] == 1 {
                    for c in 0..3 {
                        cast[c] += a.patch.color[c];
                    }
                    gt_boxes.insert(j, BoundingBox::new(0, 0, w, h));
                }
                continue;
            }
            let [lo, hi] = a.opacity;
            let alpha = if lo < hi { rng.gen_range(lo..=hi) } else { hi };
            let [slo, shi] = a.scale;
            let k = if slo < shi { rng.gen_range(slo..=shi) } else { shi };
            let max_h = if labels[j] == 1 { band.len() } else { h };
            let size = a.patch.size.map(|d| ((d as f64 * k).round() as usize).max(1));
            let size = [size[0].min(max_h), size[1].min(w)];
            if labels[j] == 1 {
                if let Some(b) = place(&mut rng, std::slice::from_ref(&band), body_cols.clone(), size, w, &taken) {
                    paint_patch(&mut img, &b, &a.patch, alpha);
                    taken.push(b);
                    gt_boxes.insert(j, b);
                }
            } else if a.distractor > 0.0 && rng.gen_bool(a.distractor) {
                let outside = [0..band.start, band.end..h];
                if let Some(b) = place(&mut rng, &outside, 0..w, size, w, &taken) {
                    paint_patch(&mut img, &b, &a.patch, alpha);
                    taken.push(b);
                }
            }
        }
        for v in img.indexed_iter_mut() {
            let ((_, _, c), px) = v;
            let noisy = *px + cast[c] + rng.gen_range(-spec.noise..=spec.noise);
            *px = quantize(noisy) as f64 / 255.0;
        }
        samples.push(Sample {
            image: img,
            labels,
            keypoints: Some(keypoints),
            gt_boxes,
        });
    }
    Dataset::new(samples, schema, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> SyntheticSpec {
        let mut spec = SyntheticSpec::standard(n);
        spec.attributes.truncate(4);
        spec
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(100);
        let a = generate_synthetic(&spec, 7).unwrap();
        let b = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_boxes_stay_in_head_band() {
        let spec = SyntheticSpec::standard(200);
        let ds = generate_synthetic(&spec, 1).unwrap();
        let band = ds.schema.region(Group::Head).rows(64);
        for s in &ds.samples {
            for j in [0usize, 1] {
                if s.labels[j] == 1 {
                    let b = s.gt_boxes[&j];
                    assert!(b.y_min >= band.start && b.y_max <= band.end, "{b:?}");
                }
            }
        }
    }

    #[test]
    fn positive_rate_is_within_binomial_bound() {
        // Bernoulli(0.5) with n = 1000: sd = 0.0158, so [0.44, 0.56] is a
        // ±3.8 sd interval (two-sided miss probability ~1.5e-4 per attribute).
        let spec = small_spec(1000);
        let ds = generate_synthetic(&spec, 11).unwrap();
        for j in 0..4 {
            let rate = ds.samples.iter().filter(|s| s.labels[j] == 1).count() as f64 / 1000.0;
            assert!((0.44..=0.56).contains(&rate), "attribute {j}: {rate}");
        }
    }

    #[test]
    fn unknown_group_is_rejected() {
        let mut spec = small_spec(4);
        spec.attributes[0].group = "Shoes".into();
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_samples_is_rejected() {
        let spec = small_spec(0);
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn images_are_quantized_to_8_bit_levels() {
        let ds = generate_synthetic(&small_spec(3), 2).unwrap();
        for v in ds.samples[0].image.iter() {
            let q = v * 255.0;
            assert!((q - q.round()).abs() < 1e-9);
        }
    }
}
