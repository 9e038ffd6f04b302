//! Prior-location extraction: per-group feature vectors from one pyramid
//! level using a band crop (R), keypoint-anchored offset points (K) or a
//! sparse grid with offset points (S).
//!
//! Maps here are channel-last: a single map is `(h, w, C)` and a batch is
//! `(batch, h, w, C)`. Points are `(x, y)` in continuous map coordinates.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttributeSchema, Group, Keypoint, PriorRegion};
use crate::error::{Error, Result};
use crate::nn::{Grads, Linear, LinearInit, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PleVariant {
    /// Band crop with two-level pyramid pooling.
    R,
    /// Learnable offset points around body keypoints.
    K,
    /// Learnable offset points around a sparse grid.
    S,
}

impl fmt::Display for PleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PleVariant::R => "R",
            PleVariant::K => "K",
            PleVariant::S => "S",
        };
        f.write_str(s)
    }
}

impl FromStr for PleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R" => Ok(PleVariant::R),
            "K" => Ok(PleVariant::K),
            "S" => Ok(PleVariant::S),
            _ => Err(Error::Validation(format!("unknown PLE variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointProvenance {
    Keypoint,
    SparseGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorPoints {
    pub group: Group,
    pub points: Vec<(f64, f64)>,
    pub provenance: PointProvenance,
}

/// Rows `[round(top*h), round(bottom*h))` of a `(h, w, C)` map.
pub fn region_crop<'a>(map: &ArrayView3<'a, f64>, region: PriorRegion) -> Result<ArrayView3<'a, f64>> {
    let h = map.dim().0;
    let rows = region.rows(h);
    if rows.is_empty() {
        return Err(Error::DegenerateRegion(format!(
            "[{}, {}] covers no rows of a height-{h} map",
            region.top, region.bottom
        )));
    }
    Ok(map.clone().slice_move(s![rows, .., ..]))
}

fn clamp_point(x: f64, y: f64, extent: (usize, usize)) -> (f64, f64) {
    let (h, w) = extent;
    (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64))
}

/// Maps image-pixel keypoints onto a stride-`stride` map of size
/// `extent = (h, w)` and partitions them per schema group.
pub fn map_keypoints(
    keypoints: Option<&[Keypoint]>,
    stride: usize,
    extent: (usize, usize),
    schema: &AttributeSchema,
) -> Result<Vec<PriorPoints>> {
    let kps = keypoints.ok_or_else(|| {
        Error::MissingPrior("sample has no keypoints; use the R or S extractor instead".into())
    })?;
    let s = stride as f64;
    schema
        .group_names()
        .map(|group| {
            let idx = schema.keypoint_groups.get(&group).ok_or_else(|| {
                Error::MissingPrior(format!("schema lists no keypoints for group {group}"))
            })?;
            let points = idx
                .iter()
                .map(|&k| {
                    let kp = kps.get(k).ok_or_else(|| {
                        Error::MissingPrior(format!("keypoint {k} missing from sample"))
                    })?;
                    Ok(clamp_point(kp.x / s, kp.y / s, extent))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PriorPoints {
                group,
                points,
                provenance: PointProvenance::Keypoint,
            })
        })
        .collect()
}

/// Lattice points of `region` on a `(h, w)` map, thinned to `ratio` by a
/// fixed pattern: row-major position `i` is kept iff
/// `floor((i+1)*ratio) > floor(i*ratio)`.
pub fn build_sparse_points(
    group: Group,
    region: PriorRegion,
    extent: (usize, usize),
    ratio: f64,
) -> Result<PriorPoints> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Validation(format!("sparse ratio {ratio} outside (0, 1]")));
    }
    let (h, w) = extent;
    let rows = region.rows(h);
    if rows.is_empty() {
        return Err(Error::DegenerateRegion(format!(
            "[{}, {}] covers no rows of a height-{h} map",
            region.top, region.bottom
        )));
    }
    let mut points = Vec::new();
    let mut i = 0usize;
    for y in rows {
        for x in 0..w {
            let before = (i as f64 * ratio).floor();
            let after = ((i + 1) as f64 * ratio).floor();
            if after > before {
                points.push((x as f64, y as f64));
            }
            i += 1;
        }
    }
    if points.is_empty() {
        return Err(Error::MissingPrior(format!(
            "ratio {ratio} keeps no points of group {group}"
        )));
    }
    Ok(PriorPoints {
        group,
        points,
        provenance: PointProvenance::SparseGrid,
    })
}

/// Corner indices and weights of a border-clamped bilinear lookup.
#[derive(Debug, Clone, Copy)]
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the coordinate was inside the map before clamping.
    free_x: bool,
    free_y: bool,
}

fn taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let (maxx, maxy) = ((w - 1) as f64, (h - 1) as f64);
    let cx = x.clamp(0.0, maxx);
    let cy = y.clamp(0.0, maxy);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    Taps {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        free_x: (0.0..=maxx).contains(&x),
        free_y: (0.0..=maxy).contains(&y),
    }
}

/// Bilinear interpolation of a `(h, w, C)` map at `(x, y)`, clamped to the
/// border.
pub fn bilinear_sample(map: &ArrayView3<f64>, x: f64, y: f64) -> Array1<f64> {
    let (h, w, c) = map.dim();
    let mut out = Array1::zeros(c);
    accumulate_sample(map, taps(x, y, h, w), 1.0, out.as_slice_mut().unwrap());
    out
}

fn accumulate_sample(map: &ArrayView3<f64>, t: Taps, scale: f64, out: &mut [f64]) {
    let wts = [
        (t.y0, t.x0, (1.0 - t.fx) * (1.0 - t.fy)),
        (t.y0, t.x1, t.fx * (1.0 - t.fy)),
        (t.y1, t.x0, (1.0 - t.fx) * t.fy),
        (t.y1, t.x1, t.fx * t.fy),
    ];
    for (yy, xx, wt) in wts {
        if wt == 0.0 {
            continue;
        }
        let px = map.slice(s![yy, xx, ..]);
        for (o, v) in out.iter_mut().zip(px.iter()) {
            *o += scale * wt * v;
        }
    }
}

/// Adjoint of a bilinear lookup: scatters `grad` into `d_map` and returns the
/// gradient with respect to the (unclamped) sampling position.
fn scatter_sample(
    map: &ArrayView3<f64>,
    d_map: &mut ndarray::ArrayViewMut3<f64>,
    t: Taps,
    grad: &[f64],
) -> (f64, f64) {
    let wts = [
        (t.y0, t.x0, (1.0 - t.fx) * (1.0 - t.fy)),
        (t.y0, t.x1, t.fx * (1.0 - t.fy)),
        (t.y1, t.x0, (1.0 - t.fx) * t.fy),
        (t.y1, t.x1, t.fx * t.fy),
    ];
    for (yy, xx, wt) in wts {
        if wt == 0.0 {
            continue;
        }
        let mut px = d_map.slice_mut(s![yy, xx, ..]);
        for (d, g) in px.iter_mut().zip(grad) {
            *d += wt * g;
        }
    }
    let (mut gx, mut gy) = (0.0, 0.0);
    if t.free_x || t.free_y {
        let v00 = map.slice(s![t.y0, t.x0, ..]);
        let v01 = map.slice(s![t.y0, t.x1, ..]);
        let v10 = map.slice(s![t.y1, t.x0, ..]);
        let v11 = map.slice(s![t.y1, t.x1, ..]);
        for k in 0..grad.len() {
            let (a, b, c, d) = (v00[k], v01[k], v10[k], v11[k]);
            gx += grad[k] * ((1.0 - t.fy) * (b - a) + t.fy * (d - c));
            gy += grad[k] * ((1.0 - t.fx) * (c - a) + t.fx * (d - b));
        }
    }
    (if t.free_x { gx } else { 0.0 }, if t.free_y { gy } else { 0.0 })
}

/// Learnable offset points: per reference point `slots` 2-D offsets, plus per
/// slot a scalar weight `A_m` and a `C x C` map `W_m` shared across points.
#[derive(Debug, Clone)]
pub struct OffsetBank {
    /// `(points, slots, 2)` as `(dx, dy)`.
    pub offsets: String,
    /// `(slots,)`.
    pub attention: String,
    /// `(slots, C, C)`.
    pub maps: String,
    pub num_points: usize,
    pub slots: usize,
    pub channels: usize,
}

impl OffsetBank {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        num_points: usize,
        slots: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Validation("offset slot count must be at least 1".into()));
        }
        let offsets = store.uniform(format!("{name}.offsets"), &[num_points, slots, 2], 1.0, rng);
        let attention = store.insert(
            format!("{name}.attention"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[slots]), 1.0 / slots as f64),
        );
        // identity plus noise (sd 0.01 via a uniform of matching variance)
        let noise = 0.01 * 3f64.sqrt();
        let maps = store.uniform(format!("{name}.maps"), &[slots, channels, channels], noise, rng);
        {
            let m = store.get_mut(&maps);
            for sl in 0..slots {
                for c in 0..channels {
                    m[[sl, c, c]] += 1.0;
                }
            }
        }
        Ok(Self {
            offsets,
            attention,
            maps,
            num_points,
            slots,
            channels,
        })
    }

    /// `Σ_m A_m · W_m · map(point + ΔP_{point, m})` for reference point
    /// number `point_index`.
    pub fn sample(
        &self,
        store: &ParamStore,
        map: &ArrayView3<f64>,
        point: (f64, f64),
        point_index: usize,
    ) -> Array1<f64> {
        let offsets = store.view3(&self.offsets);
        let attention = store.view1(&self.attention);
        let maps = store.view3(&self.maps);
        let mut out = Array1::zeros(self.channels);
        for m in 0..self.slots {
            let x = point.0 + offsets[[point_index, m, 0]];
            let y = point.1 + offsets[[point_index, m, 1]];
            let v = bilinear_sample(map, x, y);
            out.scaled_add(attention[m], &maps.index_axis(Axis(0), m).dot(&v));
        }
        out
    }

    /// Per-slot means over the reference points, `(slots, C)`.
    fn slot_means(
        &self,
        store: &ParamStore,
        map: &ArrayView3<f64>,
        points: &[(f64, f64)],
    ) -> Array2<f64> {
        let (h, w, c) = map.dim();
        let offsets = store.view3(&self.offsets);
        let mut means = Array2::zeros((self.slots, c));
        let inv = 1.0 / points.len() as f64;
        for m in 0..self.slots {
            let mut row = means.row_mut(m);
            let out = row.as_slice_mut().unwrap();
            for (n, &(px, py)) in points.iter().enumerate() {
                let t = taps(px + offsets[[n, m, 0]], py + offsets[[n, m, 1]], h, w);
                accumulate_sample(map, t, inv, out);
            }
        }
        means
    }

    /// Mean over reference points of [`OffsetBank::sample`], computed per
    /// slot first (the map is linear in the sampled vectors).
    pub fn pooled(
        &self,
        store: &ParamStore,
        map: &ArrayView3<f64>,
        points: &[(f64, f64)],
    ) -> (Array1<f64>, Array2<f64>) {
        let means = self.slot_means(store, map, points);
        let attention = store.view1(&self.attention);
        let maps = store.view3(&self.maps);
        let mut out = Array1::zeros(self.channels);
        for m in 0..self.slots {
            out.scaled_add(attention[m], &maps.index_axis(Axis(0), m).dot(&means.row(m)));
        }
        (out, means)
    }

    /// Backward of [`OffsetBank::pooled`] for one sample.
    #[allow(clippy::too_many_arguments)]
    pub fn pooled_backward(
        &self,
        store: &ParamStore,
        map: &ArrayView3<f64>,
        points: &[(f64, f64)],
        means: &Array2<f64>,
        d_out: &ndarray::ArrayView1<f64>,
        d_map: &mut ndarray::ArrayViewMut3<f64>,
        grads: Option<&mut Grads>,
    ) {
        let (h, w, c) = map.dim();
        let attention = store.view1(&self.attention);
        let maps = store.view3(&self.maps);
        let offsets = store.view3(&self.offsets);
        let mut d_att = Array1::zeros(self.slots);
        let mut d_maps = Array3::zeros((self.slots, c, c));
        let mut d_off = Array3::zeros((self.num_points, self.slots, 2));
        let inv = 1.0 / points.len() as f64;
        for m in 0..self.slots {
            let wm = maps.index_axis(Axis(0), m);
            let sm = means.row(m);
            d_att[m] = d_out.dot(&wm.dot(&sm));
            let outer = d_out
                .view()
                .insert_axis(Axis(1))
                .dot(&sm.view().insert_axis(Axis(0)));
            d_maps
                .index_axis_mut(Axis(0), m)
                .scaled_add(attention[m], &outer);
            let ds = wm.t().dot(d_out) * (attention[m] * inv);
            let ds = ds.as_slice().unwrap();
            for (n, &(px, py)) in points.iter().enumerate() {
                let t = taps(px + offsets[[n, m, 0]], py + offsets[[n, m, 1]], h, w);
                let (gx, gy) = scatter_sample(map, d_map, t, ds);
                d_off[[n, m, 0]] += gx;
                d_off[[n, m, 1]] += gy;
            }
        }
        if let Some(grads) = grads {
            grads.accumulate(&self.attention, d_att);
            grads.accumulate(&self.maps, d_maps);
            grads.accumulate(&self.offsets, d_off);
        }
    }
}

/// Adaptive 2x2 cell bounds along an axis of length `n`.
fn cell_bounds(n: usize) -> [(usize, usize); 2] {
    let half_floor = n / 2;
    let half_ceil = n.div_ceil(2);
    [(0, half_ceil), (half_floor, n)]
}

/// Global average plus 2x2 adaptive average cells of a `(h, w, C)` map,
/// concatenated as `[global, (0,0), (0,1), (1,0), (1,1)]`.
pub fn pyramid_pool(map: &ArrayView3<f64>) -> Array1<f64> {
    let (h, w, c) = map.dim();
    let mut out = Array1::zeros(5 * c);
    let mean = |rows: (usize, usize), cols: (usize, usize)| {
        map.slice(s![rows.0..rows.1, cols.0..cols.1, ..])
            .mean_axis(Axis(0))
            .unwrap()
            .mean_axis(Axis(0))
            .unwrap()
    };
    out.slice_mut(s![0..c]).assign(&mean((0, h), (0, w)));
    let (rb, cb) = (cell_bounds(h), cell_bounds(w));
    for (i, r) in rb.iter().enumerate() {
        for (j, cc) in cb.iter().enumerate() {
            let k = 1 + 2 * i + j;
            out.slice_mut(s![k * c..(k + 1) * c]).assign(&mean(*r, *cc));
        }
    }
    out
}

fn pyramid_pool_backward(d: &ndarray::ArrayView1<f64>, d_map: &mut ndarray::ArrayViewMut3<f64>) {
    let (h, w, c) = d_map.dim();
    let global = d.slice(s![0..c]).to_owned() / (h * w) as f64;
    for mut px in d_map.lanes_mut(Axis(2)) {
        px += &global;
    }
    let (rb, cb) = (cell_bounds(h), cell_bounds(w));
    for (i, r) in rb.iter().enumerate() {
        for (j, cc) in cb.iter().enumerate() {
            let k = 1 + 2 * i + j;
            let count = ((r.1 - r.0) * (cc.1 - cc.0)) as f64;
            let g = d.slice(s![k * c..(k + 1) * c]).to_owned() / count;
            let mut cell = d_map.slice_mut(s![r.0..r.1, cc.0..cc.1, ..]);
            for mut px in cell.lanes_mut(Axis(2)) {
                px += &g;
            }
        }
    }
}

/// Where an offset extractor takes its reference points from.
#[derive(Debug, Clone)]
pub enum PointSource {
    /// Keypoint indices of the sample, mapped per sample.
    Keypoints(Vec<usize>),
    /// A fixed grid on the level.
    Sparse(Vec<(f64, f64)>),
}

/// Per-group feature extractor on one pyramid level, ending in a linear
/// projection to the group feature width D.
#[derive(Debug, Clone)]
pub enum Extractor {
    Region {
        region: PriorRegion,
        proj: Linear,
    },
    Offsets {
        source: PointSource,
        bank: OffsetBank,
        proj: Linear,
    },
    /// Plain global average pooling (baseline head).
    GlobalPool { proj: Linear },
}

pub struct ExtractorCache {
    pooled: Array2<f64>,
    points: Vec<Vec<(f64, f64)>>,
    slot_means: Vec<Array2<f64>>,
}

/// Reference points for each sample of the batch.
fn reference_points(
    source: &PointSource,
    keypoints: Option<&[Option<Vec<Keypoint>>]>,
    stride: usize,
    extent: (usize, usize),
    batch: usize,
) -> Result<Vec<Vec<(f64, f64)>>> {
    match source {
        PointSource::Sparse(points) => Ok(vec![points.clone(); batch]),
        PointSource::Keypoints(idx) => {
            let kps = keypoints.ok_or_else(|| {
                Error::MissingPrior("keypoint extractor needs per-sample keypoints".into())
            })?;
            kps.iter()
                .map(|k| {
                    let k = k.as_ref().ok_or_else(|| {
                        Error::MissingPrior(
                            "sample has no keypoints; use the R or S extractor instead".into(),
                        )
                    })?;
                    idx.iter()
                        .map(|&i| {
                            let kp = k.get(i).ok_or_else(|| {
                                Error::MissingPrior(format!("keypoint {i} missing from sample"))
                            })?;
                            let s = stride as f64;
                            Ok(clamp_point(kp.x / s, kp.y / s, extent))
                        })
                        .collect()
                })
                .collect()
        }
    }
}

impl Extractor {
    pub fn proj(&self) -> &Linear {
        match self {
            Extractor::Region { proj, .. }
            | Extractor::Offsets { proj, .. }
            | Extractor::GlobalPool { proj } => proj,
        }
    }

    /// `maps` is the `(batch, h, w, C)` level; `stride` its stride in pixels.
    pub fn forward(
        &self,
        store: &ParamStore,
        maps: &ArrayView4<f64>,
        stride: usize,
        keypoints: Option<&[Option<Vec<Keypoint>>]>,
    ) -> Result<(Array2<f64>, ExtractorCache)> {
        let (b, h, w, c) = maps.dim();
        let mut points = Vec::new();
        let mut slot_means = Vec::new();
        let pooled = match self {
            Extractor::Region { region, .. } => {
                let mut pooled = Array2::zeros((b, 5 * c));
                for i in 0..b {
                    let crop = region_crop(&maps.index_axis(Axis(0), i), *region)?;
                    pooled.row_mut(i).assign(&pyramid_pool(&crop));
                }
                pooled
            }
            Extractor::GlobalPool { .. } => maps
                .mean_axis(Axis(1))
                .unwrap()
                .mean_axis(Axis(1))
                .unwrap(),
            Extractor::Offsets { source, bank, .. } => {
                points = reference_points(source, keypoints, stride, (h, w), b)?;
                let mut pooled = Array2::zeros((b, c));
                for i in 0..b {
                    if points[i].is_empty() {
                        return Err(Error::MissingPrior("empty reference point list".into()));
                    }
                    let (v, means) = bank.pooled(store, &maps.index_axis(Axis(0), i), &points[i]);
                    pooled.row_mut(i).assign(&v);
                    slot_means.push(means);
                }
                pooled
            }
        };
        let features = self.proj().forward(store, &pooled.view());
        Ok((
            features,
            ExtractorCache {
                pooled,
                points,
                slot_means,
            },
        ))
    }

    /// Accumulates into `d_maps` (same shape as the forward input) and, when
    /// given, into parameter gradients.
    pub fn backward(
        &self,
        store: &ParamStore,
        maps: &ArrayView4<f64>,
        cache: &ExtractorCache,
        d_features: &ArrayView2<f64>,
        d_maps: &mut Array4<f64>,
        mut grads: Option<&mut Grads>,
    ) {
        let d_pooled =
            self.proj()
                .backward(store, &cache.pooled.view(), d_features, grads.as_deref_mut());
        let (b, h, w, _) = maps.dim();
        match self {
            Extractor::Region { region, .. } => {
                let rows = region.rows(h);
                for i in 0..b {
                    let mut dm = d_maps.index_axis_mut(Axis(0), i);
                    let mut crop = dm.slice_mut(s![rows.clone(), .., ..]);
                    pyramid_pool_backward(&d_pooled.row(i), &mut crop);
                }
            }
            Extractor::GlobalPool { .. } => {
                let scale = 1.0 / (h * w) as f64;
                for i in 0..b {
                    let g = d_pooled.row(i).to_owned() * scale;
                    let mut dm = d_maps.index_axis_mut(Axis(0), i);
                    for mut px in dm.lanes_mut(Axis(2)) {
                        px += &g;
                    }
                }
            }
            Extractor::Offsets { bank, .. } => {
                for i in 0..b {
                    let mut dm = d_maps.index_axis_mut(Axis(0), i);
                    bank.pooled_backward(
                        store,
                        &maps.index_axis(Axis(0), i),
                        &cache.points[i],
                        &cache.slot_means[i],
                        &d_pooled.row(i),
                        &mut dm,
                        grads.as_deref_mut(),
                    );
                }
            }
        }
    }
}

/// Builds the extractor for `group` on a level of size `extent`.
#[allow(clippy::too_many_arguments)]
pub fn build_extractor<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    variant: PleVariant,
    schema: &AttributeSchema,
    group: Group,
    extent: (usize, usize),
    channels: usize,
    feature_dim: usize,
    slots: usize,
    sparse_ratio: f64,
    rng: &mut R,
) -> Result<Extractor> {
    let region = schema.region(group);
    match variant {
        PleVariant::R => {
            if region.rows(extent.0).is_empty() {
                return Err(Error::DegenerateRegion(format!(
                    "group {group} band is empty on a height-{} map",
                    extent.0
                )));
            }
            let proj = Linear::new(store, &format!("{name}.proj"), 5 * channels, feature_dim, LinearInit::FanIn, rng);
            Ok(Extractor::Region { region, proj })
        }
        PleVariant::K | PleVariant::S => {
            let source = if variant == PleVariant::K {
                let idx = schema.keypoint_groups.get(&group).cloned().ok_or_else(|| {
                    Error::MissingPrior(format!("schema lists no keypoints for group {group}"))
                })?;
                if idx.is_empty() {
                    return Err(Error::MissingPrior(format!("group {group} has an empty keypoint set")));
                }
                PointSource::Keypoints(idx)
            } else {
                PointSource::Sparse(build_sparse_points(group, region, extent, sparse_ratio)?.points)
            };
            let n = match &source {
                PointSource::Keypoints(i) => i.len(),
                PointSource::Sparse(p) => p.len(),
            };
            let bank = OffsetBank::new(store, &format!("{name}.bank"), n, slots, channels, rng)?;
            let proj = Linear::new(store, &format!("{name}.proj"), channels, feature_dim, LinearInit::FanIn, rng);
            Ok(Extractor::Offsets { source, bank, proj })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, c), |(y, x, k)| (y * 10 + x) as f64 + 100.0 * k as f64)
    }

    #[test]
    fn head_crop_on_p1_keeps_24_rows() {
        let map = ramp(64, 48, 2);
        let crop = region_crop(&map.view(), PriorRegion::new(0.0, 24.0 / 64.0)).unwrap();
        assert_eq!(crop.dim(), (24, 48, 2));
        assert_eq!(crop[[23, 0, 0]], map[[23, 0, 0]]);
    }

    #[test]
    fn full_region_is_identity() {
        let map = ramp(5, 3, 2);
        let crop = region_crop(&map.view(), PriorRegion::FULL).unwrap();
        assert_eq!(crop, map.view());
    }

    #[test]
    fn thin_region_is_degenerate() {
        let map = ramp(4, 4, 1);
        let err = region_crop(&map.view(), PriorRegion::new(0.49, 0.50));
        assert!(matches!(err, Err(Error::DegenerateRegion(_))));
    }

    fn kps(points: &[(f64, f64)]) -> Vec<Keypoint> {
        let mut v = vec![
            Keypoint {
                x: 0.0,
                y: 0.0,
                in_frame: true
            };
            16
        ];
        for (i, &(x, y)) in points.iter().enumerate() {
            v[i] = Keypoint { x, y, in_frame: true };
        }
        v
    }

    #[test]
    fn keypoints_divide_by_stride_and_clamp() {
        let schema = AttributeSchema::pa100k();
        let k = kps(&[(128.0, 64.0), (10000.0, 10000.0)]);
        let groups = map_keypoints(Some(&k), 4, (64, 48), &schema).unwrap();
        let all = groups.iter().find(|g| g.group == Group::All).unwrap();
        assert_eq!(all.points[0], (32.0, 16.0));
        assert_eq!(all.points[1], (47.0, 63.0));
    }

    #[test]
    fn head_group_uses_head_and_shoulder_points() {
        let schema = AttributeSchema::pa100k();
        let k: Vec<Keypoint> = (0..16)
            .map(|i| Keypoint {
                x: 4.0 * i as f64,
                y: 0.0,
                in_frame: true,
            })
            .collect();
        let groups = map_keypoints(Some(&k), 4, (64, 48), &schema).unwrap();
        let head = groups.iter().find(|g| g.group == Group::Head).unwrap();
        let xs: Vec<f64> = head.points.iter().map(|p| p.0).collect();
        assert_eq!(xs, vec![7.0, 8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn missing_keypoints_is_an_error() {
        let schema = AttributeSchema::pa100k();
        assert!(matches!(
            map_keypoints(None, 4, (64, 48), &schema),
            Err(Error::MissingPrior(_))
        ));
    }

    #[test]
    fn sparse_points_full_ratio_keeps_lattice() {
        let p = build_sparse_points(Group::All, PriorRegion::FULL, (4, 4), 1.0).unwrap();
        assert_eq!(p.points.len(), 16);
    }

    #[test]
    fn sparse_points_drop_pattern() {
        // Hand enumeration of the keep rule for ratio 3/4 on a 4x4 lattice:
        // row-major positions 0, 4, 8, 12 are dropped, i.e. column 0 of each row.
        let p = build_sparse_points(Group::All, PriorRegion::FULL, (4, 4), 0.75).unwrap();
        let mut expected = Vec::new();
        for y in 0..4 {
            for x in 1..4 {
                expected.push((x as f64, y as f64));
            }
        }
        assert_eq!(p.points, expected);
        assert_eq!(p.points.len(), 12);
        // ratio 1/4 on 2x2: positions 0..3 -> keep only position 3 = (1, 1)
        let q = build_sparse_points(Group::All, PriorRegion::FULL, (2, 2), 0.25).unwrap();
        assert_eq!(q.points, vec![(1.0, 1.0)]);
    }

    #[test]
    fn hand_bilinear_value() {
        let map = Array3::from_shape_vec((2, 2, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let v = bilinear_sample(&map.view(), 0.5, 0.5);
        assert!((v[0] - 1.5).abs() < 1e-12);
    }

    fn bank_with(store: &mut ParamStore, points: usize, slots: usize, c: usize) -> OffsetBank {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = OffsetBank::new(store, "b", points, slots, c, &mut rng).unwrap();
        // exact identity maps
        let maps = store.get_mut(&bank.maps);
        maps.fill(0.0);
        for s in 0..slots {
            for k in 0..c {
                maps[[s, k, k]] = 1.0;
            }
        }
        bank
    }

    #[test]
    fn constant_map_is_reproduced() {
        let mut store = ParamStore::new();
        let bank = bank_with(&mut store, 1, 3, 2);
        let map = Array3::from_shape_fn((5, 4, 2), |(_, _, k)| 0.3 + k as f64);
        let v = bank.sample(&store, &map.view(), (1.3, 2.2), 0);
        assert!((v[0] - 0.3).abs() < 1e-12 && (v[1] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn zero_attention_gives_zero() {
        let mut store = ParamStore::new();
        let bank = bank_with(&mut store, 1, 3, 2);
        store.get_mut(&bank.attention).fill(0.0);
        let map = ramp(5, 4, 2);
        let v = bank.sample(&store, &map.view(), (1.3, 2.2), 0);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_offset_hand_value() {
        let mut store = ParamStore::new();
        let bank = bank_with(&mut store, 1, 1, 1);
        store.get_mut(&bank.attention).fill(1.0);
        let off = store.get_mut(&bank.offsets);
        off[[0, 0, 0]] = 0.5;
        off[[0, 0, 1]] = 0.5;
        let map = Array3::from_shape_vec((2, 2, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let v = bank.sample(&store, &map.view(), (0.0, 0.0), 0);
        assert!((v[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn pooled_path_equals_mean_of_point_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let bank = OffsetBank::new(&mut store, "b", 3, 2, 3, &mut rng).unwrap();
        let map = Array3::from_shape_fn((6, 5, 3), |(y, x, k)| ((y * 5 + x) as f64 * 0.3 + k as f64).sin());
        let pts = [(1.2, 0.7), (3.9, 4.1), (0.0, 5.0)];
        let (pooled, _) = bank.pooled(&store, &map.view(), &pts);
        let mut mean = Array1::zeros(3);
        for (n, &p) in pts.iter().enumerate() {
            mean += &bank.sample(&store, &map.view(), p, n);
        }
        mean /= 3.0;
        for (a, b) in pooled.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_pool_of_constant_replicates() {
        let map = Array3::from_shape_fn((3, 5, 2), |(_, _, k)| 2.0 + k as f64);
        let p = pyramid_pool(&map.view());
        for cell in 0..5 {
            assert_eq!(p[cell * 2], 2.0);
            assert_eq!(p[cell * 2 + 1], 3.0);
        }
    }

    #[test]
    fn pyramid_pool_handles_single_row() {
        let map = Array3::from_shape_fn((1, 3, 1), |(_, x, _)| x as f64);
        let p = pyramid_pool(&map.view());
        // columns split [0, 2) and [1, 3)
        assert_eq!(p.to_vec(), vec![1.0, 0.5, 1.5, 0.5, 1.5]);
    }
}
