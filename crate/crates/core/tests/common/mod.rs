//! Brute-force oracles and finite-difference helpers shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sspnet::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use sspnet::datamodel::{BoundingBox, Group};
use sspnet::heads::{forward_heads, heads_loss_backward, weighted_bce, GroupHead, ImbalanceWeights};
use sspnet::nn::{Grads, LinearInit, ParamStore};
use sspnet::ple::OffsetBank;

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// `(mean, per-attribute)` by confusion counting; `None` marks an attribute
/// without both classes.
pub fn ma_oracle(probs: &Array2<f64>, labels: &Array2<f64>, thr: f64) -> (Option<f64>, Vec<Option<f64>>) {
    let mut per = Vec::new();
    for j in 0..probs.ncols() {
        let (mut tp, mut fneg, mut tn, mut fp) = (0u32, 0u32, 0u32, 0u32);
        for i in 0..probs.nrows() {
            let pred = probs[[i, j]] >= thr;
            match (labels[[i, j]] == 1.0, pred) {
                (true, true) => tp += 1,
                (true, false) => fneg += 1,
                (false, false) => tn += 1,
                (false, true) => fp += 1,
            }
        }
        let (p, n) = (tp + fneg, tn + fp);
        per.push((p > 0 && n > 0).then(|| (tp as f64 / p as f64 + tn as f64 / n as f64) / 2.0));
    }
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    (mean, per)
}

/// `(accu, prec, rec, f1)` from per-sample predicted and true sets.
pub fn example_oracle(probs: &Array2<f64>, labels: &Array2<f64>, thr: f64) -> [f64; 4] {
    let n = probs.nrows() as f64;
    let (mut a, mut p, mut r) = (0.0, 0.0, 0.0);
    for i in 0..probs.nrows() {
        let pred: BTreeSet<usize> = (0..probs.ncols()).filter(|&j| probs[[i, j]] >= thr).collect();
        let truth: BTreeSet<usize> = (0..probs.ncols()).filter(|&j| labels[[i, j]] == 1.0).collect();
        let inter = pred.intersection(&truth).count() as f64;
        let union = pred.union(&truth).count() as f64;
        let empty = pred.is_empty() && truth.is_empty();
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else if empty { 1.0 } else { 0.0 };
        a += ratio(inter, union);
        p += ratio(inter, pred.len() as f64);
        r += ratio(inter, truth.len() as f64);
    }
    let (a, p, r) = (a / n, p / n, r / n);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    [a, p, r, f1]
}

/// IoU by counting lattice pixels covered by each box.
pub fn iou_oracle(a: &BoundingBox, b: &BoundingBox, extent: usize) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..extent {
        for x in 0..extent {
            let (ia, ib) = (a.contains(y, x), b.contains(y, x));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

/// Pearson correlation straight from the covariance definition.
pub fn pcc_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
    cov / (vx * vy).sqrt()
}

pub fn random_box<R: Rng>(rng: &mut R, extent: usize) -> BoundingBox {
    let x0 = rng.gen_range(0..extent);
    let y0 = rng.gen_range(0..extent);
    let x1 = rng.gen_range(x0 + 1..=extent);
    let y1 = rng.gen_range(y0 + 1..=extent);
    BoundingBox::new(x0, y0, x1, y1)
}

/// Worst relative mismatch between analytic and central-difference
/// gradients: `|a - n| / max(|a|, |n|, floor)`.
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
}

impl GradReport {
    fn new() -> Self {
        Self { checked: 0, worst: 0.0 }
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        self.worst = self.worst.max((analytic - numeric).abs() / scale);
        self.checked += 1;
    }

    fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.worst = self.worst.max(other.worst);
    }
}

const EPS: f64 = 1e-6;

/// Central differences of `loss` over every entry of every parameter in
/// `store`, against `grads`.
fn check_params(store: &mut ParamStore, grads: &Grads, loss: &dyn Fn(&ParamStore) -> f64) -> GradReport {
    let mut report = GradReport::new();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let len = store.get(&name).len();
        let zero = ArrayD::zeros(store.get(&name).raw_dim());
        let analytic = grads.get(&name).unwrap_or(&zero).clone();
        for k in 0..len {
            let orig = store.get(&name).as_slice().unwrap()[k];
            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig + EPS;
            let up = loss(store);
            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig - EPS;
            let down = loss(store);
            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig;
            report.push(analytic.as_slice().unwrap()[k], (up - down) / (2.0 * EPS));
        }
    }
    report
}

/// Offset sampling: `g . pooled(map, points)` w.r.t. offsets, slot weights,
/// slot maps and map values.
pub fn offset_sample_gradcheck(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (6, 5, 3);
    let map = Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-1.0..1.0));
    let points = [(2.3, 2.6), (1.7, 3.2)];
    let mut store = ParamStore::new();
    let bank = OffsetBank::new(&mut store, "bank", points.len(), 3, c, &mut rng).unwrap();
    store
        .get_mut(&bank.offsets)
        .mapv_inplace(|_| rng.gen_range(-0.9..0.9));
    store
        .get_mut(&bank.attention)
        .mapv_inplace(|_| rng.gen_range(0.2..1.0));
    let g = Array1::from_shape_fn(c, |_| rng.gen_range(-1.0..1.0));

    let (_, means) = bank.pooled(&store, &map.view(), &points);
    let mut grads = Grads::new();
    let mut d_map = Array3::zeros(map.raw_dim());
    bank.pooled_backward(
        &store,
        &map.view(),
        &points,
        &means,
        &g.view(),
        &mut d_map.view_mut(),
        Some(&mut grads),
    );
    let loss_of = |s: &ParamStore, m: &Array3<f64>| bank.pooled(s, &m.view(), &points).0.dot(&g);
    let mut report = check_params(&mut store, &grads, &|s| loss_of(s, &map));
    let mut map_report = GradReport::new();
    let mut m = map.clone();
    for idx in 0..m.len() {
        let orig = m.as_slice().unwrap()[idx];
        m.as_slice_mut().unwrap()[idx] = orig + EPS;
        let up = loss_of(&store, &m);
        m.as_slice_mut().unwrap()[idx] = orig - EPS;
        let down = loss_of(&store, &m);
        m.as_slice_mut().unwrap()[idx] = orig;
        map_report.push(d_map.as_slice().unwrap()[idx], (up - down) / (2.0 * EPS));
    }
    report.merge(map_report);
    report
}

/// Weighted BCE composed with the group heads, w.r.t. head parameters and
/// group features.
pub fn heads_gradcheck(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, m) = (5, 4, 5);
    let layout: [(Group, Vec<usize>); 3] = [
        (Group::Head, vec![0, 3]),
        (Group::Torso, vec![1]),
        (Group::All, vec![2, 4]),
    ];
    let mut store = ParamStore::new();
    let heads: Vec<GroupHead> = layout
        .iter()
        .map(|(g, attrs)| {
            GroupHead::new(&mut store, &format!("head.{g}"), *g, attrs.clone(), d, LinearInit::FanIn, &mut rng)
        })
        .collect();
    let mut features: IndexMap<Group, Array2<f64>> = layout
        .iter()
        .map(|(g, _)| (*g, Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))))
        .collect();
    let labels = Array2::from_shape_fn((n, m), |_| rng.gen_range(0..2) as f64);
    let weights = ImbalanceWeights {
        r: (0..m).map(|_| rng.gen_range(0.05..0.95)).collect(),
    };

    let mut grads = Grads::new();
    let (_, d_features) =
        heads_loss_backward(&store, &features, &heads, &labels.view(), &weights, Some(&mut grads)).unwrap();
    let loss_of = |s: &ParamStore, f: &IndexMap<Group, Array2<f64>>| {
        let pred = forward_heads(s, f, &heads, m).unwrap();
        heads
            .iter()
            .map(|h| weighted_bce(&pred.logits.view(), &labels.view(), &weights, &h.attributes).unwrap())
            .sum::<f64>()
    };
    let snapshot = features.clone();
    let mut report = check_params(&mut store, &grads, &|s| loss_of(s, &snapshot));
    let groups: Vec<Group> = features.keys().copied().collect();
    for g in groups {
        for idx in 0..n * d {
            let orig = features[&g].as_slice().unwrap()[idx];
            features.get_mut(&g).unwrap().as_slice_mut().unwrap()[idx] = orig + EPS;
            let up = loss_of(&store, &features);
            features.get_mut(&g).unwrap().as_slice_mut().unwrap()[idx] = orig - EPS;
            let down = loss_of(&store, &features);
            features.get_mut(&g).unwrap().as_slice_mut().unwrap()[idx] = orig;
            report.push(d_features[&g].as_slice().unwrap()[idx], (up - down) / (2.0 * EPS));
        }
    }
    report
}

/// Sum of all pyramid entries w.r.t. every backbone parameter on a 32x32
/// image with one pyramid channel.
pub fn pyramid_gradcheck(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let config = BackboneConfig {
        stage_widths: [2, 3, 3, 2],
        kernel: 4,
        pyramid_channels: 1,
    };
    let backbone = Backbone::new(&mut store, config, &mut rng).unwrap();
    for (_, v) in store.iter_mut() {
        v.mapv_inplace(|x| x + rng.gen_range(-0.05..0.05));
    }
    let images = Array4::from_shape_fn((1, 32, 32, 3), |_| rng.gen_range(0.0..1.0));
    let sum_all = |p: &FeaturePyramid| p.levels.iter().map(|l| l.sum()).sum::<f64>();
    let (pyr, cache) = backbone.forward(&store, &images.view()).unwrap();
    let ones = FeaturePyramid {
        levels: pyr.levels.clone().map(|l| l.mapv(|_| 1.0)),
    };
    let mut grads = Grads::new();
    backbone.backward(&store, &cache, &ones, &mut grads, false);
    check_params(&mut store, &grads, &|s| {
        sum_all(&backbone.forward(s, &images.view()).unwrap().0)
    })
}
