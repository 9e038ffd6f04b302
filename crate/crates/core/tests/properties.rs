mod common;

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use sspnet::afss::{RunningMean, ScaleSelectionState};
use sspnet::datamodel::BoundingBox;
use sspnet::localization::{external_rect, gradcam_p_map, normalize, BinaryMask};
use sspnet::metrics::{iou, mean_accuracy, pcc};
use sspnet::Level;

use common::{iou_oracle, ma_oracle, rel_close};

fn boxes(extent: usize) -> impl Strategy<Value = BoundingBox> {
    (0..extent, 0..extent, 1..=extent, 1..=extent).prop_map(move |(x0, y0, w, h)| {
        BoundingBox::new(x0, y0, (x0 + w).min(extent).max(x0 + 1), (y0 + h).min(extent).max(y0 + 1))
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (
        prop::collection::vec(0.0..1.0f64, rows * cols),
        prop::collection::vec(0..2u8, rows * cols),
    )
        .prop_map(move |(p, y)| {
            (
                Array2::from_shape_vec((rows, cols), p).unwrap(),
                Array2::from_shape_vec((rows, cols), y.into_iter().map(f64::from).collect()).unwrap(),
            )
        })
}

proptest! {
    #[test]
    fn freeze_is_argmax_with_finer_ties(values in prop::collection::vec([0u8..5, 0u8..5, 0u8..5], 1..6)) {
        let units: Vec<String> = (0..values.len()).map(|i| format!("unit{i}")).collect();
        let mut state = ScaleSelectionState::new(units.clone());
        for (u, row) in units.iter().zip(&values) {
            for level in Level::ALL {
                state.record_round(u, level, 0.5 + row[level.index()] as f64 / 10.0).unwrap();
            }
        }
        let frozen = state.freeze().unwrap().clone();
        for (u, row) in units.iter().zip(&values) {
            let best = *row.iter().max().unwrap();
            let first = row.iter().position(|&v| v == best).unwrap();
            prop_assert_eq!(frozen[u], Level::ALL[first]);
        }
    }

    #[test]
    fn running_mean_matches_arithmetic_mean(xs in prop::collection::vec(0.0..1.0f64, 1..200)) {
        let mut m = RunningMean::default();
        for &x in &xs {
            m.push(x);
        }
        let want = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!((m.mean().unwrap() - want).abs() < 1e-12);
        prop_assert_eq!(m.count(), xs.len() as u64);
    }

    #[test]
    fn iou_is_symmetric_bounded_and_matches_lattice(a in boxes(12), b in boxes(12)) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(rel_close(v, iou_oracle(&a, &b, 12), 1e-12));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn external_rect_is_tight(cells in prop::collection::vec(any::<bool>(), 48)) {
        let mask = Array2::from_shape_vec((6, 8), cells).unwrap();
        let rect = external_rect(&BinaryMask { mask: mask.clone(), tau: 0.5 });
        match rect {
            None => prop_assert!(!mask.iter().any(|&b| b)),
            Some(r) => {
                for ((y, x), &on) in mask.indexed_iter() {
                    prop_assert!(!on || r.contains(y, x));
                }
                let on_row = |y: usize| (r.x_min..r.x_max).any(|x| mask[[y, x]]);
                let on_col = |x: usize| (r.y_min..r.y_max).any(|y| mask[[y, x]]);
                prop_assert!(on_row(r.y_min) && on_row(r.y_max - 1));
                prop_assert!(on_col(r.x_min) && on_col(r.x_max - 1));
            }
        }
    }

    #[test]
    fn mean_accuracy_matches_oracle_and_ignores_column_order((probs, labels) in matrix(9, 4)) {
        let (want, _) = ma_oracle(&probs, &labels, 0.5);
        let got = mean_accuracy(&probs.view(), &labels.view(), 0.5);
        match want {
            None => prop_assert!(got.is_err()),
            Some(w) => {
                let got = got.unwrap();
                prop_assert!(rel_close(got.mean, w, 1e-12));
                let order = [3, 1, 0, 2];
                let p = probs.select(ndarray::Axis(1), &order);
                let y = labels.select(ndarray::Axis(1), &order);
                let shuffled = mean_accuracy(&p.view(), &y.view(), 0.5).unwrap();
                prop_assert!(rel_close(shuffled.mean, got.mean, 1e-12));
            }
        }
    }

    #[test]
    fn pcc_is_affine_invariant(
        xs in prop::collection::vec(-5.0..5.0f64, 3..30),
        noise in prop::collection::vec(-1.0..1.0f64, 30),
        scale in 0.1..10.0f64,
        shift in -5.0..5.0f64,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x * 0.5 + n).collect();
        if let Ok(r) = pcc(&xs, &ys) {
            let moved: Vec<f64> = xs.iter().map(|x| x * scale + shift).collect();
            let flipped: Vec<f64> = xs.iter().map(|x| -x).collect();
            prop_assert!((pcc(&moved, &ys).unwrap() - r).abs() < 1e-9);
            prop_assert!((pcc(&flipped, &ys).unwrap() + r).abs() < 1e-9);
            prop_assert!((pcc(&ys, &xs).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmaps_are_nonnegative_and_normalize_to_unit_range(
        a in prop::collection::vec(-2.0..2.0f64, 24),
        g in prop::collection::vec(-2.0..2.0f64, 24),
    ) {
        let a = Array3::from_shape_vec((3, 4, 2), a).unwrap();
        let g = Array3::from_shape_vec((3, 4, 2), g).unwrap();
        let h = gradcam_p_map(&a.view(), &g.view());
        prop_assert!(h.iter().all(|&v| v >= 0.0));
        let doubled = gradcam_p_map(&a.view(), &(&g * 2.0).view());
        for (x, y) in h.iter().zip(doubled.iter()) {
            prop_assert!((2.0 * x - y).abs() < 1e-12);
        }
        let n = normalize(&h.view());
        prop_assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if h.iter().any(|&v| v > 0.0) {
            prop_assert!(n.iter().any(|&v| v == 1.0));
        }
    }
}
