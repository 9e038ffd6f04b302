//! Label-based mean accuracy, example-based scores, box IoU and Pearson
//! correlation, plus the report types and their table rendering.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::datamodel::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAccuracy {
    pub mean: f64,
    /// `None` for attributes without both positives and negatives.
    pub per_attribute: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

fn check_shapes(probs: &ArrayView2<f64>, labels: &ArrayView2<f64>) -> Result<()> {
    if probs.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    Ok(())
}

/// Mean over attributes of `(TP/P + TN/N) / 2`, predicting positive when
/// `prob >= threshold`.
pub fn mean_accuracy(
    probs: &ArrayView2<f64>,
    labels: &ArrayView2<f64>,
    threshold: f64,
) -> Result<MeanAccuracy> {
    check_shapes(probs, labels)?;
    let m = probs.ncols();
    let mut per_attribute = Vec::with_capacity(m);
    let mut excluded = Vec::new();
    for j in 0..m {
        let (mut tp, mut tn, mut p, mut n) = (0usize, 0usize, 0usize, 0usize);
        for (&pr, &y) in probs.column(j).iter().zip(labels.column(j)) {
            let pred = pr >= threshold;
            if y == 1.0 {
                p += 1;
                tp += pred as usize;
            } else {
                n += 1;
                tn += (!pred) as usize;
            }
        }
        if p == 0 || n == 0 {
            excluded.push(j);
            per_attribute.push(None);
        } else {
            per_attribute.push(Some((tp as f64 / p as f64 + tn as f64 / n as f64) / 2.0));
        }
    }
    let scored: Vec<f64> = per_attribute.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Empty(
            "no attribute has both positive and negative labels".into(),
        ));
    }
    Ok(MeanAccuracy {
        mean: scored.iter().sum::<f64>() / scored.len() as f64,
        per_attribute,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub accu: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
}

/// Per-sample set scores averaged over samples. A ratio with an empty
/// denominator counts 1 when both sets are empty and 0 otherwise; F1 is the
/// harmonic mean of the averaged precision and recall.
pub fn example_based(
    probs: &ArrayView2<f64>,
    labels: &ArrayView2<f64>,
    threshold: f64,
) -> Result<ExampleScores> {
    check_shapes(probs, labels)?;
    let n = probs.nrows();
    if n == 0 {
        return Err(Error::Empty("no samples to score".into()));
    }
    let (mut accu, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (pr, y) in probs.rows().into_iter().zip(labels.rows()) {
        let (mut inter, mut pred, mut truth) = (0usize, 0usize, 0usize);
        for (&p, &t) in pr.iter().zip(y.iter()) {
            let p = p >= threshold;
            let t = t == 1.0;
            inter += (p && t) as usize;
            pred += p as usize;
            truth += t as usize;
        }
        let union = pred + truth - inter;
        let both_empty = pred == 0 && truth == 0;
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                if both_empty {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        accu += ratio(inter, union);
        prec += ratio(inter, pred);
        rec += ratio(inter, truth);
    }
    let nf = n as f64;
    let (accu, prec, rec) = (accu / nf, prec / nf, rec / nf);
    let f1 = if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    };
    Ok(ExampleScores {
        accu,
        prec,
        rec,
        f1,
    })
}

/// Intersection over union of half-open pixel boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let iy = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pearson product-moment correlation.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least two points, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a sequence is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub name: String,
    pub ma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeLocalization {
    pub name: String,
    /// Positive samples with a ground-truth box.
    pub count: usize,
    pub mean_iou: Option<f64>,
    pub pcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub tau: f64,
    pub per_attribute: Vec<AttributeLocalization>,
    /// Mean of the defined per-attribute mean IoUs.
    pub mean_iou: f64,
    /// Mean of the defined per-attribute correlations.
    pub mean_pcc: Option<f64>,
}

impl LocalizationReport {
    /// `pairs[j]` holds `(confidence, iou)` for attribute `j`.
    pub fn from_pairs(names: &[String], pairs: &[Vec<(f64, f64)>], tau: f64) -> Self {
        let per_attribute: Vec<AttributeLocalization> = names
            .iter()
            .zip(pairs)
            .map(|(name, p)| {
                let conf: Vec<f64> = p.iter().map(|x| x.0).collect();
                let ious: Vec<f64> = p.iter().map(|x| x.1).collect();
                AttributeLocalization {
                    name: name.clone(),
                    count: p.len(),
                    mean_iou: (!p.is_empty()).then(|| ious.iter().sum::<f64>() / p.len() as f64),
                    pcc: pcc(&conf, &ious).ok(),
                }
            })
            .collect();
        let ious: Vec<f64> = per_attribute.iter().filter_map(|a| a.mean_iou).collect();
        let pccs: Vec<f64> = per_attribute.iter().filter_map(|a| a.pcc).collect();
        Self {
            tau,
            mean_iou: if ious.is_empty() {
                0.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            },
            mean_pcc: (!pccs.is_empty()).then(|| pccs.iter().sum::<f64>() / pccs.len() as f64),
            per_attribute,
        }
    }

    /// Pooled correlation of confidence and IoU over every scored pair.
    pub fn pooled_pcc(pairs: &[Vec<(f64, f64)>]) -> Result<f64> {
        let all: Vec<(f64, f64)> = pairs.iter().flatten().copied().collect();
        let conf: Vec<f64> = all.iter().map(|x| x.0).collect();
        let ious: Vec<f64> = all.iter().map(|x| x.1).collect();
        pcc(&conf, &ious)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ma: f64,
    pub per_attribute: Vec<AttributeScore>,
    pub excluded: Vec<String>,
    pub accu: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<Vec<LocalizationReport>>,
}

impl MetricReport {
    pub fn compute(
        names: &[String],
        probs: &ArrayView2<f64>,
        labels: &ArrayView2<f64>,
        threshold: f64,
    ) -> Result<Self> {
        let ma = mean_accuracy(probs, labels, threshold)?;
        let ex = example_based(probs, labels, threshold)?;
        Ok(Self {
            ma: ma.mean,
            per_attribute: names
                .iter()
                .zip(&ma.per_attribute)
                .map(|(n, v)| AttributeScore {
                    name: n.clone(),
                    ma: *v,
                })
                .collect(),
            excluded: ma.excluded.iter().map(|&j| names[j].clone()).collect(),
            accu: ex.accu,
            prec: ex.prec,
            rec: ex.rec,
            f1: ex.f1,
            localization: None,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>8}", "mA", "Accu", "Prec", "Rec", "F1");
        let _ = writeln!(
            s,
            "{:<8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            100.0 * self.ma,
            100.0 * self.accu,
            100.0 * self.prec,
            100.0 * self.rec,
            100.0 * self.f1
        );
        s.push('\n');
        let _ = writeln!(s, "{:<20} {:>8}", "Attribute", "mA");
        for a in &self.per_attribute {
            match a.ma {
                Some(v) => {
                    let _ = writeln!(s, "{:<20} {:>8.2}", a.name, 100.0 * v);
                }
                None => {
                    let _ = writeln!(s, "{:<20} {:>8}", a.name, "n/a");
                }
            }
        }
        if let Some(locs) = &self.localization {
            for l in locs {
                s.push('\n');
                s.push_str(&l.to_table());
            }
        }
        s
    }
}

impl LocalizationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tau = {:.2}", self.tau);
        let _ = writeln!(s, "{:<20} {:>6} {:>8} {:>8}", "Attribute", "n", "IoU", "PCCs");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
        for a in &self.per_attribute {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>8} {:>8}",
                a.name,
                a.count,
                fmt(a.mean_iou),
                fmt(a.pcc)
            );
        }
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>8.3} {:>8}",
            "Average",
            "",
            self.mean_iou,
            fmt(self.mean_pcc)
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    /// `(source name, target name, mA)` per mapped attribute.
    pub rows: Vec<(String, String, Option<f64>)>,
    pub average: f64,
}

/// mA of the mapped attributes: `probs` are the source model's outputs on
/// the target images, `attr_map` pairs source with target indices.
pub fn cross_dataset_eval(
    probs: &ArrayView2<f64>,
    target_labels: &ArrayView2<f64>,
    attr_map: &[(usize, usize)],
    source_names: &[String],
    target_names: &[String],
) -> Result<CrossDatasetReport> {
    if attr_map.is_empty() {
        return Err(Error::Validation("attribute map is empty".into()));
    }
    let mut seen_src = std::collections::BTreeSet::new();
    let mut seen_tgt = std::collections::BTreeSet::new();
    for &(s, t) in attr_map {
        if s >= probs.ncols() || t >= target_labels.ncols() {
            return Err(Error::Validation(format!(
                "mapping {s} -> {t} out of range ({} source, {} target attributes)",
                probs.ncols(),
                target_labels.ncols()
            )));
        }
        if !seen_src.insert(s) || !seen_tgt.insert(t) {
            return Err(Error::Validation(format!("mapping {s} -> {t} is not injective")));
        }
    }
    if probs.nrows() != target_labels.nrows() {
        return Err(Error::Shape("probabilities and labels differ in rows".into()));
    }
    let src: Vec<usize> = attr_map.iter().map(|m| m.0).collect();
    let tgt: Vec<usize> = attr_map.iter().map(|m| m.1).collect();
    let p = probs.select(ndarray::Axis(1), &src);
    let y = target_labels.select(ndarray::Axis(1), &tgt);
    let ma = mean_accuracy(&p.view(), &y.view(), 0.5)?;
    Ok(CrossDatasetReport {
        rows: attr_map
            .iter()
            .zip(&ma.per_attribute)
            .map(|(&(s, t), v)| (source_names[s].clone(), target_names[t].clone(), *v))
            .collect(),
        average: ma.mean,
    })
}

impl CrossDatasetReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:<20} {:>8}", "Source", "Target", "mA");
        for (a, b, v) in &self.rows {
            let v = v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(s, "{a:<20} {b:<20} {v:>8}");
        }
        let _ = writeln!(s, "{:<20} {:<20} {:>8.2}", "Average", "", 100.0 * self.average);
        s
    }
}
