//! Per-group classification heads, the imbalance-weighted binary
//! cross-entropy and the hierarchical total loss.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttributeSchema, Dataset, Group};
use crate::error::{Error, Result};
use crate::nn::{log_sigmoid, sigmoid, Grads, Linear, LinearInit, ParamStore};

/// Linear map from a group feature to that group's attribute logits.
#[derive(Debug, Clone)]
pub struct GroupHead {
    pub group: Group,
    /// Schema indices of the attributes this head scores, in output order.
    pub attributes: Vec<usize>,
    pub linear: Linear,
}

impl GroupHead {
    /// Zero-initialized unless `init` says otherwise.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        attributes: Vec<usize>,
        feature_dim: usize,
        init: LinearInit,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::new(store, name, feature_dim, attributes.len(), init, rng);
        Self {
            group,
            attributes,
            linear,
        }
    }

    pub fn forward(&self, store: &ParamStore, features: &ArrayView2<f64>) -> Array2<f64> {
        self.linear.forward(store, features)
    }
}

/// Training-set positive rate per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceWeights {
    pub r: Vec<f64>,
}

impl ImbalanceWeights {
    /// `(positive weight, negative weight)` for attribute `j`.
    pub fn omega(&self, j: usize) -> (f64, f64) {
        let r = self.r[j];
        (r.exp(), (1.0 - r).exp())
    }

    /// All weights equal to one (plain BCE); `r` is not meaningful then.
    pub fn unit(m: usize) -> UnitWeights {
        UnitWeights(m)
    }
}

/// Marker for unweighted BCE.
#[derive(Debug, Clone, Copy)]
pub struct UnitWeights(pub usize);

/// Source of per-attribute `(positive, negative)` loss weights.
pub trait LossWeights {
    fn weights(&self, j: usize) -> (f64, f64);
}

impl LossWeights for ImbalanceWeights {
    fn weights(&self, j: usize) -> (f64, f64) {
        self.omega(j)
    }
}

impl LossWeights for UnitWeights {
    fn weights(&self, _: usize) -> (f64, f64) {
        (1.0, 1.0)
    }
}

pub fn compute_pos_rates(train: &Dataset) -> Result<ImbalanceWeights> {
    if train.is_empty() {
        return Err(Error::Empty("cannot compute positive rates of an empty dataset".into()));
    }
    let n = train.len() as f64;
    let m = train.schema.num_attributes();
    let mut counts = vec![0usize; m];
    for s in &train.samples {
        for (c, &l) in counts.iter_mut().zip(&s.labels) {
            *c += l as usize;
        }
    }
    Ok(ImbalanceWeights {
        r: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

fn check_binary(labels: &ArrayView2<f64>, columns: &[usize]) -> Result<()> {
    for row in labels.rows() {
        for &j in columns {
            let y = row[j];
            if y != 0.0 && y != 1.0 {
                return Err(Error::Validation(format!(
                    "label {y} for attribute {j} is not binary"
                )));
            }
        }
    }
    Ok(())
}

/// Weighted BCE of group-local logits `(N, columns.len())` against the full
/// `(N, M)` label matrix; returns the loss and its gradient w.r.t. the local
/// logits. The loss is the negated weighted log-likelihood divided by N.
pub fn weighted_bce_local<W: LossWeights>(
    logits: &ArrayView2<f64>,
    labels: &ArrayView2<f64>,
    weights: &W,
    columns: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if k != columns.len() || labels.nrows() != n {
        return Err(Error::Shape(format!(
            "logits {n}x{k} do not match labels {:?} over {} columns",
            labels.dim(),
            columns.len()
        )));
    }
    if let Some(&j) = columns.iter().find(|&&j| j >= labels.ncols()) {
        return Err(Error::Shape(format!("attribute column {j} out of range")));
    }
    check_binary(labels, columns)?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, k));
    for i in 0..n {
        for (c, &j) in columns.iter().enumerate() {
            let a = logits[[i, c]];
            let y = labels[[i, j]];
            let (wp, wn) = weights.weights(j);
            if y == 1.0 {
                loss -= wp * log_sigmoid(a);
                grad[[i, c]] = wp * (sigmoid(a) - 1.0) * inv_n;
            } else {
                loss -= wn * log_sigmoid(-a);
                grad[[i, c]] = wn * sigmoid(a) * inv_n;
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Weighted BCE over the `columns` of full `(N, M)` logits.
pub fn weighted_bce<W: LossWeights>(
    logits: &ArrayView2<f64>,
    labels: &ArrayView2<f64>,
    weights: &W,
    columns: &[usize],
) -> Result<f64> {
    if let Some(&j) = columns.iter().find(|&&j| j >= logits.ncols()) {
        return Err(Error::Shape(format!("attribute column {j} out of range")));
    }
    let local = logits.select(Axis(1), columns);
    weighted_bce_local(&local.view(), labels, weights, columns).map(|(l, _)| l)
}

/// Sum of the per-group losses; every schema group must be present.
pub fn total_loss(group_losses: &IndexMap<Group, f64>, schema: &AttributeSchema) -> Result<f64> {
    let mut total = 0.0;
    for g in schema.group_names() {
        total += group_losses
            .get(&g)
            .ok_or_else(|| Error::Assembly(format!("no loss for group {g}")))?;
    }
    Ok(total)
}

/// Attribute logits assembled in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(N, M)` pre-sigmoid scores.
    pub logits: Array2<f64>,
}

impl Prediction {
    pub fn probabilities(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }
}

/// Writes each part's columns into an `(N, M)` matrix; every attribute must be
/// written exactly once.
pub fn assemble(parts: &[(&[usize], ArrayView2<f64>)], n: usize, m: usize) -> Result<Prediction> {
    let mut logits = Array2::zeros((n, m));
    let mut seen = vec![false; m];
    for (cols, part) in parts {
        for (c, &j) in cols.iter().enumerate() {
            if j >= m {
                return Err(Error::Assembly(format!("attribute {j} out of range")));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::Assembly(format!("attribute {j} written twice")));
            }
            logits.column_mut(j).assign(&part.column(c));
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::Assembly(format!("no logit for attribute {j}")));
    }
    Ok(Prediction { logits })
}

/// Runs every head on its own group's feature and assembles the logits.
pub fn forward_heads(
    store: &ParamStore,
    features: &IndexMap<Group, Array2<f64>>,
    heads: &[GroupHead],
    num_attributes: usize,
) -> Result<Prediction> {
    let mut outputs = Vec::with_capacity(heads.len());
    let mut n = None;
    for head in heads {
        let f = features
            .get(&head.group)
            .ok_or_else(|| Error::Assembly(format!("missing feature for group {}", head.group)))?;
        n = Some(f.nrows());
        outputs.push(head.forward(store, &f.view()));
    }
    let parts: Vec<(&[usize], ArrayView2<f64>)> = heads
        .iter()
        .zip(&outputs)
        .map(|(h, o)| (h.attributes.as_slice(), o.view()))
        .collect();
    assemble(&parts, n.unwrap_or(0), num_attributes)
}

/// Backward of [`forward_heads`] followed by a per-group weighted BCE;
/// returns the total loss and the gradient per group feature.
pub fn heads_loss_backward<W: LossWeights>(
    store: &ParamStore,
    features: &IndexMap<Group, Array2<f64>>,
    heads: &[GroupHead],
    labels: &ArrayView2<f64>,
    weights: &W,
    mut grads: Option<&mut Grads>,
) -> Result<(f64, IndexMap<Group, Array2<f64>>)> {
    let mut total = 0.0;
    let mut d_features = IndexMap::new();
    for head in heads {
        let f = features
            .get(&head.group)
            .ok_or_else(|| Error::Assembly(format!("missing feature for group {}", head.group)))?;
        let logits = head.forward(store, &f.view());
        let (loss, d_logits) = weighted_bce_local(&logits.view(), labels, weights, &head.attributes)?;
        total += loss;
        let d_f = head
            .linear
            .backward(store, &f.view(), &d_logits.view(), grads.as_deref_mut());
        d_features.insert(head.group, d_f);
    }
    Ok((total, d_features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_value_at_zero_logit() {
        let w = ImbalanceWeights { r: vec![0.5] };
        let loss = weighted_bce(&array![[0.0]].view(), &array![[1.0]].view(), &w, &[0]).unwrap();
        let oracle = 0.5f64.exp() * 0.693_147_180_559_945_3;
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 1.142_806_5).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logit_has_tiny_loss() {
        let w = ImbalanceWeights { r: vec![0.9] };
        let loss = weighted_bce(&array![[30.0]].view(), &array![[1.0]].view(), &w, &[0]).unwrap();
        assert!(loss < 1e-10);
        let big = weighted_bce(&array![[-800.0]].view(), &array![[1.0]].view(), &w, &[0]).unwrap();
        assert!(big.is_finite());
    }

    #[test]
    fn half_rate_weights_are_symmetric() {
        let w = ImbalanceWeights { r: vec![0.5] };
        let (p, n) = w.omega(0);
        assert_eq!(p, n);
        assert_eq!(p, 0.5f64.exp());
    }

    #[test]
    fn non_binary_label_rejected() {
        let w = ImbalanceWeights { r: vec![0.5] };
        let err = weighted_bce(&array![[0.0]].view(), &array![[0.5]].view(), &w, &[0]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn total_loss_sums_groups() {
        let schema = AttributeSchema::pa100k();
        let losses: IndexMap<Group, f64> = [
            (Group::Head, 1.0),
            (Group::Torso, 2.0),
            (Group::Bottom, 3.0),
            (Group::All, 4.0),
        ]
        .into_iter()
        .collect();
        assert_eq!(total_loss(&losses, &schema).unwrap(), 10.0);
        let mut partial = losses.clone();
        partial.shift_remove(&Group::Torso);
        assert!(total_loss(&partial, &schema).is_err());
    }

    #[test]
    fn assembly_requires_every_attribute() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0]];
        let p = assemble(&[(&[2, 0], a.view()), (&[1], b.view())], 1, 3).unwrap();
        assert_eq!(p.logits, array![[2.0, 3.0, 1.0]]);
        assert!(assemble(&[(&[2, 0], a.view())], 1, 3).is_err());
        assert!(assemble(&[(&[0, 0], a.view())], 1, 3).is_err());
    }
}
