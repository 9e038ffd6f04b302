//! Two-phase training: parallel per-level branches while searching, then
//! training on the frozen scales with best-validation-mA selection.

use indexmap::IndexMap;
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afss::SelectionMode;
use crate::backbone::BackboneConfig;
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::heads::{compute_pos_rates, ImbalanceWeights};
use crate::metrics::{cross_dataset_eval as cross_eval_probs, mean_accuracy, CrossDatasetReport, MetricReport};
use crate::model::{Architecture, Batch, ModelConfig, SspNet};
use crate::nn::Adam;
use crate::ple::PleVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs of the scale search, counted inside `epochs`.
    pub search_epochs: usize,
    pub variant: PleVariant,
    pub architecture: Architecture,
    pub offset_slots: usize,
    pub sparse_ratio: f64,
    pub seed: u64,
    /// Group feature width D.
    pub feature_dim: usize,
    /// Pyramid channel count C.
    pub channels: usize,
    pub stage_widths: [usize; 4],
    /// Backbone stage kernel size.
    pub kernel: usize,
    /// Localization threshold.
    pub tau: f64,
    /// Decision threshold on probabilities.
    pub threshold: f64,
    pub per_attribute: bool,
    /// Multiply the learning rate by `lr_decay_factor` every this many epochs
    /// (0 keeps it constant).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            search_epochs: 5,
            variant: PleVariant::R,
            architecture: Architecture::Ssp,
            offset_slots: 3,
            sparse_ratio: 0.75,
            seed: 0,
            feature_dim: 256,
            channels: 64,
            stage_widths: BackboneConfig::default().stage_widths,
            kernel: BackboneConfig::default().kernel,
            tau: 0.5,
            threshold: 0.5,
            per_attribute: false,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("offset_slots", self.offset_slots),
            ("feature_dim", self.feature_dim),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.stage_widths.contains(&0) || self.kernel < 2 {
            return Err(Error::Validation("stage_widths must be positive and kernel at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if self.architecture == Architecture::Ssp {
            if self.search_epochs == 0 {
                return Err(Error::Validation("search_epochs must be positive".into()));
            }
            if self.search_epochs >= self.epochs {
                return Err(Error::Validation(format!(
                    "search_epochs ({}) must be smaller than epochs ({})",
                    self.search_epochs, self.epochs
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Validation("tau and threshold must lie in [0, 1]".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            backbone: BackboneConfig {
                stage_widths: self.stage_widths,
                kernel: self.kernel,
                pyramid_channels: self.channels,
            },
            variant: self.variant,
            feature_dim: self.feature_dim,
            offset_slots: self.offset_slots,
            sparse_ratio: self.sparse_ratio,
            per_attribute: self.per_attribute,
            zero_heads: true,
        }
    }

    /// Sets one field from `key=value` text. Values are read as JSON when
    /// they parse, otherwise as a string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut json = serde_json::to_value(&*self).expect("config serializes");
        let obj = json.as_object_mut().expect("config is an object");
        if !obj.contains_key(key) {
            return Err(Error::Validation(format!("unknown config key {key:?}")));
        }
        let parsed = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        obj.insert(key.to_string(), parsed);
        *self = serde_json::from_value(json)
            .map_err(|e| Error::Validation(format!("bad value for {key:?}: {e}")))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("train config: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Search,
    Main,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-batch loss per group (summed over a group's branches).
    pub group_losses: IndexMap<String, f64>,
    pub total_loss: f64,
    /// Validation mA per `Unit/Level` while searching, per group after.
    pub val_ma: IndexMap<String, f64>,
    /// Overall validation mA once the selection is frozen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mean_ma: Option<f64>,
}

/// A trained model with everything needed to evaluate or resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: SspNet,
    pub weights: ImbalanceWeights,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

fn check_same_schema(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.schema != b.schema {
        return Err(Error::SchemaMismatch(
            "train and validation datasets use different schemas".into(),
        ));
    }
    Ok(())
}

/// mA over a subset of columns, or chance when no column is scoreable.
fn subset_ma(probs: &ndarray::ArrayView2<f64>, labels: &ndarray::ArrayView2<f64>, cols: &[usize], threshold: f64) -> f64 {
    let p = probs.select(Axis(1), cols);
    let y = labels.select(Axis(1), cols);
    mean_accuracy(&p.view(), &y.view(), threshold)
        .map(|r| r.mean)
        .unwrap_or(0.5)
}

pub fn train(config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<Checkpoint> {
    train_with(config, train, val, |_| {})
}

/// [`train`] with a callback receiving every epoch's log line.
pub fn train_with(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    config.validate()?;
    check_same_schema(train, val)?;
    if val.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let weights = compute_pos_rates(train)?;
    let mut model = SspNet::new(config.model_config(), train.schema.clone(), config.seed)?;
    model.check_dataset(train)?;
    model.check_dataset(val)?;

    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_labels = val.label_matrix();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, SspNet, usize)> = None;

    for epoch in 1..=config.epochs {
        if config.lr_decay_every > 0 && epoch > 1 && (epoch - 1) % config.lr_decay_every == 0 {
            adam.lr *= config.lr_decay_factor;
        }
        let phase = match model.mode() {
            SelectionMode::Searching => Phase::Search,
            SelectionMode::Frozen => Phase::Main,
        };
        let frozen_before = model.selection.clone();
        order.shuffle(&mut rng);
        let mut group_losses: IndexMap<String, f64> = IndexMap::new();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::from_samples(chunk.iter().map(|&i| &train.samples[i]));
            let (loss, mut grads) = model.loss_and_grads(&batch, &weights)?;
            if let Some(max) = config.clip_norm {
                let norm = grads.global_norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            adam.step(&mut model.store, &grads);
            for (g, l) in loss.groups {
                *group_losses.entry(g).or_insert(0.0) += l;
            }
            total += loss.total;
            batches += 1;
            if phase == Phase::Main {
                assert_eq!(model.selection, frozen_before, "frozen selection changed");
            }
        }
        let nb = batches as f64;
        group_losses.values_mut().for_each(|v| *v /= nb);
        total /= nb;

        let mut val_ma = IndexMap::new();
        let mut val_mean_ma = None;
        match phase {
            Phase::Search => {
                let probs = model.branch_probabilities(val, config.batch_size)?;
                let mut rounds = Vec::new();
                for (b, p) in probs.iter().enumerate() {
                    let br = &model.branches[b];
                    let local_labels = val_labels.select(Axis(1), &br.head.attributes);
                    for (unit, cols) in model.branch_units(b) {
                        let ma = subset_ma(&p.view(), &local_labels.view(), &cols, config.threshold);
                        rounds.push((unit, br.level, ma));
                    }
                }
                for (unit, level, ma) in rounds {
                    model.selection.record_round(&unit, level, ma)?;
                    val_ma.insert(format!("{unit}/{level}"), ma);
                }
                if epoch == config.search_epochs {
                    model.freeze()?;
                    adam.retain_present(&model.store);
                }
            }
            Phase::Main => {
                let probs = model.predict_dataset(val, config.batch_size)?;
                let overall = mean_accuracy(&probs.view(), &val_labels.view(), config.threshold)
                    .map(|r| r.mean)
                    .unwrap_or(0.5);
                for (g, attrs) in &model.schema.groups {
                    val_ma.insert(
                        g.to_string(),
                        subset_ma(&probs.view(), &val_labels.view(), attrs, config.threshold),
                    );
                }
                val_mean_ma = Some(overall);
                if best.as_ref().map_or(true, |(b, _, _)| overall > *b) {
                    best = Some((overall, model.clone(), epoch));
                }
            }
        }
        let log = EpochLog {
            epoch,
            phase,
            group_losses,
            total_loss: total,
            val_ma,
            val_mean_ma,
        };
        on_epoch(&log);
        history.push(log);
    }

    let (_, model, epoch) = best.expect("at least one main-phase epoch");
    Ok(Checkpoint {
        config: config.clone(),
        model,
        weights,
        epoch,
        history,
    })
}

/// Full metric report of a model on `test`.
pub fn evaluate(model: &SspNet, test: &Dataset, threshold: f64) -> Result<MetricReport> {
    model.check_dataset(test)?;
    if test.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    let probs = model.predict_dataset(test, 32)?;
    let labels = test.label_matrix();
    MetricReport::compute(&test.schema.attributes, &probs.view(), &labels.view(), threshold)
}

/// mA of shared attributes on a dataset with a different schema;
/// `attr_map` pairs model attribute indices with target indices.
pub fn cross_dataset_eval(
    model: &SspNet,
    target: &Dataset,
    attr_map: &[(usize, usize)],
) -> Result<CrossDatasetReport> {
    if target.is_empty() {
        return Err(Error::Empty("target dataset is empty".into()));
    }
    if target.schema.input_size != model.schema.input_size {
        return Err(Error::SchemaMismatch(format!(
            "model input {:?}, target input {:?}",
            model.schema.input_size, target.schema.input_size
        )));
    }
    if model.config.variant == PleVariant::K
        && model.config.architecture == Architecture::Ssp
        && !target.has_keypoints()
    {
        return Err(Error::MissingPrior("PLE-K needs keypoints on the target set".into()));
    }
    for &(s, t) in attr_map {
        if s >= model.schema.num_attributes() || t >= target.schema.num_attributes() {
            return Err(Error::Validation(format!("mapping {s} -> {t} out of range")));
        }
    }
    let probs = model.predict_dataset(target, 32)?;
    let labels = target.label_matrix();
    cross_eval_probs(
        &probs.view(),
        &labels.view(),
        attr_map,
        &model.schema.attributes,
        &target.schema.attributes,
    )
}
