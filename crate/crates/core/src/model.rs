//! Model composition: backbone, one (extractor, head) branch per selection
//! candidate, and the scale-selection state that decides which branches
//! survive.

use indexmap::IndexMap;
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afss::{ScaleSelectionState, SelectionMode};
use crate::backbone::{Backbone, BackboneCache, BackboneConfig, FeaturePyramid};
use crate::datamodel::{AttributeSchema, Dataset, Group, Keypoint, Sample};
use crate::error::{Error, Result};
use crate::heads::{assemble, weighted_bce_local, GroupHead, LossWeights, Prediction};
use crate::nn::{Grads, LinearInit, ParamStore};
use crate::ple::{build_extractor, Extractor, ExtractorCache, PleVariant};
use crate::Level;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Per-group prior extraction with scale selection.
    Ssp,
    /// Global average pooling of P3 and one head over all attributes.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub backbone: BackboneConfig,
    pub variant: PleVariant,
    /// Group feature width D.
    pub feature_dim: usize,
    /// Offset slots per reference point.
    pub offset_slots: usize,
    pub sparse_ratio: f64,
    /// Select a level per attribute instead of per group.
    pub per_attribute: bool,
    /// Zero-initialize the classification heads.
    pub zero_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Ssp,
            backbone: BackboneConfig::default(),
            variant: PleVariant::R,
            feature_dim: 256,
            offset_slots: 3,
            sparse_ratio: 0.75,
            per_attribute: false,
            zero_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Validation("feature_dim must be positive".into()));
        }
        if self.offset_slots == 0 {
            return Err(Error::Validation("offset_slots must be positive".into()));
        }
        if !(self.sparse_ratio > 0.0 && self.sparse_ratio <= 1.0) {
            return Err(Error::Validation(format!(
                "sparse_ratio {} outside (0, 1]",
                self.sparse_ratio
            )));
        }
        Ok(())
    }
}

/// One candidate: an extractor on one level feeding one group head.
#[derive(Debug, Clone)]
pub struct Branch {
    pub group: Group,
    pub level: Level,
    pub prefix: String,
    pub extractor: Extractor,
    pub head: GroupHead,
    /// Per head output, whether it contributes to loss and prediction.
    pub active: Vec<bool>,
}

impl Branch {
    pub fn key(&self) -> String {
        format!("{}/{}", self.group, self.level)
    }

    /// Schema indices of the active outputs.
    pub fn active_attributes(&self) -> Vec<usize> {
        self.head
            .attributes
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(&j, _)| j)
            .collect()
    }
}

/// A batch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, H, W, 3)`.
    pub images: Array4<f64>,
    /// `(B, M)` zeros and ones.
    pub labels: Array2<f64>,
    pub keypoints: Vec<Option<Vec<Keypoint>>>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Batch {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let m = samples.first().map(|s| s.labels.len()).unwrap_or(0);
        Batch {
            images: crate::datamodel::stack_images(samples.iter().copied()),
            labels: Array2::from_shape_fn((samples.len(), m), |(i, j)| samples[i].labels[j] as f64),
            keypoints: samples.iter().map(|s| s.keypoints.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct BranchOutput {
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    cache: ExtractorCache,
}

pub struct Forward {
    pub pyramid: FeaturePyramid,
    backbone_cache: BackboneCache,
    pub branches: Vec<BranchOutput>,
}

/// Loss breakdown of one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// Keyed by branch (`Group/Level`).
    pub branches: IndexMap<String, f64>,
    /// Summed per group over its branches.
    pub groups: IndexMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct SspNet {
    pub config: ModelConfig,
    pub schema: AttributeSchema,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub branches: Vec<Branch>,
    pub selection: ScaleSelectionState,
}

fn level_extent(schema: &AttributeSchema, level: Level) -> (usize, usize) {
    let [h, w] = schema.input_size;
    (h / level.stride(), w / level.stride())
}

impl SspNet {
    /// A fresh model in the searching state (or, for the global baseline,
    /// with its single branch fixed on P3).
    pub fn new(config: ModelConfig, schema: AttributeSchema, seed: u64) -> Result<Self> {
        let selection = match config.architecture {
            Architecture::Global => ScaleSelectionState::fixed([("global", Level::P3)]),
            Architecture::Ssp => ScaleSelectionState::new(Self::unit_names(&config, &schema)),
        };
        Self::with_selection(config, schema, selection, seed)
    }

    fn unit_names(config: &ModelConfig, schema: &AttributeSchema) -> Vec<String> {
        if config.per_attribute {
            schema.attributes.clone()
        } else {
            schema.group_names().map(|g| g.to_string()).collect()
        }
    }

    /// Builds the branches implied by `selection`: every candidate while
    /// searching, only the chosen ones once frozen.
    pub fn with_selection(
        config: ModelConfig,
        schema: AttributeSchema,
        selection: ScaleSelectionState,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let [h, w] = schema.input_size;
        Backbone::check_input(h, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let c = config.backbone.pyramid_channels;
        let head_init = if config.zero_heads {
            LinearInit::Zeros
        } else {
            LinearInit::FanIn
        };
        let mut branches = Vec::new();
        match config.architecture {
            Architecture::Global => {
                let prefix = "global".to_string();
                let proj = crate::nn::Linear::new(
                    &mut store,
                    &format!("{prefix}.proj"),
                    c,
                    config.feature_dim,
                    LinearInit::FanIn,
                    &mut rng,
                );
                let m = schema.num_attributes();
                let head = GroupHead::new(
                    &mut store,
                    &format!("{prefix}.head"),
                    Group::All,
                    (0..m).collect(),
                    config.feature_dim,
                    head_init,
                    &mut rng,
                );
                branches.push(Branch {
                    group: Group::All,
                    level: Level::P3,
                    prefix,
                    extractor: Extractor::GlobalPool { proj },
                    head,
                    active: vec![true; m],
                });
            }
            Architecture::Ssp => {
                let groups: Vec<(Group, Vec<usize>)> =
                    schema.groups.iter().map(|(g, a)| (*g, a.clone())).collect();
                for (group, attrs) in groups {
                    for level in Level::ALL {
                        let active: Vec<bool> = match selection.frozen() {
                            None => vec![true; attrs.len()],
                            Some(f) => attrs
                                .iter()
                                .map(|&j| {
                                    let unit = if config.per_attribute {
                                        schema.attributes[j].clone()
                                    } else {
                                        group.to_string()
                                    };
                                    f.get(&unit) == Some(&level)
                                })
                                .collect(),
                        };
                        if !active.iter().any(|&a| a) {
                            continue;
                        }
                        let prefix = format!("branch.{group}.{level}");
                        let extractor = build_extractor(
                            &mut store,
                            &prefix,
                            config.variant,
                            &schema,
                            group,
                            level_extent(&schema, level),
                            c,
                            config.feature_dim,
                            config.offset_slots,
                            config.sparse_ratio,
                            &mut rng,
                        )?;
                        let head = GroupHead::new(
                            &mut store,
                            &format!("{prefix}.head"),
                            group,
                            attrs.clone(),
                            config.feature_dim,
                            head_init,
                            &mut rng,
                        );
                        branches.push(Branch {
                            group,
                            level,
                            prefix,
                            extractor,
                            head,
                            active,
                        });
                    }
                }
            }
        }
        Ok(Self {
            config,
            schema,
            store,
            backbone,
            branches,
            selection,
        })
    }

    pub fn mode(&self) -> SelectionMode {
        self.selection.mode()
    }

    /// Errors unless the variant's prior is available on every sample.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.schema.attributes != self.schema.attributes || data.schema.groups != self.schema.groups {
            return Err(Error::SchemaMismatch(format!(
                "model has {} attributes, dataset has {}",
                self.schema.num_attributes(),
                data.schema.num_attributes()
            )));
        }
        if data.schema.input_size != self.schema.input_size {
            return Err(Error::SchemaMismatch(format!(
                "model input {:?}, dataset input {:?}",
                self.schema.input_size, data.schema.input_size
            )));
        }
        if self.config.architecture == Architecture::Ssp
            && self.config.variant == PleVariant::K
            && !data.has_keypoints()
        {
            return Err(Error::MissingPrior(
                "PLE-K needs keypoints on every sample; use the R or S variant".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Batch) -> Result<Forward> {
        self.forward_images(&batch.images.view(), Some(&batch.keypoints))
    }

    pub fn forward_images(
        &self,
        images: &ArrayView4<f64>,
        keypoints: Option<&[Option<Vec<Keypoint>>]>,
    ) -> Result<Forward> {
        let (pyramid, backbone_cache) = self.backbone.forward(&self.store, images)?;
        let mut branches = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let level = pyramid.level(br.level).view();
            let (features, cache) =
                br.extractor
                    .forward(&self.store, &level, br.level.stride(), keypoints)?;
            let logits = br.head.forward(&self.store, &features.view());
            branches.push(BranchOutput {
                features,
                logits,
                cache,
            });
        }
        Ok(Forward {
            pyramid,
            backbone_cache,
            branches,
        })
    }

    /// Assembles the active outputs of every branch into schema order.
    pub fn prediction(&self, fwd: &Forward) -> Result<Prediction> {
        let n = fwd.pyramid.batch_size();
        let selected: Vec<(Vec<usize>, Array2<f64>)> = self
            .branches
            .iter()
            .zip(&fwd.branches)
            .map(|(br, out)| {
                let local: Vec<usize> = (0..br.active.len()).filter(|&c| br.active[c]).collect();
                (br.active_attributes(), out.logits.select(Axis(1), &local))
            })
            .collect();
        let parts: Vec<(&[usize], ArrayView2<f64>)> =
            selected.iter().map(|(a, l)| (a.as_slice(), l.view())).collect();
        if self.mode() == SelectionMode::Searching {
            return Err(Error::State(
                "prediction requires a frozen scale selection".into(),
            ));
        }
        assemble(&parts, n, self.schema.num_attributes())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let fwd = self.forward(batch)?;
        self.prediction(&fwd)
    }

    /// Probabilities for a whole dataset, `(N, M)`.
    pub fn predict_dataset(&self, data: &Dataset, batch_size: usize) -> Result<Array2<f64>> {
        let m = self.schema.num_attributes();
        let mut out = Array2::zeros((data.len(), m));
        for (k, chunk) in data.samples.chunks(batch_size.max(1)).enumerate() {
            let batch = Batch::from_samples(chunk);
            let p = self.predict(&batch)?.probabilities();
            let start = k * batch_size.max(1);
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&p);
        }
        Ok(out)
    }

    /// Per-branch probabilities over a dataset, each `(N, |group|)`; used to
    /// score candidates while searching.
    pub fn branch_probabilities(&self, data: &Dataset, batch_size: usize) -> Result<Vec<Array2<f64>>> {
        let mut out: Vec<Array2<f64>> = self
            .branches
            .iter()
            .map(|b| Array2::zeros((data.len(), b.head.attributes.len())))
            .collect();
        for (k, chunk) in data.samples.chunks(batch_size.max(1)).enumerate() {
            let batch = Batch::from_samples(chunk);
            let fwd = self.forward(&batch)?;
            let start = k * batch_size.max(1);
            for (o, b) in out.iter_mut().zip(&fwd.branches) {
                o.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                    .assign(&b.logits.mapv(crate::nn::sigmoid));
            }
        }
        Ok(out)
    }

    /// Loss of every branch on its active outputs and the gradient of the
    /// summed loss with respect to all parameters.
    pub fn loss_and_grads<W: LossWeights>(
        &self,
        batch: &Batch,
        weights: &W,
    ) -> Result<(StepLoss, Grads)> {
        let fwd = self.forward(batch)?;
        let mut grads = Grads::new();
        let mut loss = StepLoss::default();
        let mut d_pyr = fwd.pyramid.zeros_like();
        let labels = batch.labels.view();
        for (br, out) in self.branches.iter().zip(&fwd.branches) {
            let local: Vec<usize> = (0..br.active.len()).filter(|&c| br.active[c]).collect();
            let cols = br.active_attributes();
            let logits = out.logits.select(Axis(1), &local);
            let (l, d_sel) = weighted_bce_local(&logits.view(), &labels, weights, &cols)?;
            let mut d_logits = Array2::zeros(out.logits.raw_dim());
            for (k, &c) in local.iter().enumerate() {
                d_logits.column_mut(c).assign(&d_sel.column(k));
            }
            loss.branches.insert(br.key(), l);
            *loss.groups.entry(br.group.to_string()).or_insert(0.0) += l;
            loss.total += l;

            let d_feat = br.head.linear.backward(
                &self.store,
                &out.features.view(),
                &d_logits.view(),
                Some(&mut grads),
            );
            let level = fwd.pyramid.level(br.level).view();
            br.extractor.backward(
                &self.store,
                &level,
                &out.cache,
                &d_feat.view(),
                &mut d_pyr.levels[br.level.index()],
                Some(&mut grads),
            );
        }
        self.backbone
            .backward(&self.store, &fwd.backbone_cache, &d_pyr, &mut grads, false);
        Ok((loss, grads))
    }

    /// The branch whose active outputs include attribute `j`.
    pub fn branch_for(&self, j: usize) -> Result<usize> {
        if j >= self.schema.num_attributes() {
            return Err(Error::Validation(format!(
                "attribute {j} out of range for {} attributes",
                self.schema.num_attributes()
            )));
        }
        if self.mode() == SelectionMode::Searching {
            return Err(Error::State("model scale selection is not frozen".into()));
        }
        self.branches
            .iter()
            .position(|b| b.active_attributes().contains(&j))
            .ok_or_else(|| Error::Assembly(format!("no branch scores attribute {j}")))
    }

    /// For one image: the selected level's map `A` for attribute `j`, the
    /// gradient `∂a_j/∂A` and the logit `a_j`.
    pub fn attribute_gradient(
        &self,
        sample: &Sample,
        j: usize,
    ) -> Result<(Array3<f64>, Array3<f64>, f64)> {
        let bi = self.branch_for(j)?;
        let br = &self.branches[bi];
        let images = sample.image.view().insert_axis(Axis(0));
        let kps = [sample.keypoints.clone()];
        let (pyramid, _) = self.backbone.forward(&self.store, &images)?;
        let level = pyramid.level(br.level).view();
        let (features, cache) =
            br.extractor
                .forward(&self.store, &level, br.level.stride(), Some(&kps))?;
        let logits = br.head.forward(&self.store, &features.view());
        let c = br.head.attributes.iter().position(|&a| a == j).unwrap();
        let mut d_logits = Array2::zeros(logits.raw_dim());
        d_logits[[0, c]] = 1.0;
        let d_feat = br
            .head
            .linear
            .backward(&self.store, &features.view(), &d_logits.view(), None);
        let mut d_level = Array4::zeros(level.raw_dim());
        br.extractor
            .backward(&self.store, &level, &cache, &d_feat.view(), &mut d_level, None);
        Ok((
            level.index_axis(Axis(0), 0).to_owned(),
            d_level.index_axis_move(Axis(0), 0),
            logits[[0, c]],
        ))
    }

    /// Fixes the selection and discards branches that lost.
    pub fn freeze(&mut self) -> Result<()> {
        self.selection.freeze()?;
        let frozen = self.selection.frozen().unwrap().clone();
        let per_attribute = self.config.per_attribute;
        let schema = self.schema.clone();
        let mut kept = Vec::new();
        for mut br in std::mem::take(&mut self.branches) {
            br.active = br
                .head
                .attributes
                .iter()
                .map(|&j| {
                    let unit = if per_attribute {
                        schema.attributes[j].clone()
                    } else {
                        br.group.to_string()
                    };
                    frozen.get(&unit) == Some(&br.level)
                })
                .collect();
            if br.active.iter().any(|&a| a) {
                kept.push(br);
            } else {
                self.store.remove_prefix(&format!("{}.", br.prefix));
            }
        }
        self.branches = kept;
        Ok(())
    }

    /// Selection units scored by branch `b`, paired with the head outputs
    /// that belong to each.
    pub fn branch_units(&self, b: usize) -> Vec<(String, Vec<usize>)> {
        let br = &self.branches[b];
        if self.config.per_attribute {
            br.head
                .attributes
                .iter()
                .enumerate()
                .map(|(c, &j)| (self.schema.attributes[j].clone(), vec![c]))
                .collect()
        } else {
            vec![(br.group.to_string(), (0..br.head.attributes.len()).collect())]
        }
    }
}
