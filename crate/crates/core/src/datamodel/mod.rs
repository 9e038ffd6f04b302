//! Samples, datasets, attribute schemas, manifest IO and the synthetic
//! pedestrian generator.

pub mod imaging;
mod manifest;
mod schema;
mod synthetic;

use std::collections::BTreeMap;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, save_manifest};
pub use schema::{
    default_keypoint_groups, default_prior_regions, load_schema, AttributeSchema, Group,
    PriorRegion, NUM_KEYPOINTS,
};
pub use synthetic::{
    generate_synthetic, PatchDescriptor, PatchTexture, SyntheticAttribute, SyntheticSpec,
};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl From<[usize; 4]> for BoundingBox {
    fn from([x_min, y_min, x_max, y_max]: [usize; 4]) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> usize {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_valid_within(&self, height: usize, width: usize) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max <= width
            && self.y_max <= height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y_min..self.y_max).contains(&row) && (self.x_min..self.x_max).contains(&col)
    }
}

/// A body keypoint in image pixels. Points outside the frame must say so.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub in_frame: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(height, width, 3)` intensities in `[0, 1]`.
    pub image: Array3<f64>,
    pub labels: Vec<u8>,
    pub keypoints: Option<Vec<Keypoint>>,
    pub gt_boxes: BTreeMap<usize, BoundingBox>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub schema: AttributeSchema,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, schema: AttributeSchema, split: Split) -> Result<Self> {
        let m = schema.num_attributes();
        for (i, s) in samples.iter().enumerate() {
            if s.labels.len() != m {
                return Err(Error::SchemaMismatch(format!(
                    "sample {i} has {} labels, schema declares {m}",
                    s.labels.len()
                )));
            }
            if s.labels.iter().any(|&l| l > 1) {
                return Err(Error::Validation(format!("sample {i} has a non-binary label")));
            }
        }
        Ok(Self {
            samples,
            schema,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_keypoints(&self) -> bool {
        self.samples.iter().all(|s| s.keypoints.is_some())
    }

    pub fn has_boxes(&self) -> bool {
        self.samples.iter().any(|s| !s.gt_boxes.is_empty())
    }

    /// Splits off the first `n` samples as one dataset and the rest as another.
    pub fn split_at(mut self, n: usize, first: Split, second: Split) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let schema = self.schema.clone();
        (
            Dataset {
                samples: self.samples,
                schema: schema.clone(),
                split: first,
            },
            Dataset {
                samples: rest,
                schema,
                split: second,
            },
        )
    }

    /// Labels as an `(N, M)` matrix of zeros and ones.
    pub fn label_matrix(&self) -> ndarray::Array2<f64> {
        let m = self.schema.num_attributes();
        ndarray::Array2::from_shape_fn((self.samples.len(), m), |(i, j)| {
            self.samples[i].labels[j] as f64
        })
    }
}

/// Stacks channel-last images of equal size into a batch.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Array4<f64> {
    let views: Vec<_> = samples.into_iter().map(|s| s.image.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).expect("images share one size")
}
