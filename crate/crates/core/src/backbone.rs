//! Strided convolutional backbone with a top-down pyramid merge.
//!
//! Four stride-2 stages produce maps at strides 2, 4, 8 and 16. The last
//! three are projected to a common width by lateral 1x1 convolutions and
//! merged top-down with nearest-neighbour upsampling, giving P1 (stride 4),
//! P2 (stride 8) and P3 (stride 16).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvCache, Grads, ParamStore};

/// Pyramid level, ordered from finest to coarsest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    P1,
    P2,
    P3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::P1, Level::P2, Level::P3];

    pub fn stride(self) -> usize {
        match self {
            Level::P1 => 4,
            Level::P2 => 8,
            Level::P3 => 16,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index() + 1)
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Level::P1),
            "P2" => Ok(Level::P2),
            "P3" => Ok(Level::P3),
            _ => Err(Error::Validation(format!("unknown pyramid level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output widths of the four stride-2 stages.
    pub stage_widths: [usize; 4],
    /// Stage kernel size, padded by `(kernel - 1) / 2`. An even kernel keeps
    /// every output cell centred on the input block it summarizes.
    pub kernel: usize,
    /// Common channel count C of the pyramid levels.
    pub pyramid_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_widths: [16, 32, 64, 64],
            kernel: 4,
            pyramid_channels: 64,
        }
    }
}

/// Batched pyramid; each level is `(batch, h, w, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Array4<f64>; 3],
}

impl FeaturePyramid {
    pub fn level(&self, level: Level) -> &Array4<f64> {
        &self.levels[level.index()]
    }

    pub fn batch_size(&self) -> usize {
        self.levels[0].dim().0
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dim().3
    }

    /// One sample's map at `level`, as `(h, w, C)`.
    pub fn sample(&self, level: Level, index: usize) -> ArrayView3<'_, f64> {
        self.levels[level.index()].index_axis(Axis(0), index)
    }

    pub fn zeros_like(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.clone().map(|l| Array4::zeros(l.raw_dim())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Conv2d>,
    laterals: Vec<Conv2d>,
}

pub struct BackboneCache {
    stage_caches: Vec<ConvCache>,
    stage_outputs: Vec<Array4<f64>>,
    lateral_caches: Vec<ConvCache>,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.pyramid_channels == 0 || config.stage_widths.contains(&0) {
            return Err(Error::Validation("backbone widths must be positive".into()));
        }
        if config.kernel < 2 {
            return Err(Error::Validation("backbone kernel must be at least 2".into()));
        }
        let pad = (config.kernel - 1) / 2;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &width) in config.stage_widths.iter().enumerate() {
            stages.push(Conv2d::new(
                store,
                &format!("backbone.stage{}", i + 1),
                in_ch,
                width,
                config.kernel,
                2,
                pad,
                rng,
            ));
            in_ch = width;
        }
        let laterals = (1..4)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("backbone.lateral{}", i + 1),
                    config.stage_widths[i],
                    config.pyramid_channels,
                    1,
                    1,
                    0,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            stages,
            laterals,
        })
    }

    pub fn check_input(height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width} must be a positive multiple of 16 in both dimensions"
            )));
        }
        Ok(())
    }

    /// `images` is `(batch, H, W, 3)`.
    pub fn forward(
        &self,
        store: &ParamStore,
        images: &ArrayView4<f64>,
    ) -> Result<(FeaturePyramid, BackboneCache)> {
        let (b, h, w, c) = images.dim();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        Self::check_input(h, w)?;

        let mut stage_caches = Vec::with_capacity(4);
        let mut stage_outputs: Vec<Array4<f64>> = Vec::with_capacity(4);
        for (i, conv) in self.stages.iter().enumerate() {
            let input = if i == 0 {
                images.view()
            } else {
                stage_outputs[i - 1].view()
            };
            let (mut y, cache) = conv.forward(store, &input);
            nn::relu_inplace(&mut y);
            stage_caches.push(cache);
            stage_outputs.push(y);
        }

        let mut lateral_caches = Vec::with_capacity(3);
        let mut lat = Vec::with_capacity(3);
        for (i, conv) in self.laterals.iter().enumerate() {
            let (y, cache) = conv.forward(store, &stage_outputs[i + 1].view());
            lateral_caches.push(cache);
            lat.push(y);
        }
        let p3 = lat.pop().unwrap();
        let mut p2 = lat.pop().unwrap();
        p2 += &nn::upsample2(&p3.view());
        let mut p1 = lat.pop().unwrap();
        p1 += &nn::upsample2(&p2.view());

        Ok((
            FeaturePyramid {
                levels: [p1, p2, p3],
            },
            BackboneCache {
                stage_caches,
                stage_outputs,
                lateral_caches,
            },
        ))
    }

    /// Backpropagates pyramid gradients into the parameters; returns the
    /// image gradient when requested.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BackboneCache,
        d_pyramid: &FeaturePyramid,
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Array4<f64>> {
        let [d1, d2, d3] = &d_pyramid.levels;
        let mut d_p2 = d2.clone();
        d_p2 += &nn::upsample2_backward(&d1.view());
        let mut d_p3 = d3.clone();
        d_p3 += &nn::upsample2_backward(&d_p2.view());
        let d_lat = [d1, &d_p2, &d_p3];

        let mut d_stage: Vec<Option<Array4<f64>>> = vec![None; 4];
        for i in 0..3 {
            let dx = self.laterals[i]
                .backward(store, &cache.lateral_caches[i], &d_lat[i].view(), grads, true)
                .unwrap();
            d_stage[i + 1] = Some(dx);
        }
        let mut carry: Option<Array4<f64>> = None;
        for i in (0..4).rev() {
            let mut dy = match (d_stage[i].take(), carry.take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            nn::relu_backward(&cache.stage_outputs[i], &mut dy);
            let need = i > 0 || input_grad;
            carry = self.stages[i].backward(store, &cache.stage_caches[i], &dy.view(), grads, need);
        }
        carry
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: BackboneConfig) -> (ParamStore, Backbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, config, &mut rng).unwrap();
        (store, bb)
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let (store, bb) = build(BackboneConfig {
            stage_widths: [4, 8, 8, 8],
            kernel: 3,
            pyramid_channels: 64,
        });
        let x = Array4::zeros((2, 256, 192, 3));
        let (p, _) = bb.forward(&store, &x.view()).unwrap();
        assert_eq!(p.level(Level::P1).dim(), (2, 64, 48, 64));
        assert_eq!(p.level(Level::P2).dim(), (2, 32, 24, 64));
        assert_eq!(p.level(Level::P3).dim(), (2, 16, 12, 64));
    }

    #[test]
    fn zero_input_gives_zero_pyramid() {
        let (store, bb) = build(BackboneConfig::default());
        let x = Array4::zeros((1, 32, 32, 3));
        let (p, _) = bb.forward(&store, &x.view()).unwrap();
        for l in &p.levels {
            assert!(l.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_non_divisible_input() {
        let (store, bb) = build(BackboneConfig::default());
        let x = Array4::zeros((1, 250, 192, 3));
        assert!(matches!(bb.forward(&store, &x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_repeatable() {
        let (store, bb) = build(BackboneConfig {
            stage_widths: [4, 4, 4, 4],
            kernel: 3,
            pyramid_channels: 4,
        });
        let x = Array4::from_shape_fn((1, 16, 32, 3), |(_, y, x, c)| ((y * 3 + x + c) as f64).sin());
        let (a, _) = bb.forward(&store, &x.view()).unwrap();
        let (b, _) = bb.forward(&store, &x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn level_names_round_trip() {
        for l in Level::ALL {
            assert_eq!(l.to_string().parse::<Level>().unwrap(), l);
        }
    }
}
