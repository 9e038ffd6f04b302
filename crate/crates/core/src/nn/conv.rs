use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand::Rng;

use super::params::{Grads, ParamStore};

/// 2-D convolution over channel-last `(batch, height, width, channels)` maps,
/// computed as im2col followed by a matrix product.
///
/// The kernel is stored as `(out, k, k, in)` so a flattened row matches the
/// im2col column order.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    input_dims: (usize, usize, usize, usize),
    output_dims: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = store.uniform(
            format!("{name}.weight"),
            &[out_channels, kernel, kernel, in_channels],
            bound,
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), &[out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ndarray::ArrayView2<'a, f64> {
        let k = self.kernel * self.kernel * self.in_channels;
        store
            .get(&self.weight)
            .view()
            .into_shape_with_order((self.out_channels, k))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&self, store: &ParamStore, x: &ArrayView4<f64>) -> (Array4<f64>, ConvCache) {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x, ho, wo);
        let mut y = cols.dot(&self.weight_matrix(store).t());
        let bias = store.view1(&self.bias);
        y += &bias;
        let y = y
            .into_shape_with_order((b, ho, wo, self.out_channels))
            .expect("conv output is contiguous");
        let cache = ConvCache {
            cols,
            input_dims: (b, h, w, c),
            output_dims: (ho, wo),
        };
        (y, cache)
    }

    /// Accumulates kernel and bias gradients; returns the input gradient when
    /// `input_grad` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dy: &ArrayView4<f64>,
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (b, _, _, _) = cache.input_dims;
        let (ho, wo) = cache.output_dims;
        let rows = b * ho * wo;
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, self.out_channels))
            .expect("conv grad is contiguous");
        let dw = dy2.t().dot(&cache.cols);
        let dw = dw
            .into_shape_with_order((self.out_channels, self.kernel, self.kernel, self.in_channels))
            .unwrap();
        grads.accumulate(&self.weight, dw);
        grads.accumulate(&self.bias, dy2.sum_axis(Axis(0)));
        if !input_grad {
            return None;
        }
        let dcols = dy2.dot(&self.weight_matrix(store));
        Some(self.col2im(&dcols, cache.input_dims, ho, wo))
    }

    fn im2col(&self, x: &ArrayView4<f64>, ho: usize, wo: usize) -> Array2<f64> {
        let (b, h, w, c) = x.dim();
        let k = self.kernel;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let row_len = k * k * c;
        let mut cols = Array2::<f64>::zeros((b * ho * wo, row_len));
        let cs = cols.as_slice_mut().unwrap();
        let pad = self.padding as isize;
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        dcols: &Array2<f64>,
        dims: (usize, usize, usize, usize),
        ho: usize,
        wo: usize,
    ) -> Array4<f64> {
        let (b, h, w, c) = dims;
        let k = self.kernel;
        let row_len = k * k * c;
        let mut dx = Array4::<f64>::zeros((b, h, w, c));
        let ds = dcols.as_slice().unwrap();
        let xs = dx.as_slice_mut().unwrap();
        let pad = self.padding as isize;
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for (d, s) in xs[dst..dst + c].iter_mut().zip(&ds[src..src + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Direct nested-loop convolution for comparison.
    fn naive(store: &ParamStore, conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, c) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let wt = store.view4(&conv.weight);
        let bias = store.view1(&conv.bias);
        let mut y = Array4::zeros((b, ho, wo, conv.out_channels));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..conv.out_channels {
                        let mut acc = bias[o];
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc += wt[[o, ky, kx, ci]] * x[[bi, iy as usize, ix as usize, ci]];
                                }
                            }
                        }
                        y[[bi, oy, ox, o]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 3, 5, 3, 2, 1, &mut rng);
        *store.get_mut(&conv.bias) = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[5]), 0.25);
        let x = Array4::from_shape_fn((2, 7, 6, 3), |(b, y, x, c)| {
            ((b * 31 + y * 7 + x * 3 + c) as f64 * 0.37).sin()
        });
        let (y, _) = conv.forward(&store, &x.view());
        let expect = naive(&store, &conv, &x);
        assert_eq!(y.dim(), (2, 4, 3, 5));
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 5, 4, 2), |(_, y, x, c)| ((y * 4 + x + c) as f64).cos());
        let probe = Array4::from_shape_fn((1, 3, 2, 3), |(_, y, x, c)| 1.0 + (y + 2 * x + c) as f64 * 0.1);
        let loss = |x: &Array4<f64>| {
            let (y, _) = conv.forward(&store, &x.view());
            (&y * &probe).sum()
        };
        let (_, cache) = conv.forward(&store, &x.view());
        let mut grads = Grads::new();
        let dx = conv
            .backward(&store, &cache, &probe.view(), &mut grads, true)
            .unwrap();
        let eps = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 2, 1, 1), (0, 4, 3, 0)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-6, "{idx:?}: {fd} vs {}", dx[idx]);
        }
    }
}
