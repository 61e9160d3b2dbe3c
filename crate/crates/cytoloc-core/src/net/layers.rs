//! Layer primitives with explicit forward and backward passes.
//!
//! Convolutions are same-padded and run as im2col + GEMM. Backward passes
//! accumulate (`+=`) into caller-provided gradient buffers so a batch can sum
//! gradients over several images before an update.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::rng::{standard_normal, uniform_f32};
use crate::tensor::{sgemm, Tensor};

/// Same-padded 2D convolution with square odd-sized kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// Row-major `out_ch x (in_ch * ksize * ksize)`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, ksize: usize) -> Self {
        assert!(ksize % 2 == 1, "same padding requires an odd kernel");
        Self {
            weight: vec![0.0; out_ch * in_ch * ksize * ksize],
            bias: vec![0.0; out_ch],
            in_ch,
            out_ch,
            ksize,
        }
    }

    /// He-normal initialization (fan-in variance scaling for ReLU stacks).
    pub fn init_he(&mut self, rng: &mut ChaCha8Rng) {
        let std = libm::sqrtf(2.0 / (self.in_ch * self.ksize * self.ksize) as f32);
        for w in &mut self.weight {
            *w = standard_normal(rng) * std;
        }
        self.bias.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_ch, "conv input channel mismatch");
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let k2 = self.ksize * self.ksize;
        let col = im2col(x, self.ksize);
        let mut y = Tensor::zeros(self.out_ch, h, w);
        sgemm(
            self.out_ch,
            self.in_ch * k2,
            hw,
            &self.weight,
            false,
            &col,
            false,
            0.0,
            y.data_mut(),
        );
        for o in 0..self.out_ch {
            let b = self.bias[o];
            for v in y.plane_mut(o) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients for this layer and optionally returns
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        x: &Tensor,
        d_out: &Tensor,
        d_weight: &mut [f32],
        d_bias: &mut [f32],
        want_dx: bool,
    ) -> Option<Tensor> {
        assert_eq!(x.channels(), self.in_ch);
        assert_eq!(d_out.channels(), self.out_ch);
        assert_eq!((x.height(), x.width()), (d_out.height(), d_out.width()));
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let k2 = self.ksize * self.ksize;
        let col = im2col(x, self.ksize);

        for o in 0..self.out_ch {
            let mut sum = 0.0f32;
            for &v in d_out.plane(o) {
                sum += v;
            }
            d_bias[o] += sum;
        }
        // dW += dY * col^T
        sgemm(
            self.out_ch,
            hw,
            self.in_ch * k2,
            d_out.data(),
            false,
            &col,
            true,
            1.0,
            d_weight,
        );

        if !want_dx {
            return None;
        }
        // d_col = W^T * dY, then scatter-add back to image layout.
        let mut d_col = vec![0.0f32; self.in_ch * k2 * hw];
        sgemm(
            self.in_ch * k2,
            self.out_ch,
            hw,
            &self.weight,
            true,
            d_out.data(),
            false,
            0.0,
            &mut d_col,
        );
        Some(col2im(&d_col, self.in_ch, h, w, self.ksize))
    }
}

/// Lowers `x` into a `(in_ch * k^2) x (h * w)` patch matrix with zero padding.
fn im2col(x: &Tensor, ksize: usize) -> Vec<f32> {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let pad = (ksize - 1) / 2;
    let mut col = vec![0.0f32; cin * ksize * ksize * hw];
    for ci in 0..cin {
        let plane = x.plane(ci);
        for kr in 0..ksize {
            let row_off = kr as isize - pad as isize;
            for kc in 0..ksize {
                let col_off = kc as isize - pad as isize;
                let base = (((ci * ksize) + kr) * ksize + kc) * hw;
                for r in 0..h {
                    let src_r = r as isize + row_off;
                    let dst = &mut col[base + r * w..base + (r + 1) * w];
                    if src_r < 0 || src_r >= h as isize {
                        continue; // zero padding (buffer starts zeroed)
                    }
                    let src = &plane[src_r as usize * w..(src_r as usize + 1) * w];
                    if col_off == 0 {
                        dst.copy_from_slice(src);
                    } else if col_off < 0 {
                        let s = (-col_off) as usize;
                        dst[s..].copy_from_slice(&src[..w - s]);
                    } else {
                        let s = col_off as usize;
                        dst[..w - s].copy_from_slice(&src[s..]);
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatter-adds patch-matrix gradients back to image layout.
fn col2im(d_col: &[f32], cin: usize, h: usize, w: usize, ksize: usize) -> Tensor {
    let hw = h * w;
    let pad = (ksize - 1) / 2;
    let mut dx = Tensor::zeros(cin, h, w);
    for ci in 0..cin {
        let plane = dx.plane_mut(ci);
        for kr in 0..ksize {
            let row_off = kr as isize - pad as isize;
            for kc in 0..ksize {
                let col_off = kc as isize - pad as isize;
                let base = (((ci * ksize) + kr) * ksize + kc) * hw;
                for r in 0..h {
                    let src_r = r as isize + row_off;
                    if src_r < 0 || src_r >= h as isize {
                        continue;
                    }
                    let grad = &d_col[base + r * w..base + (r + 1) * w];
                    let dst_row = src_r as usize * w;
                    if col_off == 0 {
                        for c in 0..w {
                            plane[dst_row + c] += grad[c];
                        }
                    } else if col_off < 0 {
                        let s = (-col_off) as usize;
                        for c in s..w {
                            plane[dst_row + c - s] += grad[c];
                        }
                    } else {
                        let s = col_off as usize;
                        for c in 0..w - s {
                            plane[dst_row + c + s] += grad[c];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn init_he(&mut self, rng: &mut ChaCha8Rng) {
        let std = libm::sqrtf(2.0 / self.in_dim as f32);
        for w in &mut self.weight {
            *w = standard_normal(rng) * std;
        }
        self.bias.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.in_dim);
        let mut y = self.bias.clone();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0f32;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            y[o] += acc;
        }
        y
    }

    pub fn backward(
        &self,
        x: &[f32],
        d_out: &[f32],
        d_weight: &mut [f32],
        d_bias: &mut [f32],
    ) -> Vec<f32> {
        assert_eq!(x.len(), self.in_dim);
        assert_eq!(d_out.len(), self.out_dim);
        let mut dx = vec![0.0f32; self.in_dim];
        for o in 0..self.out_dim {
            let g = d_out[o];
            d_bias[o] += g;
            let w_row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let dw_row = &mut d_weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dw_row[i] += g * x[i];
                dx[i] += g * w_row[i];
            }
        }
        dx
    }
}

pub fn relu_inplace(values: &mut [f32]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks upstream gradients through a ReLU given the layer's *output*.
pub fn relu_backward(out: &[f32], grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Samples inverted-dropout scale factors: 0 with probability `rate`,
/// `1/(1-rate)` otherwise. A `rate` of 0 draws nothing.
pub fn dropout_factors(rng: &mut ChaCha8Rng, len: usize, rate: f32) -> Vec<f32> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep_scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if uniform_f32(rng) < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

pub fn apply_factors(x: &Tensor, factors: &[f32]) -> Tensor {
    assert_eq!(x.data().len(), factors.len());
    let data = x
        .data()
        .iter()
        .zip(factors)
        .map(|(v, f)| v * f)
        .collect();
    Tensor::from_vec(x.channels(), x.height(), x.width(), data)
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat index of the winning input element (first-wins ties).
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dimensions");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(c, oh, ow);
    let mut argmax = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let plane = x.plane(ci);
        let out_plane = y.plane_mut(ci);
        for r in 0..oh {
            for col in 0..ow {
                let mut best_idx = (2 * r) * w + 2 * col;
                let mut best = plane[best_idx];
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * r + dr) * w + (2 * col + dc);
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out_plane[r * ow + col] = best;
                argmax[(ci * oh + r) * ow + col] = (ci * h * w + best_idx) as u32;
            }
        }
    }
    (y, argmax)
}

pub fn maxpool2_backward(d_out: &Tensor, argmax: &[u32], in_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = in_shape;
    let mut dx = Tensor::zeros(c, h, w);
    let data = dx.data_mut();
    for (g, &idx) in d_out.data().iter().zip(argmax) {
        data[idx as usize] += g;
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = x.shape();
    let mut y = Tensor::zeros(c, 2 * h, 2 * w);
    for ci in 0..c {
        let src = x.plane(ci);
        let dst = y.plane_mut(ci);
        for r in 0..h {
            for col in 0..w {
                let v = src[r * w + col];
                let base = (2 * r) * (2 * w) + 2 * col;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    y
}

/// Adjoint of nearest-neighbor upsampling: sums each 2x2 block.
pub fn upsample2_backward(d_out: &Tensor) -> Tensor {
    let (c, h2, w2) = d_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let src = d_out.plane(ci);
        let dst = dx.plane_mut(ci);
        for r in 0..h {
            for col in 0..w {
                let base = (2 * r) * w2 + 2 * col;
                dst[r * w + col] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    dx
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let n = x.plane_len() as f32;
    (0..x.channels())
        .map(|c| x.plane(c).iter().sum::<f32>() / n)
        .collect()
}

pub fn global_avg_pool_backward(d_out: &[f32], shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = shape;
    assert_eq!(d_out.len(), c);
    let mut dx = Tensor::zeros(c, h, w);
    let scale = 1.0 / (h * w) as f32;
    for ci in 0..c {
        let g = d_out[ci] * scale;
        dx.plane_mut(ci).fill(g);
    }
    dx
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::expf(-z))
    } else {
        let e = libm::expf(z);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, STREAM_INIT};

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w)
            .map(|_| uniform_f32(rng) * 2.0 - 1.0)
            .collect();
        Tensor::from_vec(c, h, w, data)
    }

    /// Direct convolution used as the reference for the im2col path.
    fn conv_reference(layer: &Conv2d, x: &Tensor) -> Tensor {
        let (cin, h, w) = x.shape();
        let k = layer.ksize;
        let pad = (k as isize - 1) / 2;
        let mut y = Tensor::zeros(layer.out_ch, h, w);
        for o in 0..layer.out_ch {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = layer.bias[o] as f64;
                    for ci in 0..cin {
                        for kr in 0..k {
                            for kc in 0..k {
                                let sr = r as isize + kr as isize - pad;
                                let sc = c as isize + kc as isize - pad;
                                if sr < 0 || sr >= h as isize || sc < 0 || sc >= w as isize {
                                    continue;
                                }
                                let wv =
                                    layer.weight[((o * cin + ci) * k + kr) * k + kc] as f64;
                                let xv = x.at(ci, sr as usize, sc as usize) as f64;
                                acc += wv * xv;
                            }
                        }
                    }
                    y.set(o, r, c, acc as f32);
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_direct_convolution() {
        let mut rng = rng::stream(1, STREAM_INIT);
        for (cin, cout, k, h, w) in [(1, 1, 3, 5, 5), (3, 4, 3, 6, 7), (2, 3, 1, 4, 4)] {
            let mut layer = Conv2d::new(cin, cout, k);
            layer.init_he(&mut rng);
            for b in &mut layer.bias {
                *b = uniform_f32(&mut rng) - 0.5;
            }
            let x = random_tensor(&mut rng, cin, h, w);
            let got = layer.forward(&x);
            let want = conv_reference(&layer, &x);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-4, "conv mismatch: {a} vs {b}");
            }
        }
    }

    /// Scalar probe loss: weighted sum of the outputs, weights fixed.
    fn probe_loss(y: &Tensor, probe: &[f32]) -> f64 {
        y.data()
            .iter()
            .zip(probe)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = rng::stream(2, STREAM_INIT);
        let mut layer = Conv2d::new(2, 3, 3);
        layer.init_he(&mut rng);
        let x = random_tensor(&mut rng, 2, 5, 4);
        let probe: Vec<f32> = (0..3 * 5 * 4).map(|_| uniform_f32(&mut rng) - 0.5).collect();

        let y = layer.forward(&x);
        let d_out = Tensor::from_vec(3, 5, 4, probe.clone());
        let mut dw = vec![0.0; layer.weight.len()];
        let mut db = vec![0.0; layer.bias.len()];
        let dx = layer.backward(&x, &d_out, &mut dw, &mut db, true).unwrap();
        assert_eq!(probe_loss(&y, &probe).is_finite(), true);

        let h = 1.0 / 256.0; // power of two: representable perturbations
        let check = |analytic: f32, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h as f64);
            let denom = analytic.abs().max(fd.abs() as f32).max(1e-3) as f64;
            assert!(
                (analytic as f64 - fd).abs() / denom < 2e-2,
                "gradient mismatch: analytic {analytic} fd {fd}"
            );
        };

        // A few weight entries.
        for &wi in &[0usize, 7, 19, layer.weight.len() - 1] {
            let mut l2 = layer.clone();
            l2.weight[wi] += h;
            let plus = probe_loss(&l2.forward(&x), &probe);
            l2.weight[wi] -= 2.0 * h;
            let minus = probe_loss(&l2.forward(&x), &probe);
            check(dw[wi], plus, minus);
        }
        // Bias entries.
        for bi in 0..3 {
            let mut l2 = layer.clone();
            l2.bias[bi] += h;
            let plus = probe_loss(&l2.forward(&x), &probe);
            l2.bias[bi] -= 2.0 * h;
            let minus = probe_loss(&l2.forward(&x), &probe);
            check(db[bi], plus, minus);
        }
        // Input entries.
        for &xi in &[0usize, 11, 23, x.data().len() - 1] {
            let mut x2 = x.clone();
            x2.data_mut()[xi] += h;
            let plus = probe_loss(&layer.forward(&x2), &probe);
            x2.data_mut()[xi] -= 2.0 * h;
            let minus = probe_loss(&layer.forward(&x2), &probe);
            check(dx.data()[xi], plus, minus);
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = rng::stream(3, STREAM_INIT);
        let mut layer = Dense::new(5, 3);
        layer.init_he(&mut rng);
        let x: Vec<f32> = (0..5).map(|_| uniform_f32(&mut rng) - 0.5).collect();
        let probe: Vec<f32> = (0..3).map(|_| uniform_f32(&mut rng) - 0.5).collect();

        let mut dw = vec![0.0; 15];
        let mut db = vec![0.0; 3];
        let dx = layer.backward(&x, &probe, &mut dw, &mut db);

        let loss = |l: &Dense, x: &[f32]| -> f64 {
            l.forward(x)
                .iter()
                .zip(&probe)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let h = 1.0 / 1024.0;
        for wi in 0..15 {
            let mut l2 = layer.clone();
            l2.weight[wi] += h;
            let plus = loss(&l2, &x);
            l2.weight[wi] -= 2.0 * h;
            let minus = loss(&l2, &x);
            let fd = (plus - minus) / (2.0 * h as f64);
            assert!((dw[wi] as f64 - fd).abs() < 1e-3, "dw[{wi}]: {} vs {fd}", dw[wi]);
        }
        for xi in 0..5 {
            let mut x2 = x.clone();
            x2[xi] += h;
            let plus = loss(&layer, &x2);
            x2[xi] -= 2.0 * h;
            let minus = loss(&layer, &x2);
            let fd = (plus - minus) / (2.0 * h as f64);
            assert!((dx[xi] as f64 - fd).abs() < 1e-3);
        }
    }

    #[test]
    fn maxpool_tracks_argmax_and_routes_gradients() {
        let x = Tensor::from_vec(
            1,
            4,
            4,
            vec![
                1.0, 2.0, 5.0, 5.0, // tie in the second window: first wins
                3.0, 0.0, 4.0, 1.0, //
                0.0, 0.0, 1.0, 0.0, //
                9.0, 0.0, 0.0, 2.0,
            ],
        );
        let (y, argmax) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[3.0, 5.0, 9.0, 2.0]);
        assert_eq!(argmax, vec![4, 2, 12, 15]);

        let d_out = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dx = maxpool2_backward(&d_out, &argmax, (1, 4, 4));
        assert_eq!(dx.at(0, 1, 0), 1.0);
        assert_eq!(dx.at(0, 0, 2), 2.0);
        assert_eq!(dx.at(0, 3, 0), 3.0);
        assert_eq!(dx.at(0, 3, 3), 4.0);
        assert_eq!(dx.data().iter().sum::<f32>(), 10.0);
    }

    #[test]
    fn upsample_backward_is_the_adjoint() {
        // <up(x), g> must equal <x, up^T(g)> for the pair to be adjoint.
        let mut rng = rng::stream(4, STREAM_INIT);
        let x = random_tensor(&mut rng, 2, 3, 2);
        let g = random_tensor(&mut rng, 2, 6, 4);
        let up = upsample2_forward(&x);
        let down = upsample2_backward(&g);
        let lhs: f64 = up
            .data()
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(down.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn gap_mean_and_backward_scale() {
        let x = Tensor::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(global_avg_pool(&x), vec![2.5, 1.0]);
        let dx = global_avg_pool_backward(&[4.0, 8.0], (2, 2, 2));
        assert_eq!(dx.plane(0), &[1.0; 4]);
        assert_eq!(dx.plane(1), &[2.0; 4]);
    }

    #[test]
    fn dropout_factors_scale_preserves_expectation() {
        let mut rng = rng::stream(5, STREAM_INIT);
        let factors = dropout_factors(&mut rng, 100_000, 0.2);
        let mean: f64 = factors.iter().map(|&f| f as f64).sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "inverted dropout mean {mean}");
        assert!(factors.iter().all(|&f| f == 0.0 || (f - 1.25).abs() < 1e-6));
        assert_eq!(dropout_factors(&mut rng, 4, 0.0), vec![1.0; 4]);
    }

    #[test]
    fn conv_relu_pool_composition_matches_finite_differences() {
        let mut rng = rng::stream(21, STREAM_INIT);
        let mut layer = Conv2d::new(2, 3, 3);
        layer.init_he(&mut rng);
        for b in &mut layer.bias {
            *b = uniform_f32(&mut rng) * 0.2 - 0.1;
        }
        let x = random_tensor(&mut rng, 2, 8, 8);
        let readout: Vec<f32> = (0..3 * 4 * 4)
            .map(|i| ((i * 5) % 11) as f32 / 11.0 - 0.4)
            .collect();

        let run = |layer: &Conv2d| -> f64 {
            let mut z = layer.forward(&x);
            relu_inplace(z.data_mut());
            let (pooled, _) = maxpool2_forward(&z);
            pooled
                .data()
                .iter()
                .zip(&readout)
                .map(|(&p, &w)| p as f64 * w as f64)
                .sum()
        };

        let mut z = layer.forward(&x);
        relu_inplace(z.data_mut());
        let (_, argmax) = maxpool2_forward(&z);
        let d_pool = Tensor::from_vec(3, 4, 4, readout.clone());
        let mut d_relu = maxpool2_backward(&d_pool, &argmax, z.shape());
        relu_backward(z.data(), d_relu.data_mut());
        let mut dw = vec![0.0f32; layer.weight.len()];
        let mut db = vec![0.0f32; layer.bias.len()];
        layer.backward(&x, &d_relu, &mut dw, &mut db, false);

        // Kinks and f32 noise rule out any single step size; a correct
        // gradient matches at some step, a wrong one at none.
        for (grads, pick) in [(&db, false), (&dw, true)] {
            for k in 0..grads.len() {
                let analytic = grads[k] as f64;
                let ok = [512.0f32, 2048.0, 8192.0].iter().any(|&d| {
                    let h = 1.0 / d;
                    let mut plus = layer.clone();
                    let mut minus = layer.clone();
                    if pick {
                        plus.weight[k] += h;
                        minus.weight[k] -= h;
                    } else {
                        plus.bias[k] += h;
                        minus.bias[k] -= h;
                    }
                    let fd = (run(&plus) - run(&minus)) / (2.0 * h as f64);
                    let denom = analytic.abs().max(fd.abs()).max(1e-3);
                    ((analytic - fd) / denom).abs() < 1e-2
                });
                assert!(
                    ok,
                    "{} [{k}]: analytic {analytic:.6e} has no matching finite difference",
                    if pick { "weight" } else { "bias" },
                );
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(100.0) <= 1.0);
        assert!(sigmoid(-100.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-7);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-6);
    }
}
