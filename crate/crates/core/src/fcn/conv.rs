//! Strided cross-correlation with "same" zero padding, lowered to matrix
//! products through im2col.

use super::real::{gemm, Real, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output length and (leading, trailing) padding for "same" padding along
/// one axis: `out = ceil(len / stride)`, the odd padding unit goes last.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = len.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(len);
    let before = needed / 2;
    (out, before, needed - before)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn same(
        cin: usize,
        cout: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Result<Self> {
        if [cin, cout, h, w, kh, kw, sh, sw].contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "convolution with zero extent: cin={cin} cout={cout} input={h}x{w} kernel={kh}x{kw} stride={sh}x{sw}"
            )));
        }
        let (oh, top, bottom) = same_padding(h, kh, sh);
        let (ow, left, right) = same_padding(w, kw, sw);
        for (k, padded) in [(kh, h + top + bottom), (kw, w + left + right)] {
            if k > padded {
                return Err(Error::KernelTooLarge { kernel: k, padded });
            }
        }
        Ok(Self {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            oh,
            ow,
            pad_top: top,
            pad_left: left,
        })
    }

    /// Rows of the im2col matrix: `cin · kh · kw`.
    #[inline]
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    #[inline]
    pub fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.patch()
    }
}

/// Output positions `ox` whose input column `ox·s + j − pad` lies inside `0..w`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: usize, pad: usize, len: usize) -> (usize, usize) {
    // smallest ox with ox·s + offset ≥ pad, largest with ox·s + offset < pad + len
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    let hi = if pad + len <= offset { 0 } else { (pad + len - offset).div_ceil(stride) };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Unfold samples `b0..b0 + nb` into a `patch × (nb · out_spatial)` matrix.
fn im2col<R: Real>(x: &Tensor<R>, b0: usize, nb: usize, g: &ConvGeometry, col: &mut [R]) {
    let p = g.out_spatial();
    let cols = nb * p;
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((ci * g.kh + i) * g.kw + j) * cols..][..cols];
                let (lo, hi) = valid_range(g.ow, g.sw, j, g.pad_left, g.w);
                for bl in 0..nb {
                    let map = x.map(ci, b0 + bl);
                    for oy in 0..g.oh {
                        let y = (oy * g.sh + i) as isize - g.pad_top as isize;
                        let dst = &mut row[bl * p + oy * g.ow..][..g.ow];
                        if y < 0 || y >= g.h as isize || lo >= hi {
                            dst.fill(R::zero());
                            continue;
                        }
                        let src = &map[y as usize * g.w..(y as usize + 1) * g.w];
                        dst[..lo].fill(R::zero());
                        dst[hi..].fill(R::zero());
                        let first = lo * g.sw + j - g.pad_left;
                        if g.sw == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[first + k * g.sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<R: Real>(col: &[R], g: &ConvGeometry, dx: &mut Tensor<R>, b0: usize, nb: usize) {
    let p = g.out_spatial();
    let cols = nb * p;
    let spatial = dx.spatial();
    let batch = dx.batch;
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((ci * g.kh + i) * g.kw + j) * cols..][..cols];
                let (lo, hi) = valid_range(g.ow, g.sw, j, g.pad_left, g.w);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.sw + j - g.pad_left;
                for bl in 0..nb {
                    let start = (ci * batch + b0 + bl) * spatial;
                    let map = &mut dx.data[start..start + spatial];
                    for oy in 0..g.oh {
                        let y = (oy * g.sh + i) as isize - g.pad_top as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let src = &row[bl * p + oy * g.ow..][lo..hi];
                        let dst = &mut map[y as usize * g.w..(y as usize + 1) * g.w];
                        if g.sw == 1 {
                            for (d, &s) in dst[first..first + hi - lo].iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (k, &s) in src.iter().enumerate() {
                                dst[first + k * g.sw] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on unfolded-matrix elements per chunk of samples.
const COL_BUDGET: usize = 1 << 22;

fn samples_per_chunk(g: &ConvGeometry, batch: usize) -> usize {
    (COL_BUDGET / (g.patch() * g.out_spatial()).max(1)).clamp(1, batch.max(1))
}

/// "Same"-padded cross-correlation plus per-channel bias.
pub fn conv_forward<R: Real>(x: &Tensor<R>, weights: &[R], bias: &[R], g: &ConvGeometry) -> Tensor<R> {
    assert_eq!(x.channels, g.cin, "input channels");
    assert_eq!((x.h, x.w), (g.h, g.w), "input spatial shape");
    assert_eq!(weights.len(), g.weight_len());
    assert_eq!(bias.len(), g.cout);
    let b_count = x.batch;
    let p = g.out_spatial();
    let k = g.patch();
    let mut out = Tensor::zeros(g.cout, b_count, g.oh, g.ow);
    let chunk = samples_per_chunk(g, b_count);
    let mut col = vec![R::zero(); k * p * chunk];
    for b0 in (0..b_count).step_by(chunk) {
        let nb = chunk.min(b_count - b0);
        let col = &mut col[..k * p * nb];
        im2col(x, b0, nb, g, col);
        gemm(
            R::one(),
            View::row_major(weights, g.cout, k),
            View::row_major(col, k, nb * p),
            R::zero(),
            ViewMut {
                data: &mut out.data,
                offset: b0 * p,
                rows: g.cout,
                cols: nb * p,
                rs: b_count * p,
                cs: 1,
            },
        );
    }
    for (c, &bc) in bias.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v += bc;
        }
    }
    out
}

pub struct ConvBackward<R> {
    pub d_weights: Vec<R>,
    pub d_bias: Vec<R>,
    pub d_input: Option<Tensor<R>>,
}

/// Gradients of a convolution given the upstream gradient `d_out`.
/// Samples are accumulated in index order so the result does not depend
/// on scheduling.
pub fn conv_backward<R: Real>(
    x: &Tensor<R>,
    d_out: &Tensor<R>,
    weights: &[R],
    g: &ConvGeometry,
    want_params: bool,
    want_input: bool,
) -> ConvBackward<R> {
    let b_count = x.batch;
    let p = g.out_spatial();
    let k = g.patch();
    assert_eq!(d_out.shape(), [g.cout, b_count, g.oh, g.ow], "upstream gradient shape");
    let mut d_weights = vec![R::zero(); if want_params { g.weight_len() } else { 0 }];
    let mut d_bias = vec![R::zero(); if want_params { g.cout } else { 0 }];
    let mut d_input = want_input.then(|| Tensor::zeros(g.cin, b_count, g.h, g.w));
    if want_params {
        for (c, db) in d_bias.iter_mut().enumerate() {
            *db = d_out.channel(c).iter().copied().sum();
        }
    }
    let chunk = samples_per_chunk(g, b_count);
    let mut col = vec![R::zero(); k * p * chunk];
    for b0 in (0..b_count).step_by(chunk) {
        let nb = chunk.min(b_count - b0);
        let col = &mut col[..k * p * nb];
        let d_out_b = View {
            data: &d_out.data,
            offset: b0 * p,
            rows: g.cout,
            cols: nb * p,
            rs: b_count * p,
            cs: 1,
        };
        if want_params {
            im2col(x, b0, nb, g, col);
            gemm(
                R::one(),
                d_out_b,
                View::transposed(col, k, nb * p),
                R::one(),
                ViewMut::row_major(&mut d_weights, g.cout, k),
            );
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(
                R::one(),
                View::transposed(weights, g.cout, k),
                d_out_b,
                R::zero(),
                ViewMut::row_major(col, k, nb * p),
            );
            col2im_add(col, g, dx, b0, nb);
        }
    }
    ConvBackward {
        d_weights,
        d_bias,
        d_input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv1d(input: &[f64], kernel: &[f64], stride: usize) -> Vec<f64> {
        let x = Tensor { channels: 1, batch: 1, h: input.len(), w: 1, data: input.to_vec() };
        let g = ConvGeometry::same(1, 1, (input.len(), 1), (kernel.len(), 1), (stride, 1)).unwrap();
        conv_forward(&x, kernel, &[0.0], &g).data
    }

    /// Direct definition: out[o] = Σ_k w[k]·x[o·s + k − pad_before].
    fn naive(input: &[f64], kernel: &[f64], stride: usize) -> Vec<f64> {
        let (out, before, _) = same_padding(input.len(), kernel.len(), stride);
        (0..out)
            .map(|o| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let i = (o * stride + k) as isize - before as isize;
                        if i < 0 || i as usize >= input.len() {
                            0.0
                        } else {
                            w * input[i as usize]
                        }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn identity_kernel() {
        assert_eq!(conv1d(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0], 1), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn box_kernel_zero_pads_edges() {
        assert_eq!(conv1d(&[1.0; 4], &[1.0; 3], 1), vec![2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn stacked_first_layer_length() {
        assert_eq!(same_padding(2400, 100, 10).0, 240);
        let g = ConvGeometry::same(1, 96, (2400, 1), (100, 1), (10, 1)).unwrap();
        assert_eq!((g.oh, g.ow), (240, 1));
        // even kernel: odd pad unit on the trailing side
        assert_eq!(same_padding(240, 20, 1), (240, 9, 10));
        assert_eq!(same_padding(240, 20, 2), (120, 9, 9));
    }

    #[test]
    fn matches_direct_definition() {
        let input: Vec<f64> = (0..23).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        for (k, s) in [(1, 1), (4, 1), (5, 2), (6, 3), (20, 2)] {
            let kernel: Vec<f64> = (0..k).map(|i| 0.3 * i as f64 - 0.5).collect();
            assert_eq!(conv1d(&input, &kernel, s), naive(&input, &kernel, s), "k={k} s={s}");
        }
    }

    #[test]
    fn two_dimensional_same_shape() {
        let x = Tensor::<f64>::zeros(2, 3, 20, 12);
        let g = ConvGeometry::same(2, 4, (20, 12), (9, 9), (1, 1)).unwrap();
        let w = vec![0.1; g.weight_len()];
        let out = conv_forward(&x, &w, &[0.5; 4], &g);
        assert_eq!(out.shape(), [4, 3, 20, 12]);
        assert!(out.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), y> = <x, convᵀ(y)> for the input gradient and
        // <conv_w(x), y> is linear in w with gradient d_weights.
        let g = ConvGeometry::same(2, 3, (7, 4), (3, 2), (2, 1)).unwrap();
        let x = Tensor {
            channels: 2,
            batch: 2,
            h: 7,
            w: 4,
            data: (0..2 * 2 * 28).map(|i| ((i * 31) % 17) as f64 / 7.0 - 1.0).collect(),
        };
        let w: Vec<f64> = (0..g.weight_len()).map(|i| ((i * 13) % 11) as f64 / 5.0 - 1.0).collect();
        let zero_b = vec![0.0; 3];
        let y_shape = (3, 2, g.oh, g.ow);
        let y = Tensor {
            channels: y_shape.0,
            batch: y_shape.1,
            h: y_shape.2,
            w: y_shape.3,
            data: (0..3 * 2 * g.out_spatial()).map(|i| ((i * 5) % 7) as f64 - 3.0).collect(),
        };
        let out = conv_forward(&x, &w, &zero_b, &g);
        let lhs: f64 = out.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let back = conv_backward(&x, &y, &w, &g, true, true);
        let dx = back.d_input.unwrap();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        let rhs_w: f64 = w.iter().zip(&back.d_weights).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-9, "{lhs} vs {rhs_w}");
    }
}
