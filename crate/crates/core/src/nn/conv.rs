//! Dilated 2-D convolution (cross-correlation) with zero "same" padding,
//! lowered to one GEMM per sample through an im2col buffer.

use rayon::prelude::*;

use super::gemm::{gemm, Scalar, View};
use super::tensor::{FeatureMap, Tensor};
use super::Precision;
use crate::error::{Error, Result};

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Calls `f(col_row, src_row_offset, dst_range, src_start)` for every
    /// contiguous run of valid (non-padding) taps.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, std::ops::Range<usize>, usize)) {
        let half = (self.kernel / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                let di = (ki as isize - half) * self.dilation as isize;
                for kj in 0..self.kernel {
                    let dj = (kj as isize - half) * self.dilation as isize;
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let j_lo = (-dj).clamp(0, w) as usize;
                    let j_hi = (w - dj).clamp(0, w) as usize;
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in 0..h {
                        let si = i + di;
                        if si < 0 || si >= h {
                            continue;
                        }
                        let dst = i as usize * self.width;
                        let src = (c * self.height + si as usize) * self.width;
                        let src_start = (j_lo as isize + dj) as usize;
                        f(row, src, dst + j_lo..dst + j_hi, src_start);
                    }
                }
            }
        }
    }

    /// Fills a zeroed `taps × plane` buffer.
    fn im2col<T: Scalar>(&self, x: &[f64], col: &mut [T]) {
        let plane = self.plane();
        self.for_each_run(|row, src, dst, src_start| {
            let base = row * plane;
            let from = src + src_start;
            for (d, s) in col[base + dst.start..base + dst.end]
                .iter_mut()
                .zip(&x[from..from + dst.len()])
            {
                *d = T::from_f64(*s);
            }
        });
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [f64]) {
        let plane = self.plane();
        self.for_each_run(|row, src, dst, src_start| {
            let from = src + src_start;
            let base = row * plane;
            for (d, s) in dx[from..from + dst.len()]
                .iter_mut()
                .zip(&col[base + dst.start..base + dst.end])
            {
                *d += s.to_f64();
            }
        });
    }
}

fn geometry(x: &FeatureMap, w: &Tensor, b: &Tensor, dilation: usize) -> Result<(Geometry, usize)> {
    if w.shape.len() != 4 || w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0 {
        return Err(Error::shape("[out, in, k, k] with odd k", &w.shape));
    }
    let (out, inp, k) = (w.shape[0], w.shape[1], w.shape[2]);
    if inp != x.channels {
        return Err(Error::shape(format!("{inp} input channels"), x.channels));
    }
    b.expect_shape(&[out])?;
    if dilation == 0 {
        return Err(Error::invalid("conv2d", "dilation must be positive"));
    }
    Ok((
        Geometry {
            channels: inp,
            height: x.height,
            width: x.width,
            kernel: k,
            dilation,
        },
        out,
    ))
}

fn convert<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|x| T::from_f64(*x)).collect()
}

/// `y[o] = b[o] + Σ_c Σ_taps w[o, c, ki, kj]·x[c, i + (ki−k/2)·d, j + (kj−k/2)·d]`.
pub fn conv2d(x: &FeatureMap, w: &Tensor, b: &Tensor, dilation: usize) -> Result<FeatureMap> {
    conv2d_with(x, w, b, dilation, Precision::F64)
}

/// [`conv2d`] with the matrix products carried out at `precision`.
pub fn conv2d_with(x: &FeatureMap, w: &Tensor, b: &Tensor, dilation: usize, precision: Precision) -> Result<FeatureMap> {
    match precision {
        Precision::F64 => forward::<f64>(x, w, b, dilation),
        Precision::F32 => forward::<f32>(x, w, b, dilation),
    }
}

fn forward<T: Scalar>(x: &FeatureMap, w: &Tensor, b: &Tensor, dilation: usize) -> Result<FeatureMap> {
    let (geo, out_ch) = geometry(x, w, b, dilation)?;
    let plane = geo.plane();
    let taps = geo.taps();
    let weights: Vec<T> = convert(&w.data);
    let mut y = FeatureMap::zeros(x.batch, out_ch, x.height, x.width);
    let y_len = y.sample_len();
    y.data
        .par_chunks_mut(y_len)
        .enumerate()
        .for_each(|(s, ys)| {
            T::with_scratch(0, taps * plane, |col| {
                geo.im2col(x.sample(s), col);
                T::with_scratch(1, out_ch * plane, |acc| {
                    gemm(
                        out_ch,
                        taps,
                        plane,
                        T::from_f64(1.0),
                        View::rows(&weights, taps),
                        View::rows(col, plane),
                        T::default(),
                        acc,
                    );
                    for (o, (yc, ac)) in ys.chunks_mut(plane).zip(acc.chunks(plane)).enumerate() {
                        for (yv, av) in yc.iter_mut().zip(ac) {
                            *yv = b.data[o] + av.to_f64();
                        }
                    }
                });
            });
        });
    Ok(y)
}

/// Accumulates `∂L/∂w` and `∂L/∂b` into the parameter gradients and returns
/// `∂L/∂x` when `want_input_grad` is set.
pub fn conv2d_backward(
    x: &FeatureMap,
    w: &mut Tensor,
    b: &mut Tensor,
    dilation: usize,
    dy: &FeatureMap,
    want_input_grad: bool,
) -> Result<Option<FeatureMap>> {
    conv2d_backward_with(x, w, b, dilation, dy, want_input_grad, Precision::F64)
}

/// [`conv2d_backward`] with the matrix products carried out at `precision`.
pub fn conv2d_backward_with(
    x: &FeatureMap,
    w: &mut Tensor,
    b: &mut Tensor,
    dilation: usize,
    dy: &FeatureMap,
    want_input_grad: bool,
    precision: Precision,
) -> Result<Option<FeatureMap>> {
    match precision {
        Precision::F64 => backward::<f64>(x, w, b, dilation, dy, want_input_grad),
        Precision::F32 => backward::<f32>(x, w, b, dilation, dy, want_input_grad),
    }
}

fn backward<T: Scalar>(
    x: &FeatureMap,
    w: &mut Tensor,
    b: &mut Tensor,
    dilation: usize,
    dy: &FeatureMap,
    want_input_grad: bool,
) -> Result<Option<FeatureMap>> {
    let (geo, out_ch) = geometry(x, w, b, dilation)?;
    if dy.shape() != (x.batch, out_ch, x.height, x.width) {
        return Err(Error::shape((x.batch, out_ch, x.height, x.width), dy.shape()));
    }
    let plane = geo.plane();
    let taps = geo.taps();
    let mut dx = want_input_grad.then(|| x.zeros_like());
    let dx_len = x.sample_len();
    let weights: Vec<T> = convert(&w.data);

    let per_sample = |s: usize, dxs: Option<&mut [f64]>| -> (Vec<f64>, Vec<f64>) {
        let dys_f64 = dy.sample(s);
        let dys: Vec<T> = convert(dys_f64);
        let db = dys_f64.chunks(plane).map(|c| c.iter().sum()).collect();
        let dw = T::with_scratch(0, taps * plane, |col| {
            geo.im2col(x.sample(s), col);
            T::with_scratch(1, out_ch * taps, |dw| {
                gemm(
                    out_ch,
                    plane,
                    taps,
                    T::from_f64(1.0),
                    View::rows(&dys, plane),
                    View::transposed(col, plane),
                    T::default(),
                    dw,
                );
                dw.iter().map(|v| v.to_f64()).collect()
            })
        });
        if let Some(dxs) = dxs {
            T::with_scratch(2, taps * plane, |dcol| {
                gemm(
                    taps,
                    out_ch,
                    plane,
                    T::from_f64(1.0),
                    View::transposed(&weights, taps),
                    View::rows(&dys, plane),
                    T::default(),
                    dcol,
                );
                geo.col2im(dcol, dxs);
            });
        }
        (dw, db)
    };

    let partials: Vec<(Vec<f64>, Vec<f64>)> = match dx.as_mut() {
        Some(dx) => dx
            .data
            .par_chunks_mut(dx_len)
            .enumerate()
            .map(|(s, dxs)| per_sample(s, Some(dxs)))
            .collect(),
        None => (0..x.batch)
            .into_par_iter()
            .map(|s| per_sample(s, None))
            .collect(),
    };
    // reduce in sample order so the result does not depend on scheduling
    for (dw, db) in partials {
        w.grad.iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
        b.grad.iter_mut().zip(&db).for_each(|(g, d)| *g += d);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_grad, random_map, random_tensor};

    #[test]
    fn centre_tap_is_identity() {
        let x = random_map(2, 1, 5, 6, 1);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 3).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = FeatureMap::from_vec(1, 1, 5, 5, vec![1.0; 25]).unwrap();
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data[12], 9.0);
        for corner in [0, 4, 20, 24] {
            assert_eq!(y.data[corner], 4.0);
        }
        assert_eq!(y.data[2], 6.0);
    }

    #[test]
    fn dilation_spreads_taps() {
        // 7x7 impulse at the centre, dilation 2: output is the flipped kernel
        // spread on a stride-2 lattice.
        let mut x = FeatureMap::zeros(1, 1, 7, 7);
        x.data[24] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.data[24], 5.0);
        assert_eq!(y.data[(3 - 2) * 7 + (3 - 2)], 9.0);
        assert_eq!(y.data[(3 + 2) * 7 + (3 + 2)], 1.0);
        assert_eq!(y.data[(3 - 2) * 7 + 3], 8.0);
        assert_eq!(y.data.iter().filter(|v| **v != 0.0).count(), 9);
    }

    #[test]
    fn shape_errors() {
        let x = random_map(1, 2, 4, 4, 0);
        let w = Tensor::zeros(&[3, 1, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[3]), 1).is_err());
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[2]), 1).is_err());
        assert!(conv2d(&x, &w, &Tensor::zeros(&[3]), 0).is_err());
        let w = Tensor::zeros(&[3, 2, 2, 2]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[3]), 1).is_err());
    }

    fn conv_gradients(seed: u64, kernel: usize, dilation: usize) {
        let x = random_map(2, 2, 5, 4, seed);
        let w = random_tensor(&[3, 2, kernel, kernel], seed + 100);
        let b = random_tensor(&[3], seed + 200);
        let probe = random_map(2, 3, 5, 4, seed + 300);
        let loss = |x: &FeatureMap, w: &Tensor, b: &Tensor| -> f64 {
            let y = conv2d(x, w, b, dilation).unwrap();
            y.data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        let (mut wg, mut bg) = (w.clone(), b.clone());
        let dx = conv2d_backward(&x, &mut wg, &mut bg, dilation, &probe, true)
            .unwrap()
            .unwrap();
        check_grad("conv x", &x.data, &dx.data, 1e-4, |i, h| {
            let mut xp = x.clone();
            xp.data[i] += h;
            loss(&xp, &w, &b)
        });
        check_grad("conv w", &w.data, &wg.grad, 1e-4, |i, h| {
            let mut wp = w.clone();
            wp.data[i] += h;
            loss(&x, &wp, &b)
        });
        check_grad("conv b", &b.data, &bg.grad, 1e-4, |i, h| {
            let mut bp = b.clone();
            bp.data[i] += h;
            loss(&x, &w, &bp)
        });
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            conv_gradients(seed, 3, 1);
            conv_gradients(seed, 3, 2);
            conv_gradients(seed, 1, 1);
        }
    }

    #[test]
    fn single_precision_tracks_double() {
        let x = random_map(2, 3, 9, 8, 4);
        let w = random_tensor(&[4, 3, 3, 3], 5);
        let b = random_tensor(&[4], 6);
        let y64 = conv2d(&x, &w, &b, 2).unwrap();
        let y32 = conv2d_with(&x, &w, &b, 2, Precision::F32).unwrap();
        let scale = y64.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, c) in y64.data.iter().zip(&y32.data) {
            assert!((a - c).abs() < 1e-5 * scale);
        }
        let (mut w64, mut b64) = (w.clone(), b.clone());
        let (mut w32, mut b32) = (w.clone(), b.clone());
        let dx64 = conv2d_backward(&x, &mut w64, &mut b64, 2, &y64, true).unwrap().unwrap();
        let dx32 = conv2d_backward_with(&x, &mut w32, &mut b32, 2, &y64, true, Precision::F32)
            .unwrap()
            .unwrap();
        for (a, c) in [(&dx64.data, &dx32.data), (&w64.grad, &w32.grad)] {
            let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(a.iter().zip(c).all(|(p, q)| (p - q).abs() < 1e-5 * scale));
        }
        assert_eq!(b64.grad, b32.grad);
    }

    #[test]
    fn sum_gradient_on_single_channel_4x4() {
        let x = random_map(1, 1, 4, 4, 9);
        let w = random_tensor(&[1, 1, 3, 3], 10);
        let b = random_tensor(&[1], 11);
        let ones = FeatureMap::from_vec(1, 1, 4, 4, vec![1.0; 16]).unwrap();
        let (mut wg, mut bg) = (w.clone(), b.clone());
        let dx = conv2d_backward(&x, &mut wg, &mut bg, 1, &ones, true)
            .unwrap()
            .unwrap();
        let sum = |x: &FeatureMap, w: &Tensor, b: &Tensor| -> f64 {
            conv2d(x, w, b, 1).unwrap().data.iter().sum()
        };
        check_grad("x", &x.data, &dx.data, 1e-4, |i, h| {
            let mut xp = x.clone();
            xp.data[i] += h;
            sum(&xp, &w, &b)
        });
        check_grad("w", &w.data, &wg.grad, 1e-4, |i, h| {
            let mut wp = w.clone();
            wp.data[i] += h;
            sum(&x, &wp, &b)
        });
        assert!((bg.grad[0] - 16.0).abs() < 1e-12);
    }
}
