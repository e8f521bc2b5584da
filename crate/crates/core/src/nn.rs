//! Neural primitives over [`Tensor`]: same-size and strided convolution,
//! point-wise convolution queries, masked pooling, affine maps and activations,
//! together with the reverse-mode kernels the trainer needs.
//!
//! Every convolution accumulates `bias + Σ_c Σ_u Σ_v w·x` in that fixed order,
//! skipping taps that fall into the zero padding, so dense and point-wise
//! evaluation produce bit-identical values.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tally::OpTally;
use crate::tensor::Tensor;

/// Validates a same-size convolution and returns `(C_out, C_in, H, W, k)`.
fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (ci, h, wd) = x.dims3()?;
    let (co, wci, kh, kw) = w.dims4()?;
    if wci != ci {
        return Err(shape_err!("kernel expects {wci} input channels, input has {ci}"));
    }
    if kh != kw {
        return Err(Error::Config(format!("non-square kernel {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::Config(format!("kernel size {kh} must be odd")));
    }
    if pad != (kh - 1) / 2 {
        return Err(Error::Config(format!(
            "padding {pad} does not preserve size for k={kh}"
        )));
    }
    b.expect_shape(&[co], "conv bias")?;
    Ok((co, ci, h, wd, kh))
}

/// Same-size, stride-1, zero-padded 2-D convolution (cross-correlation).
///
/// `y[o,i,j] = b[o] + Σ x[c, i+u-pad, j+v-pad] · w[o,c,u,v]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_tallied(x, w, b, pad, &mut OpTally::off())
}

pub fn conv2d_tallied<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
    tally: &mut OpTally,
) -> Result<Tensor<T>> {
    let (co, ci, h, wd, k) = conv_dims(x, w, b, pad)?;
    let mut y = Tensor::zeros(&[co, h, wd]);
    conv_same_raw(
        x.data(),
        ci,
        h,
        wd,
        w.data(),
        b.data(),
        co,
        k,
        y.data_mut(),
    );
    tally.record_macs((co * h * wd * ci * k * k) as u64);
    y.check_finite("conv2d")?;
    Ok(y)
}

pub(crate) fn conv_same_raw<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    bias: &[T],
    co: usize,
    k: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for o in 0..co {
        let yo = &mut out[o * hw..(o + 1) * hw];
        yo.iter_mut().for_each(|y| *y = bias[o]);
        for c in 0..ci {
            let xc = &x[c * hw..(c + 1) * hw];
            let kbase = (o * ci + c) * k * k;
            for u in 0..k {
                let di = u as isize - pad;
                let (i_lo, i_hi) = valid_range(h, di);
                for v in 0..k {
                    let dj = v as isize - pad;
                    let (j_lo, j_hi) = valid_range(w, dj);
                    if j_lo >= j_hi {
                        continue;
                    }
                    let wv = kernel[kbase + u * k + v];
                    for i in i_lo..i_hi {
                        let src = ((i as isize + di) as usize) * w;
                        let xs = (src as isize + j_lo as isize + dj) as usize;
                        let yrow = &mut yo[i * w + j_lo..i * w + j_hi];
                        let xrow = &xc[xs..xs + (j_hi - j_lo)];
                        for (y, &xv) in yrow.iter_mut().zip(xrow) {
                            *y += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Output index range `[lo, hi)` for which `idx + d` lies inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Reverse-mode kernel of [`conv2d`]. Accumulates into `gw`/`gb` and, when
/// requested, into `gx`.
pub(crate) fn conv_same_backward_raw<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    co: usize,
    k: usize,
    gy: &[T],
    gw: &mut [T],
    gb: &mut [T],
    mut gx: Option<&mut [T]>,
) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for o in 0..co {
        let go = &gy[o * hw..(o + 1) * hw];
        gb[o] += go.iter().fold(T::zero(), |a, &g| a + g);
        for c in 0..ci {
            let xc = &x[c * hw..(c + 1) * hw];
            let kbase = (o * ci + c) * k * k;
            for u in 0..k {
                let di = u as isize - pad;
                let (i_lo, i_hi) = valid_range(h, di);
                for v in 0..k {
                    let dj = v as isize - pad;
                    let (j_lo, j_hi) = valid_range(w, dj);
                    if j_lo >= j_hi {
                        continue;
                    }
                    let wv = kernel[kbase + u * k + v];
                    let mut acc = T::zero();
                    for i in i_lo..i_hi {
                        let xs = (((i as isize + di) as usize) * w) as isize + j_lo as isize + dj;
                        let xs = xs as usize;
                        let grow = &go[i * w + j_lo..i * w + j_hi];
                        let xrow = &xc[xs..xs + (j_hi - j_lo)];
                        for (&g, &xv) in grow.iter().zip(xrow) {
                            acc += g * xv;
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let gxrow = &mut gx[c * hw + xs..c * hw + xs + (j_hi - j_lo)];
                            for (gxv, &g) in gxrow.iter_mut().zip(grow) {
                                *gxv += g * wv;
                            }
                        }
                    }
                    gw[kbase + u * k + v] += acc;
                }
            }
        }
    }
}

/// Gradients of a same-size convolution: returns `gx`, accumulates `gw`, `gb`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (ci, h, wd) = x.dims3()?;
    let (co, _, k, _) = w.dims4()?;
    gy.expect_shape(&[co, h, wd], "conv2d upstream gradient")?;
    gw.expect_shape(w.shape(), "conv2d weight gradient")?;
    gb.expect_shape(&[co], "conv2d bias gradient")?;
    let mut gx = Tensor::zeros(x.shape());
    conv_same_backward_raw(
        x.data(),
        ci,
        h,
        wd,
        w.data(),
        co,
        k,
        gy.data(),
        gw.data_mut(),
        gb.data_mut(),
        Some(gx.data_mut()),
    );
    Ok(gx)
}

/// Reorders a `(C_out, C_in, k, k)` kernel to `(C_in, k, k, C_out)` so that the
/// output channel is the contiguous axis for point-wise evaluation.
pub(crate) fn transpose_kernel<T: Scalar>(w: &[T], co: usize, ci: usize, kk: usize) -> Vec<T> {
    let mut t = vec![T::zero(); w.len()];
    for o in 0..co {
        for c in 0..ci {
            for t_ in 0..kk {
                t[(c * kk + t_) * co + o] = w[(o * ci + c) * kk + t_];
            }
        }
    }
    t
}

/// Inverse of [`transpose_kernel`].
pub(crate) fn untranspose_kernel<T: Scalar>(
    t: &[T],
    co: usize,
    ci: usize,
    kk: usize,
) -> Vec<T> {
    let mut w = vec![T::zero(); t.len()];
    for c in 0..ci {
        for t_ in 0..kk {
            for o in 0..co {
                w[(o * ci + c) * kk + t_] = t[(c * kk + t_) * co + o];
            }
        }
    }
    w
}

/// Evaluates one output pixel with a transposed kernel `(C_in, k, k, C_out)`.
#[inline]
pub(crate) fn conv_point<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kt: &[T],
    bias: &[T],
    k: usize,
    (i, j): (usize, usize),
    y: &mut [T],
) {
    let co = y.len();
    let hw = h * w;
    let pad = k / 2;
    y.copy_from_slice(&bias[..co]);
    for c in 0..ci {
        for u in 0..k {
            let r = i + u;
            if r < pad || r - pad >= h {
                continue;
            }
            let r = r - pad;
            for v in 0..k {
                let s = j + v;
                if s < pad || s - pad >= w {
                    continue;
                }
                let xv = x[c * hw + r * w + s - pad];
                let wrow = &kt[((c * k + u) * k + v) * co..((c * k + u) * k + v + 1) * co];
                for (yo, &wv) in y.iter_mut().zip(wrow) {
                    *yo += wv * xv;
                }
            }
        }
    }
}

/// Reverse of [`conv_point`]: accumulates the transposed-kernel gradient and
/// the input gradient over the pixel's window.
#[inline]
pub(crate) fn conv_point_backward<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kt: &[T],
    k: usize,
    (i, j): (usize, usize),
    gy: &[T],
    gkt: &mut [T],
    gx: &mut [T],
) {
    let co = gy.len();
    let hw = h * w;
    let pad = k / 2;
    for c in 0..ci {
        for u in 0..k {
            let r = i + u;
            if r < pad || r - pad >= h {
                continue;
            }
            let r = r - pad;
            for v in 0..k {
                let s = j + v;
                if s < pad || s - pad >= w {
                    continue;
                }
                let xi = c * hw + r * w + s - pad;
                let xv = x[xi];
                let base = ((c * k + u) * k + v) * co;
                let wrow = &kt[base..base + co];
                let grow = &mut gkt[base..base + co];
                let mut acc = T::zero();
                for o in 0..co {
                    grow[o] += gy[o] * xv;
                    acc += gy[o] * wrow[o];
                }
                gx[xi] += acc;
            }
        }
    }
}

/// Evaluates [`conv2d`] only at the requested output positions.
///
/// Neighbourhoods read the whole of `x`; the returned vectors equal the dense
/// result at the same positions bit for bit.
pub fn conv2d_at<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
    positions: &[(usize, usize)],
) -> Result<BTreeMap<(usize, usize), Tensor<T>>> {
    let (co, ci, h, wd, k) = conv_dims(x, w, b, pad)?;
    if let Some(&(i, j)) = positions.iter().find(|&&(i, j)| i >= h || j >= wd) {
        return Err(Error::Index(format!("position ({i},{j}) outside {h}x{wd}")));
    }
    let kt = transpose_kernel(w.data(), co, ci, k * k);
    let mut out = BTreeMap::new();
    for &p in positions {
        let mut y = vec![T::zero(); co];
        conv_point(x.data(), ci, h, wd, &kt, b.data(), k, p, &mut y);
        let t = Tensor::from_vec(&[co], y)?;
        t.check_finite("conv2d_at")?;
        out.insert(p, t);
    }
    Ok(out)
}

/// Zero-padded convolution with stride `stride` and arbitrary padding.
/// Output extents are `(H + 2·pad - k) / stride + 1`.
pub fn conv2d_strided<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
    stride: usize,
    tally: &mut OpTally,
) -> Result<Tensor<T>> {
    let (ci, h, wd) = x.dims3()?;
    let (co, wci, k, _) = w.dims4()?;
    if wci != ci || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(shape_err!(
            "strided conv of {:?} with kernel {:?}",
            x.shape(),
            w.shape()
        ));
    }
    b.expect_shape(&[co], "conv bias")?;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[co, oh, ow]);
    let xd = x.data();
    let wdta = w.data();
    let yd = y.data_mut();
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for u in 0..k {
                        let r = (i * stride + u) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let s = (j * stride + v) as isize - pad as isize;
                            if s < 0 || s >= wd as isize {
                                continue;
                            }
                            acc += wdta[((o * ci + c) * k + u) * k + v]
                                * xd[(c * h + r as usize) * wd + s as usize];
                        }
                    }
                }
                yd[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    tally.record_macs((co * oh * ow * ci * k * k) as u64);
    y.check_finite("conv2d_strided")?;
    Ok(y)
}

pub fn conv2d_strided_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    stride: usize,
    gy: &Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (ci, h, wd) = x.dims3()?;
    let (co, _, k, _) = w.dims4()?;
    let (gco, oh, ow) = gy.dims3()?;
    if gco != co {
        return Err(shape_err!("strided conv gradient channels {gco} vs {co}"));
    }
    let mut gx = Tensor::zeros(x.shape());
    let xd = x.data();
    let wdta = w.data();
    let gyd = gy.data();
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    let gbd = gb.data_mut();
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let g = gyd[(o * oh + i) * ow + j];
                gbd[o] += g;
                for c in 0..ci {
                    for u in 0..k {
                        let r = (i * stride + u) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let s = (j * stride + v) as isize - pad as isize;
                            if s < 0 || s >= wd as isize {
                                continue;
                            }
                            let xi = (c * h + r as usize) * wd + s as usize;
                            let wi = ((o * ci + c) * k + u) * k + v;
                            gwd[wi] += g * xd[xi];
                            gxd[xi] += g * wdta[wi];
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Channel-wise mean over the pixels where `keep == 1`; pools over every
/// pixel when `keep` selects none.
pub fn masked_gap<T: Scalar>(x: &Tensor<T>, keep: &Tensor<T>) -> Result<Tensor<T>> {
    masked_gap_tallied(x, keep, &mut OpTally::off())
}

pub fn masked_gap_tallied<T: Scalar>(
    x: &Tensor<T>,
    keep: &Tensor<T>,
    tally: &mut OpTally,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    keep.expect_shape(&[1, h, w], "masked_gap keep mask")?;
    let idx = pooled_pixels(keep);
    let n = T::from_usize_lossy(idx.len());
    let v: Vec<T> = (0..c)
        .map(|ch| {
            let plane = x.channel(ch);
            idx.iter().fold(T::zero(), |a, &p| a + plane[p]) / n
        })
        .collect();
    tally.record(c as u64, (c * idx.len()) as u64);
    Tensor::from_vec(&[c], v)
}

/// Pixels pooled by [`masked_gap`] (the whole grid for an empty mask).
pub(crate) fn pooled_pixels<T: Scalar>(keep: &Tensor<T>) -> Vec<usize> {
    let idx: Vec<usize> = keep
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &k)| k == T::one())
        .map(|(p, _)| p)
        .collect();
    if idx.is_empty() {
        (0..keep.len()).collect()
    } else {
        idx
    }
}

/// `W·v + b`.
pub fn linear<T: Scalar>(v: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (dout, din) = match w.shape()[..] {
        [a, b] => (a, b),
        _ => return Err(shape_err!("linear weight must be rank 2, got {:?}", w.shape())),
    };
    v.expect_shape(&[din], "linear input")?;
    b.expect_shape(&[dout], "linear bias")?;
    let mut y = vec![T::zero(); dout];
    linear_raw(v.data(), w.data(), b.data(), &mut y);
    let y = Tensor::from_vec(&[dout], y)?;
    y.check_finite("linear")?;
    Ok(y)
}

#[inline]
pub(crate) fn linear_raw<T: Scalar>(v: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let din = v.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * din..(o + 1) * din];
        *yo = row.iter().zip(v).fold(b[o], |a, (&wv, &x)| a + wv * x);
    }
}

/// Accumulates `gW += g vᵀ`, `gb += g` and `gv += Wᵀ g`.
#[inline]
pub(crate) fn linear_backward_raw<T: Scalar>(
    v: &[T],
    w: &[T],
    g: &[T],
    gw: &mut [T],
    gb: &mut [T],
    gv: &mut [T],
) {
    let din = v.len();
    for (o, &go) in g.iter().enumerate() {
        gb[o] += go;
        let row = &w[o * din..(o + 1) * din];
        let grow = &mut gw[o * din..(o + 1) * din];
        for i in 0..din {
            grow[i] += go * v[i];
            gv[i] += go * row[i];
        }
    }
}

/// Logistic function, kept strictly inside `(0, 1)` for every finite input.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

pub fn sigmoid<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(sigmoid_scalar)
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Nearest-neighbour ×2 upsampling of a `(C, H, W)` map.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = y.channel_mut(ch);
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest2_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, oh, ow) = gy.dims3()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = gy.channel(ch);
        let dst = gx.channel_mut(ch);
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / 2) * w + j / 2] += g[i * ow + j];
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Six nested loops, reading padded taps as zero.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (ci, h, wd) = x.dims3().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let mut y = Tensor::zeros(&[co, h, wd]);
        for o in 0..co {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let r = i as isize + u as isize - pad as isize;
                                let q = j as isize + v as isize - pad as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    s += x.at3(c, r as usize, q as usize)
                                        * w.data()[((o * ci + c) * k + u) * k + v];
                                }
                            }
                        }
                    }
                    y.set3(o, i, j, s);
                }
            }
        }
        y
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut r = rng(1);
        let x = Tensor::<f64>::uniform(&[3, 6, 5], 1.0, &mut r);
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = Tensor::<f64>::ones(&[1, 5, 5]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.at3(0, 2, 2), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 4, 4), 4.0);
        assert_eq!(y.at3(0, 0, 2), 6.0);
        assert_eq!(y.at3(0, 2, 4), 6.0);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut r = rng(2);
        for &(ci, co, h, w, k) in &[(3, 4, 7, 6, 3), (2, 2, 5, 9, 5), (4, 1, 4, 4, 1)] {
            let x = Tensor::uniform(&[ci, h, w], 1.0, &mut r);
            let wt = Tensor::uniform(&[co, ci, k, k], 1.0, &mut r);
            let b = Tensor::uniform(&[co], 1.0, &mut r);
            let y = conv2d(&x, &wt, &b, k / 2).unwrap();
            let o = conv_oracle(&x, &wt, &b, k / 2);
            assert!(y.max_abs_diff(&o).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_even_kernels_and_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &b, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &b, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_at_full_and_empty_coverage() {
        let mut r = rng(3);
        let x = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut r);
        let w = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::uniform(&[2], 1.0, &mut r);
        let dense = conv2d(&x, &w, &b, 1).unwrap();
        let all: Vec<_> = (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).collect();
        let at = conv2d_at(&x, &w, &b, 1, &all).unwrap();
        for (&(i, j), v) in &at {
            for o in 0..2 {
                assert_eq!(v.data()[o], dense.at3(o, i, j));
            }
        }
        assert!(conv2d_at(&x, &w, &b, 1, &[]).unwrap().is_empty());
        assert!(matches!(
            conv2d_at(&x, &w, &b, 1, &[(8, 0)]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn conv_at_random_subset_matches_dense_oracle() {
        use rand::seq::index::sample;
        let mut r = rng(4);
        let x = Tensor::<f64>::uniform(&[4, 10, 10], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 4, 3, 3], 1.0, &mut r);
        let b = Tensor::uniform(&[3], 1.0, &mut r);
        let oracle = conv_oracle(&x, &w, &b, 1);
        let pos: Vec<_> = sample(&mut r, 100, 30)
            .into_iter()
            .map(|p| (p / 10, p % 10))
            .collect();
        let at = conv2d_at(&x, &w, &b, 1, &pos).unwrap();
        assert_eq!(at.len(), 30);
        for (&(i, j), v) in &at {
            for o in 0..3 {
                assert!((v.data()[o] - oracle.at3(o, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input_and_kernel() {
        let mut r = rng(5);
        let x1 = Tensor::<f64>::uniform(&[3, 6, 6], 1.0, &mut r);
        let x2 = Tensor::uniform(&[3, 6, 6], 1.0, &mut r);
        let w1 = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut r);
        let w2 = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut r);
        let zb = Tensor::zeros(&[2]);
        let a = 0.7;
        let lhs = conv2d(&x1.scale(a).add(&x2).unwrap(), &w1, &zb, 1).unwrap();
        let rhs = conv2d(&x1, &w1, &zb, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d(&x2, &w1, &zb, 1).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
        let lhs = conv2d(&x1, &w1.scale(a).add(&w2).unwrap(), &zb, 1).unwrap();
        let rhs = conv2d(&x1, &w1, &zb, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d(&x1, &w2, &zb, 1).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn conv_tally_counts_every_tap() {
        let mut t = OpTally::on();
        let x = Tensor::<f64>::ones(&[1, 8, 8]);
        conv2d_tallied(&x, &Tensor::ones(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, &mut t).unwrap();
        assert_eq!(t.total().mul, 576);
    }

    #[test]
    fn masked_gap_cases() {
        let mut r = rng(6);
        let x = Tensor::<f64>::full(&[2, 4, 4], 3.0);
        let mut keep = Tensor::zeros(&[1, 4, 4]);
        keep.data_mut()[5] = 1.0;
        keep.data_mut()[7] = 1.0;
        assert_eq!(masked_gap(&x, &keep).unwrap().data(), &[3.0, 3.0]);

        let x = Tensor::<f64>::uniform(&[3, 5, 5], 1.0, &mut r);
        let all = Tensor::ones(&[1, 5, 5]);
        let v = masked_gap(&x, &all).unwrap();
        for c in 0..3 {
            let m: f64 = x.channel(c).iter().sum::<f64>() / 25.0;
            assert!((v.data()[c] - m).abs() < 1e-15);
        }
        // Empty mask falls back to the full-grid mean.
        let none = Tensor::zeros(&[1, 5, 5]);
        assert_eq!(masked_gap(&x, &none).unwrap(), v);

        let keep = Tensor::from_fn(&[1, 5, 5], |p| if (p * 7) % 3 == 0 { 1.0 } else { 0.0 });
        let v = masked_gap(&x, &keep).unwrap();
        for c in 0..3 {
            let (mut s, mut n) = (0.0, 0.0);
            for i in 0..5 {
                for j in 0..5 {
                    if keep.at3(0, i, j) == 1.0 {
                        s += x.at3(c, i, j);
                        n += 1.0;
                    }
                }
            }
            assert!((v.data()[c] - s / n).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_and_linear() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let t = Tensor::from_vec(&[2], vec![-2.5f64, 2.5]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 2.5]);
        for &x in &[-1e308f64, -800.0, -40.0, 0.0, 40.0, 800.0, 1e308] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
        let eye = Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 1.0f64 } else { 0.0 });
        let v = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(linear(&v, &eye, &Tensor::zeros(&[3])).unwrap(), v);
    }

    #[test]
    fn strided_conv_matches_subsampled_dense_for_k3() {
        let mut r = rng(7);
        let x = Tensor::<f64>::uniform(&[2, 8, 8], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::uniform(&[3], 1.0, &mut r);
        let dense = conv2d(&x, &w, &b, 1).unwrap();
        let s = conv2d_strided(&x, &w, &b, 1, 2, &mut OpTally::off()).unwrap();
        assert_eq!(s.shape(), &[3, 4, 4]);
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((s.at3(o, i, j) - dense.at3(o, 2 * i, 2 * j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kernel_transpose_round_trips() {
        let w: Vec<f64> = (0..2 * 3 * 9).map(|k| k as f64).collect();
        let t = transpose_kernel(&w, 2, 3, 9);
        assert_eq!(untranspose_kernel(&t, 2, 3, 9), w);
    }

    proptest::proptest! {
        #[test]
        fn sigmoid_stays_in_open_unit_interval(x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
            let s = sigmoid_scalar(x);
            proptest::prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
