//! Bicubic interpolation, Gaussian blur and decimation on `(C, H, W)` tensors.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keys cubic convolution kernel with `a = -0.5`.
fn keys<T: Scalar>(t: T) -> T {
    let a = T::lit(-0.5);
    let t = t.abs();
    let (one, two) = (T::one(), T::lit(2.0));
    if t <= one {
        (a + two) * t * t * t - (a + T::lit(3.0)) * t * t + one
    } else if t < two {
        a * t * t * t - T::lit(5.0) * a * t * t + T::lit(8.0) * a * t - T::lit(4.0) * a
    } else {
        T::zero()
    }
}

/// For each output index: the four clamped source taps and their weights.
fn bicubic_taps<T: Scalar>(n_in: usize, ratio: usize) -> Vec<([usize; 4], [T; 4])> {
    let r = ratio as f64;
    (0..n_in * ratio)
        .map(|o| {
            let src = (o as f64 + 0.5) / r - 0.5;
            let base = src.floor();
            let frac = T::lit(src - base);
            let mut idx = [0usize; 4];
            let mut wt = [T::zero(); 4];
            for m in 0..4 {
                let p = base as isize + m as isize - 1;
                idx[m] = p.clamp(0, n_in as isize - 1) as usize;
                wt[m] = keys(frac - T::lit(m as f64 - 1.0));
            }
            (idx, wt)
        })
        .collect()
}

/// Separable bicubic upsampling by an integer factor, half-pixel aligned,
/// edges replicated.
pub fn upsample_bicubic<T: Scalar>(x: &Tensor<T>, ratio: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if ratio == 0 || h == 0 || w == 0 {
        return Err(shape_err!("bicubic upsample of {:?} by {ratio}", x.shape()));
    }
    let (oh, ow) = (h * ratio, w * ratio);
    let rows = bicubic_taps::<T>(h, ratio);
    let cols = bicubic_taps::<T>(w, ratio);
    let mut tmp = vec![T::zero(); c * h * ow];
    for ch in 0..c {
        let src = x.channel(ch);
        for i in 0..h {
            for (j, (idx, wt)) in cols.iter().enumerate() {
                let mut acc = T::zero();
                for m in 0..4 {
                    acc += wt[m] * src[i * w + idx[m]];
                }
                tmp[(ch * h + i) * ow + j] = acc;
            }
        }
    }
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let yd = y.data_mut();
    for ch in 0..c {
        for (i, (idx, wt)) in rows.iter().enumerate() {
            for j in 0..ow {
                let mut acc = T::zero();
                for m in 0..4 {
                    acc += wt[m] * tmp[(ch * h + idx[m]) * ow + j];
                }
                yd[(ch * oh + i) * ow + j] = acc;
            }
        }
    }
    Ok(y)
}

/// Normalised 1-D Gaussian taps over `[-⌈3σ⌉, ⌈3σ⌉]`.
pub fn gaussian_taps<T: Scalar>(sigma: f64) -> Result<Vec<T>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("blur sigma {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| T::lit(v / total)).collect())
}

/// Symmetric (half-sample) reflection of `p` into `[0, n)`.
fn reflect(mut p: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    p = p.rem_euclid(period);
    if p >= n {
        p = period - 1 - p;
    }
    p as usize
}

/// Separable Gaussian blur with symmetric boundary reflection.
pub fn gaussian_blur<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let taps = gaussian_taps::<T>(sigma)?;
    let r = (taps.len() / 2) as isize;
    let mut tmp = Tensor::zeros(x.shape());
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = tmp.channel_mut(ch);
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (t, &g) in taps.iter().enumerate() {
                    acc += g * src[i * w + reflect(j as isize + t as isize - r, w)];
                }
                dst[i * w + j] = acc;
            }
        }
    }
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let src = tmp.channel(ch);
        let dst = y.channel_mut(ch);
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (t, &g) in taps.iter().enumerate() {
                    acc += g * src[reflect(i as isize + t as isize - r, h) * w + j];
                }
                dst[i * w + j] = acc;
            }
        }
    }
    Ok(y)
}

/// Keeps every `ratio`-th pixel starting at offset `ratio / 2`.
pub fn decimate<T: Scalar>(x: &Tensor<T>, ratio: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if ratio == 0 || h % ratio != 0 || w % ratio != 0 {
        return Err(shape_err!("{}x{} not divisible by {ratio}", h, w));
    }
    let off = ratio / 2;
    let (oh, ow) = (h / ratio, w / ratio);
    Ok(Tensor::from_fn(&[c, oh, ow], |idx| {
        let j = idx % ow;
        let i = (idx / ow) % oh;
        let ch = idx / (oh * ow);
        x.data()[(ch * h + i * ratio + off) * w + j * ratio + off]
    }))
}
