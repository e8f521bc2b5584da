//! Reduced-resolution quality indices: SAM, ERGAS and Q2n.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let dims = gt.dims3()?;
    pred.expect_shape(gt.shape(), "prediction")?;
    Ok(dims)
}

/// Mean spectral angle in degrees. Pixels where either vector is zero are
/// skipped.
pub fn sam<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = same_shape(pred, gt)?;
    if c < 2 {
        return Err(shape_err!("SAM needs at least two bands, got {c}"));
    }
    let n = h * w;
    let (p, g) = (pred.data(), gt.data());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut u = vec![0.0f64; c];
    let mut v = vec![0.0f64; c];
    for q in 0..n {
        for b in 0..c {
            u[b] = p[b * n + q].as_f64();
            v[b] = g[b * n + q].as_f64();
        }
        let (nu, nv) = (norm(&u), norm(&v));
        if nu == 0.0 || nv == 0.0 {
            continue;
        }
        // Kahan: 2·atan2(|û − v̂|, |û + v̂|), accurate near 0 and 180 degrees.
        let (mut d, mut s) = (0.0, 0.0);
        for b in 0..c {
            let (a, e) = (u[b] / nu, v[b] / nv);
            d += (a - e) * (a - e);
            s += (a + e) * (a + e);
        }
        total += (2.0 * d.sqrt().atan2(s.sqrt())).to_degrees();
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("SAM: every pixel is zero".into()));
    }
    Ok(total / used as f64)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `100/ratio · sqrt(mean_b (RMSE_b / mean(gt_b))²)`.
pub fn ergas<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, ratio: usize) -> Result<f64> {
    let (c, h, w) = same_shape(pred, gt)?;
    let n = (h * w) as f64;
    let mut acc = 0.0;
    for b in 0..c {
        let (p, g) = (pred.channel(b), gt.channel(b));
        let mean = g.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        if mean == 0.0 {
            return Err(Error::UndefinedMetric(format!("ERGAS: band {b} has zero mean")));
        }
        let mse = p
            .iter()
            .zip(g)
            .map(|(a, e)| (a.as_f64() - e.as_f64()).powi(2))
            .sum::<f64>()
            / n;
        acc += mse / (mean * mean);
    }
    Ok(100.0 / ratio as f64 * (acc / c as f64).sqrt())
}

/// Cayley–Dickson product of two `2^n`-component numbers:
/// `(a, b)(c, d) = (ac − d*b, da + bc*)`.
pub fn hyper_mul(x: &[f64], y: &[f64], out: &mut [f64]) {
    let n = x.len();
    if n == 1 {
        out[0] = x[0] * y[0];
        return;
    }
    let m = n / 2;
    let (a, b) = x.split_at(m);
    let (c, d) = y.split_at(m);
    let mut t1 = vec![0.0; m];
    let mut t2 = vec![0.0; m];
    hyper_mul(a, c, &mut t1);
    hyper_mul(&hyper_conj(d), b, &mut t2);
    for k in 0..m {
        out[k] = t1[k] - t2[k];
    }
    hyper_mul(d, a, &mut t1);
    hyper_mul(b, &hyper_conj(c), &mut t2);
    for k in 0..m {
        out[m + k] = t1[k] + t2[k];
    }
}

pub fn hyper_conj(x: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().map(|a| -a).collect();
    v[0] = x[0];
    v
}

/// Hypercomplex universal image quality index of one block.
fn q_block(z: &[Vec<f64>], zh: &[Vec<f64>]) -> f64 {
    let c = z[0].len();
    let n = z.len() as f64;
    let mean = |v: &[Vec<f64>]| {
        let mut m = vec![0.0; c];
        for p in v {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    };
    let (mz, mzh) = (mean(z), mean(zh));
    let mut prod = vec![0.0; c];
    // Every second moment goes through the same product so that identical
    // inputs reproduce identical numbers.
    let second = |u: &[f64], v: &[f64], out: &mut [f64]| hyper_mul(u, &hyper_conj(v), out);
    let mut cov = vec![0.0; c];
    let (mut var_z, mut var_zh) = (0.0, 0.0);
    for (p, q) in z.iter().zip(zh) {
        let dz: Vec<f64> = p.iter().zip(&mz).map(|(a, b)| a - b).collect();
        let dzh: Vec<f64> = q.iter().zip(&mzh).map(|(a, b)| a - b).collect();
        second(&dz, &dzh, &mut prod);
        for (a, b) in cov.iter_mut().zip(&prod) {
            *a += b;
        }
        second(&dz, &dz, &mut prod);
        var_z += prod[0];
        second(&dzh, &dzh, &mut prod);
        var_zh += prod[0];
    }
    cov.iter_mut().for_each(|a| *a /= n);
    let (var_z, var_zh) = (var_z / n, var_zh / n);
    second(&mz, &mz, &mut prod);
    let m1 = prod[0];
    second(&mzh, &mzh, &mut prod);
    let m2 = prod[0];
    let den = (var_z + var_zh) * (m1 + m2);
    if den == 0.0 {
        return if z == zh { 1.0 } else { 0.0 };
    }
    4.0 * norm(&cov) * (m1 * m2).sqrt() / den
}

/// Q2n averaged over non-overlapping `block × block` tiles.
pub fn q2n<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, block: usize) -> Result<f64> {
    q2n_strided(pred, gt, block, block)
}

/// Q2n over `block × block` tiles placed every `stride` pixels.
pub fn q2n_strided<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, block: usize, stride: usize) -> Result<f64> {
    let (c, h, w) = same_shape(pred, gt)?;
    if c != 4 && c != 8 {
        return Err(shape_err!("Q2n supports 4 or 8 bands, got {c}"));
    }
    if block == 0 || stride == 0 || h < block || w < block {
        return Err(shape_err!("{h}x{w} image with block {block}, stride {stride}"));
    }
    let n = h * w;
    let pixel = |t: &Tensor<T>, i: usize, j: usize| -> Vec<f64> {
        (0..c).map(|b| t.data()[b * n + i * w + j].as_f64()).collect()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    let mut i0 = 0;
    while i0 + block <= h {
        let mut j0 = 0;
        while j0 + block <= w {
            let mut z = Vec::with_capacity(block * block);
            let mut zh = Vec::with_capacity(block * block);
            for i in i0..i0 + block {
                for j in j0..j0 + block {
                    z.push(pixel(gt, i, j));
                    zh.push(pixel(pred, i, j));
                }
            }
            total += q_block(&z, &zh);
            count += 1;
            j0 += stride;
        }
        i0 += stride;
    }
    Ok(total / count as f64)
}

/// `(SAM, ERGAS, Q2n)` with the default ratio 4 and 32-pixel blocks; Q2n is
/// `None` when the image is smaller than a block or the band count is not 4/8.
pub fn quality<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, f64, Option<f64>)> {
    let s = sam(pred, gt)?;
    let e = ergas(pred, gt, 4)?;
    let (c, h, w) = gt.dims3()?;
    let q = if (c == 4 || c == 8) && h >= 32 && w >= 32 {
        Some(q2n(pred, gt, 32)?)
    } else {
        None
    };
    Ok((s, e, q))
}
