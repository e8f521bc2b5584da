//! Patch statistics separating redundant (low-rank, low-frequency) regions
//! from complex (high-rank, high-frequency) ones.

use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Singular values counted by the effective rank are `≥ RANK_CUTOFF · s1`.
pub const RANK_CUTOFF: f64 = 0.01;
pub const DEFAULT_RANK_THRESH: usize = 5;
pub const DEFAULT_HF_THRESH: f64 = 0.25;

/// Row-major `h × w` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err!("{} values for a {h}x{w} patch", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..h * w).map(|k| f(k / w, k % w)).collect();
        Self { h, w, data }
    }

    /// `(H, W)` or `(1, H, W)` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => return Err(shape_err!("expected a single-channel image, got {:?}", t.shape())),
        };
        Self::new(h, w, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.w, self.h, |i, j| self.at(j, i))
    }
}

/// Singular values in descending order, divided by the largest. An all-zero
/// patch yields all zeros.
pub fn svd_spectrum(patch: &Patch) -> Vec<f64> {
    let s = singular_values(patch);
    let s1 = s.first().copied().unwrap_or(0.0);
    if s1 == 0.0 {
        return vec![0.0; s.len()];
    }
    s.into_iter().map(|v| v / s1).collect()
}

/// Unnormalised singular values by one-sided Jacobi rotations.
pub fn singular_values(patch: &Patch) -> Vec<f64> {
    let p = if patch.w > patch.h {
        patch.transpose()
    } else {
        patch.clone()
    };
    let (m, n) = (p.h, p.w);
    // Column-major copy so that rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| p.at(i, j)).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of normalised singular values `≥ RANK_CUTOFF`.
pub fn effective_rank(normalised: &[f64]) -> usize {
    if normalised.first().copied().unwrap_or(0.0) == 0.0 {
        return 0;
    }
    normalised.iter().filter(|&&v| v >= RANK_CUTOFF).count()
}

/// Power per integer-radius annulus around DC.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    /// Patch side length.
    pub n: usize,
    /// Summed `|F|²` per bin.
    pub energy: Vec<f64>,
    pub count: Vec<usize>,
}

impl RadialSpectrum {
    /// Mean power per bin; empty bins report zero.
    pub fn mean(&self) -> Vec<f64> {
        self.energy
            .iter()
            .zip(&self.count)
            .map(|(&e, &c)| if c == 0 { 0.0 } else { e / c as f64 })
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Share of energy at radii above half the Nyquist radius, i.e. `r > N/4`.
    pub fn hf_ratio(&self) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        let cut = self.n as f64 / 4.0;
        let hf: f64 = self
            .energy
            .iter()
            .enumerate()
            .filter(|(r, _)| *r as f64 > cut)
            .map(|(_, e)| e)
            .sum();
        hf / total
    }
}

/// Centred 2-D DFT power, binned at `round(√(u² + v²))`.
pub fn radial_power_spectrum(patch: &Patch) -> Result<RadialSpectrum> {
    let n = patch.h;
    if patch.w != n || n == 0 {
        return Err(shape_err!("radial spectrum needs a square patch, got {}x{}", patch.h, patch.w));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = patch.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
    let freq = |k: usize| -> f64 {
        if k < n.div_ceil(2) {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    let max_r = (2.0f64.sqrt() * (n / 2) as f64).round() as usize + 1;
    let mut energy = vec![0.0; max_r + 1];
    let mut count = vec![0usize; max_r + 1];
    for i in 0..n {
        for j in 0..n {
            let r = (freq(i).powi(2) + freq(j).powi(2)).sqrt().round() as usize;
            energy[r] += buf[i * n + j].norm_sqr();
            count[r] += 1;
        }
    }
    while count.len() > 1 && *count.last().unwrap() == 0 {
        count.pop();
        energy.pop();
    }
    Ok(RadialSpectrum { n, energy, count })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchClass {
    Redundant,
    Complex,
}

impl fmt::Display for PatchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchClass::Redundant => "redundant",
            PatchClass::Complex => "complex",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchProfile {
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    pub spectrum: Vec<f64>,
    pub hf_ratio: f64,
}

pub fn profile(patch: &Patch) -> Result<PatchProfile> {
    let singular_values = svd_spectrum(patch);
    let spec = radial_power_spectrum(patch)?;
    Ok(PatchProfile {
        effective_rank: effective_rank(&singular_values),
        singular_values,
        spectrum: spec.mean(),
        hf_ratio: spec.hf_ratio(),
    })
}

/// Complex iff effective rank `≥ rank_thresh` or hf ratio `≥ hf_thresh`.
/// `rank_thresh` must be at least 2: every nonzero patch has rank ≥ 1.
pub fn classify_patch(p: &PatchProfile, rank_thresh: usize, hf_thresh: f64) -> Result<PatchClass> {
    if rank_thresh < 2 || !(hf_thresh > 0.0 && hf_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "thresholds rank {rank_thresh}, hf {hf_thresh} out of range"
        )));
    }
    Ok(if p.effective_rank >= rank_thresh || p.hf_ratio >= hf_thresh {
        PatchClass::Complex
    } else {
        PatchClass::Redundant
    })
}

/// One tile of [`analyze_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchReport {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub profile: PatchProfile,
    pub class: PatchClass,
}

/// Profiles every complete `patch × patch` tile of `(H, W)` or `(C, H, W)`
/// data. Multi-band input is averaged over bands.
pub fn analyze_image<T: Scalar>(
    img: &Tensor<T>,
    patch: usize,
    rank_thresh: usize,
    hf_thresh: f64,
) -> Result<Vec<PatchReport>> {
    let (c, h, w) = match *img.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err!("expected an image, got {:?}", img.shape())),
    };
    if patch < 2 || patch > h || patch > w {
        return Err(shape_err!("patch {patch} for a {h}x{w} image"));
    }
    let n = h * w;
    let mean: Vec<f64> = (0..n)
        .map(|q| (0..c).map(|b| img.data()[b * n + q].as_f64()).sum::<f64>() / c as f64)
        .collect();
    let mut out = Vec::new();
    for row in (0..=h - patch).step_by(patch) {
        for col in (0..=w - patch).step_by(patch) {
            let p = Patch::from_fn(patch, patch, |i, j| mean[(row + i) * w + col + j]);
            let profile = profile(&p)?;
            let class = classify_patch(&profile, rank_thresh, hf_thresh)?;
            out.push(PatchReport {
                id: out.len(),
                row,
                col,
                profile,
                class,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Patch {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Patch::new(n, n, data).unwrap()
    }

    #[test]
    fn svd_cases() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 1.0, -0.7];
        let p = Patch::from_fn(4, 3, |i, j| u[i] * v[j]);
        let s = svd_spectrum(&p);
        assert_eq!(s[0], 1.0);
        assert!(s[1] < 1e-10);

        let d = Patch::from_fn(5, 3, |i, j| if i == j { [3.0, 2.0, 1.0][i] } else { 0.0 });
        let s = svd_spectrum(&d);
        for (a, e) in s.iter().zip([1.0, 2.0 / 3.0, 1.0 / 3.0]) {
            assert!((a - e).abs() < 1e-14);
        }

        let p = noise(1, 8);
        let sv = singular_values(&p);
        let fro: f64 = p.data.iter().map(|v| v * v).sum();
        let ss: f64 = sv.iter().map(|v| v * v).sum();
        assert!((fro - ss).abs() / fro < 1e-8);
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        let st = singular_values(&p.transpose());
        for (a, b) in sv.iter().zip(&st) {
            assert!((a - b).abs() < 1e-12 * sv[0]);
        }
        assert!(svd_spectrum(&Patch::from_fn(3, 3, |_, _| 0.0)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectrum_cases() {
        let c = Patch::from_fn(16, 16, |_, _| 0.7);
        let s = radial_power_spectrum(&c).unwrap();
        assert!(s.energy[1..].iter().all(|&e| e < 1e-12 * s.energy[0]));

        let q = 3.0;
        let cos = Patch::from_fn(16, 16, |_, j| (2.0 * std::f64::consts::PI * q * j as f64 / 16.0).cos());
        let s = radial_power_spectrum(&cos).unwrap();
        let non_dc: f64 = s.energy[1..].iter().sum();
        assert!(s.energy[3] > 0.99 * non_dc);

        let p = noise(2, 16);
        let s = radial_power_spectrum(&p).unwrap();
        let spatial: f64 = p.data.iter().map(|v| v * v).sum();
        let freq: f64 = s.mean().iter().zip(&s.count).map(|(m, &n)| m * n as f64).sum::<f64>() / 256.0;
        assert!((spatial - freq).abs() / spatial < 1e-8);
        assert!(radial_power_spectrum(&Patch::from_fn(4, 8, |_, _| 0.0)).is_err());
    }

    #[test]
    fn circular_shift_leaves_spectrum_unchanged() {
        let p = noise(3, 8);
        let shifted = Patch::from_fn(8, 8, |i, j| p.at((i + 3) % 8, (j + 5) % 8));
        let a = radial_power_spectrum(&p).unwrap();
        let b = radial_power_spectrum(&shifted).unwrap();
        for (x, y) in a.energy.iter().zip(&b.energy) {
            assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn classification_cases() {
        let c = profile(&Patch::from_fn(16, 16, |_, _| 0.4)).unwrap();
        assert_eq!(classify_patch(&c, 2, 0.01).unwrap(), PatchClass::Redundant);
        let n = profile(&noise(4, 16)).unwrap();
        assert_eq!(
            classify_patch(&n, DEFAULT_RANK_THRESH, DEFAULT_HF_THRESH).unwrap(),
            PatchClass::Complex
        );
        assert!(classify_patch(&n, 1, 0.25).is_err());
        assert!(classify_patch(&n, 5, 0.0).is_err());
    }

    #[test]
    fn analyze_tiles_image() {
        let img = Tensor::<f64>::zeros(&[2, 32, 48]);
        let r = analyze_image(&img, 16, 5, 0.25).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!((r[4].row, r[4].col), (16, 16));
        assert!(analyze_image(&img, 64, 5, 0.25).is_err());
    }
}
