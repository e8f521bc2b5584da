//! Synthetic multispectral scenes and Wald-protocol degradation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::net::RATIO;
use crate::resample::{decimate, gaussian_blur};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BLUR_SIGMA: f64 = 1.7;

/// Ground truth with its simulated PAN and LRMS observations.
#[derive(Clone, Debug, PartialEq)]
pub struct WaldSample<T> {
    pub gt: Tensor<T>,
    pub pan: Tensor<T>,
    pub lrms: Tensor<T>,
}

/// Scene content: smooth blobs plus hard-edged shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub blobs: usize,
    pub shapes: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            blobs: 6,
            shapes: 8,
        }
    }
}

/// Seeded scene in `[0, 1]`. Blobs form the smooth background; rectangles and
/// ellipses are painted over them with band-correlated intensities.
pub fn synth_scene<T: Scalar>(seed: u64, bands: usize, h: usize, w: usize, spec: SceneSpec) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f64; bands * h * w];
    let side = h.min(w) as f64;

    for _ in 0..spec.blobs {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let sigma = rng.gen_range(side / 10.0..side / 4.0).max(0.5);
        let amp = rng.gen_range(0.1..0.4);
        let sig: Vec<f64> = (0..bands).map(|_| rng.gen_range(0.5..1.0)).collect();
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2);
                let g = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                for (b, s) in sig.iter().enumerate() {
                    img[(b * h + i) * w + j] += g * s;
                }
            }
        }
    }

    for _ in 0..spec.shapes {
        let ellipse = rng.gen_bool(0.5);
        let ry = rng.gen_range(side / 16.0..side / 6.0).max(1.0);
        let rx = rng.gen_range(side / 16.0..side / 6.0).max(1.0);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let level = rng.gen_range(0.2..0.9);
        let colour: Vec<f64> = (0..bands)
            .map(|_| level * rng.gen_range(0.7..1.0))
            .collect();
        for i in 0..h {
            for j in 0..w {
                let dy = (i as f64 + 0.5 - cy) / ry;
                let dx = (j as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (b, c) in colour.iter().enumerate() {
                        img[(b * h + i) * w + j] = *c;
                    }
                }
            }
        }
    }
    Tensor::from_fn(&[bands, h, w], |k| T::lit(img[k].clamp(0.0, 1.0)))
}

/// Non-negative weights summing to one; empty means uniform.
pub fn pan_weights(bands: usize, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Ok(vec![1.0 / bands as f64; bands]);
    }
    if weights.len() != bands {
        return Err(Error::Config(format!(
            "{} PAN weights for {bands} bands",
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "PAN weights {weights:?} must be non-negative and sum to 1"
        )));
    }
    Ok(weights.to_vec())
}

/// Blur, decimate by `ratio` and mix bands into a PAN image.
pub fn wald_degrade<T: Scalar>(
    gt: &Tensor<T>,
    ratio: usize,
    blur_sigma: f64,
    weights: &[f64],
) -> Result<WaldSample<T>> {
    let (c, h, w) = gt.dims3()?;
    if ratio == 0 || h % ratio != 0 || w % ratio != 0 {
        return Err(shape_err!("{h}x{w} scene is not divisible by {ratio}"));
    }
    let weights = pan_weights(c, weights)?;
    let lrms = decimate(&gaussian_blur(gt, blur_sigma)?, ratio)?;
    let mut pan = Tensor::zeros(&[1, h, w]);
    for (b, &wt) in weights.iter().enumerate() {
        let wt = T::lit(wt);
        for (p, &g) in pan.data_mut().iter_mut().zip(gt.channel(b)) {
            *p += wt * g;
        }
    }
    Ok(WaldSample {
        gt: gt.clone(),
        pan,
        lrms,
    })
}

/// Everything needed to generate a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub blur_sigma: f64,
    pub pan_weights: Vec<f64>,
    pub scene: SceneSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            bands: 4,
            height: 64,
            width: 64,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            pan_weights: Vec::new(),
            scene: SceneSpec::default(),
        }
    }
}

/// Samples `first .. first + count` of the seeded synthetic stream.
pub fn synth_samples<T: Scalar>(
    spec: &DataSpec,
    seed: u64,
    first: usize,
    count: usize,
) -> Result<Vec<WaldSample<T>>> {
    (first..first + count)
        .map(|i| {
            let s = seed
                .wrapping_mul(0x2545_F491_4F6C_DD1D)
                .wrapping_add(i as u64);
            let gt = synth_scene(s, spec.bands, spec.height, spec.width, spec.scene);
            wald_degrade(&gt, RATIO, spec.blur_sigma, &spec.pan_weights)
        })
        .collect()
}
