//! Content-adaptive mask generation: a sigmoid-activated convolution yields
//! the spatial-channel soft mask, which modulates the features and, after
//! channel averaging and a mean-plus-α·std threshold, the binary routing mask.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn;
use crate::params::Conv;
use crate::scalar::Scalar;
use crate::tally::OpTally;
use crate::tensor::Tensor;

/// Default threshold multiplier.
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CamgParams<T> {
    /// `(C_in, C_in, k, k)` kernel and `(C_in)` bias of the mask convolution.
    pub conv: Conv<T>,
    pub alpha: T,
}

impl<T: Scalar> CamgParams<T> {
    pub fn zeros(channels: usize, k: usize, alpha: T) -> Self {
        Self {
            conv: Conv::zeros(channels, channels, k),
            alpha,
        }
    }

    pub fn init(channels: usize, k: usize, alpha: T, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv::init(channels, channels, k, rng),
            alpha,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }
}

/// Everything the mask generator produces for one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair<T> {
    /// `SM`, `(C_in, H, W)`, entries in `(0, 1)`.
    pub soft_mask: Tensor<T>,
    /// `X ⊙ SM`.
    pub modulated: Tensor<T>,
    /// `SM_F`, channel mean of the soft mask, `(1, H, W)`.
    pub flat_mask: Tensor<T>,
    pub mu: T,
    /// Population standard deviation of `SM_F`.
    pub sigma_s: T,
    pub alpha: T,
    pub threshold: T,
    /// `HM`, `(1, H, W)`, 1 routes a pixel to the focused branch.
    pub hard_mask: Tensor<T>,
    pub focused_fraction: T,
}

impl<T: Scalar> MaskPair<T> {
    /// Row-major `(i, j)` positions with the given hard-mask value.
    pub fn positions(&self, focused: bool) -> Vec<(usize, usize)> {
        mask_positions(&self.hard_mask, focused)
    }

    /// Replaces the routing decision, keeping the soft statistics.
    pub fn with_hard_mask(mut self, hard: Tensor<T>, threshold: T) -> Result<Self> {
        hard.expect_shape(self.flat_mask.shape(), "hard mask override")?;
        if hard.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(shape_err!("hard mask must be binary"));
        }
        self.focused_fraction = focused_fraction(&hard);
        self.hard_mask = hard;
        self.threshold = threshold;
        Ok(self)
    }
}

pub(crate) fn mask_positions<T: Scalar>(hard: &Tensor<T>, focused: bool) -> Vec<(usize, usize)> {
    let w = hard.shape()[2];
    let want = if focused { T::one() } else { T::zero() };
    hard.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == want)
        .map(|(p, _)| (p / w, p % w))
        .collect()
}

pub(crate) fn focused_fraction<T: Scalar>(hard: &Tensor<T>) -> T {
    let n = hard.data().iter().filter(|&&v| v == T::one()).count();
    T::from_usize_lossy(n) / T::from_usize_lossy(hard.len())
}

/// Routing statistics derived from a soft mask.
#[derive(Clone, Debug, PartialEq)]
pub struct HardMask<T> {
    pub flat_mask: Tensor<T>,
    pub mu: T,
    pub sigma_s: T,
    pub threshold: T,
    pub hard_mask: Tensor<T>,
}

/// `SM = σ(W * X + b)`.
pub fn soft_mask<T: Scalar>(x: &Tensor<T>, p: &CamgParams<T>) -> Result<Tensor<T>> {
    soft_mask_tallied(x, p, &mut OpTally::off())
}

pub(crate) fn soft_mask_tallied<T: Scalar>(
    x: &Tensor<T>,
    p: &CamgParams<T>,
    tally: &mut OpTally,
) -> Result<Tensor<T>> {
    let (c, _, _) = x.dims3()?;
    if c != p.channels() {
        return Err(shape_err!(
            "mask generator expects {} channels, input has {c}",
            p.channels()
        ));
    }
    Ok(nn::sigmoid(&p.conv.forward(x, tally)?))
}

/// `X' = X ⊙ SM`.
pub fn modulate<T: Scalar>(x: &Tensor<T>, sm: &Tensor<T>) -> Result<Tensor<T>> {
    x.mul(sm)
}

/// Channel-averages the soft mask and thresholds it at `μ + α·σ_s`.
/// A pixel is focused iff `SM_F > T`; ties go to the compact branch.
pub fn hard_mask<T: Scalar>(sm: &Tensor<T>, alpha: T) -> Result<HardMask<T>> {
    hard_mask_tallied(sm, alpha, &mut OpTally::off())
}

pub(crate) fn hard_mask_tallied<T: Scalar>(
    sm: &Tensor<T>,
    alpha: T,
    tally: &mut OpTally,
) -> Result<HardMask<T>> {
    let (c, h, w) = sm.dims3()?;
    let n = h * w;
    let inv_c = T::one() / T::from_usize_lossy(c);
    let mut flat = Tensor::zeros(&[1, h, w]);
    {
        let f = flat.data_mut();
        for ch in 0..c {
            for (acc, &s) in f.iter_mut().zip(sm.channel(ch)) {
                *acc += s;
            }
        }
        f.iter_mut().for_each(|v| *v *= inv_c);
    }
    tally.record(n as u64, (c * n) as u64);
    let (mu, sigma_s, threshold, hard) = threshold_mask(&flat, alpha, tally);
    Ok(HardMask {
        flat_mask: flat,
        mu,
        sigma_s,
        threshold,
        hard_mask: hard,
    })
}

/// Mean, population std, threshold and binary mask of a flat map.
pub(crate) fn threshold_mask<T: Scalar>(
    flat: &Tensor<T>,
    alpha: T,
    tally: &mut OpTally,
) -> (T, T, T, Tensor<T>) {
    let n = flat.len();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mu = flat.data().iter().fold(T::zero(), |a, &v| a + v) * inv_n;
    let var = flat
        .data()
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu))
        * inv_n;
    let sigma_s = var.sqrt();
    let threshold = mu + alpha * sigma_s;
    let hard = flat.map(|v| if v > threshold { T::one() } else { T::zero() });
    tally.record((n + 3) as u64, (3 * n + 1) as u64);
    (mu, sigma_s, threshold, hard)
}

/// Full mask-generator pass.
pub fn camg_forward<T: Scalar>(x: &Tensor<T>, p: &CamgParams<T>) -> Result<MaskPair<T>> {
    camg_forward_tallied(x, p, &mut OpTally::off())
}

pub(crate) fn camg_forward_tallied<T: Scalar>(
    x: &Tensor<T>,
    p: &CamgParams<T>,
    tally: &mut OpTally,
) -> Result<MaskPair<T>> {
    let sm = soft_mask_tallied(x, p, tally)?;
    let modulated = modulate(x, &sm)?;
    tally.record(modulated.len() as u64, 0);
    let hm = hard_mask_tallied(&sm, p.alpha, tally)?;
    let focused_fraction = focused_fraction(&hm.hard_mask);
    Ok(MaskPair {
        soft_mask: sm,
        modulated,
        flat_mask: hm.flat_mask,
        mu: hm.mu,
        sigma_s: hm.sigma_s,
        alpha: p.alpha,
        threshold: hm.threshold,
        hard_mask: hm.hard_mask,
        focused_fraction,
    })
}
