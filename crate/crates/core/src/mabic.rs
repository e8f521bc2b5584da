//! Mask-aware bimodal convolution.
//!
//! Pixels the hard mask marks 0 share one kernel, modulated by heads applied
//! to a pooled descriptor of those pixels (compact branch). Pixels marked 1
//! each get their own kernel, modulated by heads applied to that pixel's
//! channel vector (focused branch). Both branches read the modulated features
//! `X'` over full neighbourhoods; the mask only selects which kernel produces
//! each output pixel. A three-layer convolutional bias block on the raw input
//! is added everywhere.
//!
//! The routing decision is a constant for differentiation: gradients flow
//! through `X'` and every branch parameter, never through the threshold.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camg::{self, CamgParams, MaskPair};
use crate::error::{shape_err, Error, Result};
use crate::lowrank::BaseKernel;
use crate::nn::{self, conv_point, conv_point_backward, sigmoid_scalar};
use crate::params::{join, Conv, Linear, ParamGroup, ParamMut, ParamRef, Parameters};
use crate::scalar::Scalar;
use crate::tally::{OpTally, Stage};
use crate::tensor::Tensor;

/// How a layer decides which pixels go to the focused branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Routing {
    /// `SM_F > μ + α·σ_s`.
    Threshold,
    /// Threshold at +∞: every pixel compact.
    AllCompact,
    /// Threshold at −∞: every pixel focused.
    AllFocused,
    /// Seeded random mask with exactly `round(fraction·H·W)` focused pixels.
    Random { fraction: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiMacConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// Width of the focused-branch embedding (`FC1`, `FC2`).
    pub hidden: usize,
    /// Width of the two hidden bias-block convolutions.
    pub bias_width: usize,
    pub alpha: f64,
    pub routing: Routing,
    /// Generate the soft mask; without it `X' = X` and routing must not be
    /// [`Routing::Threshold`].
    pub use_camg: bool,
    pub low_rank: bool,
    /// Focused branch reuses the compact branch's base kernel.
    pub shared_kernels: bool,
}

impl BiMacConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size: 3,
            hidden: Self::default_hidden(in_channels),
            bias_width: 8,
            alpha: camg::DEFAULT_ALPHA,
            routing: Routing::Threshold,
            use_camg: true,
            low_rank: true,
            shared_kernels: false,
        }
    }

    pub fn default_hidden(in_channels: usize) -> usize {
        (in_channels / 2).max(8)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !self.use_camg && self.routing == Routing::Threshold {
            return Err(Error::Config(
                "threshold routing needs the mask generator".into(),
            ));
        }
        if let Routing::Random { fraction, .. } = self.routing {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!("focused fraction {fraction}")));
            }
        }
        Ok(())
    }
}

/// `w_ci`, `w_co`, `w_{k×k}`, all in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationWeights<T> {
    pub w_ci: Tensor<T>,
    pub w_co: Tensor<T>,
    pub w_kk: Tensor<T>,
}

/// Three independent sigmoid heads `σ(f_t(v))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationHeads<T> {
    pub ci: Linear<T>,
    pub co: Linear<T>,
    pub kk: Linear<T>,
}

impl<T: Scalar> ModulationHeads<T> {
    pub fn zeros(din: usize, ci: usize, co: usize, k: usize) -> Self {
        Self {
            ci: Linear::zeros(ci, din),
            co: Linear::zeros(co, din),
            kk: Linear::zeros(k * k, din),
        }
    }

    pub fn init(din: usize, ci: usize, co: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            ci: Linear::init(ci, din, rng),
            co: Linear::init(co, din, rng),
            kk: Linear::init(k * k, din, rng),
        }
    }

    fn heads(&self) -> [&Linear<T>; 3] {
        [&self.ci, &self.co, &self.kk]
    }

    fn eval(&self, v: &[T], tally: &mut OpTally) -> [Vec<T>; 3] {
        self.heads().map(|head| {
            let mut y = vec![T::zero(); head.out_dim()];
            head.forward_raw(v, &mut y, tally);
            y.iter_mut().for_each(|a| *a = sigmoid_scalar(*a));
            y
        })
    }

    /// `g_m` is the gradient on the sigmoid outputs `m`; accumulates into
    /// `grad` and `gv`.
    fn backward(&self, v: &[T], m: [&[T]; 3], g_m: [&[T]; 3], grad: &mut Self, gv: &mut [T]) {
        let grads = [&mut grad.ci, &mut grad.co, &mut grad.kk];
        for (((head, gh), mk), gk) in self.heads().into_iter().zip(grads).zip(m).zip(g_m) {
            let ga: Vec<T> = mk
                .iter()
                .zip(gk)
                .map(|(&s, &g)| g * s * (T::one() - s))
                .collect();
            head.backward_raw(v, &ga, gh, gv);
        }
    }

    fn visit_into<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<ParamRef<'a, T>>) {
        self.ci.visit_into(&join(prefix, "ci"), group, out);
        self.co.visit_into(&join(prefix, "co"), group, out);
        self.kk.visit_into(&join(prefix, "kk"), group, out);
    }

    fn visit_mut_into<'a>(
        &'a mut self,
        prefix: &str,
        group: ParamGroup,
        out: &mut Vec<ParamMut<'a, T>>,
    ) {
        self.ci.visit_mut_into(&join(prefix, "ci"), group, out);
        self.co.visit_mut_into(&join(prefix, "co"), group, out);
        self.kk.visit_mut_into(&join(prefix, "kk"), group, out);
    }
}

/// `c' = ReLU(FC2(ReLU(FC1(c))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusedEmbed<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// All trainable state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BiMacParams<T> {
    pub config: BiMacConfig,
    /// `None` in the no-mask-generator ablation.
    pub camg: Option<CamgParams<T>>,
    pub compact_heads: ModulationHeads<T>,
    pub focused_embed: FocusedEmbed<T>,
    pub focused_heads: ModulationHeads<T>,
    /// `W_0` with bias `b_0`.
    pub compact_kernel: BaseKernel<T>,
    /// `W_1` with bias `b_1`; `None` aliases the compact kernel.
    focused_kernel: Option<BaseKernel<T>>,
    /// `C_in → w → w → C_out`, 3×3 each.
    pub bias_block: [Conv<T>; 3],
}

impl<T: Scalar> BiMacParams<T> {
    pub fn init(config: BiMacConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (ci, co, k, r, bw) = (
            config.in_channels,
            config.out_channels,
            config.kernel_size,
            config.hidden,
            config.bias_width,
        );
        let alpha = T::lit(config.alpha);
        let camg = config
            .use_camg
            .then(|| CamgParams::init(ci, k, alpha, rng));
        let compact_heads = ModulationHeads::init(ci, ci, co, k, rng);
        let focused_embed = FocusedEmbed {
            fc1: Linear::init(r, ci, rng),
            fc2: Linear::init(r, r, rng),
        };
        let focused_heads = ModulationHeads::init(r, ci, co, k, rng);
        let compact_kernel = BaseKernel::init(co, ci, k, config.low_rank, rng);
        let focused_kernel =
            (!config.shared_kernels).then(|| BaseKernel::init(co, ci, k, config.low_rank, rng));
        let bias_block = [
            Conv::init(bw, ci, 3, rng),
            Conv::init(bw, bw, 3, rng),
            Conv::init(co, bw, 3, rng),
        ];
        Ok(Self {
            config,
            camg,
            compact_heads,
            focused_embed,
            focused_heads,
            compact_kernel,
            focused_kernel,
            bias_block,
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: BiMacConfig) -> Result<Self> {
        config.validate()?;
        let (ci, co, k, r, bw) = (
            config.in_channels,
            config.out_channels,
            config.kernel_size,
            config.hidden,
            config.bias_width,
        );
        let alpha = T::lit(config.alpha);
        Ok(Self {
            camg: config.use_camg.then(|| CamgParams::zeros(ci, k, alpha)),
            compact_heads: ModulationHeads::zeros(ci, ci, co, k),
            focused_embed: FocusedEmbed {
                fc1: Linear::zeros(r, ci),
                fc2: Linear::zeros(r, r),
            },
            focused_heads: ModulationHeads::zeros(r, ci, co, k),
            compact_kernel: BaseKernel::zeros(co, ci, k, config.low_rank),
            focused_kernel: (!config.shared_kernels)
                .then(|| BaseKernel::zeros(co, ci, k, config.low_rank)),
            bias_block: [
                Conv::zeros(bw, ci, 3),
                Conv::zeros(bw, bw, 3),
                Conv::zeros(co, bw, 3),
            ],
            config,
        })
    }

    pub fn focused_kernel(&self) -> &BaseKernel<T> {
        self.focused_kernel.as_ref().unwrap_or(&self.compact_kernel)
    }

    pub fn focused_kernel_mut(&mut self) -> &mut BaseKernel<T> {
        self.focused_kernel
            .as_mut()
            .unwrap_or(&mut self.compact_kernel)
    }

    pub fn kernels_shared(&self) -> bool {
        self.focused_kernel.is_none()
    }
}

impl<T: Scalar> Parameters<T> for BiMacParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        if let Some(c) = &self.camg {
            c.conv
                .visit_into(&join(prefix, "camg.conv"), ParamGroup::Camg, out);
        }
        self.compact_heads
            .visit_into(&join(prefix, "compact_heads"), ParamGroup::CompactHeads, out);
        self.focused_embed
            .fc1
            .visit_into(&join(prefix, "focused_embed.fc1"), ParamGroup::FocusedEmbed, out);
        self.focused_embed
            .fc2
            .visit_into(&join(prefix, "focused_embed.fc2"), ParamGroup::FocusedEmbed, out);
        self.focused_heads
            .visit_into(&join(prefix, "focused_heads"), ParamGroup::FocusedHeads, out);
        self.compact_kernel
            .visit_into(&join(prefix, "compact_kernel"), out);
        if let Some(k) = &self.focused_kernel {
            k.visit_into(&join(prefix, "focused_kernel"), out);
        }
        for (n, c) in self.bias_block.iter().enumerate() {
            c.visit_into(&join(prefix, &format!("bias_block.{n}")), ParamGroup::BiasBlock, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        if let Some(c) = &mut self.camg {
            c.conv
                .visit_mut_into(&join(prefix, "camg.conv"), ParamGroup::Camg, out);
        }
        self.compact_heads
            .visit_mut_into(&join(prefix, "compact_heads"), ParamGroup::CompactHeads, out);
        self.focused_embed.fc1.visit_mut_into(
            &join(prefix, "focused_embed.fc1"),
            ParamGroup::FocusedEmbed,
            out,
        );
        self.focused_embed.fc2.visit_mut_into(
            &join(prefix, "focused_embed.fc2"),
            ParamGroup::FocusedEmbed,
            out,
        );
        self.focused_heads
            .visit_mut_into(&join(prefix, "focused_heads"), ParamGroup::FocusedHeads, out);
        self.compact_kernel
            .visit_mut_into(&join(prefix, "compact_kernel"), out);
        if let Some(k) = &mut self.focused_kernel {
            k.visit_mut_into(&join(prefix, "focused_kernel"), out);
        }
        for (n, c) in self.bias_block.iter_mut().enumerate() {
            c.visit_mut_into(&join(prefix, &format!("bias_block.{n}")), ParamGroup::BiasBlock, out);
        }
    }
}

fn weights_from_raw<T: Scalar>([ci, co, kk]: [Vec<T>; 3], k: usize) -> Result<ModulationWeights<T>> {
    Ok(ModulationWeights {
        w_ci: Tensor::from_vec(&[ci.len()], ci)?,
        w_co: Tensor::from_vec(&[co.len()], co)?,
        w_kk: Tensor::from_vec(&[k, k], kk)?,
    })
}

/// Compact-branch modulation weights from the pooled descriptor `v`.
pub fn compact_weights<T: Scalar>(v: &Tensor<T>, p: &BiMacParams<T>) -> Result<ModulationWeights<T>> {
    v.expect_shape(&[p.config.in_channels], "pooled descriptor")?;
    weights_from_raw(
        p.compact_heads.eval(v.data(), &mut OpTally::off()),
        p.config.kernel_size,
    )
}

/// Focused-branch modulation weights from one pixel's channel vector.
pub fn focused_weights<T: Scalar>(c: &Tensor<T>, p: &BiMacParams<T>) -> Result<ModulationWeights<T>> {
    c.expect_shape(&[p.config.in_channels], "pixel channel vector")?;
    let (_, _, m) = focused_eval(p, c.data(), &mut OpTally::off());
    weights_from_raw(m, p.config.kernel_size)
}

/// Returns `(h1, h2, [m_ci, m_co, m_kk])`.
fn focused_eval<T: Scalar>(
    p: &BiMacParams<T>,
    c: &[T],
    tally: &mut OpTally,
) -> (Vec<T>, Vec<T>, [Vec<T>; 3]) {
    let r = p.config.hidden;
    let prev = tally.enter(Stage::FocusedEmbed);
    let mut h1 = vec![T::zero(); r];
    p.focused_embed.fc1.forward_raw(c, &mut h1, tally);
    h1.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let mut h2 = vec![T::zero(); r];
    p.focused_embed.fc2.forward_raw(&h1, &mut h2, tally);
    h2.iter_mut().for_each(|v| *v = v.max(T::zero()));
    tally.enter(Stage::FocusedHeads);
    let m = p.focused_heads.eval(&h2, tally);
    tally.enter(prev);
    (h1, h2, m)
}

/// `W'[o,i,u,v] = W[o,i,u,v] · w_co[o] · w_ci[i] · w_kk[u,v]`.
pub fn modulate_kernel<T: Scalar>(w: &Tensor<T>, m: &ModulationWeights<T>) -> Result<Tensor<T>> {
    let (co, ci, k, k2) = w.dims4()?;
    if k != k2 {
        return Err(shape_err!("non-square kernel {:?}", w.shape()));
    }
    m.w_ci.expect_shape(&[ci], "w_ci")?;
    m.w_co.expect_shape(&[co], "w_co")?;
    m.w_kk.expect_shape(&[k, k], "w_kk")?;
    let kk = k * k;
    let (wci, wco, wkk) = (m.w_ci.data(), m.w_co.data(), m.w_kk.data());
    let wd = w.data();
    Ok(Tensor::from_fn(w.shape(), |idx| {
        let t = idx % kk;
        let i = (idx / kk) % ci;
        let o = idx / (kk * ci);
        wd[idx] * wco[o] * (wci[i] * wkk[t])
    }))
}

/// Modulates a transposed `(C_in, k², C_out)` kernel with the same
/// association order as [`modulate_kernel`].
fn modulate_transposed<T: Scalar>(
    wt: &[T],
    [wci, wco, wkk]: [&[T]; 3],
    out: &mut [T],
    tally: &mut OpTally,
) {
    let (ci, co, kk) = (wci.len(), wco.len(), wkk.len());
    for c in 0..ci {
        for t in 0..kk {
            let s = wci[c] * wkk[t];
            let base = (c * kk + t) * co;
            for o in 0..co {
                out[base + o] = wt[base + o] * wco[o] * s;
            }
        }
    }
    tally.record((ci * kk + 2 * ci * kk * co) as u64, 0);
}

/// Reverse of [`modulate_transposed`] given the gradient on the modulated kernel.
fn modulate_transposed_backward<T: Scalar>(
    wt: &[T],
    [wci, wco, wkk]: [&[T]; 3],
    gmod: &[T],
    gwt: &mut [T],
    [gci, gco, gkk]: [&mut [T]; 3],
) {
    let (ci, co, kk) = (wci.len(), wco.len(), wkk.len());
    for c in 0..ci {
        for t in 0..kk {
            let s = wci[c] * wkk[t];
            let base = (c * kk + t) * co;
            let mut gs = T::zero();
            for o in 0..co {
                let g = gmod[base + o];
                gwt[base + o] += g * wco[o] * s;
                gco[o] += g * wt[base + o] * s;
                gs += g * wt[base + o] * wco[o];
            }
            gci[c] += gs * wkk[t];
            gkk[t] += gs * wci[c];
        }
    }
}

/// `conv → ReLU → conv → ReLU → conv` on the raw input.
pub fn bias_block<T: Scalar>(x: &Tensor<T>, p: &BiMacParams<T>) -> Result<Tensor<T>> {
    Ok(bias_block_cached(x, p, &mut OpTally::off())?.0)
}

struct BiasCache<T> {
    a1: Tensor<T>,
    r1: Tensor<T>,
    a2: Tensor<T>,
    r2: Tensor<T>,
}

fn bias_block_cached<T: Scalar>(
    x: &Tensor<T>,
    p: &BiMacParams<T>,
    tally: &mut OpTally,
) -> Result<(Tensor<T>, BiasCache<T>)> {
    let [c1, c2, c3] = &p.bias_block;
    let a1 = c1.forward(x, tally)?;
    let r1 = nn::relu(&a1);
    let a2 = c2.forward(&r1, tally)?;
    let r2 = nn::relu(&a2);
    let b = c3.forward(&r2, tally)?;
    Ok((b, BiasCache { a1, r1, a2, r2 }))
}

fn relu_mask<T: Scalar>(g: Tensor<T>, pre: &Tensor<T>) -> Result<Tensor<T>> {
    g.zip_map(pre, |g, a| if a > T::zero() { g } else { T::zero() })
}

/// Seeded binary mask with exactly `round(fraction·H·W)` ones.
pub fn random_hard_mask<T: Scalar>(h: usize, w: usize, fraction: f64, seed: u64) -> Tensor<T> {
    let n = h * w;
    let count = ((fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((h as u64) << 32 | w as u64));
    let mut hm = Tensor::zeros(&[1, h, w]);
    for idx in sample(&mut rng, n, count) {
        hm.data_mut()[idx] = T::one();
    }
    hm
}

struct CompactCache<T> {
    positions: Vec<(usize, usize)>,
    pooled: Vec<usize>,
    v: Vec<T>,
    m: [Vec<T>; 3],
    w_t: Vec<T>,
    wmod_t: Vec<T>,
}

struct FocusedCache<T> {
    positions: Vec<(usize, usize)>,
    w_t: Vec<T>,
    h1: Vec<Vec<T>>,
    h2: Vec<Vec<T>>,
    m: Vec<[Vec<T>; 3]>,
}

/// Intermediates retained by [`forward_cached`] for [`backward`].
pub struct BiMacCache<T> {
    x: Tensor<T>,
    pub mask: MaskPair<T>,
    compact: Option<CompactCache<T>>,
    focused: Option<FocusedCache<T>>,
    bias: BiasCache<T>,
}

/// Output and routing masks of one layer.
pub fn bimac_forward<T: Scalar>(x: &Tensor<T>, p: &BiMacParams<T>) -> Result<(Tensor<T>, MaskPair<T>)> {
    let (y, cache) = forward_cached(p, x, None, &mut OpTally::off())?;
    Ok((y, cache.mask))
}

/// Like [`bimac_forward`] but with the hard mask supplied by the caller.
pub fn bimac_forward_with_mask<T: Scalar>(
    x: &Tensor<T>,
    p: &BiMacParams<T>,
    hard_mask: &Tensor<T>,
) -> Result<(Tensor<T>, MaskPair<T>)> {
    let (y, cache) = forward_cached(p, x, Some(hard_mask), &mut OpTally::off())?;
    Ok((y, cache.mask))
}

fn mask_stage<T: Scalar>(
    p: &BiMacParams<T>,
    x: &Tensor<T>,
    hard_override: Option<&Tensor<T>>,
    tally: &mut OpTally,
) -> Result<MaskPair<T>> {
    let (_, h, w) = x.dims3()?;
    let base = match &p.camg {
        Some(c) => {
            tally.enter(Stage::Camg);
            camg::camg_forward_tallied(x, c, tally)?
        }
        None => MaskPair {
            soft_mask: Tensor::ones(x.shape()),
            modulated: x.clone(),
            flat_mask: Tensor::ones(&[1, h, w]),
            mu: T::one(),
            sigma_s: T::zero(),
            alpha: T::lit(p.config.alpha),
            threshold: T::one(),
            hard_mask: Tensor::zeros(&[1, h, w]),
            focused_fraction: T::zero(),
        },
    };
    if let Some(hm) = hard_override {
        let t = base.threshold;
        return base.with_hard_mask(hm.clone(), t);
    }
    match p.config.routing {
        Routing::Threshold => Ok(base),
        Routing::AllCompact => base.with_hard_mask(Tensor::zeros(&[1, h, w]), T::infinity()),
        Routing::AllFocused => base.with_hard_mask(Tensor::ones(&[1, h, w]), T::neg_infinity()),
        Routing::Random { fraction, seed } => {
            let t = base.threshold;
            base.with_hard_mask(random_hard_mask(h, w, fraction, seed), t)
        }
    }
}

/// Forward pass keeping every intermediate needed by [`backward`].
/// `hard_override` freezes the routing decision.
pub fn forward_cached<T: Scalar>(
    p: &BiMacParams<T>,
    x: &Tensor<T>,
    hard_override: Option<&Tensor<T>>,
    tally: &mut OpTally,
) -> Result<(Tensor<T>, BiMacCache<T>)> {
    let (ci, h, w) = x.dims3()?;
    let cfg = &p.config;
    if ci != cfg.in_channels {
        return Err(shape_err!(
            "layer expects {} channels, input has {ci}",
            cfg.in_channels
        ));
    }
    let (co, k) = (cfg.out_channels, cfg.kernel_size);
    let kk = k * k;
    let hw = h * w;
    let outer_stage = tally.enter(Stage::Camg);

    let mask = mask_stage(p, x, hard_override, tally)?;
    let xm = mask.modulated.data();
    let mut out = Tensor::zeros(&[co, h, w]);
    let mut ybuf = vec![T::zero(); co];

    let compact_pos = mask.positions(false);
    let compact = if compact_pos.is_empty() {
        None
    } else {
        tally.enter(Stage::CompactGap);
        let keep = mask.hard_mask.map(|v| T::one() - v);
        let v = nn::masked_gap_tallied(&mask.modulated, &keep, tally)?.into_data();
        let pooled = nn::pooled_pixels(&keep);
        tally.enter(Stage::CompactHeads);
        let m = p.compact_heads.eval(&v, tally);
        tally.enter(Stage::LowrankExpand);
        let w0 = p.compact_kernel.assemble_tallied(tally)?;
        let w_t = nn::transpose_kernel(w0.data(), co, ci, kk);
        tally.enter(Stage::CompactHeads);
        let mut wmod_t = vec![T::zero(); w_t.len()];
        modulate_transposed(&w_t, [&m[0], &m[1], &m[2]], &mut wmod_t, tally);
        tally.enter(Stage::CompactConv);
        let b0 = p.compact_kernel.bias().data();
        let od = out.data_mut();
        for &(i, j) in &compact_pos {
            conv_point(xm, ci, h, w, &wmod_t, b0, k, (i, j), &mut ybuf);
            for o in 0..co {
                od[o * hw + i * w + j] = ybuf[o];
            }
        }
        tally.record_macs((compact_pos.len() * co * ci * kk) as u64);
        Some(CompactCache {
            positions: compact_pos,
            pooled,
            v,
            m,
            w_t,
            wmod_t,
        })
    };

    let focused_pos = mask.positions(true);
    let focused = if focused_pos.is_empty() {
        None
    } else {
        let kernel = p.focused_kernel();
        tally.enter(Stage::LowrankExpand);
        let w1 = kernel.assemble_tallied(tally)?;
        let w_t = nn::transpose_kernel(w1.data(), co, ci, kk);
        let b1 = kernel.bias().data();
        let mut wmod_t = vec![T::zero(); w_t.len()];
        let mut cvec = vec![T::zero(); ci];
        let n = focused_pos.len();
        let (mut h1s, mut h2s, mut ms) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for &(i, j) in &focused_pos {
            for (c, cv) in cvec.iter_mut().enumerate() {
                *cv = xm[c * hw + i * w + j];
            }
            let (h1, h2, m) = focused_eval(p, &cvec, tally);
            tally.enter(Stage::FocusedHeads);
            modulate_transposed(&w_t, [&m[0], &m[1], &m[2]], &mut wmod_t, tally);
            tally.enter(Stage::FocusedConv);
            conv_point(xm, ci, h, w, &wmod_t, b1, k, (i, j), &mut ybuf);
            tally.record_macs((co * ci * kk) as u64);
            let od = out.data_mut();
            for o in 0..co {
                od[o * hw + i * w + j] = ybuf[o];
            }
            h1s.push(h1);
            h2s.push(h2);
            ms.push(m);
        }
        Some(FocusedCache {
            positions: focused_pos,
            w_t,
            h1: h1s,
            h2: h2s,
            m: ms,
        })
    };

    tally.enter(Stage::BiasBlock);
    let (b, bias) = bias_block_cached(x, p, tally)?;
    out.add_assign(&b)?;
    tally.record(0, out.len() as u64);
    tally.enter(outer_stage);
    out.check_finite("bimac_forward")?;

    Ok((
        out,
        BiMacCache {
            x: x.clone(),
            mask,
            compact,
            focused,
            bias,
        },
    ))
}

/// Reverse-mode pass. Accumulates parameter gradients into `grad` (a
/// structurally identical [`BiMacParams`]) and returns `∂L/∂x`.
pub fn backward<T: Scalar>(
    p: &BiMacParams<T>,
    cache: &BiMacCache<T>,
    gy: &Tensor<T>,
    grad: &mut BiMacParams<T>,
) -> Result<Tensor<T>> {
    let x = &cache.x;
    let (ci, h, w) = x.dims3()?;
    let cfg = &p.config;
    let (co, k) = (cfg.out_channels, cfg.kernel_size);
    let kk = k * k;
    let hw = h * w;
    gy.expect_shape(&[co, h, w], "layer output gradient")?;
    let gyd = gy.data();

    // Bias block.
    let [c1, c2, c3] = &p.bias_block;
    let [g1, g2, g3] = &mut grad.bias_block;
    let bc = &cache.bias;
    let gr2 = c3.backward(&bc.r2, gy, g3)?;
    let ga2 = relu_mask(gr2, &bc.a2)?;
    let gr1 = c2.backward(&bc.r1, &ga2, g2)?;
    let ga1 = relu_mask(gr1, &bc.a1)?;
    let mut gx = c1.backward(x, &ga1, g1)?;

    let xm = cache.mask.modulated.data();
    let mut gxm = vec![T::zero(); ci * hw];
    let mut gyp = vec![T::zero(); co];

    if let Some(cc) = &cache.compact {
        let mut gmod = vec![T::zero(); cc.w_t.len()];
        let mut gb0 = vec![T::zero(); co];
        for &(i, j) in &cc.positions {
            for o in 0..co {
                gyp[o] = gyd[o * hw + i * w + j];
                gb0[o] += gyp[o];
            }
            conv_point_backward(xm, ci, h, w, &cc.wmod_t, k, (i, j), &gyp, &mut gmod, &mut gxm);
        }
        let mut gw_t = vec![T::zero(); cc.w_t.len()];
        let mut gm = [vec![T::zero(); ci], vec![T::zero(); co], vec![T::zero(); kk]];
        {
            let [a, b, c] = &mut gm;
            modulate_transposed_backward(
                &cc.w_t,
                [&cc.m[0], &cc.m[1], &cc.m[2]],
                &gmod,
                &mut gw_t,
                [a, b, c],
            );
        }
        let gw = Tensor::from_vec(&[co, ci, k, k], nn::untranspose_kernel(&gw_t, co, ci, kk))?;
        p.compact_kernel
            .backward(&gw, &gb0, &mut grad.compact_kernel)?;
        let mut gv = vec![T::zero(); ci];
        p.compact_heads.backward(
            &cc.v,
            [&cc.m[0], &cc.m[1], &cc.m[2]],
            [&gm[0], &gm[1], &gm[2]],
            &mut grad.compact_heads,
            &mut gv,
        );
        let inv_n = T::one() / T::from_usize_lossy(cc.pooled.len());
        for c in 0..ci {
            let g = gv[c] * inv_n;
            for &q in &cc.pooled {
                gxm[c * hw + q] += g;
            }
        }
    }

    if let Some(fc) = &cache.focused {
        let r = cfg.hidden;
        let mut gw_t = vec![T::zero(); fc.w_t.len()];
        let mut gb1 = vec![T::zero(); co];
        let mut cvec = vec![T::zero(); ci];
        for (idx, &(i, j)) in fc.positions.iter().enumerate() {
            let m = &fc.m[idx];
            for o in 0..co {
                gyp[o] = gyd[o * hw + i * w + j];
                gb1[o] += gyp[o];
            }
            let mut gm = [vec![T::zero(); ci], vec![T::zero(); co], vec![T::zero(); kk]];
            focused_point_backward(
                xm,
                (ci, h, w),
                &fc.w_t,
                [&m[0], &m[1], &m[2]],
                k,
                (i, j),
                &gyp,
                &mut gw_t,
                &mut gm,
                &mut gxm,
            );
            let (h1, h2) = (&fc.h1[idx], &fc.h2[idx]);
            let mut gh2 = vec![T::zero(); r];
            p.focused_heads.backward(
                h2,
                [&m[0], &m[1], &m[2]],
                [&gm[0], &gm[1], &gm[2]],
                &mut grad.focused_heads,
                &mut gh2,
            );
            for (g, &a) in gh2.iter_mut().zip(h2) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            let mut gh1 = vec![T::zero(); r];
            p.focused_embed
                .fc2
                .backward_raw(h1, &gh2, &mut grad.focused_embed.fc2, &mut gh1);
            for (g, &a) in gh1.iter_mut().zip(h1) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            for (c, cv) in cvec.iter_mut().enumerate() {
                *cv = xm[c * hw + i * w + j];
            }
            let mut gc = vec![T::zero(); ci];
            p.focused_embed
                .fc1
                .backward_raw(&cvec, &gh1, &mut grad.focused_embed.fc1, &mut gc);
            for c in 0..ci {
                gxm[c * hw + i * w + j] += gc[c];
            }
        }
        let gw = Tensor::from_vec(&[co, ci, k, k], nn::untranspose_kernel(&gw_t, co, ci, kk))?;
        p.focused_kernel()
            .backward(&gw, &gb1, grad.focused_kernel_mut())?;
    }

    let gxm = Tensor::from_vec(&[ci, h, w], gxm)?;
    match (&p.camg, &mut grad.camg) {
        (Some(camg), Some(gcamg)) => {
            let sm = &cache.mask.soft_mask;
            gx.add_assign(&gxm.mul(sm)?)?;
            let gz = gxm
                .mul(x)?
                .zip_map(sm, |g, s| g * s * (T::one() - s))?;
            gx.add_assign(&camg.conv.backward(x, &gz, &mut gcamg.conv)?)?;
        }
        (None, None) => gx.add_assign(&gxm)?,
        _ => return Err(shape_err!("gradient structure does not match parameters")),
    }
    Ok(gx)
}

/// Reverse of one focused pixel: modulated-kernel gradient pushed through the
/// modulation into `gw_t` and `gm`, plus the input gradient over the window.
#[allow(clippy::too_many_arguments)]
fn focused_point_backward<T: Scalar>(
    x: &[T],
    (ci, h, w): (usize, usize, usize),
    wt: &[T],
    [mci, mco, mkk]: [&[T]; 3],
    k: usize,
    (i, j): (usize, usize),
    gy: &[T],
    gw_t: &mut [T],
    gm: &mut [Vec<T>; 3],
    gx: &mut [T],
) {
    let co = gy.len();
    let hw = h * w;
    let pad = k / 2;
    let kk = k * k;
    for c in 0..ci {
        for u in 0..k {
            let r = i + u;
            if r < pad || r - pad >= h {
                continue;
            }
            let r = r - pad;
            for v in 0..k {
                let s_ = j + v;
                if s_ < pad || s_ - pad >= w {
                    continue;
                }
                let t = u * k + v;
                let xi = c * hw + r * w + s_ - pad;
                let xv = x[xi];
                let s = mci[c] * mkk[t];
                let base = (c * kk + t) * co;
                let mut gs = T::zero();
                let mut acc = T::zero();
                for o in 0..co {
                    let wv = wt[base + o];
                    let g = gy[o] * xv;
                    gw_t[base + o] += g * mco[o] * s;
                    gm[1][o] += g * wv * s;
                    gs += g * wv * mco[o];
                    acc += gy[o] * (wv * mco[o] * s);
                }
                gx[xi] += acc;
                gm[0][c] += gs * mkk[t];
                gm[2][t] += gs * mci[c];
            }
        }
    }
}
