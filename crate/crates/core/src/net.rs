//! Bi²MANet: a small U-Net whose residual blocks use Bi²MAC layers, with the
//! bicubic-upsampled LRMS injected at the output.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camg::MaskPair;
use crate::error::{shape_err, Error, Result};
use crate::mabic::{self, BiMacCache, BiMacConfig, BiMacParams, Routing};
use crate::nn;
use crate::params::{join, Conv, ParamGroup, ParamMut, ParamRef, Parameters};
use crate::resample::upsample_bicubic;
use crate::scalar::Scalar;
use crate::tally::{OpTally, Stage};
use crate::tensor::Tensor;

/// PAN-to-LRMS resolution ratio.
pub const RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoFocused,
    NoCompact,
    NoCamg,
    NoLrk,
    SharedWeights,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoFocused,
        Ablation::NoCompact,
        Ablation::NoCamg,
        Ablation::NoLrk,
        Ablation::SharedWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFocused => "no_focused",
            Ablation::NoCompact => "no_compact",
            Ablation::NoCamg => "no_camg",
            Ablation::NoLrk => "no_lrk",
            Ablation::SharedWeights => "shared_weights",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub bands: usize,
    pub base_channels: usize,
    /// Number of scales; level `l` runs at `1/2^l` of the PAN resolution.
    pub depth: usize,
    /// Residual blocks per level.
    pub blocks: usize,
    pub kernel_size: usize,
    pub alpha: f64,
    /// Focused-embedding width; `0` selects `max(C/2, 8)`.
    pub hidden: usize,
    pub ablation: Ablation,
    /// Focused share of the random routing used by [`Ablation::NoCamg`].
    pub random_fraction: f64,
    pub mask_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            bands: 4,
            base_channels: 32,
            depth: 3,
            blocks: 1,
            kernel_size: 3,
            alpha: 2.0,
            hidden: 0,
            ablation: Ablation::Full,
            random_fraction: 0.15,
            mask_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.base_channels == 0 || self.depth == 0 || self.blocks == 0 {
            return Err(Error::Config(
                "bands, base_channels, depth and blocks must be positive".into(),
            ));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} too large", self.depth)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Smallest PAN extent multiple accepted by the network.
    pub fn size_multiple(&self) -> usize {
        RATIO * (1 << (self.depth - 1))
    }

    /// Number of Bi²MAC layers in execution order.
    pub fn num_layers(&self) -> usize {
        2 * self.blocks * (2 * (self.depth - 1) + 1)
    }

    /// Configuration of the `index`-th Bi²MAC layer.
    pub fn layer_config(&self, index: usize) -> BiMacConfig {
        let c = self.base_channels;
        let mut cfg = BiMacConfig::new(c, c);
        cfg.kernel_size = self.kernel_size;
        cfg.alpha = self.alpha;
        if self.hidden > 0 {
            cfg.hidden = self.hidden;
        }
        match self.ablation {
            Ablation::Full => {}
            Ablation::NoFocused => cfg.routing = Routing::AllCompact,
            Ablation::NoCompact => cfg.routing = Routing::AllFocused,
            Ablation::NoCamg => {
                cfg.use_camg = false;
                cfg.routing = Routing::Random {
                    fraction: self.random_fraction,
                    seed: self
                        .mask_seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(index as u64),
                };
            }
            Ablation::NoLrk => cfg.low_rank = false,
            Ablation::SharedWeights => cfg.shared_kernels = true,
        }
        cfg
    }
}

/// `y = x + L2(ReLU(L1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub l1: BiMacParams<T>,
    pub l2: BiMacParams<T>,
}

pub struct ResCache<T> {
    c1: BiMacCache<T>,
    a1: Tensor<T>,
    c2: BiMacCache<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.l1.visit(&join(prefix, "l1"), out);
        self.l2.visit(&join(prefix, "l2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.l1.visit_mut(&join(prefix, "l1"), out);
        self.l2.visit_mut(&join(prefix, "l2"), out);
    }
}

/// Residual block output.
pub fn resblock_forward<T: Scalar>(x: &Tensor<T>, b: &ResBlock<T>) -> Result<Tensor<T>> {
    Ok(resblock_cached(b, x, &mut MaskFeed::none(), &mut OpTally::off())?.0)
}

fn resblock_cached<T: Scalar>(
    b: &ResBlock<T>,
    x: &Tensor<T>,
    feed: &mut MaskFeed<'_, T>,
    tally: &mut OpTally,
) -> Result<(Tensor<T>, ResCache<T>)> {
    let (a1, c1) = mabic::forward_cached(&b.l1, x, feed.next(), tally)?;
    let r1 = nn::relu(&a1);
    let (y2, c2) = mabic::forward_cached(&b.l2, &r1, feed.next(), tally)?;
    let prev = tally.enter(Stage::Backbone);
    let mut y = y2;
    y.add_assign(x)?;
    tally.record(0, y.len() as u64);
    tally.enter(prev);
    Ok((y, ResCache { c1, a1, c2 }))
}

fn resblock_backward<T: Scalar>(
    b: &ResBlock<T>,
    cache: &ResCache<T>,
    gy: &Tensor<T>,
    grad: &mut ResBlock<T>,
) -> Result<Tensor<T>> {
    let gr1 = mabic::backward(&b.l2, &cache.c2, gy, &mut grad.l2)?;
    let ga1 = gr1.zip_map(&cache.a1, |g, a| if a > T::zero() { g } else { T::zero() })?;
    let mut gx = mabic::backward(&b.l1, &cache.c1, &ga1, &mut grad.l1)?;
    gx.add_assign(gy)?;
    Ok(gx)
}

/// Hands out caller-supplied hard masks in layer execution order.
struct MaskFeed<'a, T> {
    masks: Option<&'a [Tensor<T>]>,
    next: usize,
}

impl<'a, T> MaskFeed<'a, T> {
    fn none() -> Self {
        Self {
            masks: None,
            next: 0,
        }
    }

    fn next(&mut self) -> Option<&'a Tensor<T>> {
        let m = self.masks.and_then(|m| m.get(self.next));
        self.next += 1;
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel<T> {
    pub blocks: Vec<ResBlock<T>>,
    /// 3×3, stride 2, padding 1.
    pub down: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel<T> {
    /// 3×3 conv after nearest-neighbour ×2 upsampling.
    pub up: Conv<T>,
    /// 1×1 conv fusing `[upsampled, skip]` back to the level width.
    pub fuse: Conv<T>,
    pub blocks: Vec<ResBlock<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bi2MaNet<T> {
    pub config: NetConfig,
    /// `C + 1 → base`, 3×3.
    pub stem: Conv<T>,
    pub encoder: Vec<EncoderLevel<T>>,
    pub bottleneck: Vec<ResBlock<T>>,
    /// Ordered from the deepest level outwards.
    pub decoder: Vec<DecoderLevel<T>>,
    /// `base → C`, 3×3.
    pub head: Conv<T>,
}

/// Constructs the network for `cfg` with parameters drawn from `seed`.
pub fn build_variant<T: Scalar>(cfg: NetConfig, seed: u64) -> Result<Bi2MaNet<T>> {
    Bi2MaNet::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl<T: Scalar> Bi2MaNet<T> {
    fn build(
        cfg: NetConfig,
        mut conv: impl FnMut(usize, usize, usize) -> Conv<T>,
        mut layer: impl FnMut(BiMacConfig) -> Result<BiMacParams<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, b) = (cfg.base_channels, cfg.bands);
        let mut index = 0;
        let mut res_blocks = |n: usize| -> Result<Vec<ResBlock<T>>> {
            (0..n)
                .map(|_| {
                    let l1 = layer(cfg.layer_config(index))?;
                    let l2 = layer(cfg.layer_config(index + 1))?;
                    index += 2;
                    Ok(ResBlock { l1, l2 })
                })
                .collect()
        };
        let stem = conv(c, b + 1, 3);
        let mut encoder = Vec::new();
        for _ in 1..cfg.depth {
            let blocks = res_blocks(cfg.blocks)?;
            encoder.push(EncoderLevel {
                blocks,
                down: conv(c, c, 3),
            });
        }
        let bottleneck = res_blocks(cfg.blocks)?;
        let mut decoder = Vec::new();
        for _ in 1..cfg.depth {
            let up = conv(c, c, 3);
            let fuse = conv(c, 2 * c, 1);
            let blocks = res_blocks(cfg.blocks)?;
            decoder.push(DecoderLevel { up, fuse, blocks });
        }
        let head = conv(b, c, 3);
        Ok(Self {
            config: cfg,
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn init(cfg: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            cfg,
            |co, ci, k| Conv::init(co, ci, k, &mut *rng.borrow_mut()),
            |lc| BiMacParams::init(lc, &mut *rng.borrow_mut()),
        )
    }

    /// Every parameter zero.
    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        Self::build(cfg, Conv::zeros, BiMacParams::zeros)
    }

    /// Bi²MAC layers in execution order.
    pub fn layers(&self) -> Vec<&BiMacParams<T>> {
        self.res_blocks().flat_map(|b| [&b.l1, &b.l2]).collect()
    }

    fn res_blocks(&self) -> impl Iterator<Item = &ResBlock<T>> {
        self.encoder
            .iter()
            .flat_map(|l| l.blocks.iter())
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().flat_map(|l| l.blocks.iter()))
    }

    /// Parameters inside Bi²MAC layers only.
    pub fn adaptive_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }
}

impl<T: Scalar> Parameters<T> for Bi2MaNet<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.stem
            .visit_into(&join(prefix, "stem"), ParamGroup::Backbone, out);
        for (l, lvl) in self.encoder.iter().enumerate() {
            let p = join(prefix, &format!("encoder.{l}"));
            for (n, b) in lvl.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("block.{n}")), out);
            }
            lvl.down.visit_into(&join(&p, "down"), ParamGroup::Backbone, out);
        }
        for (n, b) in self.bottleneck.iter().enumerate() {
            b.visit(&join(prefix, &format!("bottleneck.{n}")), out);
        }
        for (l, lvl) in self.decoder.iter().enumerate() {
            let p = join(prefix, &format!("decoder.{l}"));
            lvl.up.visit_into(&join(&p, "up"), ParamGroup::Backbone, out);
            lvl.fuse.visit_into(&join(&p, "fuse"), ParamGroup::Backbone, out);
            for (n, b) in lvl.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("block.{n}")), out);
            }
        }
        self.head
            .visit_into(&join(prefix, "head"), ParamGroup::Backbone, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.stem
            .visit_mut_into(&join(prefix, "stem"), ParamGroup::Backbone, out);
        for (l, lvl) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("encoder.{l}"));
            for (n, b) in lvl.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("block.{n}")), out);
            }
            lvl.down
                .visit_mut_into(&join(&p, "down"), ParamGroup::Backbone, out);
        }
        for (n, b) in self.bottleneck.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("bottleneck.{n}")), out);
        }
        for (l, lvl) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("decoder.{l}"));
            lvl.up.visit_mut_into(&join(&p, "up"), ParamGroup::Backbone, out);
            lvl.fuse
                .visit_mut_into(&join(&p, "fuse"), ParamGroup::Backbone, out);
            for (n, b) in lvl.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("block.{n}")), out);
            }
        }
        self.head
            .visit_mut_into(&join(prefix, "head"), ParamGroup::Backbone, out);
    }
}

/// Routing masks of one Bi²MAC layer.
pub struct LayerMasks<'a, T> {
    pub layer: usize,
    /// Downsampling factor relative to PAN.
    pub scale: usize,
    pub mask: &'a MaskPair<T>,
}

struct EncCache<T> {
    blocks: Vec<ResCache<T>>,
    skip: Tensor<T>,
}

struct DecCache<T> {
    upsampled: Tensor<T>,
    fused_in: Tensor<T>,
    blocks: Vec<ResCache<T>>,
}

/// Intermediates of [`net_forward_cached`].
pub struct NetCache<T> {
    input: Tensor<T>,
    encoder: Vec<EncCache<T>>,
    bottleneck: Vec<ResCache<T>>,
    decoder: Vec<DecCache<T>>,
    head_in: Tensor<T>,
}

impl<T: Scalar> NetCache<T> {
    /// Masks of every Bi²MAC layer in execution order.
    pub fn masks(&self) -> Vec<LayerMasks<'_, T>> {
        let depth = self.encoder.len() + 1;
        let mut out = Vec::new();
        fn push<'a, T>(scale: usize, blocks: &'a [ResCache<T>], out: &mut Vec<LayerMasks<'a, T>>) {
            for b in blocks {
                for c in [&b.c1, &b.c2] {
                    out.push(LayerMasks {
                        layer: out.len(),
                        scale,
                        mask: &c.mask,
                    });
                }
            }
        }
        for (l, e) in self.encoder.iter().enumerate() {
            push(1 << l, &e.blocks, &mut out);
        }
        push(1 << (depth - 1), &self.bottleneck, &mut out);
        for (n, d) in self.decoder.iter().enumerate() {
            push(1 << (depth - 2 - n), &d.blocks, &mut out);
        }
        out
    }
}

fn check_inputs<T: Scalar>(pan: &Tensor<T>, lrms: &Tensor<T>, cfg: &NetConfig) -> Result<()> {
    let (pc, h, w) = pan.dims3()?;
    let (c, lh, lw) = lrms.dims3()?;
    let m = cfg.size_multiple();
    if pc != 1 || c != cfg.bands {
        return Err(shape_err!(
            "expected PAN (1,H,W) and LRMS ({},H/4,W/4), got {:?} and {:?}",
            cfg.bands,
            pan.shape(),
            lrms.shape()
        ));
    }
    if h % m != 0 || w % m != 0 {
        return Err(shape_err!("PAN extents {h}x{w} must be multiples of {m}"));
    }
    if lh * RATIO != h || lw * RATIO != w {
        return Err(shape_err!(
            "LRMS {lh}x{lw} is not PAN {h}x{w} divided by {RATIO}"
        ));
    }
    Ok(())
}

/// HRMS estimate for one PAN/LRMS pair.
pub fn net_forward<T: Scalar>(pan: &Tensor<T>, lrms: &Tensor<T>, net: &Bi2MaNet<T>) -> Result<Tensor<T>> {
    Ok(net_forward_cached(net, pan, lrms, None, &mut OpTally::off())?.0)
}

/// Forward pass keeping intermediates. `masks`, when given, supplies the hard
/// mask of every Bi²MAC layer in execution order.
pub fn net_forward_cached<T: Scalar>(
    net: &Bi2MaNet<T>,
    pan: &Tensor<T>,
    lrms: &Tensor<T>,
    masks: Option<&[Tensor<T>]>,
    tally: &mut OpTally,
) -> Result<(Tensor<T>, NetCache<T>)> {
    check_inputs(pan, lrms, &net.config)?;
    if let Some(m) = masks {
        if m.len() != net.config.num_layers() {
            return Err(shape_err!(
                "{} masks supplied for {} layers",
                m.len(),
                net.config.num_layers()
            ));
        }
    }
    let mut feed = MaskFeed { masks, next: 0 };
    let prev = tally.enter(Stage::Backbone);
    let up = upsample_bicubic(lrms, RATIO)?;
    let input = Tensor::concat_channels(&[pan, &up])?;
    let mut h = net.stem.forward(&input, tally)?;

    let mut encoder = Vec::with_capacity(net.encoder.len());
    for lvl in &net.encoder {
        let mut blocks = Vec::with_capacity(lvl.blocks.len());
        for b in &lvl.blocks {
            let (y, c) = resblock_cached(b, &h, &mut feed, tally)?;
            blocks.push(c);
            h = y;
        }
        tally.enter(Stage::Backbone);
        let down = nn::conv2d_strided(&h, &lvl.down.weight, &lvl.down.bias, 1, 2, tally)?;
        encoder.push(EncCache { blocks, skip: h });
        h = down;
    }
    let mut bottleneck = Vec::with_capacity(net.bottleneck.len());
    for b in &net.bottleneck {
        let (y, c) = resblock_cached(b, &h, &mut feed, tally)?;
        bottleneck.push(c);
        h = y;
    }
    let mut decoder = Vec::with_capacity(net.decoder.len());
    for (lvl, enc) in net.decoder.iter().zip(encoder.iter().rev()) {
        tally.enter(Stage::Backbone);
        let upsampled = nn::upsample_nearest2(&h)?;
        let u = lvl.up.forward(&upsampled, tally)?;
        let fused_in = Tensor::concat_channels(&[&u, &enc.skip])?;
        h = lvl.fuse.forward(&fused_in, tally)?;
        let mut blocks = Vec::with_capacity(lvl.blocks.len());
        for b in &lvl.blocks {
            let (y, c) = resblock_cached(b, &h, &mut feed, tally)?;
            blocks.push(c);
            h = y;
        }
        decoder.push(DecCache {
            upsampled,
            fused_in,
            blocks,
        });
    }
    tally.enter(Stage::Backbone);
    let mut out = net.head.forward(&h, tally)?;
    out.add_assign(&up)?;
    tally.record(0, out.len() as u64);
    tally.enter(prev);
    out.check_finite("net_forward")?;
    Ok((
        out,
        NetCache {
            input,
            encoder,
            bottleneck,
            decoder,
            head_in: h,
        },
    ))
}

/// Reverse-mode pass from `∂L/∂output`; accumulates into `grad`.
pub fn net_backward<T: Scalar>(
    net: &Bi2MaNet<T>,
    cache: &NetCache<T>,
    gy: &Tensor<T>,
    grad: &mut Bi2MaNet<T>,
) -> Result<()> {
    let c = net.config.base_channels;
    let mut g = net.head.backward(&cache.head_in, gy, &mut grad.head)?;
    let mut skip_grads = Vec::with_capacity(net.decoder.len());
    for ((lvl, dc), glvl) in net
        .decoder
        .iter()
        .zip(&cache.decoder)
        .zip(grad.decoder.iter_mut())
        .rev()
    {
        for ((b, bc), gb) in lvl.blocks.iter().zip(&dc.blocks).zip(glvl.blocks.iter_mut()).rev() {
            g = resblock_backward(b, bc, &g, gb)?;
        }
        let gcat = lvl.fuse.backward(&dc.fused_in, &g, &mut glvl.fuse)?;
        let (gu, gskip) = gcat.split_channels(c)?;
        skip_grads.push(gskip);
        let gup = lvl.up.backward(&dc.upsampled, &gu, &mut glvl.up)?;
        g = nn::upsample_nearest2_backward(&gup)?;
    }
    for ((b, bc), gb) in net
        .bottleneck
        .iter()
        .zip(&cache.bottleneck)
        .zip(grad.bottleneck.iter_mut())
        .rev()
    {
        g = resblock_backward(b, bc, &g, gb)?;
    }
    // Skip gradients were collected from the outermost decoder level inwards,
    // which pairs them with encoder levels 0, 1, ...
    for (((lvl, ec), glvl), gskip) in net
        .encoder
        .iter()
        .zip(&cache.encoder)
        .zip(grad.encoder.iter_mut())
        .zip(skip_grads)
        .rev()
    {
        let gd = &mut glvl.down;
        let mut gh = nn::conv2d_strided_backward(
            &ec.skip,
            &lvl.down.weight,
            1,
            2,
            &g,
            &mut gd.weight,
            &mut gd.bias,
        )?;
        gh.add_assign(&gskip)?;
        g = gh;
        for ((b, bc), gb) in lvl.blocks.iter().zip(&ec.blocks).zip(glvl.blocks.iter_mut()).rev() {
            g = resblock_backward(b, bc, &g, gb)?;
        }
    }
    net.stem.backward(&cache.input, &g, &mut grad.stem)?;
    Ok(())
}
