//! Closed-form and instrumented operation counts of a Bi²MAC layer.
//!
//! Convention: one multiply-accumulate is one multiply plus one add, i.e. two
//! FLOPs. Every convolution tap is counted, zero-padded ones included.
//! Sigmoid, square root and comparisons are not counted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mabic::{forward_cached, BiMacConfig, BiMacParams};
use crate::net::{net_forward_cached, Bi2MaNet};
use crate::scalar::Scalar;
use crate::tally::{OpCount, OpTally, Stage};
use crate::tensor::Tensor;

pub const CONVENTION: &str = "1 MAC = 1 mul + 1 add = 2 FLOPs";

/// Table 3 reference total for C=32, H=W=64, in FLOPs.
pub const REFERENCE_FLOPS: f64 = 152.91e6;

/// Widths that are not implied by the layer's channel counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Widths {
    pub hidden: usize,
    pub bias_width: usize,
    pub low_rank: bool,
    pub camg: bool,
}

impl Widths {
    pub fn of(cfg: &BiMacConfig) -> Self {
        Self {
            hidden: cfg.hidden,
            bias_width: cfg.bias_width,
            low_rank: cfg.low_rank,
            camg: cfg.use_camg,
        }
    }

    pub fn default_for(c_in: usize) -> Self {
        Self::of(&BiMacConfig::new(c_in, c_in))
    }
}

/// Per-stage multiply and add counts. Counts are real numbers because the
/// analytic model scales by a fractional focused share.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub fraction: f64,
    pub stages: Vec<(Stage, f64, f64)>,
}

impl FlopsReport {
    fn from_fn(fraction: f64, mut f: impl FnMut(Stage) -> (f64, f64)) -> Self {
        Self {
            fraction,
            stages: Stage::ALL
                .iter()
                .map(|&s| {
                    let (m, a) = f(s);
                    (s, m, a)
                })
                .collect(),
        }
    }

    pub fn get(&self, stage: Stage) -> (f64, f64) {
        self.stages
            .iter()
            .find(|(s, _, _)| *s == stage)
            .map(|&(_, m, a)| (m, a))
            .unwrap_or((0.0, 0.0))
    }

    pub fn flops(&self, stage: Stage) -> f64 {
        let (m, a) = self.get(stage);
        m + a
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|(_, m, a)| m + a).sum()
    }

    /// Sum over the focused-branch stages.
    pub fn focused_total(&self) -> f64 {
        self.stages
            .iter()
            .filter(|(s, _, _)| s.is_focused())
            .map(|(_, m, a)| m + a)
            .sum()
    }

    /// Largest relative difference over stages and the total.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let rel = |a: f64, b: f64| {
            if a == b {
                0.0
            } else {
                (a - b).abs() / a.abs().max(b.abs())
            }
        };
        Stage::ALL
            .iter()
            .map(|&s| rel(self.flops(s), other.flops(s)))
            .fold(rel(self.total(), other.total()), f64::max)
    }

    /// Aligned text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# counting convention: {CONVENTION}");
        let _ = writeln!(s, "# focused fraction f = {:.4}", self.fraction);
        let _ = writeln!(s, "{:<16} {:>16} {:>16} {:>16}", "stage", "mul", "add", "flops");
        for &(st, m, a) in &self.stages {
            let _ = writeln!(s, "{:<16} {:>16.1} {:>16.1} {:>16.1}", st.name(), m, a, m + a);
        }
        let _ = writeln!(s, "{:<16} {:>16} {:>16} {:>16.1}", "total", "", "", self.total());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mul,add,flops\n");
        for &(st, m, a) in &self.stages {
            let _ = writeln!(s, "{},{},{},{}", st.name(), m, a, m + a);
        }
        let _ = writeln!(s, "total,,,{}", self.total());
        s
    }
}

/// Closed-form counts for one layer with a focused share `f` of `H·W` pixels.
pub fn flops_analytic(
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
    f: f64,
    widths: Widths,
) -> Result<FlopsReport> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("focused fraction {f} outside [0, 1]")));
    }
    let (ci, co, kk) = (c_in as f64, c_out as f64, (k * k) as f64);
    let (r, bw) = (widths.hidden as f64, widths.bias_width as f64);
    let n = (h * w) as f64;
    let n1 = f * n;
    let n0 = n - n1;
    let kernel = co * ci * kk;
    let modulation = ci * kk + 2.0 * kernel;
    let heads = r * (ci + co + kk);
    let expand = |active: bool| {
        if active && widths.low_rank {
            (2.0 * kernel, kernel)
        } else {
            (0.0, 0.0)
        }
    };
    let (compact, focused) = (n0 > 0.0, n1 > 0.0);
    Ok(FlopsReport::from_fn(f, |s| match s {
        Stage::Camg if widths.camg => {
            let conv = ci * ci * kk * n;
            (conv + ci * n + n + (n + 3.0), conv + ci * n + (3.0 * n + 1.0))
        }
        Stage::Camg => (0.0, 0.0),
        Stage::CompactGap if compact => (ci, ci * n0),
        Stage::CompactHeads if compact => {
            let lin = ci * (ci + co + kk);
            (lin + modulation, lin)
        }
        Stage::CompactConv => (n0 * kernel, n0 * kernel),
        Stage::FocusedEmbed => {
            let m = n1 * (r * ci + r * r);
            (m, m)
        }
        Stage::FocusedHeads => (n1 * (heads + modulation), n1 * heads),
        Stage::FocusedConv => (n1 * kernel, n1 * kernel),
        Stage::LowrankExpand => {
            let (a, b) = (expand(compact), expand(focused));
            (a.0 + b.0, a.1 + b.1)
        }
        Stage::BiasBlock => {
            let m = n * 9.0 * (bw * ci + bw * bw + co * bw);
            (m, m + co * n)
        }
        _ => (0.0, 0.0),
    }))
}

fn report_from_tally(tally: &OpTally, fraction: f64) -> Result<FlopsReport> {
    if !tally.is_enabled() {
        return Err(Error::State("operation counting is disabled".into()));
    }
    Ok(FlopsReport::from_fn(fraction, |s| {
        let OpCount { mul, add } = tally.get(s);
        (mul as f64, add as f64)
    }))
}

/// Executes one layer with counting enabled. The reported fraction is the
/// realised focused share.
pub fn flops_instrumented_layer<T: Scalar>(
    p: &BiMacParams<T>,
    x: &Tensor<T>,
    hard_mask: Option<&Tensor<T>>,
    tally: &mut OpTally,
) -> Result<FlopsReport> {
    if !tally.is_enabled() {
        return Err(Error::State("operation counting is disabled".into()));
    }
    let (_, cache) = forward_cached(p, x, hard_mask, tally)?;
    report_from_tally(tally, cache.mask.focused_fraction.as_f64())
}

/// Executes the whole network with counting enabled. The fraction is the mean
/// focused share over layers.
pub fn flops_instrumented<T: Scalar>(
    net: &Bi2MaNet<T>,
    pan: &Tensor<T>,
    lrms: &Tensor<T>,
    tally: &mut OpTally,
) -> Result<FlopsReport> {
    if !tally.is_enabled() {
        return Err(Error::State("operation counting is disabled".into()));
    }
    let (_, cache) = net_forward_cached(net, pan, lrms, None, tally)?;
    let masks = cache.masks();
    let f = masks
        .iter()
        .map(|m| m.mask.focused_fraction.as_f64())
        .sum::<f64>()
        / masks.len().max(1) as f64;
    report_from_tally(tally, f)
}
