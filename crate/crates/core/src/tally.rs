//! Explicit multiply/add tallies recorded by the executing kernels.
//!
//! Counting convention: one multiply-accumulate is one multiply plus one add
//! (2 FLOPs). Convolution windows count every tap, padded ones included.
//! Transcendentals (sigmoid, sqrt) and comparisons (ReLU, thresholding) are
//! not counted.

/// Sub-module a tally entry is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Camg,
    CompactGap,
    CompactHeads,
    CompactConv,
    FocusedEmbed,
    FocusedHeads,
    FocusedConv,
    BiasBlock,
    LowrankExpand,
    /// Anything outside a Bi²MAC layer (U-Net stem, resampling, head).
    Backbone,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Camg,
        Stage::CompactGap,
        Stage::CompactHeads,
        Stage::CompactConv,
        Stage::FocusedEmbed,
        Stage::FocusedHeads,
        Stage::FocusedConv,
        Stage::BiasBlock,
        Stage::LowrankExpand,
        Stage::Backbone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Camg => "camg",
            Stage::CompactGap => "compact_gap",
            Stage::CompactHeads => "compact_heads",
            Stage::CompactConv => "compact_conv",
            Stage::FocusedEmbed => "focused_embed",
            Stage::FocusedHeads => "focused_heads",
            Stage::FocusedConv => "focused_conv",
            Stage::BiasBlock => "bias_block",
            Stage::LowrankExpand => "lowrank_expand",
            Stage::Backbone => "backbone",
        }
    }

    pub fn is_focused(self) -> bool {
        matches!(
            self,
            Stage::FocusedEmbed | Stage::FocusedHeads | Stage::FocusedConv
        )
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub mul: u64,
    pub add: u64,
}

impl OpCount {
    pub fn flops(self) -> u64 {
        self.mul + self.add
    }
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: Self) {
        self.mul += o.mul;
        self.add += o.add;
    }
}

/// Per-invocation operation counter. Disabled tallies ignore every record.
#[derive(Clone, Debug)]
pub struct OpTally {
    enabled: bool,
    stage: Stage,
    counts: [OpCount; Stage::ALL.len()],
}

impl Default for OpTally {
    fn default() -> Self {
        Self::off()
    }
}

impl OpTally {
    pub fn off() -> Self {
        Self {
            enabled: false,
            stage: Stage::Backbone,
            counts: [OpCount::default(); Stage::ALL.len()],
        }
    }

    pub fn on() -> Self {
        Self {
            enabled: true,
            ..Self::off()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Switches the stage subsequent records are charged to; returns the old one.
    pub fn enter(&mut self, stage: Stage) -> Stage {
        std::mem::replace(&mut self.stage, stage)
    }

    #[inline]
    pub fn record(&mut self, mul: u64, add: u64) {
        if self.enabled {
            let c = &mut self.counts[self.stage.index()];
            c.mul += mul;
            c.add += add;
        }
    }

    /// Records `n` multiply-accumulates.
    #[inline]
    pub fn record_macs(&mut self, n: u64) {
        self.record(n, n);
    }

    pub fn get(&self, stage: Stage) -> OpCount {
        self.counts[stage.index()]
    }

    pub fn total(&self) -> OpCount {
        let mut t = OpCount::default();
        for c in &self.counts {
            t += *c;
        }
        t
    }
}
