//! Miniature dual-resolution segmentation network.
//!
//! ```text
//! image ─ stem (2× conv3x3/2) ─┬─ high branch, 1/4 ───────── fuse ── high ─ fuse ── high ─┬─ + ─ head ─ upsample ─ logits
//!                              └─ conv3x3/2 ─ low, 1/8 ──── fuse ── conv3x3/2 ─ low, 1/16 ─ fuse ── LMFM ─ up ┘
//! ```
//!
//! At each fusion point the high branch is strided down into the low branch
//! and the low branch is projected with a 1×1 conv and upsampled into the
//! high branch. The head compresses to class logits with a 1×1 conv at 1/4
//! resolution and upsamples bilinearly. Softmax belongs to the loss.

use sha2::{Digest, Sha256};

use crate::cost::Cost;
use crate::error::{Error, Result};
use crate::lmfm::{Lmfm, LmfmConfig};
use crate::ops::norm::BnMode;
use crate::params::{add_conv_bn, Bindings, Ctx, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub high_channels: usize,
    pub low_channels: usize,
    /// Residual blocks per branch in each of the two stages.
    pub blocks_per_stage: usize,
    pub head_channels: usize,
    /// Input extents must be multiples of this times the largest LMFM factor.
    pub divisor: usize,
    pub lmfm: LmfmConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::new(4)
    }
}

impl NetConfig {
    pub fn new(num_classes: usize) -> Self {
        let low = 32;
        let high = 16;
        NetConfig {
            num_classes,
            stem_channels: 16,
            high_channels: high,
            low_channels: low,
            blocks_per_stage: 1,
            head_channels: 16,
            divisor: 16,
            lmfm: LmfmConfig::new(low, high),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return c(format!("need at least 2 classes, got {}", self.num_classes));
        }
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("high_channels", self.high_channels),
            ("low_channels", self.low_channels),
            ("head_channels", self.head_channels),
        ] {
            if v == 0 {
                return c(format!("{name} must be >= 1"));
            }
        }
        if self.divisor != 16 {
            return c(format!(
                "the backbone downsamples by 16; divisor {} unsupported",
                self.divisor
            ));
        }
        if self.lmfm.in_channels != self.low_channels {
            return c(format!(
                "lmfm.in_channels {} must equal low_channels {}",
                self.lmfm.in_channels, self.low_channels
            ));
        }
        if self.lmfm.out_channels != self.high_channels {
            return c(format!(
                "lmfm.out_channels {} must equal high_channels {}",
                self.lmfm.out_channels, self.high_channels
            ));
        }
        self.lmfm.validate()
    }

    /// Required multiple for input height and width.
    pub fn input_multiple(&self) -> usize {
        self.divisor * self.lmfm.largest_factor()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.input_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a non-zero multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Canonical `key = value` lines describing the architecture.
    pub fn canonical(&self) -> String {
        let scales: Vec<String> = self.lmfm.scales.iter().map(|s| s.to_string()).collect();
        [
            format!("net.num_classes = {}", self.num_classes),
            format!("net.stem_channels = {}", self.stem_channels),
            format!("net.high_channels = {}", self.high_channels),
            format!("net.low_channels = {}", self.low_channels),
            format!("net.blocks_per_stage = {}", self.blocks_per_stage),
            format!("net.head_channels = {}", self.head_channels),
            format!("net.divisor = {}", self.divisor),
            format!("lmfm.branch_channels = {}", self.lmfm.branch_channels),
            format!("lmfm.scales = {}", scales.join(",")),
            format!("lmfm.connection = {}", self.lmfm.connection),
        ]
        .join("\n")
            + "\n"
    }

    /// SHA-256 of [`NetConfig::canonical`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetConfig,
    pub params: ParamStore,
}

fn add_block(store: &mut ParamStore, prefix: &str, c: usize, seed: u64) -> Result<()> {
    add_conv_bn(store, &format!("{prefix}.a"), c, c, 3, seed)?;
    add_conv_bn(store, &format!("{prefix}.b"), c, c, 3, seed)
}

fn block(ctx: &mut Ctx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let y = ctx.conv_bn(x, &format!("{prefix}.a"), 1, 1, true)?;
    let y = ctx.conv_bn(y, &format!("{prefix}.b"), 1, 1, false)?;
    let y = ctx.tape.add(y, x)?;
    ctx.tape.relu(y)
}

impl Network {
    /// Deterministic initialization: each tensor draws from a stream keyed
    /// by `(seed, name)`, batch norm starts at `gamma = 1, beta = 0`.
    pub fn build(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let (cs, ch, cl) = (cfg.stem_channels, cfg.high_channels, cfg.low_channels);
        add_conv_bn(&mut s, "stem.0", cs, 3, 3, seed)?;
        add_conv_bn(&mut s, "stem.1", ch, cs, 3, seed)?;
        add_conv_bn(&mut s, "down1", cl, ch, 3, seed)?;
        for b in 0..cfg.blocks_per_stage {
            add_block(&mut s, &format!("high1.{b}"), ch, seed)?;
            add_block(&mut s, &format!("low1.{b}"), cl, seed)?;
        }
        add_conv_bn(&mut s, "fuse1.h2l", cl, ch, 3, seed)?;
        add_conv_bn(&mut s, "fuse1.l2h", ch, cl, 1, seed)?;
        add_conv_bn(&mut s, "down2", cl, cl, 3, seed)?;
        for b in 0..cfg.blocks_per_stage {
            add_block(&mut s, &format!("high2.{b}"), ch, seed)?;
            add_block(&mut s, &format!("low2.{b}"), cl, seed)?;
        }
        add_conv_bn(&mut s, "fuse2.h2l.0", ch, ch, 3, seed)?;
        add_conv_bn(&mut s, "fuse2.h2l.1", cl, ch, 3, seed)?;
        add_conv_bn(&mut s, "fuse2.l2h", ch, cl, 1, seed)?;
        Lmfm::new(cfg.lmfm.clone(), "lmfm")?.init(&mut s, seed)?;
        add_conv_bn(&mut s, "head.0", cfg.head_channels, ch, 3, seed)?;
        s.add_conv("head.1", cfg.num_classes, cfg.head_channels, 1, true, seed)?;
        Ok(Network { cfg, params: s })
    }

    /// Wraps an existing store, checking it holds exactly this architecture.
    pub fn from_params(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        let reference = Network::build(cfg.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((a, ea), (b, eb)) in reference.params.iter().zip(params.iter()) {
            if a != b || ea.tensor.shape() != eb.tensor.shape() || ea.trainable != eb.trainable {
                return Err(Error::Checkpoint(format!(
                    "tensor {b} {:?} does not match expected {a} {:?}",
                    eb.tensor.shape(),
                    ea.tensor.shape()
                )));
            }
        }
        Ok(Network { cfg, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Records the forward pass; returns logits `[N, M, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (_, c, h, w) = ctx.tape.value(x).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        self.cfg.check_input(h, w)?;
        let (h4, w4) = (h / 4, w / 4);

        let s = ctx.conv_bn(x, "stem.0", 2, 1, true)?;
        let stem = ctx.conv_bn(s, "stem.1", 2, 1, true)?;

        let mut high = stem;
        let mut low = ctx.conv_bn(stem, "down1", 2, 1, true)?;
        for b in 0..self.cfg.blocks_per_stage {
            high = block(ctx, high, &format!("high1.{b}"))?;
            low = block(ctx, low, &format!("low1.{b}"))?;
        }
        let (high, low) = {
            let down = ctx.conv_bn(high, "fuse1.h2l", 2, 1, false)?;
            let proj = ctx.conv_bn(low, "fuse1.l2h", 1, 0, false)?;
            let up = ctx.tape.upsample_to(proj, (h4, w4))?;
            let lo = ctx.tape.add(low, down)?;
            let hi = ctx.tape.add(high, up)?;
            (ctx.tape.relu(hi)?, ctx.tape.relu(lo)?)
        };

        let mut high = high;
        let mut low = ctx.conv_bn(low, "down2", 2, 1, true)?;
        for b in 0..self.cfg.blocks_per_stage {
            high = block(ctx, high, &format!("high2.{b}"))?;
            low = block(ctx, low, &format!("low2.{b}"))?;
        }
        let (high, low) = {
            let d = ctx.conv_bn(high, "fuse2.h2l.0", 2, 1, true)?;
            let down = ctx.conv_bn(d, "fuse2.h2l.1", 2, 1, false)?;
            let proj = ctx.conv_bn(low, "fuse2.l2h", 1, 0, false)?;
            let up = ctx.tape.upsample_to(proj, (h4, w4))?;
            let lo = ctx.tape.add(low, down)?;
            let hi = ctx.tape.add(high, up)?;
            (ctx.tape.relu(hi)?, ctx.tape.relu(lo)?)
        };

        let context = Lmfm::new(self.cfg.lmfm.clone(), "lmfm")?.forward(ctx, low)?;
        let context = ctx.tape.upsample_to(context, (h4, w4))?;
        let merged = ctx.tape.add(high, context)?;

        let y = ctx.conv_bn(merged, "head.0", 1, 1, true)?;
        let y = ctx.conv(y, "head.1", 1, 0)?;
        ctx.tape.upsample_to(y, (h, w))
    }

    /// Forward on a fresh tape. With `track`, parameters are bound as
    /// requires-grad leaves so the caller can backpropagate.
    pub fn run(&self, tape: &mut Tape, x: &Tensor, mode: BnMode, track: bool) -> Result<(Var, Bindings)> {
        let mut ctx = Ctx::new(tape, &self.params, mode, track);
        let xv = ctx.tape.constant(x.clone());
        let logits = self.forward(&mut ctx, xv)?;
        Ok((logits, ctx.finish()))
    }

    pub fn logits(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.run(&mut tape, x, mode, false)?;
        Ok(tape.value(out).clone())
    }

    /// Updates running statistics with one training-mode pass over `x`,
    /// without touching trainable parameters.
    pub fn calibrate_bn(&mut self, x: &Tensor) -> Result<()> {
        let mut tape = Tape::new();
        let (_, bind) = self.run(&mut tape, x, BnMode::Train, false)?;
        self.params.apply_bn_stats(&bind.stats)
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<Vec<u32>>> {
    let (n, m, h, w) = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    let mut best_v = d[b * m * plane + p];
                    for c in 1..m {
                        let v = d[(b * m + c) * plane + p];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect())
}

/// Parameter and FLOP count of the whole network on an `h`×`w` input.
pub fn count_cost(cfg: &NetConfig, h: usize, w: usize) -> Result<Cost> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let (cs, ch, cl, m) = (cfg.stem_channels, cfg.high_channels, cfg.low_channels, cfg.num_classes);
    let (s2, s4, s8, s16) = ((h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8), (h / 16, w / 16));
    let block = |c: usize, hw| {
        let mut k = Cost::conv_bn(c, c, 3, hw, true);
        k += Cost::conv_bn(c, c, 3, hw, false);
        k += Cost::elementwise(c, hw); // skip add
        k += Cost::elementwise(c, hw); // relu
        k
    };
    let mut t = Cost::default();
    t += Cost::conv_bn(cs, 3, 3, s2, true);
    t += Cost::conv_bn(ch, cs, 3, s4, true);
    t += Cost::conv_bn(cl, ch, 3, s8, true);
    for _ in 0..cfg.blocks_per_stage {
        t += block(ch, s4);
        t += block(cl, s8);
    }
    // fusion 1: h2l, l2h + upsample, two adds, two relus
    t += Cost::conv_bn(cl, ch, 3, s8, false);
    t += Cost::conv_bn(ch, cl, 1, s8, false);
    t += Cost::elementwise(ch, s4);
    t += Cost::elementwise(cl, s8);
    t += Cost::elementwise(ch, s4);
    t += Cost::elementwise(ch, s4);
    t += Cost::elementwise(cl, s8);

    t += Cost::conv_bn(cl, cl, 3, s16, true);
    for _ in 0..cfg.blocks_per_stage {
        t += block(ch, s4);
        t += block(cl, s16);
    }
    t += Cost::conv_bn(ch, ch, 3, s8, true);
    t += Cost::conv_bn(cl, ch, 3, s16, false);
    t += Cost::conv_bn(ch, cl, 1, s16, false);
    t += Cost::elementwise(ch, s4);
    t += Cost::elementwise(cl, s16);
    t += Cost::elementwise(ch, s4);
    t += Cost::elementwise(ch, s4);
    t += Cost::elementwise(cl, s16);

    t += crate::lmfm::lmfm_cost(&cfg.lmfm, s16.0, s16.1)?;
    t += Cost::elementwise(ch, s4); // upsample context
    t += Cost::elementwise(ch, s4); // merge add

    t += Cost::conv_bn(cfg.head_channels, ch, 3, s4, true);
    t += Cost::conv(m, cfg.head_channels, 1, s4, true);
    t += Cost::elementwise(m, (h, w));
    Ok(t)
}
