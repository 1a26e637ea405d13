//! Low-resolution multi-scale fusion block.
//!
//! The input map is average-pooled at increasing factors plus a global
//! pool. Each pooled map is projected with a 1×1 conv, then the branches are
//! fused coarse-to-fine, concatenated at full size, compressed with a 1×1
//! conv, and added to a 1×1 shortcut of the input.
//!
//! With branches `b_0..b_S` (`b_0` unpooled, `b_S` global) the fusion rule
//! depends on [`Connection`]:
//!
//! * `Interval`: `z_S = b_S`, `z_{S-1} = b_{S-1}`, and for `i = S-2..=0`,
//!   `z_i = relu(bn(conv3x3(b_i + up(z_{i+2}))))`. Even and odd branches form
//!   two interleaved chains, so finer maps pass through more convolutions.
//! * `Cascade`: same with `z_{i+1}` as the source, for `i = S-1..=0`.
//! * `None`: `z_i = b_i`.

use std::fmt;
use std::str::FromStr;

use crate::cost::Cost;
use crate::error::{Error, Result};
use crate::ops::norm::BnMode;
use crate::params::{add_conv_bn, Ctx, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Average pool with window = stride = factor (1 means no pooling).
    Factor(usize),
    Global,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Factor(k) => write!(f, "{k}"),
            Scale::Global => write!(f, "global"),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("global") || s.eq_ignore_ascii_case("gap") {
            return Ok(Scale::Global);
        }
        s.parse::<usize>()
            .map(Scale::Factor)
            .map_err(|_| Error::Config(format!("bad LMFM scale {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connection {
    Interval,
    Cascade,
    None,
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connection::Interval => "interval",
            Connection::Cascade => "cascade",
            Connection::None => "none",
        })
    }
}

impl FromStr for Connection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "interval" => Ok(Connection::Interval),
            "cascade" => Ok(Connection::Cascade),
            "none" => Ok(Connection::None),
            other => Err(Error::Config(format!("unknown connection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmfmConfig {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub out_channels: usize,
    pub scales: Vec<Scale>,
    pub connection: Connection,
}

impl LmfmConfig {
    /// Scales `[1, 2, 4, global]`, interval fusion, branch width `in / 4`.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        LmfmConfig {
            in_channels,
            branch_channels: (in_channels / 4).max(1),
            out_channels,
            scales: vec![
                Scale::Factor(1),
                Scale::Factor(2),
                Scale::Factor(4),
                Scale::Global,
            ],
            connection: Connection::Interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.branch_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("LMFM channel counts must be >= 1".into()));
        }
        let Some((&last, finite)) = self.scales.split_last() else {
            return Err(Error::Config("LMFM needs at least one branch".into()));
        };
        if last != Scale::Global {
            return Err(Error::Config("LMFM scales must end with global".into()));
        }
        if finite.first() != Some(&Scale::Factor(1)) {
            return Err(Error::Config("LMFM scales must start at factor 1".into()));
        }
        let mut prev = 0;
        for s in finite {
            match *s {
                Scale::Factor(k) if k > prev => prev = k,
                _ => {
                    return Err(Error::Config(format!(
                        "LMFM scales must be strictly increasing factors then global: {:?}",
                        self.scales
                    )))
                }
            }
        }
        if self.connection == Connection::Interval && self.scales.len() < 3 {
            return Err(Error::Config(
                "interval connection needs at least 3 branches".into(),
            ));
        }
        Ok(())
    }

    pub fn largest_factor(&self) -> usize {
        self.scales
            .iter()
            .filter_map(|s| match s {
                Scale::Factor(k) => Some(*k),
                Scale::Global => None,
            })
            .max()
            .unwrap_or(1)
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.largest_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "LMFM input {h}x{w} not divisible by largest scale {f}"
            )));
        }
        Ok(())
    }

    /// Index of the branch fused into branch `i`, if any.
    fn fusion_source(&self, i: usize) -> Option<usize> {
        let last = self.scales.len() - 1;
        match self.connection {
            Connection::Interval if i + 2 <= last => Some(i + 2),
            Connection::Cascade if i < last => Some(i + 1),
            _ => None,
        }
    }

    fn branch_size(&self, i: usize, h: usize, w: usize) -> (usize, usize) {
        match self.scales[i] {
            Scale::Factor(k) => (h / k, w / k),
            Scale::Global => (1, 1),
        }
    }
}

/// One LMFM instance whose parameters live under `prefix` in a store.
#[derive(Debug, Clone)]
pub struct Lmfm {
    cfg: LmfmConfig,
    prefix: String,
}

impl Lmfm {
    pub fn new(cfg: LmfmConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Lmfm {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn config(&self) -> &LmfmConfig {
        &self.cfg
    }

    fn name(&self, part: &str) -> String {
        if self.prefix.is_empty() {
            part.to_string()
        } else {
            format!("{}.{part}", self.prefix)
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let c = &self.cfg;
        let last = c.scales.len() - 1;
        for i in 0..last {
            add_conv_bn(store, &self.name(&format!("branch{i}")), c.branch_channels, c.in_channels, 1, seed)?;
        }
        store.add_conv(
            &self.name(&format!("branch{last}.conv")),
            c.branch_channels,
            c.in_channels,
            1,
            true,
            seed,
        )?;
        for i in 0..=last {
            if c.fusion_source(i).is_some() {
                add_conv_bn(store, &self.name(&format!("fuse{i}")), c.branch_channels, c.branch_channels, 3, seed)?;
            }
        }
        store.add_conv(
            &self.name("compress"),
            c.out_channels,
            c.branch_channels * c.scales.len(),
            1,
            true,
            seed,
        )?;
        store.add_conv(&self.name("shortcut"), c.out_channels, c.in_channels, 1, false, seed)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = &self.cfg;
        let (_, cin, h, w) = ctx.tape.value(x).dims4()?;
        if cin != c.in_channels {
            return Err(Error::Shape(format!(
                "LMFM expects {} channels, got {cin}",
                c.in_channels
            )));
        }
        c.check_input(h, w)?;
        let last = c.scales.len() - 1;

        let mut branches = Vec::with_capacity(c.scales.len());
        for (i, scale) in c.scales.iter().enumerate() {
            let pooled = match *scale {
                Scale::Factor(1) => x,
                Scale::Factor(k) => ctx.tape.avg_pool2d(x, k, k)?,
                Scale::Global => ctx.tape.global_avg_pool(x)?,
            };
            let b = if i == last {
                let y = ctx.conv(pooled, &self.name(&format!("branch{i}.conv")), 1, 0)?;
                ctx.tape.relu(y)?
            } else {
                ctx.conv_bn(pooled, &self.name(&format!("branch{i}")), 1, 0, true)?
            };
            branches.push(b);
        }

        let mut fused: Vec<Option<Var>> = vec![None; branches.len()];
        for i in (0..branches.len()).rev() {
            fused[i] = Some(match c.fusion_source(i) {
                None => branches[i],
                Some(src) => {
                    let size = c.branch_size(i, h, w);
                    let coarse = fused[src].expect("coarser branch fused first");
                    let up = ctx.tape.upsample_to(coarse, size)?;
                    let sum = ctx.tape.add(branches[i], up)?;
                    ctx.conv_bn(sum, &self.name(&format!("fuse{i}")), 1, 1, true)?
                }
            });
        }

        let mut full = Vec::with_capacity(fused.len());
        for z in fused.into_iter().flatten() {
            full.push(ctx.tape.upsample_to(z, (h, w))?);
        }
        let cat = ctx.tape.concat_channels(&full)?;
        let main = ctx.conv(cat, &self.name("compress"), 1, 0)?;
        let short = ctx.conv(x, &self.name("shortcut"), 1, 0)?;
        ctx.tape.add(main, short)
    }

    pub fn cost(&self, h: usize, w: usize) -> Result<Cost> {
        lmfm_cost(&self.cfg, h, w)
    }
}

/// Runs the block on a plain tensor with parameters stored without prefix.
pub fn lmfm_forward(x: &Tensor, cfg: &LmfmConfig, store: &ParamStore, mode: BnMode) -> Result<Tensor> {
    let block = Lmfm::new(cfg.clone(), "")?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, mode, false);
    let xv = ctx.tape.constant(x.clone());
    let out = block.forward(&mut ctx, xv)?;
    Ok(tape.value(out).clone())
}

/// Parameter and FLOP count of one block on an `h`×`w` input.
pub fn lmfm_cost(cfg: &LmfmConfig, h: usize, w: usize) -> Result<Cost> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let (cin, cb, cout) = (cfg.in_channels, cfg.branch_channels, cfg.out_channels);
    let last = cfg.scales.len() - 1;
    let mut total = Cost::default();

    for (i, scale) in cfg.scales.iter().enumerate() {
        let size = cfg.branch_size(i, h, w);
        match *scale {
            Scale::Factor(1) => {}
            Scale::Factor(_) => total += Cost::elementwise(cin, size),
            Scale::Global => total += Cost::elementwise(cin, size).fixed(),
        }
        if i == last {
            let mut c = Cost::conv(cb, cin, 1, size, true);
            c += Cost::elementwise(cb, size);
            total += c.fixed();
        } else {
            total += Cost::conv_bn(cb, cin, 1, size, true);
        }
    }
    for i in 0..=last {
        if let Some(src) = cfg.fusion_source(i) {
            let size = cfg.branch_size(i, h, w);
            if cfg.branch_size(src, h, w) != size {
                total += Cost::elementwise(cb, size);
            }
            total += Cost::elementwise(cb, size);
            total += Cost::conv_bn(cb, cb, 3, size, true);
        }
    }
    for i in 0..=last {
        if cfg.branch_size(i, h, w) != (h, w) {
            total += Cost::elementwise(cb, (h, w));
        }
    }
    total += Cost::conv(cout, cb * cfg.scales.len(), 1, (h, w), true);
    total += Cost::conv(cout, cin, 1, (h, w), false);
    total += Cost::elementwise(cout, (h, w));
    Ok(total)
}
