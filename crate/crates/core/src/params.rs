//! Flat, ordered store of named parameters and buffers, and the forward
//! context that binds them onto a tape.
//!
//! Naming scheme per layer prefix `p`:
//! `p.weight`, `p.bias` for convolutions; `p.gamma`, `p.beta`,
//! `p.running_mean`, `p.running_var`, `p.updates` for batch norm.
//! Only `weight`, `bias`, `gamma` and `beta` are trainable.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::ops::norm::{BatchNormParams, BatchStats, BnMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

/// 64-bit FNV-1a, used to derive per-tensor RNG streams from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Uniform draw in `[0, 1)` from the top 53 bits.
pub fn unit_f64(rng: &mut impl Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Entry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Fan-in scaled uniform weights `U(-b, b)`, `b = sqrt(6 / fan_in)`, drawn
    /// from a stream keyed by `(seed, name)`.
    pub fn add_conv(
        &mut self,
        prefix: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        bias: bool,
        seed: u64,
    ) -> Result<()> {
        if out_c == 0 || in_c == 0 || k == 0 {
            return Err(Error::Config(format!("{prefix}: conv extents must be >= 1")));
        }
        let name = format!("{prefix}.weight");
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..out_c * in_c * k * k)
            .map(|_| (2.0 * unit_f64(&mut rng) - 1.0) * bound)
            .collect();
        self.insert(name, Tensor::new([out_c, in_c, k, k], data)?, true)?;
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros([out_c]), true)?;
        }
        Ok(())
    }

    pub fn add_bn(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::full([channels], 1.0), true)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros([channels]), true)?;
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros([channels]), false)?;
        self.insert(format!("{prefix}.running_var"), Tensor::full([channels], 1.0), false)?;
        self.insert(format!("{prefix}.updates"), Tensor::zeros([1]), false)?;
        Ok(())
    }

    pub fn bn_params(&self, prefix: &str) -> Result<BatchNormParams> {
        Ok(BatchNormParams {
            gamma: self.get(&format!("{prefix}.gamma"))?.clone(),
            beta: self.get(&format!("{prefix}.beta"))?.clone(),
            running_mean: self.get(&format!("{prefix}.running_mean"))?.clone(),
            running_var: self.get(&format!("{prefix}.running_var"))?.clone(),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            updates: self.get(&format!("{prefix}.updates"))?.data()[0] as u64,
        })
    }

    /// Folds batch statistics gathered by a training forward into the
    /// running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            let mut p = self.bn_params(prefix)?;
            p.update_running(s);
            *self.get_mut(&format!("{prefix}.running_mean"))? = p.running_mean;
            *self.get_mut(&format!("{prefix}.running_var"))? = p.running_var;
            self.get_mut(&format!("{prefix}.updates"))?.data_mut()[0] = p.updates as f64;
        }
        Ok(())
    }

    /// Order-sensitive checksum over names and raw bits.
    pub fn checksum(&self) -> u64 {
        let mut h = fnv1a(b"params");
        for (name, e) in &self.entries {
            h ^= fnv1a(name.as_bytes());
            h = h.rotate_left(7);
            for v in e.tensor.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Forward-pass state: the tape, the parameters being read, the batch norm
/// mode, and the bookkeeping needed to route gradients back to names.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    pub mode: BnMode,
    track: bool,
    bound: HashMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    /// `track` controls whether parameters are bound as requires-grad leaves.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: BnMode, track: bool) -> Self {
        Ctx {
            tape,
            store,
            mode,
            track,
            bound: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape handle for a stored tensor; each name is bound once per forward.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.track {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.has(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let p = self.store.bn_params(prefix)?;
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, &p, self.mode)?;
        if let Some(s) = stats {
            self.stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    /// Conv → BN, optionally followed by ReLU. Layer names `{prefix}.conv`
    /// and `{prefix}.bn`.
    pub fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize, pad: usize, relu: bool) -> Result<Var> {
        let y = self.conv(x, &format!("{prefix}.conv"), stride, pad)?;
        let y = self.bn(y, &format!("{prefix}.bn"))?;
        if relu {
            self.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Parameter bindings and training-mode batch statistics.
    pub fn finish(self) -> Bindings {
        Bindings {
            vars: self.bound,
            stats: self.stats,
        }
    }
}

/// What a forward pass left behind for the optimizer.
#[derive(Debug, Default)]
pub struct Bindings {
    pub vars: HashMap<String, Var>,
    pub stats: Vec<(String, BatchStats)>,
}

impl Bindings {
    /// Gradients for every trainable parameter in store order. Parameters
    /// not touched by the forward pass get zeros.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<(String, Vec<f64>)> {
        store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| tape.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; e.tensor.numel()]);
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Conv + BN (+ optional ReLU) layer registration matching [`Ctx::conv_bn`].
pub fn add_conv_bn(
    store: &mut ParamStore,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    seed: u64,
) -> Result<()> {
    store.add_conv(&format!("{prefix}.conv"), out_c, in_c, k, false, seed)?;
    store.add_bn(&format!("{prefix}.bn"), out_c)
}
