//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! net.num_classes = 4
//! lmfm.scales = 1,2,4,global
//! bcl.alpha = 0.4
//! train.iterations = 2000
//! ```
//!
//! Files are applied in order, then command-line overrides of the same keys.
//! Unknown keys are errors.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bcl::BclConfig;
use crate::datagen::{SceneSpec, ShapeKind};
use crate::error::{Error, Result};
use crate::lmfm::Scale;
use crate::network::NetConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub iterations: usize,
    pub poly_power: f64,
    pub seed: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Iterations between evaluations on the eval manifest; 0 disables.
    pub eval_interval: usize,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            crop: 128,
            flip_prob: 0.5,
            iterations: 2000,
            poly_power: 0.9,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            train_manifest: None,
            eval_manifest: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return c(format!("train.lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return c("train.batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return c(format!("train.flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return c("train.momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if !(self.poly_power >= 0.0) {
            return c("train.poly_power must be >= 0".into());
        }
        let m = net.input_multiple();
        if self.crop == 0 || self.crop % m != 0 {
            return c(format!("train.crop {} must be a multiple of {m}", self.crop));
        }
        Ok(())
    }

    /// `lr0 · (1 − iter/iterations)^power`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let frac = 1.0 - iter as f64 / self.iterations.max(1) as f64;
        self.lr * frac.max(0.0).powf(self.poly_power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub bcl: BclConfig,
    pub data: SceneSpec,
    pub train: TrainConfig,
    pub data_train_count: usize,
    pub data_eval_count: usize,
    /// Chebyshev tolerance of the boundary F-score.
    pub eval_tolerance: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            bcl: BclConfig::default(),
            data: SceneSpec::default(),
            train: TrainConfig::default(),
            data_train_count: 200,
            data_eval_count: 50,
            eval_tolerance: 2,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s.trim()))
        .collect()
}

fn color(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v.split('/').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: color {v:?} needs r/g/b")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (n, b, d, t) = (&mut self.net, &mut self.bcl, &mut self.data, &mut self.train);
        match key.trim() {
            "net.num_classes" => {
                n.num_classes = parse(key, v)?;
                d.num_classes = n.num_classes;
            }
            "net.stem_channels" => n.stem_channels = parse(key, v)?,
            "net.high_channels" => {
                n.high_channels = parse(key, v)?;
                n.lmfm.out_channels = n.high_channels;
            }
            "net.low_channels" => {
                n.low_channels = parse(key, v)?;
                n.lmfm.in_channels = n.low_channels;
            }
            "net.blocks_per_stage" => n.blocks_per_stage = parse(key, v)?,
            "net.head_channels" => n.head_channels = parse(key, v)?,
            "net.divisor" => n.divisor = parse(key, v)?,
            "lmfm.branch_channels" => n.lmfm.branch_channels = parse(key, v)?,
            "lmfm.scales" => n.lmfm.scales = list::<Scale>(key, v)?,
            "lmfm.connection" => n.lmfm.connection = parse(key, v)?,
            "bcl.step" => b.step = parse(key, v)?,
            "bcl.lambda1" => b.lambda1 = parse(key, v)?,
            "bcl.lambda2" => b.lambda2 = parse(key, v)?,
            "bcl.alpha" => b.alpha = parse(key, v)?,
            "bcl.nms_window" => b.nms_window = parse(key, v)?,
            "bcl.keep_fraction" => b.keep_fraction = parse(key, v)?,
            "bcl.min_kept" => b.min_kept = parse(key, v)?,
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.shapes_min" => d.shapes_min = parse(key, v)?,
            "data.shapes_max" => d.shapes_max = parse(key, v)?,
            "data.kinds" => d.kinds = list::<ShapeKind>(key, v)?,
            "data.colors" => {
                d.colors = v
                    .split(',')
                    .map(|c| color(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "data.noise_sigma" => d.noise_sigma = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.train_count" => self.data_train_count = parse(key, v)?,
            "data.eval_count" => self.data_eval_count = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.crop" => t.crop = parse(key, v)?,
            "train.flip_prob" => t.flip_prob = parse(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.poly_power" => t.poly_power = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.checkpoint_interval" => t.checkpoint_interval = parse(key, v)?,
            "train.eval_interval" => t.eval_interval = parse(key, v)?,
            "train.train_manifest" => t.train_manifest = opt_path(v),
            "train.eval_manifest" => t.eval_manifest = opt_path(v),
            "train.out_dir" => t.out_dir = opt_path(v),
            "eval.tolerance" => self.eval_tolerance = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.bcl.validate()?;
        self.data.validate()?;
        if self.data.num_classes != self.net.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, network {}",
                self.data.num_classes, self.net.num_classes
            )));
        }
        self.train.validate(&self.net)
    }

    /// Full resolved configuration; `apply_text` of the result reproduces it.
    pub fn to_text(&self) -> String {
        let b = &self.bcl;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = self.net.canonical();
        s.push_str(&format!(
            "bcl.step = {}\nbcl.lambda1 = {:?}\nbcl.lambda2 = {:?}\nbcl.alpha = {:?}\n\
             bcl.nms_window = {}\nbcl.keep_fraction = {:?}\nbcl.min_kept = {}\n",
            b.step, b.lambda1, b.lambda2, b.alpha, b.nms_window, b.keep_fraction, b.min_kept
        ));
        for line in self.data.canonical().lines() {
            if !line.starts_with("data.num_classes") {
                s.push_str(line);
                s.push('\n');
            }
        }
        s.push_str(&format!(
            "data.train_count = {}\ndata.eval_count = {}\n",
            self.data_train_count, self.data_eval_count
        ));
        s.push_str(&format!(
            "train.lr = {:?}\ntrain.momentum = {:?}\ntrain.weight_decay = {:?}\n\
             train.batch_size = {}\ntrain.crop = {}\ntrain.flip_prob = {:?}\n\
             train.iterations = {}\ntrain.poly_power = {:?}\ntrain.seed = {}\n\
             train.checkpoint_interval = {}\ntrain.eval_interval = {}\n\
             train.train_manifest = {}\ntrain.eval_manifest = {}\ntrain.out_dir = {}\n",
            t.lr,
            t.momentum,
            t.weight_decay,
            t.batch_size,
            t.crop,
            t.flip_prob,
            t.iterations,
            t.poly_power,
            t.seed,
            t.checkpoint_interval,
            t.eval_interval,
            path(&t.train_manifest),
            path(&t.eval_manifest),
            path(&t.out_dir),
        ));
        s.push_str(&format!("eval.tolerance = {}\n", self.eval_tolerance));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmfm::Connection;

    #[test]
    fn parses_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# toy\nbcl.step = 2\nlmfm.connection = cascade\n\nlmfm.scales = 1, 2, global\n")
            .unwrap();
        c.set("bcl.step", "4").unwrap();
        assert_eq!(c.bcl.step, 4);
        assert_eq!(c.net.lmfm.connection, Connection::Cascade);
        assert_eq!(c.net.lmfm.scales, vec![Scale::Factor(1), Scale::Factor(2), Scale::Global]);
    }

    #[test]
    fn unknown_and_malformed_lines_fail() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("bcl.stepp = 1").is_err());
        assert!(c.apply_text("bcl.step 1").is_err());
        assert!(c.apply_text("bcl.step = x").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("train.lr", "0.0123").unwrap();
        c.set("net.num_classes", "3").unwrap();
        c.set("data.colors", "0.1/0.1/0.1,0.9/0.2/0.2,0.2/0.8/0.25").unwrap();
        c.set("train.out_dir", "runs/a").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn poly_schedule() {
        let t = TrainConfig {
            lr: 0.1,
            iterations: 10,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 0.1);
        let lrs: Vec<f64> = (0..=10).map(|i| t.lr_at(i)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(lrs[10], 0.0);
    }

    #[test]
    fn crop_must_fit_the_network() {
        let mut c = RunConfig::default();
        c.set("train.crop", "96").unwrap();
        assert!(c.validate().is_err());
        c.set("train.crop", "64").unwrap();
        c.validate().unwrap();
    }
}
