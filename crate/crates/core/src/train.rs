//! Training loop, evaluation, prediction export and timing.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::config::RunConfig;
use crate::cost::Cost;
use crate::datagen::{save_ppm, Sample, PALETTE};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::{self, BoundaryCounts, ConfusionMatrix, Miou};
use crate::network::{argmax_labels, count_cost, NetConfig, Network};
use crate::ops::norm::BnMode;
use crate::ops::optim::{sgd_step, SgdConfig};
use crate::params::unit_f64;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceLine {
    pub iter: usize,
    pub lce: f64,
    pub lb: f64,
    pub lr: f64,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} lce={} lb={} lr={}", self.iter, self.lce, self.lb, self.lr)
    }
}

/// `crop`×`crop` window at `(y0, x0)`, optionally mirrored left-right.
pub fn crop_flip(
    image: &Tensor,
    label: &LabelMap,
    y0: usize,
    x0: usize,
    crop: usize,
    flip: bool,
) -> Result<(Vec<f64>, LabelMap)> {
    let (h, w) = (label.height(), label.width());
    if image.shape() != [3, h, w] {
        return Err(Error::Shape(format!(
            "image {:?} does not match label {h}x{w}",
            image.shape()
        )));
    }
    if y0 + crop > h || x0 + crop > w {
        return Err(Error::Shape(format!(
            "crop {crop} at ({y0}, {x0}) exceeds {h}x{w}"
        )));
    }
    let src_x = |x: usize| if flip { x0 + crop - 1 - x } else { x0 + x };
    let d = image.data();
    let mut img = Vec::with_capacity(3 * crop * crop);
    for ch in 0..3 {
        for y in 0..crop {
            for x in 0..crop {
                img.push(d[(ch * h + y0 + y) * w + src_x(x)]);
            }
        }
    }
    let mut lbl = Vec::with_capacity(crop * crop);
    for y in 0..crop {
        for x in 0..crop {
            lbl.push(label.get(y0 + y, src_x(x)));
        }
    }
    let lm = LabelMap::new(crop, crop, label.num_classes(), label.ignore_index(), lbl)?;
    Ok((img, lm))
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::new();
    for im in images {
        if im.shape() != first.as_slice() {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(first);
    Tensor::new(shape, data)
}

struct Sampler {
    rng: Xoshiro256StarStar,
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            rng: Xoshiro256StarStar::seed_from_u64(seed ^ 0x0da7_a5a3_91e5_0000),
            order: (0..n).collect(),
            next: n,
        }
    }

    fn below(&mut self, n: usize) -> usize {
        ((unit_f64(&mut self.rng) * n as f64) as usize).min(n - 1)
    }

    fn index(&mut self) -> usize {
        if self.next == self.order.len() {
            // Fisher-Yates
            for i in (1..self.order.len()).rev() {
                let j = self.below(i + 1);
                self.order.swap(i, j);
            }
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub trace: Vec<TraceLine>,
}

fn diverged(iter: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(d) | Error::Backward(d) => Error::Diverged { iter, detail: d },
        other => other,
    }
}

/// Runs `cfg.train.iterations` SGD steps on `data`. `on_iter` sees each
/// trace line and the updated network.
pub fn train(
    cfg: &RunConfig,
    data: &[Sample],
    mut on_iter: impl FnMut(&TraceLine, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    for s in data {
        if s.label.num_classes() != cfg.net.num_classes {
            return Err(Error::Config(format!(
                "sample has {} classes, network {}",
                s.label.num_classes(),
                cfg.net.num_classes
            )));
        }
        if s.label.height() < t.crop || s.label.width() < t.crop {
            return Err(Error::Config(format!(
                "crop {} larger than a {}x{} sample",
                t.crop,
                s.label.height(),
                s.label.width()
            )));
        }
    }
    let mut net = Network::build(cfg.net.clone(), t.seed)?;
    let mut sampler = Sampler::new(data.len(), t.seed);
    let mut velocity: Vec<Vec<f64>> = net
        .params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|_| Vec::new())
        .collect();
    let mut trace = Vec::with_capacity(t.iterations);

    for iter in 0..t.iterations {
        let mut images = Vec::with_capacity(t.batch_size * 3 * t.crop * t.crop);
        let mut labels = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let s = &data[sampler.index()];
            let y0 = sampler.below(s.label.height() - t.crop + 1);
            let x0 = sampler.below(s.label.width() - t.crop + 1);
            let flip = unit_f64(&mut sampler.rng) < t.flip_prob;
            let (img, lbl) = crop_flip(&s.image, &s.label, y0, x0, t.crop, flip)?;
            images.extend(img);
            labels.push(lbl);
        }
        let x = Tensor::new([t.batch_size, 3, t.crop, t.crop], images)?;

        let on_err = diverged(iter);
        let mut tape = Tape::new();
        let (logits, bind) = net.run(&mut tape, &x, BnMode::Train, true).map_err(&on_err)?;
        let loss = tape.total_loss(logits, &labels, &cfg.bcl).map_err(&on_err)?;
        let lce = tape.value(loss.ce).item()?;
        if !lce.is_finite() || !loss.boundary.is_finite() {
            return Err(Error::Diverged {
                iter,
                detail: format!("lce={lce} lb={}", loss.boundary),
            });
        }
        tape.backward(loss.total).map_err(&on_err)?;

        let lr = t.lr_at(iter);
        let sgd = SgdConfig {
            lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
        };
        for ((name, grad), v) in bind.gradients(&tape, &net.params).into_iter().zip(&mut velocity) {
            sgd_step(net.params.get_mut(&name)?, &grad, v, sgd)?;
        }
        net.params.apply_bn_stats(&bind.stats)?;
        if let Some((name, _)) = net.params.iter().find(|(_, e)| e.tensor.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                iter,
                detail: format!("parameter {name} became non-finite"),
            });
        }

        let line = TraceLine {
            iter,
            lce,
            lb: loss.boundary,
            lr,
        };
        on_iter(&line, &net)?;
        trace.push(line);
    }
    Ok(TrainOutcome { network: net, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub miou: Miou,
    pub boundary: BoundaryCounts,
    pub tolerance: usize,
}

impl EvalReport {
    pub fn boundary_f1(&self) -> f64 {
        self.boundary.score().f1
    }

    pub fn render(&self) -> Result<String> {
        metrics::report(&self.confusion, &self.boundary, self.tolerance)
    }
}

/// Eval-mode prediction for one `[3, H, W]` image.
pub fn predict(net: &Network, image: &Tensor) -> Result<LabelMap> {
    let x = stack(&[image])?;
    let logits = net.logits(&x, BnMode::Eval)?;
    let (_, _, h, w) = logits.dims4()?;
    let labels = argmax_labels(&logits)?.remove(0);
    LabelMap::new(
        h,
        w,
        net.config().num_classes,
        crate::labels::DEFAULT_IGNORE_INDEX,
        labels,
    )
}

/// Full-image eval-mode forward per sample, accumulated into one report.
pub fn evaluate(net: &Network, samples: &[Sample], tolerance: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    let mut boundary = BoundaryCounts::default();
    for s in samples {
        let pred = predict(net, &s.image)?;
        cm.accumulate(&pred, &s.label)?;
        boundary += metrics::boundary_counts(&pred, &s.label, tolerance)?;
    }
    Ok(EvalReport {
        miou: metrics::miou(&cm)?,
        confusion: cm,
        boundary,
        tolerance,
    })
}

/// Palette-colored `[3, H, W]` rendering of a label map.
pub fn colorize(label: &LabelMap) -> Result<Tensor> {
    let plane = label.height() * label.width();
    let mut d = vec![0.0; 3 * plane];
    for (p, &l) in label.labels().iter().enumerate() {
        let c = PALETTE.get(l as usize).copied().unwrap_or([0.0, 0.0, 0.0]);
        for ch in 0..3 {
            d[ch * plane + p] = c[ch];
        }
    }
    Tensor::new([3, label.height(), label.width()], d)
}

/// Writes `pred_NNNNN.ppm` per sample into `out_dir`; returns the count.
pub fn export_predictions(net: &Network, samples: &[Sample], out_dir: &Path) -> Result<usize> {
    for (i, s) in samples.iter().enumerate() {
        let pred = predict(net, &s.image)?;
        save_ppm(&out_dir.join(format!("pred_{i:05}.ppm")), &colorize(&pred)?)?;
    }
    Ok(samples.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub cost: Cost,
    pub seconds_per_forward: f64,
}

/// Accounting plus mean eval-mode forward time on a random `h`×`w` input.
pub fn benchmark(cfg: &NetConfig, h: usize, w: usize, reps: usize, seed: u64) -> Result<Benchmark> {
    let cost = count_cost(cfg, h, w)?;
    let mut net = Network::build(cfg.clone(), seed)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let x = Tensor::new([2, 3, h, w], (0..6 * h * w).map(|_| unit_f64(&mut rng)).collect())?;
    net.calibrate_bn(&x)?;
    let one = Tensor::new([1, 3, h, w], x.data()[..3 * h * w].to_vec())?;
    let start = Instant::now();
    for _ in 0..reps.max(1) {
        net.logits(&one, BnMode::Eval)?;
    }
    Ok(Benchmark {
        cost,
        seconds_per_forward: start.elapsed().as_secs_f64() / reps.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SceneSpec;

    fn tiny_run() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("net.stem_channels", "4"),
            ("net.high_channels", "4"),
            ("net.low_channels", "8"),
            ("net.head_channels", "4"),
            ("lmfm.branch_channels", "2"),
            ("lmfm.scales", "1,2,global"),
            ("train.crop", "32"),
            ("train.batch_size", "2"),
            ("train.iterations", "3"),
            ("data.height", "40"),
            ("data.width", "48"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    fn data(c: &RunConfig, n: usize) -> Vec<Sample> {
        crate::datagen::generate(&c.data, 0, n).unwrap()
    }

    #[test]
    fn crop_flip_keeps_pixel_label_pairs() {
        let (h, w) = (5, 7);
        let enc: Vec<f64> = (0..3 * h * w).map(|i| i as f64).collect();
        let image = Tensor::new([3, h, w], enc).unwrap();
        let label = LabelMap::new(h, w, 200, 255, (0..(h * w) as u32).collect()).unwrap();
        for flip in [false, true] {
            let (img, lbl) = crop_flip(&image, &label, 1, 2, 4, flip).unwrap();
            for p in 0..16 {
                // channel 0 encodes the flat source index, as does the label
                assert_eq!(img[p], lbl.labels()[p] as f64);
                assert_eq!(img[32 + p], (2 * h * w) as f64 + lbl.labels()[p] as f64);
            }
        }
        let (_, l) = crop_flip(&image, &label, 0, 0, 2, true).unwrap();
        assert_eq!(l.labels(), &[1, 0, 8, 7]);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut c = tiny_run();
        c.train.iterations = 0;
        let out = train(&c, &data(&c, 2), |_, _| Ok(())).unwrap();
        let init = Network::build(c.net.clone(), c.train.seed).unwrap();
        assert_eq!(out.network, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn same_seed_same_trace() {
        let c = tiny_run();
        let d = data(&c, 4);
        let a = train(&c, &d, |_, _| Ok(())).unwrap();
        let b = train(&c, &d, |_, _| Ok(())).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.network, b.network);
        assert_eq!(a.trace[0].lr, c.train.lr);
    }

    #[test]
    fn huge_lr_reports_divergence() {
        let mut c = tiny_run();
        c.train.lr = 1e200;
        c.train.iterations = 5;
        let r = train(&c, &data(&c, 2), |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn evaluate_reports_metrics() {
        let c = tiny_run();
        let spec = SceneSpec { height: 32, width: 32, ..c.data.clone() };
        let samples = crate::datagen::generate(&spec, 0, 2).unwrap();
        let out = train(&c, &data(&c, 2), |_, _| Ok(())).unwrap();
        let r = evaluate(&out.network, &samples, 2).unwrap();
        assert_eq!(r.confusion.total(), 2 * 32 * 32);
        assert!(r.render().unwrap().contains("miou = "));
        assert!(evaluate(&out.network, &[], 2).is_err());
    }
}
