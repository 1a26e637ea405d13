//! Finite-difference checks for every differentiable op and the composite
//! objectives built from them.
//!
//! Each case maps a list of input tensors to a scalar. Non-scalar outputs
//! are projected onto a fixed random tensor first. The analytic gradient
//! from the tape is compared against central differences with
//! [`max_rel_error`].

use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::bcl::BclConfig;
use crate::error::Result;
use crate::gradcheck::{finite_diff_at, max_rel_error, Step};
use crate::labels::LabelMap;
use crate::lmfm::{Connection, Lmfm, LmfmConfig, Scale};
use crate::network::{NetConfig, Network};
use crate::ops::norm::{BatchNormParams, BnMode};
use crate::params::{unit_f64, Ctx, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const STEP: Step = Step::Relative(1e-6);

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    /// Coordinates compared, over all instances.
    pub checked: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Value and analytic gradient of every input.
type Objective<'a> = Box<dyn Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> + 'a>;

struct Gen(Xoshiro256StarStar);

impl Gen {
    fn new(seed: u64) -> Self {
        Gen(Xoshiro256StarStar::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        unit_f64(&mut self.0)
    }

    fn seed(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.unit() * n as f64) as usize).min(n - 1)
    }

    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * self.unit()).collect()).unwrap()
    }

    /// Uniform in `±[0.1, 1]`, clear of ReLU's kink.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let mut t = self.tensor(shape, -1.0, 1.0);
        for v in t.data_mut() {
            *v += 0.1f64.copysign(*v);
            *v /= 1.1;
        }
        t
    }

    fn labels(&mut self, n: usize, h: usize, w: usize, m: usize, ignore_rate: f64) -> Vec<LabelMap> {
        (0..n)
            .map(|_| {
                let l = (0..h * w)
                    .map(|_| {
                        if self.unit() < ignore_rate {
                            255
                        } else {
                            self.below(m) as u32
                        }
                    })
                    .collect();
                LabelMap::new(h, w, m, 255, l).unwrap()
            })
            .collect()
    }

    /// Piecewise-constant maps made of random vertical and horizontal bands.
    fn blocky_labels(&mut self, n: usize, h: usize, w: usize, m: usize) -> Vec<LabelMap> {
        (0..n)
            .map(|_| {
                let cut_x = 1 + self.below(w - 1);
                let cut_y = 1 + self.below(h - 1);
                let cls: Vec<u32> = (0..4).map(|_| self.below(m) as u32).collect();
                let l = (0..h * w)
                    .map(|p| cls[(p / w >= cut_y) as usize * 2 + (p % w >= cut_x) as usize])
                    .collect();
                LabelMap::new(h, w, m, 255, l).unwrap()
            })
            .collect()
    }
}

/// Builds a tape objective: inputs become leaves, `f` returns any var,
/// which is projected onto `proj` unless it is already a scalar.
fn tape_objective<'a, F>(f: F, proj: Option<Tensor>) -> Objective<'a>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'a,
{
    Box::new(move |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let mut y = f(&mut tape, &vars)?;
        if let Some(p) = &proj {
            let r = tape.constant(p.clone());
            let prod = tape.mul(y, r)?;
            y = tape.sum(prod)?;
        }
        let value = tape.value(y).item()?;
        tape.backward(y)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((value, grads))
    })
}

/// Compares analytic and numeric gradients. `limit` caps the number of
/// coordinates probed per input (chosen at random).
fn compare(obj: &Objective<'_>, inputs: &[Tensor], limit: Option<usize>, g: &mut Gen) -> Result<(usize, f64)> {
    let (_, analytic) = obj(inputs)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let idx: Vec<usize> = match limit {
            Some(k) if k < n => (0..k).map(|_| g.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let numeric = finite_diff_at(
            |probe| {
                let mut all = inputs.to_vec();
                all[i] = probe.clone();
                Ok(obj(&all)?.0)
            },
            x,
            STEP,
            &idx,
        )?;
        let a: Vec<f64> = idx.iter().map(|&j| analytic[i][j]).collect();
        worst = worst.max(max_rel_error(&a, &numeric));
        checked += idx.len();
    }
    Ok((checked, worst))
}

/// Objective over a parameter store: the first input is `x`, the rest are
/// the trainable tensors of `template` in store order.
fn store_objective<'a, F>(template: ParamStore, mode: BnMode, f: F) -> Objective<'a>
where
    F: Fn(&mut Ctx<'_>, Var) -> Result<Var> + 'a,
{
    Box::new(move |inputs: &[Tensor]| {
        let mut store = template.clone();
        let names: Vec<String> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for (name, t) in names.iter().zip(&inputs[1..]) {
            *store.get_mut(name)? = t.clone();
        }
        let mut tape = Tape::new();
        let (value, xg, bind) = {
            let mut ctx = Ctx::new(&mut tape, &store, mode, true);
            let x = ctx.tape.param(inputs[0].clone());
            let y = f(&mut ctx, x)?;
            let bind = ctx.finish();
            (y, x, bind)
        };
        let loss = value;
        let v = tape.value(loss).item()?;
        tape.backward(loss)?;
        let mut grads = vec![tape.grad(xg).map(<[f64]>::to_vec).unwrap_or_default()];
        grads.extend(bind.gradients(&tape, &store).into_iter().map(|(_, g)| g));
        Ok((v, grads))
    })
}

fn store_inputs(x: Tensor, store: &ParamStore) -> Vec<Tensor> {
    let mut v = vec![x];
    v.extend(store.iter().filter(|(_, e)| e.trainable).map(|(_, e)| e.tensor.clone()));
    v
}

/// Random non-trivial BN affine parameters so gradients through gamma and
/// beta are not degenerate.
fn jitter_bn(store: &mut ParamStore, g: &mut Gen) {
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _)| n.ends_with(".gamma") || n.ends_with(".beta"))
        .map(|(n, _)| n.to_string())
        .collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        let c = t.numel();
        *t = if n.ends_with(".gamma") {
            g.tensor(&[c], 0.5, 1.5)
        } else {
            g.tensor(&[c], -0.5, 0.5)
        };
    }
}

struct Case<'a> {
    name: &'a str,
    limit: Option<usize>,
    /// Builds one instance: objective and its inputs.
    make: Box<dyn Fn(&mut Gen) -> Result<(Objective<'static>, Vec<Tensor>)> + 'a>,
}

fn proj(g: &mut Gen, shape: &[usize]) -> Option<Tensor> {
    Some(g.tensor(shape, -1.0, 1.0))
}

fn lmfm_case(conn: Connection) -> impl Fn(&mut Gen) -> Result<(Objective<'static>, Vec<Tensor>)> {
    move |g: &mut Gen| {
        let cfg = LmfmConfig {
            in_channels: 4,
            branch_channels: 2,
            out_channels: 3,
            scales: vec![Scale::Factor(1), Scale::Factor(2), Scale::Factor(4), Scale::Global],
            connection: conn,
        };
        let block = Lmfm::new(cfg, "m")?;
        let mut store = ParamStore::new();
        block.init(&mut store, g.seed())?;
        jitter_bn(&mut store, g);
        let x = g.tensor(&[2, 4, 8, 8], -1.0, 1.0);
        let r = g.tensor(&[2, 3, 8, 8], -1.0, 1.0);
        let inputs = store_inputs(x, &store);
        let obj = store_objective(store, BnMode::Train, move |ctx, x| {
            let y = block.forward(ctx, x)?;
            let rc = ctx.tape.constant(r.clone());
            let p = ctx.tape.mul(y, rc)?;
            ctx.tape.sum(p)
        });
        Ok((obj, inputs))
    }
}

fn small_net(scales: Vec<Scale>, connection: Connection) -> NetConfig {
    let mut c = NetConfig::new(3);
    c.stem_channels = 3;
    c.high_channels = 3;
    c.low_channels = 4;
    c.head_channels = 3;
    c.lmfm = LmfmConfig {
        in_channels: 4,
        branch_channels: 2,
        out_channels: 3,
        scales,
        connection,
    };
    c
}

/// Full forward plus total loss on `[1, 3, 32, 32]`, M = 3. Eval mode
/// first calibrates batch norm on a random batch of two.
fn network_case(g: &mut Gen, cfg: NetConfig, mode: BnMode) -> Result<(Objective<'static>, Vec<Tensor>)> {
    let mut net = Network::build(cfg, g.seed())?;
    jitter_bn(&mut net.params, g);
    if mode == BnMode::Eval {
        net.calibrate_bn(&g.tensor(&[2, 3, 32, 32], 0.0, 1.0))?;
    }
    let labels = g.blocky_labels(1, 32, 32, 3);
    let x = g.tensor(&[1, 3, 32, 32], 0.0, 1.0);
    let inputs = store_inputs(x, &net.params);
    let bcl = BclConfig {
        min_kept: 16,
        ..BclConfig::default()
    };
    // upsampled logits repeat along clamped edges; a fixed offset keeps the
    // hard-pixel ranking free of exact ties
    let offset = g.tensor(&[1, 3, 32, 32], -0.05, 0.05);
    let store = net.params.clone();
    let obj = store_objective(store, mode, move |ctx, x| {
        let logits = net.forward(ctx, x)?;
        let off = ctx.tape.constant(offset.clone());
        let logits = ctx.tape.add(logits, off)?;
        Ok(ctx.tape.total_loss(logits, &labels, &bcl)?.total)
    });
    Ok((obj, inputs))
}

fn cases() -> Vec<Case<'static>> {
    let mut v: Vec<Case<'static>> = Vec::new();
    let mut add = |name: &'static str, limit: Option<usize>, make: Box<dyn Fn(&mut Gen) -> Result<(Objective<'static>, Vec<Tensor>)>>| {
        v.push(Case { name, limit, make })
    };

    add("add", None, Box::new(|g| {
        let s = [2, 3, 4, 4];
        let ins = vec![g.tensor(&s, -1.0, 1.0), g.tensor(&s, -1.0, 1.0)];
        Ok((tape_objective(|t, v| t.add(v[0], v[1]), proj(g, &s)), ins))
    }));
    add("mul", None, Box::new(|g| {
        let s = [2, 3, 4, 4];
        let ins = vec![g.tensor(&s, -1.0, 1.0), g.tensor(&s, -1.0, 1.0)];
        Ok((tape_objective(|t, v| t.mul(v[0], v[1]), proj(g, &s)), ins))
    }));
    add("scale", None, Box::new(|g| {
        let s = [2, 4, 3, 3];
        let k = g.tensor(&[1], -2.0, 2.0).data()[0];
        Ok((tape_objective(move |t, v| t.scale(v[0], k), proj(g, &s)), vec![g.tensor(&s, -1.0, 1.0)]))
    }));
    add("sum", None, Box::new(|g| {
        Ok((tape_objective(|t, v| t.sum(v[0]), None), vec![g.tensor(&[2, 4, 5, 5], -1.0, 1.0)]))
    }));
    add("mean", None, Box::new(|g| {
        Ok((tape_objective(|t, v| t.mean(v[0]), None), vec![g.tensor(&[2, 4, 5, 5], -1.0, 1.0)]))
    }));
    add("relu", None, Box::new(|g| {
        let s = [2, 4, 6, 6];
        Ok((tape_objective(|t, v| t.relu(v[0]), proj(g, &s)), vec![g.away_from_zero(&s)]))
    }));
    add("conv2d_3x3_s1_p1_bias", None, Box::new(|g| {
        let ins = vec![
            g.tensor(&[2, 3, 8, 8], -1.0, 1.0),
            g.tensor(&[4, 3, 3, 3], -1.0, 1.0),
            g.tensor(&[4], -1.0, 1.0),
        ];
        Ok((tape_objective(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1), proj(g, &[2, 4, 8, 8])), ins))
    }));
    add("conv2d_3x3_s2_p1", None, Box::new(|g| {
        let ins = vec![g.tensor(&[2, 4, 16, 16], -1.0, 1.0), g.tensor(&[3, 4, 3, 3], -1.0, 1.0)];
        Ok((tape_objective(|t, v| t.conv2d(v[0], v[1], None, 2, 1), proj(g, &[2, 3, 8, 8])), ins))
    }));
    add("conv2d_1x1_bias", None, Box::new(|g| {
        let ins = vec![
            g.tensor(&[2, 4, 5, 7], -1.0, 1.0),
            g.tensor(&[2, 4, 1, 1], -1.0, 1.0),
            g.tensor(&[2], -1.0, 1.0),
        ];
        Ok((tape_objective(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0), proj(g, &[2, 2, 5, 7])), ins))
    }));
    add("avg_pool2d", None, Box::new(|g| {
        let k = [2usize, 4][g.below(2)];
        let ins = vec![g.tensor(&[2, 4, 16, 16], -1.0, 1.0)];
        Ok((tape_objective(move |t, v| t.avg_pool2d(v[0], k, k), proj(g, &[2, 4, 16 / k, 16 / k])), ins))
    }));
    add("global_avg_pool", None, Box::new(|g| {
        let ins = vec![g.tensor(&[2, 4, 6, 5], -1.0, 1.0)];
        Ok((tape_objective(|t, v| t.global_avg_pool(v[0]), proj(g, &[2, 4, 1, 1])), ins))
    }));
    add("bilinear_upsample", None, Box::new(|g| {
        let ins = vec![g.tensor(&[2, 3, 3, 4], -1.0, 1.0)];
        Ok((tape_objective(|t, v| t.bilinear_upsample(v[0], (12, 16)), proj(g, &[2, 3, 12, 16])), ins))
    }));
    add("batch_norm_train", None, Box::new(|g| {
        let ins = vec![
            g.tensor(&[2, 4, 5, 5], -1.0, 2.0),
            g.tensor(&[4], 0.5, 1.5),
            g.tensor(&[4], -0.5, 0.5),
        ];
        let p = BatchNormParams::new(4);
        Ok((
            tape_objective(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], &p, BnMode::Train)?.0), proj(g, &[2, 4, 5, 5])),
            ins,
        ))
    }));
    add("batch_norm_eval", None, Box::new(|g| {
        let ins = vec![
            g.tensor(&[2, 4, 5, 5], -1.0, 2.0),
            g.tensor(&[4], 0.5, 1.5),
            g.tensor(&[4], -0.5, 0.5),
        ];
        let mut p = BatchNormParams::new(4);
        p.running_mean = g.tensor(&[4], -0.5, 0.5);
        p.running_var = g.tensor(&[4], 0.5, 2.0);
        p.updates = 3;
        Ok((
            tape_objective(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], &p, BnMode::Eval)?.0), proj(g, &[2, 4, 5, 5])),
            ins,
        ))
    }));
    add("concat_channels", None, Box::new(|g| {
        let ins = vec![g.tensor(&[2, 1, 4, 4], -1.0, 1.0), g.tensor(&[2, 3, 4, 4], -1.0, 1.0)];
        Ok((tape_objective(|t, v| t.concat_channels(&[v[0], v[1]]), proj(g, &[2, 4, 4, 4])), ins))
    }));
    add("softmax_channels", None, Box::new(|g| {
        let ins = vec![g.tensor(&[2, 4, 5, 5], -3.0, 3.0)];
        Ok((tape_objective(|t, v| t.softmax_channels(v[0]), proj(g, &[2, 4, 5, 5])), ins))
    }));
    add("cross_entropy_map", None, Box::new(|g| {
        let labels = g.labels(2, 5, 6, 4, 0.2);
        let ins = vec![g.tensor(&[2, 4, 5, 6], 0.05, 1.0)];
        Ok((tape_objective(move |t, v| t.cross_entropy_map(v[0], &labels), proj(g, &[2, 5, 6])), ins))
    }));
    add("masked_mean_ce", None, Box::new(|g| {
        let labels = g.labels(2, 6, 6, 3, 0.3);
        let ins = vec![g.tensor(&[2, 6, 6], 0.0, 3.0)];
        Ok((tape_objective(move |t, v| t.masked_mean_ce(v[0], &labels), None), ins))
    }));
    add("select_mean", None, Box::new(|g| {
        let idx: Vec<usize> = (0..10).map(|_| g.below(2 * 5 * 5)).collect();
        let ins = vec![g.tensor(&[2, 5, 5], -1.0, 1.0)];
        Ok((tape_objective(move |t, v| t.select_mean(v[0], idx.clone(), 7.0), None), ins))
    }));
    add("lmfm_interval", None, Box::new(lmfm_case(Connection::Interval)));
    add("lmfm_cascade", None, Box::new(lmfm_case(Connection::Cascade)));
    add("boundary_loss", None, Box::new(|g| {
        let s = [1usize, 2, 4][g.below(3)];
        let cfg = BclConfig {
            step: s,
            min_kept: 4,
            ..BclConfig::default()
        };
        let labels = g.blocky_labels(2, 12, 12, 3);
        let ins = vec![g.tensor(&[2, 3, 12, 12], -2.0, 2.0)];
        Ok((
            tape_objective(
                move |t, v| {
                    let p = t.softmax_channels(v[0])?;
                    Ok(t.boundary_loss(p, &labels, &cfg)?.0.value)
                },
                None,
            ),
            ins,
        ))
    }));
    add("total_loss", None, Box::new(|g| {
        let cfg = BclConfig {
            step: 1 + g.below(2),
            min_kept: 8,
            ..BclConfig::default()
        };
        let labels = g.blocky_labels(2, 12, 12, 4);
        let ins = vec![g.tensor(&[2, 4, 12, 12], -2.0, 2.0)];
        Ok((tape_objective(move |t, v| Ok(t.total_loss(v[0], &labels, &cfg)?.total), None), ins))
    }));
    add("network_total_loss_train", Some(6), Box::new(|g| {
        // N=1 at 32x32 leaves a 2x2 map at 1/16, so only unpooled branches
        // can use training-mode batch norm
        let cfg = small_net(vec![Scale::Factor(1), Scale::Global], Connection::Cascade);
        network_case(g, cfg, BnMode::Train)
    }));
    add("network_total_loss_eval", Some(6), Box::new(|g| {
        let cfg = small_net(vec![Scale::Factor(1), Scale::Factor(2), Scale::Global], Connection::Interval);
        network_case(g, cfg, BnMode::Eval)
    }));
    v
}

/// Names of every case, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case on `instances` random instances derived from `seed`.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<Vec<CaseResult>> {
    cases()
        .iter()
        .enumerate()
        .map(|(k, case)| {
            let mut checked = 0;
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut g = Gen::new(seed ^ ((k as u64) << 32) ^ i as u64);
                let (obj, inputs) = (case.make)(&mut g)?;
                let (c, e) = compare(&obj, &inputs, case.limit, &mut g)?;
                checked += c;
                worst = worst.max(e);
            }
            Ok(CaseResult {
                name: case.name.to_string(),
                instances,
                checked,
                max_rel_error: worst,
            })
        })
        .collect()
}
