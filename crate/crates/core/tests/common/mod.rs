//! Direct-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use bcmf::{LabelMap, Tensor};
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub struct Gen(Xoshiro256StarStar);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Uniform in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.uniform(-2.0, 2.0)).collect()).unwrap()
    }

    pub fn labels(&mut self, h: usize, w: usize, m: usize, ignore_rate: f64) -> LabelMap {
        let v = (0..h * w)
            .map(|_| {
                if self.unit() < ignore_rate {
                    255
                } else {
                    self.range(0, m - 1) as u32
                }
            })
            .collect();
        LabelMap::new(h, w, m, 255, v).unwrap()
    }
}

fn at(t: &Tensor, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Six nested loops; bias first, then `(ci, ky, kx)` order.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for bn in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at(w, o, c, ky, kx) * at(x, bn, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn avg_pool2d(x: &Tensor, k: usize, stride: usize) -> Vec<f64> {
    let s = x.shape();
    let (oh, ow) = ((s[2] - k) / stride + 1, (s[3] - k) / stride + 1);
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += at(x, n, c, oy * stride + ky, ox * stride + kx);
                        }
                    }
                    out.push(acc / (k * k) as f64);
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            let mut acc = 0.0;
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    acc += at(x, n, c, y, xx);
                }
            }
            out.push(acc / (s[2] * s[3]) as f64);
        }
    }
    out
}

/// Pixels that are `>=` every neighbour in the clipped window.
pub fn nms(map: &[f64], h: usize, w: usize, k: usize) -> Vec<(usize, f64)> {
    let r = (k / 2) as isize;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v = map[(y * w as isize + x) as usize];
            let mut keep = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && map[(yy * w as isize + xx) as usize] > v {
                        keep = false;
                    }
                }
            }
            if keep {
                out.push(((y * w as isize + x) as usize, v));
            }
        }
    }
    out
}

/// Chebyshev distance from `(y, x)` to the nearest pixel whose 4-neighbour
/// carries a different label.
pub fn distance_to_boundary(lm: &LabelMap, y: usize, x: usize) -> Option<usize> {
    let (h, w) = (lm.height(), lm.width());
    let mut best = None;
    for py in 0..h {
        for px in 0..w {
            let c = lm.get(py, px);
            let differs = [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (py as isize + dy, px as isize + dx);
                ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize && lm.get(ny as usize, nx as usize) != c
            });
            if differs {
                let d = y.abs_diff(py).max(x.abs_diff(px));
                best = Some(best.map_or(d, |b: usize| b.min(d)));
            }
        }
    }
    best
}

/// `-ln p[label]` averaged over non-ignored pixels, from raw logits.
pub fn mean_ce(logits: &Tensor, gt: &[LabelMap]) -> f64 {
    let s = logits.shape();
    let (mut sum, mut count) = (0.0, 0usize);
    for (n, lm) in gt.iter().enumerate() {
        for y in 0..s[2] {
            for x in 0..s[3] {
                if lm.is_ignored(y, x) {
                    continue;
                }
                let mx = (0..s[1]).map(|c| at(logits, n, c, y, x)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..s[1]).map(|c| (at(logits, n, c, y, x) - mx).exp()).sum();
                let l = lm.get(y, x) as usize;
                sum += -((at(logits, n, l, y, x) - mx).exp() / z).ln();
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

/// Half-pixel-centre bilinear resize, one output pixel at a time.
pub fn bilinear(x: &Tensor, th: usize, tw: usize) -> Vec<f64> {
    let s = x.shape();
    let tap = |i: usize, src: usize, dst: usize| {
        let u = ((i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = u.floor() as usize;
        (lo, (lo + 1).min(src - 1), u - lo as f64)
    };
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..th {
                let (y0, y1, fy) = tap(i, s[2], th);
                for j in 0..tw {
                    let (x0, x1, fx) = tap(j, s[3], tw);
                    let top = (1.0 - fx) * at(x, n, c, y0, x0) + fx * at(x, n, c, y0, x1);
                    let bottom = (1.0 - fx) * at(x, n, c, y1, x0) + fx * at(x, n, c, y1, x1);
                    out.push((1.0 - fy) * top + fy * bottom);
                }
            }
        }
    }
    out
}
