//! Synthetic scenes with exactly known labels, and their on-disk format.
//!
//! Each sample paints a random list of rectangles, circles and stripes onto
//! a background (class 0); later shapes cover earlier ones. The image is the
//! class color plus clamped Gaussian noise. Sample `i` of a spec depends only
//! on `(seed, i)`.
//!
//! Files: images as binary PPM (P6), labels as binary PGM (P5), both with
//! maxval 255, and a text manifest listing `image label` path pairs.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, DEFAULT_IGNORE_INDEX};
use crate::params::unit_f64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Stripe,
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Circle => "circle",
            ShapeKind::Stripe => "stripe",
        })
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rectangle" | "rect" => Ok(ShapeKind::Rectangle),
            "circle" => Ok(ShapeKind::Circle),
            "stripe" => Ok(ShapeKind::Stripe),
            other => Err(Error::Config(format!("unknown shape kind {other:?}"))),
        }
    }
}

/// Default class colors. Class 0 is the background.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.10, 0.10, 0.10],
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.25, 0.35, 0.90],
    [0.90, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub kinds: Vec<ShapeKind>,
    pub colors: Vec<[f64; 3]>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            num_classes: 4,
            shapes_min: 2,
            shapes_max: 5,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::Stripe],
            colors: PALETTE.to_vec(),
            noise_sigma: 0.08,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: LabelMap,
}

fn uniform_usize(rng: &mut Xoshiro256StarStar, lo: usize, hi: usize) -> usize {
    // inclusive range
    lo + ((unit_f64(rng) * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return c(format!("zero-area scene {}x{}", self.height, self.width));
        }
        if self.num_classes < 2 {
            return c("at least 2 classes are required (class 0 is background)".into());
        }
        if self.num_classes > self.colors.len() {
            return c(format!(
                "{} classes but only {} colors",
                self.num_classes,
                self.colors.len()
            ));
        }
        if self.num_classes > DEFAULT_IGNORE_INDEX as usize {
            return c(format!("{} classes do not fit in 8-bit labels", self.num_classes));
        }
        if self.shapes_min > self.shapes_max {
            return c(format!(
                "shapes_min {} > shapes_max {}",
                self.shapes_min, self.shapes_max
            ));
        }
        if self.shapes_max > 0 && self.kinds.is_empty() {
            return c("no shape kinds enabled".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return c(format!("noise sigma {} must be finite and >= 0", self.noise_sigma));
        }
        let colors = &self.colors[..self.num_classes];
        for col in colors {
            if col.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return c(format!("color {col:?} outside [0, 1]"));
            }
        }
        for (i, a) in colors.iter().enumerate() {
            for (j, b) in colors.iter().enumerate().skip(i + 1) {
                let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                if d < 0.1 {
                    return c(format!("colors of classes {i} and {j} differ by only {d}"));
                }
            }
        }
        Ok(())
    }

    /// Canonical `key = value` description, hashed into manifests.
    pub fn canonical(&self) -> String {
        let kinds: Vec<String> = self.kinds.iter().map(|k| k.to_string()).collect();
        let colors: Vec<String> = self
            .colors
            .iter()
            .map(|c| format!("{:?}/{:?}/{:?}", c[0], c[1], c[2]))
            .collect();
        [
            format!("data.height = {}", self.height),
            format!("data.width = {}", self.width),
            format!("data.num_classes = {}", self.num_classes),
            format!("data.shapes_min = {}", self.shapes_min),
            format!("data.shapes_max = {}", self.shapes_max),
            format!("data.kinds = {}", kinds.join(",")),
            format!("data.colors = {}", colors.join(",")),
            format!("data.noise_sigma = {:?}", self.noise_sigma),
            format!("data.seed = {}", self.seed),
        ]
        .join("\n")
            + "\n"
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn rng_for(&self, index: u64) -> Xoshiro256StarStar {
        Xoshiro256StarStar::seed_from_u64(
            self.seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )
    }

    fn paint(&self, rng: &mut Xoshiro256StarStar) -> Vec<u32> {
        let (h, w) = (self.height, self.width);
        let mut labels = vec![0u32; h * w];
        let count = uniform_usize(rng, self.shapes_min, self.shapes_max);
        for _ in 0..count {
            let class = uniform_usize(rng, 1, self.num_classes - 1) as u32;
            let kind = self.kinds[uniform_usize(rng, 0, self.kinds.len() - 1)];
            match kind {
                ShapeKind::Rectangle => {
                    let rh = uniform_usize(rng, (h / 8).max(1), (h / 2).max(1));
                    let rw = uniform_usize(rng, (w / 8).max(1), (w / 2).max(1));
                    let y0 = uniform_usize(rng, 0, h - 1);
                    let x0 = uniform_usize(rng, 0, w - 1);
                    for y in y0..(y0 + rh).min(h) {
                        labels[y * w + x0..y * w + (x0 + rw).min(w)].fill(class);
                    }
                }
                ShapeKind::Circle => {
                    let m = h.min(w);
                    let r = uniform_usize(rng, (m / 16).max(1), (m / 4).max(1)) as f64;
                    let cy = unit_f64(rng) * h as f64;
                    let cx = unit_f64(rng) * w as f64;
                    for y in 0..h {
                        for x in 0..w {
                            let dy = y as f64 + 0.5 - cy;
                            let dx = x as f64 + 0.5 - cx;
                            if dy * dy + dx * dx <= r * r {
                                labels[y * w + x] = class;
                            }
                        }
                    }
                }
                ShapeKind::Stripe => {
                    let vertical = unit_f64(rng) < 0.5;
                    let extent = if vertical { w } else { h };
                    let t = uniform_usize(rng, (extent / 16).max(1), (extent / 6).max(1));
                    let p = uniform_usize(rng, 0, extent - 1);
                    for q in p..(p + t).min(extent) {
                        if vertical {
                            for y in 0..h {
                                labels[y * w + q] = class;
                            }
                        } else {
                            labels[q * w..(q + 1) * w].fill(class);
                        }
                    }
                }
            }
        }
        labels
    }

    /// Sample number `index`.
    pub fn sample(&self, index: u64) -> Result<Sample> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let mut rng = self.rng_for(index);
        // Redraw until some background survives.
        let labels = loop {
            let l = self.paint(&mut rng);
            if l.contains(&0) {
                break l;
            }
        };
        let plane = h * w;
        let mut image = vec![0.0; 3 * plane];
        let mut spare: Option<f64> = None;
        let mut gauss = |rng: &mut Xoshiro256StarStar| {
            if let Some(z) = spare.take() {
                return z;
            }
            let u1 = 1.0 - unit_f64(rng);
            let u2 = unit_f64(rng);
            let r = (-2.0 * u1.ln()).sqrt();
            spare = Some(r * (TAU * u2).sin());
            r * (TAU * u2).cos()
        };
        for (p, &l) in labels.iter().enumerate() {
            for ch in 0..3 {
                let base = self.colors[l as usize][ch];
                let v = if self.noise_sigma > 0.0 {
                    base + self.noise_sigma * gauss(&mut rng)
                } else {
                    base
                };
                image[ch * plane + p] = v.clamp(0.0, 1.0);
            }
        }
        Ok(Sample {
            image: Tensor::new([3, h, w], image)?,
            label: LabelMap::new(h, w, self.num_classes, DEFAULT_IGNORE_INDEX, labels)?,
        })
    }
}

/// Samples `start..start + count`.
pub fn generate(spec: &SceneSpec, start: u64, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..count as u64).map(|i| spec.sample(start + i)).collect()
}

/// Pixels with a non-ignored 4-neighbor of a different class.
pub fn boundary_mask(label: &LabelMap) -> Vec<bool> {
    let (h, w) = (label.height(), label.width());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if label.is_ignored(y, x) {
                continue;
            }
            let v = label.get(y, x);
            let differs = |yy: usize, xx: usize| !label.is_ignored(yy, xx) && label.get(yy, xx) != v;
            out[y * w + x] = (y > 0 && differs(y - 1, x))
                || (y + 1 < h && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < w && differs(y, x + 1));
        }
    }
    out
}

// ---------------------------------------------------------------- netpbm

/// Round half up from `[0, 1]` to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("PPM needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = header("P6", w, h);
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(label: &LabelMap) -> Result<Vec<u8>> {
    let mut out = header("P5", label.width(), label.height());
    for &v in label.labels() {
        if v > 255 {
            return Err(Error::LabelOutOfRange {
                label: v,
                classes: label.num_classes(),
            });
        }
        out.push(v as u8);
    }
    Ok(out)
}

/// Parsed netpbm header plus the raw payload.
struct Pnm<'a> {
    width: usize,
    height: usize,
    payload: &'a [u8],
}

fn parse_pnm<'a>(buf: &'a [u8], want: &str) -> Result<Pnm<'a>> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<&'a str> {
        loop {
            while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < buf.len() && buf[*pos] == b'#' {
                while *pos < buf.len() && buf[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::MalformedHeader("unexpected end of header".into()));
        }
        std::str::from_utf8(&buf[start..*pos])
            .map_err(|_| Error::MalformedHeader("non-ASCII header token".into()))
    };
    let magic = token(&mut pos)?;
    if magic != want {
        return Err(Error::MalformedHeader(format!(
            "expected {want}, found {:?}",
            magic.chars().take(8).collect::<String>()
        )));
    }
    let num = |pos: &mut usize, what: &str| -> Result<u32> {
        let t = token(pos)?;
        t.parse::<u32>()
            .map_err(|_| Error::MalformedHeader(format!("bad {what} {t:?}")))
    };
    let width = num(&mut pos, "width")? as usize;
    let height = num(&mut pos, "height")? as usize;
    let maxval = num(&mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("missing separator after maxval".into()));
    }
    Ok(Pnm {
        width,
        height,
        payload: &buf[pos + 1..],
    })
}

fn exact_payload<'a>(p: &Pnm<'a>, channels: usize) -> Result<&'a [u8]> {
    let expected = p.width * p.height * channels;
    if p.payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: p.payload.len(),
        });
    }
    if p.payload.len() > expected {
        return Err(Error::MalformedHeader(format!(
            "{} bytes after the pixel data",
            p.payload.len() - expected
        )));
    }
    Ok(p.payload)
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    let p = parse_pnm(buf, "P6")?;
    let data = exact_payload(&p, 3)?;
    let plane = p.width * p.height;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new([3, p.height, p.width], out)
}

pub fn decode_pgm(buf: &[u8], num_classes: usize) -> Result<LabelMap> {
    let p = parse_pnm(buf, "P5")?;
    let data = exact_payload(&p, 1)?;
    LabelMap::new(
        p.height,
        p.width,
        num_classes,
        DEFAULT_IGNORE_INDEX,
        data.iter().map(|&v| v as u32).collect(),
    )
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_sample(image_path: &Path, label_path: &Path, s: &Sample) -> Result<()> {
    write(image_path, &encode_ppm(&s.image)?)?;
    write(label_path, &encode_pgm(&s.label)?)
}

pub fn load_sample(image_path: &Path, label_path: &Path, num_classes: usize) -> Result<Sample> {
    let image = decode_ppm(&read(image_path)?)?;
    let label = decode_pgm(&read(label_path)?, num_classes)?;
    if image.shape()[1..] != [label.height(), label.width()] {
        return Err(Error::Shape(format!(
            "image {:?} and label {}x{} differ in size",
            image.shape(),
            label.height(),
            label.width()
        )));
    }
    Ok(Sample { image, label })
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

// -------------------------------------------------------------- manifest

const MANIFEST_TAG: &str = "# bcmf-manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub digest: String,
    pub num_classes: usize,
    /// `(image, label)` paths relative to `root`.
    pub entries: Vec<(PathBuf, PathBuf)>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::EmptyManifest(path.to_path_buf()))?;
        let rest = head.strip_prefix(MANIFEST_TAG).ok_or_else(|| {
            Error::MalformedHeader(format!("{}: missing manifest header", path.display()))
        })?;
        let mut digest = None;
        let mut classes = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("digest", v)) => digest = Some(v.to_string()),
                Some(("classes", v)) => classes = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(digest), Some(num_classes)) = (digest, classes) else {
            return Err(Error::MalformedHeader(format!(
                "{}: manifest header needs digest= and classes=",
                path.display()
            )));
        };
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) => entries.push((PathBuf::from(a), PathBuf::from(b))),
                _ => {
                    return Err(Error::MalformedHeader(format!(
                        "{}:{}: expected `image label`",
                        path.display(),
                        n + 2
                    )))
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::EmptyManifest(path.to_path_buf()));
        }
        Ok(Manifest {
            digest,
            num_classes,
            entries,
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{MANIFEST_TAG} digest={} classes={}\n",
            self.digest, self.num_classes
        );
        for (a, b) in &self.entries {
            s.push_str(&format!("{} {}\n", a.display(), b.display()));
        }
        s
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|(a, b)| load_sample(&self.root.join(a), &self.root.join(b), self.num_classes))
            .collect()
    }
}

/// Writes samples `start..start + count` under `dir` and returns the
/// manifest path (`dir/manifest.txt`).
pub fn write_dataset(dir: &Path, spec: &SceneSpec, start: u64, count: usize) -> Result<PathBuf> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::EmptyManifest(dir.join("manifest.txt")));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = spec.sample(start + i)?;
        let img = PathBuf::from(format!("images/{:05}.ppm", start + i));
        let lbl = PathBuf::from(format!("labels/{:05}.pgm", start + i));
        save_sample(&dir.join(&img), &dir.join(&lbl), &s)?;
        entries.push((img, lbl));
    }
    let m = Manifest {
        digest: spec.digest(),
        num_classes: spec.num_classes,
        entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.txt");
    write(&path, m.render().as_bytes())?;
    Ok(path)
}
