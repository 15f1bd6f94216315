//! Deterministic synthetic page images with six painted defect classes.
//!
//! Every image is rendered from its own ChaCha stream keyed by the dataset
//! seed and the image index, so any image can be regenerated alone and the
//! order of generation never matters. Each defect is painted from a mask
//! and annotated with the tight bounding box of that mask; defect
//! rectangles never overlap, so a box covers exactly the pixels its defect
//! changed.
//!
//! Layout of a generated dataset:
//!
//! ```text
//! images/NNNNNN.ppm   binary P6
//! labels/NNNNNN.txt   `class_id cx cy w h` per defect, normalized
//! manifest.txt        `NNNNNN split` per image
//! genspec.txt         the generator settings, as a `key = value` file
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::{BBox, CLASS_NAMES};
use crate::config::{format_list, KvFile};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectClass {
    Inkiness = 0,
    Vitium = 1,
    Crease = 2,
    Defaced = 3,
    Patch = 4,
    Signature = 5,
}

impl DefectClass {
    pub const ALL: [DefectClass; 6] = [
        DefectClass::Inkiness,
        DefectClass::Vitium,
        DefectClass::Crease,
        DefectClass::Defaced,
        DefectClass::Patch,
        DefectClass::Signature,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.id()]
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub image_size: usize,
    pub min_defects: usize,
    pub max_defects: usize,
    pub class_weights: [f64; NUM_CLASSES],
    /// Defect sides are log-uniform in `[min_frac, max_frac]` of the image side.
    pub min_frac: f64,
    pub max_frac: f64,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_defects: 1,
            max_defects: 3,
            class_weights: [0.25, 0.1, 0.15, 0.2, 0.1, 0.2],
            min_frac: 0.1,
            max_frac: 0.4,
            seed: 0,
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size must be a positive multiple of 32, got {}", self.image_size));
        }
        if self.min_defects > self.max_defects {
            return bad(format!(
                "min_defects {} exceeds max_defects {}",
                self.min_defects, self.max_defects
            ));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("class weights must be finite and non-negative".into());
        }
        let total: f64 = self.class_weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("class weights must sum to 1, got {total}"));
        }
        if !(self.min_frac > 0.0 && self.min_frac <= self.max_frac && self.max_frac <= 1.0) {
            return bad(format!(
                "need 0 < min_frac <= max_frac <= 1, got {} and {}",
                self.min_frac, self.max_frac
            ));
        }
        if self.min_frac * (self.image_size as f64) < 2.0 {
            return bad("min_frac gives defects under 2 pixels".into());
        }
        let split_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !split_ok(self.train_frac) || !split_ok(self.val_frac) || self.train_frac + self.val_frac > 1.0 + 1e-12 {
            return bad("train_frac and val_frac must be in [0,1] and sum to at most 1".into());
        }
        Ok(())
    }

    /// Weights concentrated on one class.
    pub fn one_class(mut self, class: DefectClass) -> Self {
        self.class_weights = [0.0; NUM_CLASSES];
        self.class_weights[class.id()] = 1.0;
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "min_defects = {}", self.min_defects);
        let _ = writeln!(s, "max_defects = {}", self.max_defects);
        let _ = writeln!(s, "class_weights = {}", format_list(&self.class_weights));
        let _ = writeln!(s, "min_frac = {}", self.min_frac);
        let _ = writeln!(s, "max_frac = {}", self.max_frac);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "train_frac = {}", self.train_frac);
        let _ = writeln!(s, "val_frac = {}", self.val_frac);
        s
    }

    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let d = Self::default();
        let mut spec = Self {
            image_size: kv.take_or("image_size", d.image_size)?,
            min_defects: kv.take_or("min_defects", d.min_defects)?,
            max_defects: kv.take_or("max_defects", d.max_defects)?,
            class_weights: d.class_weights,
            min_frac: kv.take_or("min_frac", d.min_frac)?,
            max_frac: kv.take_or("max_frac", d.max_frac)?,
            seed: kv.take_or("seed", d.seed)?,
            train_frac: kv.take_or("train_frac", d.train_frac)?,
            val_frac: kv.take_or("val_frac", d.val_frac)?,
        };
        if let Some(w) = kv.take_list::<f64>("class_weights")? {
            spec.class_weights = w.try_into().map_err(|w: Vec<f64>| {
                Error::Config(format!("class_weights needs {NUM_CLASSES} values, got {}", w.len()))
            })?;
        }
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        Self::from_kv(KvFile::parse(text, path)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("not a binary PPM: {m}"));
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("magic is not P6"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        pos += 1;
        let len = w * h * 3;
        if bytes.len() < pos + len {
            return Err(bad("truncated pixel data"));
        }
        Ok(Self {
            width: w,
            height: h,
            data: bytes[pos..pos + len].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    /// `(1, 3, H, W)` with values mapped from `0..=255` to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.data[p * 3 + c] as f64 / 127.5 - 1.0
        })
    }
}

fn image_rng(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

const BACKGROUND: u64 = 1;
const DEFECTS: u64 = 2;

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Textured paper with no defects; the same background [`render_image`]
/// paints onto.
pub fn render_background(spec: &GenSpec, index: u64) -> RgbImage {
    let mut rng = image_rng(spec.seed, index, BACKGROUND);
    let s = spec.image_size;
    let base = [
        rng.gen_range(228.0..240.0),
        rng.gen_range(218.0..230.0),
        rng.gen_range(190.0..205.0),
    ];
    let tilt: f64 = rng.gen_range(-8.0..8.0);
    let mut img = RgbImage::new(s, s);
    for y in 0..s {
        let shade = tilt * (y as f64 / s as f64 - 0.5);
        for x in 0..s {
            let n: f64 = rng.gen_range(-5.0..5.0);
            img.set(x, y, base.map(|b| clamp_u8(b + shade + n)));
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn overlaps_with_margin(&self, o: &Rect) -> bool {
        let sep_x = self.x0 + self.w < o.x0 || o.x0 + o.w < self.x0;
        let sep_y = self.y0 + self.h < o.y0 || o.y0 + o.h < self.y0;
        !(sep_x || sep_y)
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..=hi.ln()).exp()
}

fn sample_class(rng: &mut ChaCha8Rng, weights: &[f64; NUM_CLASSES]) -> DefectClass {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last = i;
            acc += w;
            if r < acc {
                return DefectClass::ALL[i];
            }
        }
    }
    DefectClass::ALL[last]
}

/// Pixel mask over a `w × h` rectangle.
struct Mask {
    w: usize,
    h: usize,
    on: Vec<bool>,
}

impl Mask {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            on: vec![false; w * h],
        }
    }

    fn set(&mut self, x: usize, y: usize) {
        if x < self.w && y < self.h {
            self.on[y * self.w + x] = true;
        }
    }

    fn get(&self, x: usize, y: usize) -> bool {
        self.on[y * self.w + x]
    }

    /// Thick segment between two points, by dense sampling.
    fn stroke(&mut self, (ax, ay): (f64, f64), (bx, by): (f64, f64), radius: f64) {
        let steps = ((bx - ax).abs().max((by - ay).abs()) * 2.0).ceil().max(1.0) as usize;
        let r = radius.ceil() as isize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (cx, cy) = (ax + t * (bx - ax), ay + t * (by - ay));
            for dy in -r..=r {
                for dx in -r..=r {
                    let (px, py) = (cx.round() as isize + dx, cy.round() as isize + dy);
                    let (fx, fy) = (px as f64 - cx, py as f64 - cy);
                    if px >= 0 && py >= 0 && fx * fx + fy * fy <= radius * radius + 0.25 {
                        self.set(px as usize, py as usize);
                    }
                }
            }
        }
    }

    /// Inclusive tight bounds `(x0, y0, x1, y1)`, `None` if empty.
    fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }
}

/// Which image edge a cut-out touches.
#[derive(Clone, Copy)]
enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

fn paint_mask(class: DefectClass, w: usize, h: usize, edge: Edge, rng: &mut ChaCha8Rng) -> Mask {
    let mut m = Mask::new(w, h);
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    match class {
        DefectClass::Inkiness => {
            let radius = (w.min(h) as f64 / 6.0).max(0.5);
            m.stroke((0.0, rng.gen_range(0.0..=hf)), (wf, rng.gen_range(0.0..=hf)), radius);
            m.stroke((rng.gen_range(0.0..=wf), 0.0), (rng.gen_range(0.0..=wf), hf), radius);
            for _ in 0..rng.gen_range(0..3) {
                let a = (rng.gen_range(0.0..=wf), rng.gen_range(0.0..=hf));
                let b = (rng.gen_range(0.0..=wf), rng.gen_range(0.0..=hf));
                m.stroke(a, b, radius);
            }
        }
        DefectClass::Vitium => {
            for y in 0..h {
                for x in 0..w {
                    // triangle with its base on the touched edge
                    let (along, depth, span, reach) = match edge {
                        Edge::Left => (y as f64, x as f64, hf, wf),
                        Edge::Right => (y as f64, wf - x as f64, hf, wf),
                        Edge::Top => (x as f64, y as f64, wf, hf),
                        Edge::Bottom => (x as f64, hf - y as f64, wf, hf),
                    };
                    let centered = if span > 0.0 { (2.0 * along / span - 1.0).abs() } else { 0.0 };
                    if depth <= reach * (1.0 - centered) + 0.5 {
                        m.set(x, y);
                    }
                }
            }
        }
        DefectClass::Crease => {
            let radius = if w.min(h) >= 12 { 1.0 } else { 0.5 };
            if rng.gen_bool(0.5) {
                m.stroke((0.0, 0.0), (wf, hf), radius);
            } else {
                m.stroke((0.0, hf), (wf, 0.0), radius);
            }
        }
        DefectClass::Defaced => {
            let (cx, cy) = (wf / 2.0, hf / 2.0);
            let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f64 - cx) / rx;
                    let dy = (y as f64 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        m.set(x, y);
                    }
                }
            }
        }
        DefectClass::Patch | DefectClass::Signature => m.on.fill(true),
    }
    m
}

fn defect_color(
    class: DefectClass,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    bg: [u8; 3],
    rng: &mut ChaCha8Rng,
) -> [u8; 3] {
    let jitter = rng.gen_range(-4.0..4.0);
    let rgb = |r: f64, g: f64, b: f64| [clamp_u8(r + jitter), clamp_u8(g + jitter), clamp_u8(b + jitter)];
    match class {
        DefectClass::Inkiness => rgb(35.0, 35.0, 70.0),
        DefectClass::Vitium => rgb(60.0, 48.0, 40.0),
        DefectClass::Crease => rgb(90.0, 85.0, 80.0),
        DefectClass::Defaced => bg.map(|v| clamp_u8(v as f64 * 0.86 + jitter * 0.5)),
        DefectClass::Patch => {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                rgb(150.0, 150.0, 150.0)
            } else {
                [252, 252, 250]
            }
        }
        DefectClass::Signature => {
            let border = (w / 8).max(1);
            let on_border = x < border || y < border || x + border >= w || y + border >= h;
            let on_motif = x.abs_diff(y) <= border / 2 || (x + y).abs_diff(w - 1) <= border / 2;
            if on_border || on_motif {
                rgb(130.0, 20.0, 25.0)
            } else {
                rgb(200.0, 150.0, 150.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
}

/// Renders image `index` of the dataset described by `spec`.
pub fn render_image(spec: &GenSpec, index: u64) -> Rendered {
    let mut image = render_background(spec, index);
    let mut rng = image_rng(spec.seed, index, DEFECTS);
    let s = spec.image_size;
    let count = rng.gen_range(spec.min_defects..=spec.max_defects);
    let mut placed: Vec<Rect> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..count {
        let class = sample_class(&mut rng, &spec.class_weights);
        for _attempt in 0..100 {
            let side = |rng: &mut ChaCha8Rng| {
                let f = log_uniform(rng, spec.min_frac, spec.max_frac);
                ((f * s as f64).round() as usize).clamp(2, s)
            };
            let w = side(&mut rng);
            let h = if class == DefectClass::Signature { w } else { side(&mut rng) };
            let edge = [Edge::Left, Edge::Right, Edge::Top, Edge::Bottom][rng.gen_range(0..4)];
            let mut x0 = rng.gen_range(0..=s - w);
            let mut y0 = rng.gen_range(0..=s - h);
            if class == DefectClass::Vitium {
                match edge {
                    Edge::Left => x0 = 0,
                    Edge::Right => x0 = s - w,
                    Edge::Top => y0 = 0,
                    Edge::Bottom => y0 = s - h,
                }
            }
            let rect = Rect { x0, y0, w, h };
            if placed.iter().any(|r| r.overlaps_with_margin(&rect)) {
                continue;
            }
            let mask = paint_mask(class, w, h, edge, &mut rng);
            let Some((bx0, by0, bx1, by1)) = mask.bounds() else {
                continue;
            };
            for y in 0..h {
                for x in 0..w {
                    if mask.get(x, y) {
                        let bg = image.get(x0 + x, y0 + y);
                        let c = defect_color(class, x, y, w, h, bg, &mut rng);
                        image.set(x0 + x, y0 + y, c);
                    }
                }
            }
            placed.push(rect);
            let sf = s as f64;
            boxes.push(BBox::from_corners(
                class.id(),
                (x0 + bx0) as f64 / sf,
                (y0 + by0) as f64 / sf,
                (x0 + bx1 + 1) as f64 / sf,
                (y0 + by1 + 1) as f64 / sf,
            ));
            break;
        }
    }
    Rendered { image, boxes }
}

pub fn format_annotations(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{} {} {} {} {}", b.class_id, b.cx, b.cy, b.w, b.h);
    }
    s
}

/// Parses `class_id cx cy w h` lines. Accepts LF or CRLF endings.
pub fn parse_annotations(text: &str, path: &str, num_classes: usize) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(format!("expected `class_id cx cy w h`, got {} fields", f.len())));
        }
        let class_id: usize = f[0]
            .parse()
            .map_err(|_| bad(format!("bad class id `{}`", f[0])))?;
        if class_id >= num_classes {
            return Err(bad(format!(
                "class id {class_id} out of range for {num_classes} classes"
            )));
        }
        let mut v = [0.0f64; 4];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad(format!("bad number `{s}`")))?;
        }
        let b = BBox::new(class_id, v[0], v[1], v[2], v[3]);
        b.validate(num_classes).map_err(|e| bad(e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

pub fn save_annotations(path: &Path, boxes: &[BBox]) -> Result<()> {
    fs::write(path, format_annotations(boxes)).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path, num_classes: usize) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string(), num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Seeded assignment of `count` images to splits.
pub fn assign_splits(spec: &GenSpec, count: usize) -> Vec<Split> {
    let n_train = (spec.train_frac * count as f64).round() as usize;
    let n_val = ((spec.val_frac * count as f64).round() as usize).min(count - n_train.min(count));
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut image_rng(spec.seed, u64::MAX, 3));
    let mut splits = vec![Split::Test; count];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            splits[i] = Split::Train;
        } else if rank < n_train + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub images: usize,
    pub per_class: [usize; NUM_CLASSES],
    pub per_split: [usize; 3],
}

impl DatasetSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "images {} (train {}, val {}, test {})\n",
            self.images, self.per_split[0], self.per_split[1], self.per_split[2]
        );
        for (name, n) in CLASS_NAMES.iter().zip(self.per_class) {
            let _ = writeln!(s, "{name:<10} {n}");
        }
        s
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn generate_dataset(spec: &GenSpec, count: usize, out: &Path) -> Result<DatasetSummary> {
    spec.validate()?;
    create_dir(&out.join("images"))?;
    create_dir(&out.join("labels"))?;
    let splits = assign_splits(spec, count);
    let mut summary = DatasetSummary {
        images: count,
        ..Default::default()
    };
    let mut manifest = String::from("# id split\n");
    for (i, split) in splits.iter().enumerate() {
        let id = image_id(i);
        let r = render_image(spec, i as u64);
        r.image.write(&out.join("images").join(format!("{id}.ppm")))?;
        save_annotations(&out.join("labels").join(format!("{id}.txt")), &r.boxes)?;
        for b in &r.boxes {
            summary.per_class[b.class_id] += 1;
        }
        summary.per_split[*split as usize] += 1;
        let _ = writeln!(manifest, "{id} {}", split.as_str());
    }
    let m = out.join("manifest.txt");
    fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
    let g = out.join("genspec.txt");
    fs::write(&g, spec.to_text()).map_err(|e| Error::io(&g, e))?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

/// A generated (or compatible hand-made) dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<(String, Split)>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            let [id, split] = f[..] else {
                return Err(bad("expected `id split`".into()));
            };
            let split = Split::parse(split).ok_or_else(|| bad(format!("unknown split `{split}`")))?;
            entries.push((id.to_string(), split));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn ids(&self, split: Option<Split>) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, s)| split.is_none_or(|want| *s == want))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.txt"))
    }

    pub fn load(&self, id: &str, num_classes: usize) -> Result<Sample> {
        Ok(Sample {
            id: id.to_string(),
            image: RgbImage::read(&self.image_path(id))?.to_tensor(),
            boxes: load_annotations(&self.label_path(id), num_classes)?,
        })
    }

    pub fn load_split(&self, split: Option<Split>, num_classes: usize) -> Result<Vec<Sample>> {
        self.ids(split).iter().map(|id| self.load(id, num_classes)).collect()
    }
}
