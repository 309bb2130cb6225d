//! Synthetic scenes, augmentation and the on-disk dataset.
//!
//! A scene is a class-0 background with rectangles, ellipses and thick
//! polylines painted back to front. Each class has a base colour; the image
//! adds a per-scene colour shift, per-pixel noise and a 3×3 box blur.
//!
//! On disk a dataset is `<root>/<split>/<index:05>_img.ppm` (binary P6) next to
//! `<root>/<split>/<index:05>_lab.pgm` (binary P5, gray value = class id).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of the per-scene shift of each class colour.
    pub color_jitter: f64,
    /// Standard deviation of independent per-pixel noise.
    pub pixel_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            height: 64,
            width: 64,
            min_shapes: 3,
            max_shapes: 6,
            color_jitter: 0.05,
            pixel_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::invalid(format!("num_classes {} not in [2, 255]", self.num_classes)));
        }
        if self.height == 0 || self.width == 0 || self.height > 65535 || self.width > 65535 {
            return Err(Error::invalid(format!("canvas {}x{}", self.height, self.width)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid("min_shapes exceeds max_shapes"));
        }
        Ok(())
    }
}

/// An RGB image `(1, 3, h, w)` in `[0, 1]` and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let [n, c, h, w] = image.dims();
        if n != 1 || c != 3 || labels.n() != 1 || (labels.h(), labels.w()) != (h, w) {
            return Err(Error::shape(format!(
                "sample image {:?} does not match labels 1x{}x{}",
                image.dims(),
                labels.h(),
                labels.w()
            )));
        }
        Ok(Self { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.h()
    }

    pub fn width(&self) -> usize {
        self.labels.w()
    }

    pub fn flip_horizontal(&self) -> Sample {
        Sample { image: self.image.flip_horizontal(), labels: self.labels.flip_horizontal() }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.35, 0.35, 0.38],
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

/// Base colour of a class.
pub fn class_color(class: usize) -> [f64; 3] {
    match PALETTE.get(class) {
        Some(c) => *c,
        None => {
            let mut rng = Prng::derived(0xC0_10_55, class as u64);
            [rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9)]
        }
    }
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Polyline { points: Vec<(f64, f64)>, half_width: f64 },
}

impl Shape {
    fn random(rng: &mut Prng, h: f64, w: f64) -> Shape {
        let side = h.min(w);
        match rng.below(3) {
            0 => {
                let (sh, sw) = (rng.uniform_in(0.3, 0.6) * h, rng.uniform_in(0.3, 0.6) * w);
                let (cy, cx) = (rng.uniform_in(0.0, h), rng.uniform_in(0.0, w));
                Shape::Rect { y0: cy - sh / 2.0, x0: cx - sw / 2.0, y1: cy + sh / 2.0, x1: cx + sw / 2.0 }
            }
            1 => Shape::Ellipse {
                cy: rng.uniform_in(0.0, h),
                cx: rng.uniform_in(0.0, w),
                ry: rng.uniform_in(0.15, 0.3) * h,
                rx: rng.uniform_in(0.15, 0.3) * w,
            },
            _ => {
                let count = rng.range_inclusive(2, 4);
                let points = (0..count).map(|_| (rng.uniform_in(0.0, h), rng.uniform_in(0.0, w))).collect();
                Shape::Polyline { points, half_width: rng.uniform_in(0.07, 0.1) * side }
            }
        }
    }

    /// Whether the pixel centred at `(y, x)` is covered.
    fn covers(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => y >= *y0 && y < *y1 && x >= *x0 && x < *x1,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Polyline { points, half_width } => {
                points.windows(2).any(|s| segment_distance((y, x), s[0], s[1]) <= *half_width)
            }
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dy).powi(2) + (p.1 - a.1 - t * dx).powi(2)).sqrt()
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = Prng::new(seed);
    let mut labels = LabelMap::filled(1, h, w, 0);
    let count = rng.range_inclusive(spec.min_shapes, spec.max_shapes);
    for _ in 0..count {
        let class = 1 + rng.below(spec.num_classes - 1);
        let shape = Shape::random(&mut rng, h as f64, w as f64);
        for y in 0..h {
            for x in 0..w {
                if shape.covers(y as f64 + 0.5, x as f64 + 0.5) {
                    labels.set(0, y, x, class as u8);
                }
            }
        }
    }

    let colors: Vec<[f64; 3]> = (0..spec.num_classes)
        .map(|c| {
            let base = class_color(c);
            [0, 1, 2].map(|k| base[k] + spec.color_jitter * rng.normal())
        })
        .collect();
    let plane = h * w;
    let mut raw = vec![0.0f64; 3 * plane];
    for p in 0..plane {
        let color = colors[labels.data()[p] as usize];
        for k in 0..3 {
            raw[k * plane + p] = color[k] + spec.pixel_noise * rng.normal();
        }
    }
    let mut data = Vec::with_capacity(3 * plane);
    for k in 0..3 {
        let ch = &raw[k * plane..(k + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        sum += ch[yy * w + xx];
                        n += 1.0;
                    }
                }
                data.push((sum / n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Sample::new(Tensor::from_vec((1, 3, h, w), data)?, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub crop: (usize, usize),
    pub hflip_prob: f64,
}

impl AugmentConfig {
    pub fn new(crop: (usize, usize)) -> Self {
        Self { scale_range: (0.5, 2.0), crop, hflip_prob: 0.5 }
    }

    /// No flip, unit scale, crop of the given size.
    pub fn identity(crop: (usize, usize)) -> Self {
        Self { scale_range: (1.0, 1.0), crop, hflip_prob: 0.0 }
    }
}

/// Bilinear resize of an image (`align_corners = true`).
pub fn resize_image(image: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    if image.dims()[2..] == [h, w] {
        return Ok(image.clone());
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(image.clone());
    let y = tape.bilinear_resize(x, h, w, true)?;
    Ok(tape.value(y).clone())
}

fn nearest_index(o: usize, input: usize, output: usize) -> usize {
    if output <= 1 {
        return 0;
    }
    let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
    (src.round() as usize).min(input - 1)
}

/// Nearest-neighbour resize of labels on the same sampling grid as
/// [`resize_image`].
pub fn resize_labels(labels: &LabelMap, h: usize, w: usize) -> Result<LabelMap> {
    let mut data = Vec::with_capacity(labels.n() * h * w);
    for n in 0..labels.n() {
        for y in 0..h {
            let sy = nearest_index(y, labels.h(), h);
            for x in 0..w {
                data.push(labels.get(n, sy, nearest_index(x, labels.w(), w)));
            }
        }
    }
    LabelMap::new(labels.n(), h, w, data)
}

/// Random flip, random rescale and random crop, padding with zero image and
/// ignore labels when the rescaled sample is smaller than the crop.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    let (lo, hi) = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::invalid(format!("scale range ({lo}, {hi})")));
    }
    let (ch, cw) = cfg.crop;
    if ch == 0 || cw == 0 {
        return Err(Error::invalid("crop has a zero side"));
    }
    let mut rng = Prng::new(seed);
    let flip = rng.uniform() < cfg.hflip_prob;
    let scale = rng.uniform_in(lo, hi);
    let mut s = if flip { sample.flip_horizontal() } else { sample.clone() };

    let nh = ((s.height() as f64 * scale).round() as usize).max(1);
    let nw = ((s.width() as f64 * scale).round() as usize).max(1);
    if (nh, nw) != (s.height(), s.width()) {
        s = Sample { image: resize_image(&s.image, nh, nw)?, labels: resize_labels(&s.labels, nh, nw)? };
    }

    let (ph, pw) = (nh.max(ch), nw.max(cw));
    let y0 = rng.below(ph - ch + 1);
    let x0 = rng.below(pw - cw + 1);
    let mut image = vec![0.0f32; 3 * ch * cw];
    let mut labels = LabelMap::filled(1, ch, cw, IGNORE_INDEX);
    for y in 0..ch {
        let sy = y0 + y;
        if sy >= nh {
            continue;
        }
        for x in 0..cw {
            let sx = x0 + x;
            if sx >= nw {
                continue;
            }
            for k in 0..3 {
                image[(k * ch + y) * cw + x] = s.image.at(0, k, sy, sx);
            }
            labels.set(0, y, x, s.labels.get(0, sy, sx));
        }
    }
    Sample::new(Tensor::from_vec((1, 3, ch, cw), image)?, labels)
}

/// Parse a binary netpbm header. Returns `(width, height, maxval, payload)`.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format("netpbm", format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("netpbm", "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| Error::format("netpbm", "header field is not a number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("netpbm", "missing whitespace after maxval"));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || !(1..=255).contains(&maxval) {
        return Err(Error::format("netpbm", format!("unsupported header {w}x{h} maxval {maxval}")));
    }
    Ok((w, h, maxval, &bytes[pos + 1..]))
}

fn payload(data: &[u8], len: usize) -> Result<&[u8]> {
    if data.len() != len {
        return Err(Error::format("netpbm", format!("payload has {} bytes, header implies {len}", data.len())));
    }
    Ok(data)
}

pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    if labels.n() != 1 {
        return Err(Error::shape("PGM holds a single label map"));
    }
    let mut out = format!("P5\n{} {}\n255\n", labels.w(), labels.h()).into_bytes();
    out.extend_from_slice(labels.data());
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, _, data) = parse_header(bytes, b"P5")?;
    LabelMap::new(1, h, w, payload(data, w * h)?.to_vec())
}

/// `round(255·v)` per value, `v` clamped to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("PPM needs a (1, 3, h, w) image, got {:?}", image.dims())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                out.push(quantize(image.at(0, k, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, maxval, data) = parse_header(bytes, b"P6")?;
    let data = payload(data, 3 * w * h)?;
    let mut out = vec![0.0f32; 3 * w * h];
    for (p, px) in data.chunks(3).enumerate() {
        for k in 0..3 {
            out[k * w * h + p] = px[k] as f32 / maxval as f32;
        }
    }
    Tensor::from_vec((1, 3, h, w), out)
}

/// Grayscale image bytes as P5.
pub fn encode_gray(h: usize, w: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let labels = LabelMap::new(1, h, w, bytes.to_vec())?;
    encode_pgm(&labels)
}

/// Interleaved RGB bytes as P6.
pub fn encode_rgb(h: usize, w: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * h * w {
        return Err(Error::shape(format!("{} RGB bytes for a {h}x{w} image", rgb.len())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::at(path))?;
    f.write_all(bytes).map_err(Error::at(path))?;
    Ok(())
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_file(path, &encode_pgm(labels)?)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    decode_pgm(&fs::read(path).map_err(Error::at(path))?)
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path).map_err(Error::at(path))?)
}

pub fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("{index:05}_img.ppm")), dir.join(format!("{index:05}_lab.pgm")))
}

/// Write both files of a sample as `<dir>/<index:05>_{img.ppm,lab.pgm}`.
pub fn save_sample(dir: &Path, index: usize, sample: &Sample) -> Result<()> {
    let (img, lab) = sample_paths(dir, index);
    save_image(&img, &sample.image)?;
    save_labels(&lab, &sample.labels)
}

/// Load a sample from its image path; the label path is derived from it.
pub fn load_sample(image_path: &Path) -> Result<Sample> {
    let name = image_path.to_string_lossy();
    let lab = name
        .strip_suffix("_img.ppm")
        .map(|stem| PathBuf::from(format!("{stem}_lab.pgm")))
        .ok_or_else(|| Error::Dataset { path: image_path.into(), msg: "expected a *_img.ppm file".into() })?;
    let image = load_image(image_path)?;
    let labels = load_labels(&lab)?;
    Sample::new(image, labels)
}

pub const SPLITS: [&str; 2] = ["train", "val"];

/// Seed of sample `index` in split `split` for a dataset seed.
pub fn sample_seed(seed: u64, split: usize, index: usize) -> u64 {
    Prng::derived(seed, ((split as u64) << 32) | index as u64).next_u64()
}

/// Generate `counts[k]` samples for split `SPLITS[k]` under `root`.
pub fn generate_dataset(root: &Path, spec: &SceneSpec, counts: [usize; 2], seed: u64) -> Result<()> {
    spec.validate()?;
    for (k, split) in SPLITS.iter().enumerate() {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(Error::at(&dir))?;
        for i in 0..counts[k] {
            save_sample(&dir, i, &generate_scene(spec, sample_seed(seed, k, i))?)?;
        }
    }
    Ok(())
}

/// All samples of one split, in index order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir)
        .map_err(|e| Error::Dataset { path: dir.clone(), msg: format!("cannot read split directory: {e}") })?;
    let mut images: Vec<PathBuf> = Vec::new();
    for e in entries {
        let path = e?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_img.ppm")) {
            images.push(path);
        }
    }
    images.sort();
    if images.is_empty() {
        return Err(Error::Dataset { path: dir, msg: "no *_img.ppm samples".into() });
    }
    images.iter().map(|p| load_sample(p).map_err(|e| Error::Dataset { path: p.clone(), msg: e.to_string() })).collect()
}
