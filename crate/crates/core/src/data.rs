//! Synthetic identity faces, the mask overlay, augmentation, PPM/PGM I/O,
//! image folders and verification pairs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Rgb = [f32; 3];

/// Default overlay colors: blue, green, black, white. Values sit on the
/// 8-bit grid so they survive a PPM round trip exactly.
pub const MASK_COLORS: [Rgb; 4] = [
    [40.0 / 255.0, 90.0 / 255.0, 200.0 / 255.0],
    [60.0 / 255.0, 170.0 / 255.0, 100.0 / 255.0],
    [20.0 / 255.0, 20.0 / 255.0, 20.0 / 255.0],
    [245.0 / 255.0, 245.0 / 255.0, 245.0 / 255.0],
];

/// Mask rows span this fraction range of the face height, top to bottom.
pub const MASK_TOP: f32 = 0.55;
pub const MASK_BOTTOM: f32 = 0.90;

/// Face ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl FaceGeometry {
    /// Centered face occupying most of a `size × size` frame; used for
    /// images loaded without geometry.
    pub fn centered(height: usize, width: usize) -> Self {
        FaceGeometry {
            cx: width as f32 / 2.0,
            cy: height as f32 / 2.0,
            rx: width as f32 * 0.35,
            ry: height as f32 * 0.42,
        }
    }

    fn half_width_at(&self, y: f32) -> f32 {
        let t = ((y - self.cy) / self.ry).clamp(-1.0, 1.0);
        self.rx * (1.0 - t * t).max(0.0).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub masked: bool,
    /// Row-major `H × W` occupancy of the mask overlay.
    pub mask_region: Vec<bool>,
    pub face: FaceGeometry,
}

impl LabeledSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Fraction of pixels inside the mask region.
    pub fn region_share(&self) -> f64 {
        self.mask_region.iter().filter(|&&m| m).count() as f64 / self.mask_region.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub ma_probability: f64,
    pub flip_prob: f64,
    pub translate_px: usize,
    pub mask_colors: Vec<Rgb>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            ma_probability: 0.5,
            flip_prob: 0.5,
            translate_px: 2,
            mask_colors: MASK_COLORS.to_vec(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("ma_probability", self.ma_probability), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.mask_colors.is_empty() {
            return Err(Error::Config("mask_colors must not be empty".into()));
        }
        if self
            .mask_colors
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::Config("mask colors must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Deterministic 64-bit seed from a tuple of integers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3_u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn lerp3(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn jitter(c: Rgb, r: &mut impl Rng, amount: f32) -> Rgb {
    c.map(|v| v + r.random_range(-amount..=amount))
}

const HAIR_PALETTE: [Rgb; 5] = [
    [0.08, 0.06, 0.05],
    [0.35, 0.22, 0.12],
    [0.80, 0.68, 0.40],
    [0.60, 0.25, 0.10],
    [0.60, 0.60, 0.62],
];

/// Fixed per-identity appearance.
#[derive(Clone, Debug)]
struct Identity {
    skin: Rgb,
    hair: Rgb,
    eye: Rgb,
    mouth: Rgb,
    rx: f32,
    ry: f32,
    eye_dx: f32,
    eye_dy: f32,
    eye_r: f32,
    brow: bool,
    hair_depth: f32,
    nose_len: f32,
    nose_w: f32,
    mouth_w: f32,
    mouth_h: f32,
}

impl Identity {
    fn new(global_seed: u64, identity: usize) -> Self {
        let mut r = rng_for(&[0x1d, global_seed, identity as u64]);
        let tone = r.random_range(0.0..1.0);
        let skin = jitter(lerp3([0.95, 0.80, 0.70], [0.45, 0.30, 0.22], tone), &mut r, 0.04);
        let random: Rgb = [0; 3].map(|_| r.random_range(0.0..1.0));
        let hair = lerp3(HAIR_PALETTE[r.random_range(0..HAIR_PALETTE.len())], random, 0.35);
        let eye = [0; 3].map(|_| r.random_range(0.0..0.4));
        let mouth = [0; 3].map(|_| r.random_range(0.1..0.9));
        Identity {
            skin,
            hair,
            eye,
            mouth,
            rx: r.random_range(0.28..0.37),
            ry: r.random_range(0.38..0.45),
            eye_dx: r.random_range(0.30..0.50),
            eye_dy: r.random_range(0.22..0.40),
            eye_r: r.random_range(0.10..0.18),
            brow: r.random_bool(0.5),
            hair_depth: r.random_range(0.15..0.45),
            nose_len: r.random_range(0.20..0.40),
            nose_w: r.random_range(0.08..0.20),
            mouth_w: r.random_range(0.25..0.55),
            mouth_h: r.random_range(0.06..0.14),
        }
    }
}

/// Background rectangle drawn behind the face.
struct Clutter {
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
    color: Rgb,
}

/// Renders the unmasked sample `sample_index` of `identity`. Geometry and
/// colors depend on the identity alone; position, scale, lighting,
/// background clutter and noise depend on `(global_seed, identity,
/// sample_index)`.
pub fn gen_identity_image(
    global_seed: u64,
    identity: usize,
    sample_index: usize,
    size: usize,
) -> LabeledSample {
    let id = Identity::new(global_seed, identity);
    let mut r = rng_for(&[global_seed, identity as u64, sample_index as u64]);
    let s = size as f32;
    let scale = r.random_range(0.92..1.08);
    let face = FaceGeometry {
        cx: s / 2.0 + r.random_range(-2.5..2.5),
        cy: s / 2.0 + r.random_range(-1.5..1.5),
        rx: id.rx * s * scale,
        ry: id.ry * s * scale,
    };
    let brightness: f32 = r.random_range(0.75..1.25);
    let cast: Rgb = [0; 3].map(|_| r.random_range(-0.06..0.06));
    let background: Rgb = jitter([r.random_range(0.1..0.9); 3], &mut r, 0.1);
    let clutter: Vec<Clutter> = (0..r.random_range(0..3))
        .map(|_| {
            let (x, y) = (r.random_range(0.0..s), r.random_range(0.0..s));
            let (w, h) = (r.random_range(2.0..s / 3.0), r.random_range(2.0..s / 3.0));
            Clutter {
                x0: x - w / 2.0,
                y0: y - h / 2.0,
                x1: x + w / 2.0,
                y1: y + h / 2.0,
                color: [0; 3].map(|_| r.random_range(0.0..1.0)),
            }
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.05).expect("valid normal");

    let eye_y = face.cy - id.eye_dy * face.ry;
    let eye_r = id.eye_r * face.rx;
    let eyes = [face.cx - id.eye_dx * face.rx, face.cx + id.eye_dx * face.rx];
    let nose_top = eye_y + eye_r;
    let nose_bottom = face.cy + id.nose_len * face.ry;
    let mouth_y = face.cy + 0.5 * face.ry;
    let hair_line = face.cy - (1.0 - id.hair_depth) * face.ry;

    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let dx = (px - face.cx) / face.rx;
            let dy = (py - face.cy) / face.ry;
            let mut c = background;
            for b in &clutter {
                if px >= b.x0 && px <= b.x1 && py >= b.y0 && py <= b.y1 {
                    c = b.color;
                }
            }
            if dx * dx + dy * dy <= 1.0 {
                c = id.skin;
                if py < hair_line {
                    c = id.hair;
                }
                for &ex in &eyes {
                    let d2 = (px - ex).powi(2) + (py - eye_y).powi(2);
                    if d2 <= eye_r * eye_r {
                        c = id.eye;
                    }
                    if id.brow && (py - (eye_y - 1.8 * eye_r)).abs() < 0.6 && (px - ex).abs() < 1.3 * eye_r {
                        c = id.hair;
                    }
                }
                if py >= nose_top && py <= nose_bottom {
                    let t = (py - nose_top) / (nose_bottom - nose_top).max(1e-3);
                    if (px - face.cx).abs() <= t * id.nose_w * face.rx + 0.5 {
                        c = [c[0] * 0.75, c[1] * 0.7, c[2] * 0.7];
                    }
                }
                if (py - mouth_y).abs() <= id.mouth_h * face.ry + 0.5
                    && (px - face.cx).abs() <= id.mouth_w * face.rx
                {
                    c = id.mouth;
                }
            }
            for ch in 0..3 {
                let v = c[ch] * brightness + cast[ch] + noise.sample(&mut r);
                data[ch * plane + y * size + x] = quantize(v);
            }
        }
    }
    LabeledSample {
        image: Tensor::new([3, size, size], data).expect("shape matches data"),
        identity,
        masked: false,
        mask_region: vec![false; plane],
        face,
    }
}

/// Trapezoidal nose-and-mouth region for a face, never above row `H/2`.
pub fn mask_region_for(face: &FaceGeometry, height: usize, width: usize) -> Vec<bool> {
    let top_y = face.cy - face.ry + 2.0 * face.ry * MASK_TOP;
    let bottom_y = face.cy - face.ry + 2.0 * face.ry * MASK_BOTTOM;
    let top_w = face.half_width_at(top_y) * 1.05;
    let bottom_w = face.half_width_at(bottom_y) * 1.05;
    let first_row = height.div_ceil(2);
    let mut region = vec![false; height * width];
    for y in first_row..height {
        let py = y as f32 + 0.5;
        if py < top_y || py > bottom_y {
            continue;
        }
        let t = (py - top_y) / (bottom_y - top_y);
        let half = top_w + t * (bottom_w - top_w);
        for x in 0..width {
            if (x as f32 + 0.5 - face.cx).abs() <= half {
                region[y * width + x] = true;
            }
        }
    }
    region
}

/// Paints the mask overlay when `draw < cfg.ma_probability`, choosing color
/// `color_pick % cfg.mask_colors.len()`.
pub fn apply_mask(sample: &LabeledSample, cfg: &AugmentConfig, draw: f64, color_pick: usize) -> LabeledSample {
    if sample.masked || draw >= cfg.ma_probability || cfg.mask_colors.is_empty() {
        return sample.clone();
    }
    let (h, w) = (sample.height(), sample.width());
    let region = mask_region_for(&sample.face, h, w);
    if !region.contains(&true) {
        return sample.clone();
    }
    let color = cfg.mask_colors[color_pick % cfg.mask_colors.len()];
    let mut out = sample.clone();
    let plane = h * w;
    let data = out.image.data_mut();
    for (i, _) in region.iter().enumerate().filter(|(_, &m)| m) {
        for (ch, &v) in color.iter().enumerate() {
            data[ch * plane + i] = v;
        }
    }
    out.masked = true;
    out.mask_region = region;
    out
}

/// Random overlay decision and color drawn from `rng`.
pub fn random_mask(sample: &LabeledSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> LabeledSample {
    let draw: f64 = rng.random();
    let pick = rng.random_range(0..cfg.mask_colors.len().max(1));
    apply_mask(sample, cfg, draw, pick)
}

/// Horizontal flip with probability `flip_prob`, then a shift of up to
/// `translate_px` pixels per axis with edge replication, which equals a
/// random crop of the edge-padded image back to the original size.
pub fn augment(sample: &LabeledSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> LabeledSample {
    let flip = rng.random_bool(cfg.flip_prob);
    let t = cfg.translate_px as i64;
    let (sx, sy) = if t > 0 {
        (rng.random_range(-t..=t), rng.random_range(-t..=t))
    } else {
        (0, 0)
    };
    let (h, w) = (sample.height() as i64, sample.width() as i64);
    let src_index = |y: i64, x: i64| -> usize {
        let yy = (y - sy).clamp(0, h - 1);
        let mut xx = (x - sx).clamp(0, w - 1);
        if flip {
            xx = w - 1 - xx;
        }
        (yy * w + xx) as usize
    };
    let plane = (h * w) as usize;
    let src = sample.image.data();
    let mut out = sample.clone();
    {
        let dst = out.image.data_mut();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    dst[ch * plane + (y * w + x) as usize] = src[ch * plane + src_index(y, x)];
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            out.mask_region[(y * w + x) as usize] = sample.mask_region[src_index(y, x)];
        }
    }
    if out.masked && !out.mask_region.contains(&true) {
        out.masked = false;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub identity_names: Vec<String>,
}

impl Dataset {
    pub fn num_identities(&self) -> usize {
        self.identity_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }

    pub fn identities(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Stacks samples into a `[N, 3, H, W]` batch.
    pub fn stack<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Result<Tensor<f32>> {
        let samples: Vec<&LabeledSample> = samples.into_iter().collect();
        let first = samples.first().ok_or_else(|| Error::invalid("cannot stack zero samples"))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.image.len());
        for s in &samples {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: shape,
                    rhs: s.image.shape().to_vec(),
                });
            }
            data.extend_from_slice(s.image.data());
        }
        Tensor::new([samples.len(), shape[0], shape[1], shape[2]], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub identities: usize,
    pub samples_per_identity: usize,
    /// Extra per-identity samples generated after the training ones and
    /// kept apart for verification.
    pub eval_samples_per_identity: usize,
    pub image_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            identities: 40,
            samples_per_identity: 50,
            eval_samples_per_identity: 10,
            image_size: 32,
        }
    }
}

fn identity_name(id: usize) -> String {
    format!("id_{id:04}")
}

/// Unmasked samples `range` of every identity, ordered by identity.
pub fn synthetic_dataset(cfg: &SyntheticConfig, range: std::ops::Range<usize>) -> Result<Dataset> {
    if cfg.identities == 0 || range.is_empty() {
        return Err(Error::Config("synthetic dataset needs identities and samples".into()));
    }
    if cfg.image_size < 8 {
        return Err(Error::Config(format!("image_size {} is too small", cfg.image_size)));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.identities)
        .flat_map(|id| range.clone().map(move |i| (id, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(id, i)| gen_identity_image(cfg.seed, id, i, cfg.image_size))
        .collect();
    Ok(Dataset {
        samples,
        identity_names: (0..cfg.identities).map(identity_name).collect(),
    })
}

pub fn synthetic_train(cfg: &SyntheticConfig) -> Result<Dataset> {
    synthetic_dataset(cfg, 0..cfg.samples_per_identity)
}

pub fn synthetic_eval(cfg: &SyntheticConfig) -> Result<Dataset> {
    let start = cfg.samples_per_identity;
    synthetic_dataset(cfg, start..start + cfg.eval_samples_per_identity)
}

// ---------------------------------------------------------------- PNM I/O

/// Decoded binary PPM (P6) or PGM (P5) image as `[3, H, W]` in `[0, 1]`;
/// grey images are replicated across channels.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        token()?
            .parse::<usize>()
            .map_err(|_| format!("bad {what} in header"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(format!("bad dimensions {width}x{height} or maxval {maxval}"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * channels * bps;
    if body.len() < need {
        return Err(format!("pixel data truncated: {} of {need} bytes", body.len()));
    }
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 {
            body[i] as u32
        } else {
            u32::from(body[2 * i]) << 8 | u32::from(body[2 * i + 1])
        };
        v as f32 / maxval as f32
    };
    let plane = width * height;
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let src = if channels == 3 { p * 3 + ch } else { p };
            data[ch * plane + p] = sample(src);
        }
    }
    Tensor::new([3, height, width], data).map_err(|e| e.to_string())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 encoding of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::invalid(format!("expected [3, H, W] image, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(d[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Binary P5 encoding of an `H × W` map in `[0, 1]`.
pub fn encode_pgm(values: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::invalid(format!(
            "map of {} values does not fit {height}x{width}",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|m| Error::file(path, m))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------- image folders

pub const MANIFEST: &str = "manifest.tsv";

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pgm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Writes one subdirectory per identity plus a manifest with one line per
/// sample: relative path, identity, masked flag and face geometry.
pub fn write_image_folder(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut counters = vec![0usize; dataset.num_identities()];
    let mut manifest = String::from("# path\tidentity\tmasked\tcx\tcy\trx\try\n");
    for s in &dataset.samples {
        let name = dataset
            .identity_names
            .get(s.identity)
            .ok_or_else(|| Error::invalid(format!("identity {} has no name", s.identity)))?;
        let rel = format!("{name}/{:05}.ppm", counters[s.identity]);
        counters[s.identity] += 1;
        write_file(&dir.join(&rel), &encode_ppm(&s.image)?)?;
        let f = s.face;
        manifest.push_str(&format!(
            "{rel}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.identity, s.masked as u8, f.cx, f.cy, f.rx, f.ry
        ));
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

#[derive(Clone, Debug)]
struct ManifestEntry {
    masked: bool,
    face: Option<FaceGeometry>,
}

fn read_manifest(dir: &Path) -> Result<Option<std::collections::HashMap<String, ManifestEntry>>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::file(&path, format!("malformed line {}", lineno + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 7 {
            return Err(bad());
        }
        let masked = match cols[2] {
            "0" | "false" => false,
            "1" | "true" => true,
            _ => return Err(bad()),
        };
        let face = if cols.len() == 7 {
            let v = cols[3..]
                .iter()
                .map(|c| c.parse::<f32>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Some(FaceGeometry { cx: v[0], cy: v[1], rx: v[2], ry: v[3] })
        } else {
            None
        };
        map.insert(cols[0].to_string(), ManifestEntry { masked, face });
    }
    Ok(Some(map))
}

/// Loads a folder with one subdirectory per identity of PPM/PGM images.
/// Identities are indexed by sorted directory name and samples ordered
/// lexicographically. A manifest, when present, supplies masked flags and
/// face geometry; masked samples get the region implied by that geometry.
pub fn load_image_folder(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut identity_names = Vec::new();
    let mut files = Vec::new();
    for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = sub
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::file(&sub, "directory name is not UTF-8"))?
            .to_string();
        let images: Vec<PathBuf> = sorted_entries(&sub)?.into_iter().filter(|p| is_image(p)).collect();
        if images.is_empty() {
            return Err(Error::file(&sub, "identity directory has no PPM/PGM images"));
        }
        let id = identity_names.len();
        identity_names.push(name.clone());
        files.extend(images.into_iter().map(|p| (id, name.clone(), p)));
    }
    if identity_names.is_empty() {
        return Err(Error::file(dir, "no identity subdirectories"));
    }
    let samples = files
        .par_iter()
        .map(|(id, name, path)| -> Result<LabeledSample> {
            let image = read_image(path)?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            let rel = format!("{name}/{}", path.file_name().and_then(|n| n.to_str()).unwrap_or(""));
            let entry = manifest.as_ref().and_then(|m| m.get(&rel));
            let face = entry.and_then(|e| e.face).unwrap_or_else(|| FaceGeometry::centered(h, w));
            let masked = entry.is_some_and(|e| e.masked);
            let mask_region = if masked {
                mask_region_for(&face, h, w)
            } else {
                vec![false; h * w]
            };
            Ok(LabeledSample {
                image,
                identity: *id,
                masked: masked && mask_region.contains(&true),
                mask_region,
                face,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let size = samples[0].image.shape().to_vec();
    if let Some((_, _, path)) = files
        .iter()
        .zip(&samples)
        .find(|(_, s)| s.image.shape() != size.as_slice())
        .map(|(f, _)| f)
    {
        return Err(Error::file(path, format!("image size differs from {size:?}")));
    }
    Ok(Dataset { samples, identity_names })
}

// ------------------------------------------------------- verification pairs

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Clean,
    /// Probe `a` is overlaid with a mask; gallery `b` stays clean.
    MaskedProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
    pub probe_masked: bool,
}

/// `n` distinct pairs out of `total`: rejection sampling when sparse,
/// otherwise a subset of the full enumeration.
fn sample_pairs(
    rng: &mut ChaCha8Rng,
    n: usize,
    total: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (usize, usize),
    enumerate: impl FnOnce() -> Vec<(usize, usize)>,
) -> Vec<(usize, usize)> {
    if 2 * n <= total {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = draw(rng);
            if seen.insert(p) {
                out.push(p);
            }
        }
        out
    } else {
        let all = enumerate();
        let mut idx = index::sample(rng, all.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| all[k]).collect()
    }
}

fn pair_count(len: usize) -> usize {
    len * len.saturating_sub(1) / 2
}

/// Distinct unordered pairs: `n_genuine` of equal identity, then
/// `n_impostor` of different identity, each group in seeded order. In
/// masked-probe mode the first element of every pair is the probe.
pub fn make_verification_pairs(
    identities: &[usize],
    seed: u64,
    n_genuine: usize,
    n_impostor: usize,
    mode: PairMode,
) -> Result<Vec<Pair>> {
    let n = identities.len();
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &id) in identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = by_id.values().filter(|g| g.len() >= 2).collect();
    let weights: Vec<usize> = groups.iter().map(|g| pair_count(g.len())).collect();
    let genuine_total: usize = weights.iter().sum();
    let impostor_total = pair_count(n) - genuine_total;
    if n_genuine > genuine_total {
        return Err(Error::invalid(format!(
            "requested {n_genuine} genuine pairs but only {genuine_total} exist"
        )));
    }
    if n_impostor > impostor_total {
        return Err(Error::invalid(format!(
            "requested {n_impostor} impostor pairs but only {impostor_total} exist"
        )));
    }
    let mut rng = rng_for(&[seed, 0x9a1e5]);

    let genuine = sample_pairs(
        &mut rng,
        n_genuine,
        genuine_total,
        |r| {
            let mut k = r.random_range(0..genuine_total);
            let mut gi = 0;
            while k >= weights[gi] {
                k -= weights[gi];
                gi += 1;
            }
            let g = groups[gi];
            let (i, j) = unrank_pair(k, g.len());
            (g[i], g[j])
        },
        || {
            groups
                .iter()
                .flat_map(|g| (0..g.len()).flat_map(move |i| (i + 1..g.len()).map(move |j| (g[i], g[j]))))
                .collect()
        },
    );
    let impostor = sample_pairs(
        &mut rng,
        n_impostor,
        impostor_total,
        |r| loop {
            let a = r.random_range(0..n);
            let b = r.random_range(0..n);
            if identities[a] != identities[b] {
                break (a.min(b), a.max(b));
            }
        },
        || {
            (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .filter(|&(a, b)| identities[a] != identities[b])
                .collect()
        },
    );

    let probe_masked = mode == PairMode::MaskedProbe;
    let mut out = Vec::with_capacity(n_genuine + n_impostor);
    for (list, genuine) in [(genuine, true), (impostor, false)] {
        for (a, b) in list {
            let (a, b) = if probe_masked && rng.random_bool(0.5) { (b, a) } else { (a, b) };
            out.push(Pair { a, b, genuine, probe_masked });
        }
    }
    Ok(out)
}

/// `k`-th pair `(i, j)`, `i < j`, in row-major order over `0..len`.
fn unrank_pair(mut k: usize, len: usize) -> (usize, usize) {
    for i in 0..len {
        let row = len - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair rank within range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = gen_identity_image(7, 3, 11, 32);
        let b = gen_identity_image(7, 3, 11, 32);
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!a.masked && !a.mask_region.contains(&true));
        assert_ne!(a.image, gen_identity_image(8, 3, 11, 32).image);
    }

    #[test]
    fn pixels_are_on_the_byte_grid() {
        let s = gen_identity_image(1, 0, 0, 32);
        for &v in s.image.data() {
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn identities_differ_in_many_pixels() {
        for id in 0..100 {
            let a = gen_identity_image(5, id, 0, 32);
            let b = gen_identity_image(5, id + 100, 0, 32);
            let differing = (0..32 * 32)
                .filter(|&p| (0..3).any(|c| a.image.data()[c * 1024 + p] != b.image.data()[c * 1024 + p]))
                .count();
            assert!(differing as f64 >= 0.05 * 1024.0, "identity {id}: {differing}");
        }
    }

    #[test]
    fn zero_probability_leaves_sample_unchanged() {
        let s = gen_identity_image(0, 1, 2, 32);
        let cfg = AugmentConfig { ma_probability: 0.0, ..AugmentConfig::default() };
        assert_eq!(apply_mask(&s, &cfg, 0.0, 0), s);
    }

    #[test]
    fn forced_mask_paints_one_color_in_lower_half() {
        let cfg = AugmentConfig { ma_probability: 1.0, ..AugmentConfig::default() };
        for (k, color) in MASK_COLORS.iter().enumerate() {
            let s = gen_identity_image(0, k, 0, 32);
            let m = apply_mask(&s, &cfg, 0.999, k);
            assert!(m.masked);
            let plane = 32 * 32;
            for p in 0..plane {
                let inside = m.mask_region[p];
                if inside {
                    assert!(p / 32 >= 16);
                }
                for c in 0..3 {
                    let v = m.image.data()[c * plane + p];
                    if inside {
                        assert_eq!(v, color[c]);
                    } else {
                        assert_eq!(v, s.image.data()[c * plane + p]);
                    }
                }
            }
            let share = m.region_share();
            assert!(share > 0.08 && share < 0.4, "{share}");
        }
    }

    #[test]
    fn mask_rate_matches_probability() {
        let s = gen_identity_image(0, 0, 0, 16);
        let cfg = AugmentConfig { ma_probability: 0.3, ..AugmentConfig::default() };
        let mut rng = rng_for(&[42]);
        let masked = (0..10_000).filter(|_| random_mask(&s, &cfg, &mut rng).masked).count();
        assert!((masked as f64 / 10_000.0 - 0.3).abs() < 0.015, "{masked}");
    }

    #[test]
    fn augment_preserves_range_and_region_consistency() {
        let cfg = AugmentConfig { ma_probability: 1.0, ..AugmentConfig::default() };
        let s = apply_mask(&gen_identity_image(0, 4, 1, 32), &cfg, 0.0, 2);
        let mut rng = rng_for(&[1]);
        for _ in 0..20 {
            let a = augment(&s, &cfg, &mut rng);
            assert_eq!(a.image.shape(), s.image.shape());
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.masked, a.mask_region.contains(&true));
            for (p, &inside) in a.mask_region.iter().enumerate() {
                if inside {
                    assert_eq!(a.image.data()[p], MASK_COLORS[2][0]);
                }
            }
        }
    }

    #[test]
    fn flip_only_augment_mirrors_rows() {
        let s = gen_identity_image(0, 0, 0, 8);
        let cfg = AugmentConfig { flip_prob: 1.0, translate_px: 0, ..AugmentConfig::default() };
        let a = augment(&s, &cfg, &mut rng_for(&[0]));
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(a.image.data()[y * 8 + x], s.image.data()[y * 8 + 7 - x]);
            }
        }
    }

    #[test]
    fn pnm_round_trip_is_exact() {
        let s = gen_identity_image(3, 2, 1, 16);
        let bytes = encode_ppm(&s.image).unwrap();
        assert_eq!(decode_pnm(&bytes).unwrap(), s.image);
        let grey: Vec<f32> = (0..12).map(|i| i as f32 / 255.0).collect();
        let pgm = encode_pgm(&grey, 3, 4).unwrap();
        let back = decode_pnm(&pgm).unwrap();
        assert_eq!(back.shape(), &[3, 3, 4]);
        assert_eq!(&back.data()[12..24], grey.as_slice());
    }

    #[test]
    fn pnm_header_comments_and_errors() {
        let bytes = b"P5\n# comment\n2 1\n# another\n255\n\x00\xff";
        let t = decode_pnm(bytes).unwrap();
        assert_eq!(t.data()[..2], [0.0, 1.0]);
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P6\nx 2\n255\n").is_err());
    }

    #[test]
    fn verification_pairs_are_valid() {
        let ids: Vec<usize> = (0..20).map(|i| i / 5).collect();
        let pairs = make_verification_pairs(&ids, 3, 25, 100, PairMode::Clean).unwrap();
        assert_eq!(pairs.len(), 125);
        let mut seen = HashSet::new();
        for p in &pairs {
            assert_ne!(p.a, p.b);
            assert_eq!(p.genuine, ids[p.a] == ids[p.b]);
            assert!(seen.insert((p.a.min(p.b), p.a.max(p.b))));
        }
        assert_eq!(pairs, make_verification_pairs(&ids, 3, 25, 100, PairMode::Clean).unwrap());
        let only = make_verification_pairs(&ids, 3, 0, 17, PairMode::MaskedProbe).unwrap();
        assert_eq!(only.len(), 17);
        assert!(only.iter().all(|p| !p.genuine && p.probe_masked));
        let all_genuine = make_verification_pairs(&ids, 1, 40, 0, PairMode::Clean).unwrap();
        assert_eq!(all_genuine.len(), 40);
        assert!(make_verification_pairs(&ids, 1, 41, 0, PairMode::Clean).is_err());
        assert!(make_verification_pairs(&[0, 0, 0], 1, 1, 1, PairMode::Clean).is_err());
    }
}
