//! Image I/O (binary PGM), the synthetic infrared-scene generator used as the
//! desk-scale dataset, and the dataset manifest format.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::BinaryMask;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Grayscale raster as stored on disk: binary PGM (P5), 8- or 16-bit.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if maxval == 0 {
            return Err(Error::Config("pgm maxval must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "pgm pixel count {} != {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|&&p| p > maxval) {
            return Err(Error::Config(format!("pixel value {bad} exceeds maxval {maxval}")));
        }
        Ok(Pgm { width, height, maxval, pixels })
    }

    /// Normalized tensor (1, 1, h, w): value / maxval.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let inv = 1.0 / self.maxval as f64;
        Tensor::new(
            Shape::new(1, 1, self.height, self.width),
            self.pixels.iter().map(|&p| T::from_f64(p as f64 * inv)).collect(),
        )
        .expect("pixel count validated")
    }

    /// Quantize a single-sample map in [0, 1] to 16-bit.
    pub fn from_unit_map<T: Real>(map: &Tensor<T>) -> Result<Self> {
        let s = map.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Usage(format!("expected a (1,1,h,w) map, got {s}")));
        }
        let pixels = map
            .data()
            .iter()
            .map(|v| {
                let x = v.to_f64().clamp(0.0, 1.0);
                (x * 65535.0).round() as u16
            })
            .collect();
        Pgm::new(s.w, s.h, 65535, pixels)
    }

    /// 8-bit mask raster: 255 where set.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Pgm {
            width: mask.w,
            height: mask.h,
            maxval: 255,
            pixels: mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { message: message.into(), position: Some(self.pos) }
    }

    /// Skip whitespace and '#' comments (to end of line).
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ascii")
            .parse()
            .map_err(|_| self.err(format!("{what} out of range")))
    }
}

/// Parse a binary (P5) PGM. Comments are tolerated in the header; 16-bit
/// payloads are big-endian per the format.
pub fn read_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("truncated header"));
    }
    let magic = &bytes[0..2];
    if magic != b"P5" {
        let shown = String::from_utf8_lossy(magic);
        return Err(Error::Parse {
            message: format!("unsupported format '{shown}' (only binary P5 is supported)"),
            position: Some(0),
        });
    }
    cur.pos = 2;
    let width = cur.read_uint("width")? as usize;
    let height = cur.read_uint("height")? as usize;
    let maxval = cur.read_uint("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(cur.err(format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates header and payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected single whitespace before payload"));
    }
    cur.pos += 1;
    let bytes_per_px = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bytes_per_px;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            message: format!("payload truncated: have {} bytes, need {need}", payload.len()),
            position: Some(cur.pos + payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Parse {
            message: format!("trailing bytes after payload: {} extra", payload.len() - need),
            position: Some(cur.pos + need),
        });
    }
    let pixels = if bytes_per_px == 1 {
        payload.iter().map(|&b| b as u16).collect()
    } else {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Pgm::new(width, height, maxval as u16, pixels)
}

/// Serialize to binary P5 (no comments emitted).
pub fn write_pgm(p: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", p.width, p.height, p.maxval).into_bytes();
    if p.maxval > 255 {
        for &px in &p.pixels {
            out.extend_from_slice(&px.to_be_bytes());
        }
    } else {
        out.extend(p.pixels.iter().map(|&px| px as u8));
    }
    out
}

/// One dataset element: normalized image and a 0/1 mask tensor.
#[derive(Clone, Debug)]
pub struct Sample<T: Real> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> Sample<T> {
    pub fn mask_binary(&self) -> BinaryMask {
        let s = self.mask.shape();
        BinaryMask::from_plane(self.mask.plane(0, 0), s.h, s.w, T::from_f64(0.5))
            .expect("mask plane well-formed")
    }
}

/// Synthetic-scene generation parameters. Every range is (lo, hi) with
/// lo <= hi; the seed fully determines the output.
#[derive(Clone, Debug)]
pub struct SynthParams {
    pub size: usize,
    pub n_targets: (usize, usize),
    pub sigma: (f64, f64),
    /// Feasible target amplitude range; amplitudes outside it are an error.
    pub amplitude: (f64, f64),
    pub scr_target: (f64, f64),
    pub clutter_octaves: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            n_targets: (1, 3),
            sigma: (0.8, 2.0),
            amplitude: (0.005, 0.95),
            scr_target: (3.0, 8.0),
            clutter_octaves: 4,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config("scene size must be >= 8".into()));
        }
        if self.n_targets.0 > self.n_targets.1 {
            return Err(Error::Config("n_targets range reversed".into()));
        }
        for (name, (lo, hi)) in
            [("sigma", self.sigma), ("amplitude", self.amplitude), ("scr_target", self.scr_target)]
        {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo <= 0.0 {
                return Err(Error::Config(format!("invalid {name} range ({lo}, {hi})")));
            }
        }
        if self.clutter_octaves == 0 {
            return Err(Error::Config("clutter_octaves must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

const CLUTTER_MEAN: f64 = 0.30;
const CLUTTER_STD: f64 = 0.06;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Multi-octave value noise, standardized then mapped to the clutter
/// mean/std, then lightly blurred.
fn clutter_background(size: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field = vec![0.0f64; size * size];
    for o in 0..octaves {
        // octave 0 is the coarsest
        let period = (size >> (o + 1)).max(1);
        let nodes = size / period + 2;
        let grid: Vec<f64> = (0..nodes * nodes).map(|_| standard_normal(rng)).collect();
        let amp = 0.5f64.powi(o as i32);
        for y in 0..size {
            let gy = y as f64 / period as f64;
            let y0 = gy.floor() as usize;
            let fy = gy - y0 as f64;
            for x in 0..size {
                let gx = x as f64 / period as f64;
                let x0 = gx.floor() as usize;
                let fx = gx - x0 as f64;
                let v00 = grid[y0 * nodes + x0];
                let v01 = grid[y0 * nodes + x0 + 1];
                let v10 = grid[(y0 + 1) * nodes + x0];
                let v11 = grid[(y0 + 1) * nodes + x0 + 1];
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                field[y * size + x] += amp * v;
            }
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64;
    let inv_std = 1.0 / var.sqrt().max(1e-9);
    for v in &mut field {
        *v = CLUTTER_MEAN + CLUTTER_STD * (*v - mean) * inv_std;
    }
    // separable [1 2 1]/4 blur with replicated edges
    let blur_pass = |src: &[f64], axis_w: bool| -> Vec<f64> {
        let mut dst = vec![0.0f64; size * size];
        for y in 0..size {
            for x in 0..size {
                let get = |dy: isize| -> f64 {
                    let (yy, xx) = if axis_w {
                        (y, (x as isize + dy).clamp(0, size as isize - 1) as usize)
                    } else {
                        ((y as isize + dy).clamp(0, size as isize - 1) as usize, x)
                    };
                    src[yy * size + xx]
                };
                dst[y * size + x] = 0.25 * get(-1) + 0.5 * get(0) + 0.25 * get(1);
            }
        }
        dst
    };
    blur_pass(&blur_pass(&field, true), false)
}

fn annulus_stats(bg: &[f64], size: usize, cy: f64, cx: f64, sigma: f64) -> Option<(f64, f64)> {
    let (inner, outer) = (2.0 * sigma, 4.0 * sigma);
    let mut vals = Vec::new();
    let r = outer.ceil() as isize + 1;
    for dy in -r..=r {
        for dx in -r..=r {
            let y = cy.round() as isize + dy;
            let x = cx.round() as isize + dx;
            if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                continue;
            }
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d > inner && d <= outer {
                vals.push(bg[y as usize * size + x as usize]);
            }
        }
    }
    if vals.len() < 8 {
        return None;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    Some((mean, var.sqrt()))
}

/// Signal-to-clutter ratio of an image region by the annulus definition:
/// (core peak - annulus mean) / annulus std, annulus radii (2s, 4s].
pub fn measure_scr(image: &[f64], size: usize, cy: f64, cx: f64, sigma: f64) -> Option<f64> {
    let (mean, std) = annulus_stats(image, size, cy, cx, sigma)?;
    let r = sigma.ceil() as isize;
    let mut peak = f64::MIN;
    for dy in -r..=r {
        for dx in -r..=r {
            let y = cy.round() as isize + dy;
            let x = cx.round() as isize + dx;
            if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                continue;
            }
            peak = peak.max(image[y as usize * size + x as usize]);
        }
    }
    if std <= 0.0 {
        return None;
    }
    Some((peak - mean) / std)
}

/// One generated target's ground-truth description.
#[derive(Clone, Debug)]
pub struct SynthTarget {
    pub cy: f64,
    pub cx: f64,
    pub sigma_y: f64,
    pub sigma_x: f64,
    pub theta: f64,
    pub amplitude: f64,
    pub requested_scr: f64,
}

/// A generated scene plus its target list.
#[derive(Clone, Debug)]
pub struct SynthScene<T: Real> {
    pub sample: Sample<T>,
    pub targets: Vec<SynthTarget>,
    pub clipped_fraction: f64,
}

/// Deterministic synthetic infrared scene: blurred multi-octave clutter plus
/// sensor noise, with anisotropic Gaussian targets scaled to the requested
/// signal-to-clutter ratio. The mask marks pixels where a target's clean
/// signal exceeds half its peak.
pub fn synth_scene<T: Real>(p: &SynthParams) -> Result<SynthScene<T>> {
    p.validate()?;
    let size = p.size;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let bg = clutter_background(size, p.clutter_octaves, &mut rng);

    let n_targets = rng.gen_range(p.n_targets.0..=p.n_targets.1);
    let mut targets: Vec<SynthTarget> = Vec::with_capacity(n_targets);
    let mut signal = vec![0.0f64; size * size];
    let mut mask = vec![false; size * size];
    for _ in 0..n_targets {
        let sigma_y = rng.gen_range(p.sigma.0..=p.sigma.1);
        let sigma_x = rng.gen_range(p.sigma.0..=p.sigma.1);
        let sigma_m = sigma_y.max(sigma_x);
        let margin = (4.0 * sigma_m).ceil() + 2.0;
        if 2.0 * margin >= size as f64 {
            return Err(Error::Generation(format!(
                "scene size {size} too small for sigma {sigma_m:.2}"
            )));
        }
        let mut cy = 0.0;
        let mut cx = 0.0;
        for attempt in 0..100 {
            cy = rng.gen_range(margin..size as f64 - margin);
            cx = rng.gen_range(margin..size as f64 - margin);
            let clear = targets
                .iter()
                .all(|t| ((t.cy - cy).powi(2) + (t.cx - cx).powi(2)).sqrt() >= 12.0);
            if clear || attempt == 99 {
                break;
            }
        }
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let scr = rng.gen_range(p.scr_target.0..=p.scr_target.1);
        let (ann_mean, ann_std) = annulus_stats(&bg, size, cy, cx, sigma_m)
            .ok_or_else(|| Error::Generation("annulus too small for statistics".into()))?;
        let bg_center = bg[cy.round() as usize * size + cx.round() as usize];
        let amplitude = scr * ann_std + (ann_mean - bg_center);
        if !(p.amplitude.0..=p.amplitude.1).contains(&amplitude) {
            return Err(Error::Generation(format!(
                "requested SCR {scr:.2} needs amplitude {amplitude:.4} outside feasible range ({}, {})",
                p.amplitude.0, p.amplitude.1
            )));
        }
        let half_q = 2.0 * std::f64::consts::LN_2;
        let reach = (3.0 * sigma_m).ceil() as isize;
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let y = cy.round() as isize + dy;
                let x = cx.round() as isize + dx;
                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                    continue;
                }
                let fy = y as f64 - cy;
                let fx = x as f64 - cx;
                let u = fx * cos_t + fy * sin_t;
                let v = -fx * sin_t + fy * cos_t;
                let q = (u / sigma_x).powi(2) + (v / sigma_y).powi(2);
                let bump = amplitude * (-0.5 * q).exp();
                let idx = y as usize * size + x as usize;
                signal[idx] += bump;
                if q < half_q {
                    mask[idx] = true;
                }
            }
        }
        // the mask component always contains the center pixel
        mask[cy.round() as usize * size + cx.round() as usize] = true;
        targets.push(SynthTarget { cy, cx, sigma_y, sigma_x, theta, amplitude, requested_scr: scr });
    }

    let mut clipped = 0usize;
    let mut image = vec![0.0f64; size * size];
    for i in 0..size * size {
        let v = bg[i] + signal[i] + p.noise_sigma * standard_normal(&mut rng);
        if !(0.0..=1.0).contains(&v) {
            clipped += 1;
        }
        image[i] = v.clamp(0.0, 1.0);
    }

    let shape = Shape::new(1, 1, size, size);
    let sample = Sample {
        id: format!("synth-{:08}", p.seed),
        image: Tensor::new(shape, image.iter().map(|&v| T::from_f64(v)).collect())?,
        mask: Tensor::new(
            shape,
            mask.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect(),
        )?,
    };
    Ok(SynthScene { sample, targets, clipped_fraction: clipped as f64 / (size * size) as f64 })
}

/// Deterministic uniform-[0,1) probe image of shape (1, 1, size, size);
/// used by receptive-field measurements.
pub fn seeded_unit_image<T: Real>(size: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, _, _| T::from_f64(rng.gen_range(0.0..1.0)))
}

/// Dataset split tag.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One manifest row: `id, image-path, mask-path, split`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

/// Parse the manifest text: one comma-separated record per line, `#` comments
/// and blank lines allowed. Order is preserved.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                message: format!("expected 4 comma-separated fields, got {}", fields.len()),
                position: Some(lineno + 1),
            });
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                message: "empty id field".into(),
                position: Some(lineno + 1),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate id '{id}' at line {}",
                lineno + 1
            )));
        }
        let split = Split::parse(fields[3]).ok_or_else(|| Error::Parse {
            message: format!("unknown split token '{}'", fields[3]),
            position: Some(lineno + 1),
        })?;
        entries.push(ManifestEntry {
            id,
            image_path: PathBuf::from(fields[1]),
            mask_path: PathBuf::from(fields[2]),
            split,
        });
    }
    Ok(entries)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}, {}, {}, {}\n",
            e.id,
            e.image_path.display(),
            e.mask_path.display(),
            e.split.as_str()
        ));
    }
    out
}

/// Load the samples of one split, resolving relative paths against `base`.
/// Missing or unreadable files are reported by sample id.
pub fn load_split<T: Real>(
    base: &Path,
    entries: &[ManifestEntry],
    split: Split,
) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        let read = |p: &Path| -> Result<Pgm> {
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            let bytes = std::fs::read(&full).map_err(|io| {
                Error::Validation(format!(
                    "sample '{}': cannot read {}: {io}",
                    e.id,
                    full.display()
                ))
            })?;
            read_pgm(&bytes)
        };
        let image = read(&e.image_path)?.to_tensor::<T>();
        let mask_pgm = read(&e.mask_path)?;
        let mask = Tensor::new(
            Shape::new(1, 1, mask_pgm.height, mask_pgm.width),
            mask_pgm
                .pixels
                .iter()
                .map(|&p| if p * 2 > mask_pgm.maxval { T::ONE } else { T::ZERO })
                .collect(),
        )?;
        if image.shape() != mask.shape() {
            return Err(Error::Validation(format!(
                "sample '{}': image {} vs mask {}",
                e.id,
                image.shape(),
                mask.shape()
            )));
        }
        out.push(Sample { id: e.id.clone(), image, mask });
    }
    Ok(out)
}

/// Generate `train + val` scenes (seeds `base_seed + i`), write PGM pairs and
/// a manifest into `dir`, and return the manifest entries.
pub fn emit_synth_dataset(
    dir: &Path,
    params: &SynthParams,
    train: usize,
    val: usize,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for i in 0..train + val {
        let mut p = params.clone();
        p.seed = params.seed + i as u64;
        let scene = synth_scene::<f32>(&p)?;
        let split = if i < train { Split::Train } else { Split::Val };
        let id = format!("{}-{:05}", split.as_str(), i);
        let image_rel = PathBuf::from(format!("{id}.pgm"));
        let mask_rel = PathBuf::from(format!("{id}.mask.pgm"));
        let img = Pgm::new(
            p.size,
            p.size,
            255,
            scene
                .sample
                .image
                .data()
                .iter()
                .map(|v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u16)
                .collect(),
        )?;
        std::fs::write(dir.join(&image_rel), write_pgm(&img))?;
        let mask = Pgm::from_mask(&scene.sample.mask_binary());
        std::fs::write(dir.join(&mask_rel), write_pgm(&mask))?;
        entries.push(ManifestEntry { id, image_path: image_rel, mask_path: mask_rel, split });
    }
    std::fs::write(dir.join("manifest.csv"), format_manifest(&entries))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::connected_components;

    #[test]
    fn pgm_hand_built_bytes() {
        let bytes = b"P5\n2 2\n255\n\x00\x7f\x80\xff";
        let p = read_pgm(bytes).unwrap();
        assert_eq!((p.width, p.height, p.maxval), (2, 2, 255));
        assert_eq!(p.pixels, vec![0, 127, 128, 255]);
        let t: Tensor<f64> = p.to_tensor();
        let expect = [0.0, 127.0 / 255.0, 128.0 / 255.0, 1.0];
        for (a, b) in t.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_roundtrip_8_and_16_bit() {
        let p8 = Pgm::new(3, 2, 255, vec![0, 10, 200, 255, 31, 7]).unwrap();
        assert_eq!(read_pgm(&write_pgm(&p8)).unwrap(), p8);
        let p16 = Pgm::new(2, 2, 65535, vec![0, ma(), 12345, 256]).unwrap();
        assert_eq!(read_pgm(&write_pgm(&p16)).unwrap(), p16);
        // byte-level roundtrip
        let bytes = write_pgm(&p16);
        assert_eq!(write_pgm(&read_pgm(&bytes).unwrap()), bytes);

        fn ma() -> u16 {
            65535
        }
    }

    #[test]
    fn pgm_reads_comments_but_never_writes_them() {
        let bytes = b"P5 # a comment\n# more\n 2\t1 # inline\n255\n\x01\x02";
        let p = read_pgm(bytes).unwrap();
        assert_eq!(p.pixels, vec![1, 2]);
        assert!(!write_pgm(&p).contains(&b'#'));
    }

    #[test]
    fn pgm_error_contracts() {
        assert!(matches!(
            read_pgm(b"P6\n2 2\n255\n aaaaaaaaaaaa"),
            Err(Error::Parse { position: Some(0), .. })
        ));
        assert!(matches!(read_pgm(b"P2\n2 2\n255\n0 1 2 3"), Err(Error::Parse { .. })));
        // truncated payload reports a byte offset
        match read_pgm(b"P5\n2 2\n255\n\x00\x7f") {
            Err(Error::Parse { position: Some(p), message }) => {
                assert!(message.contains("truncated"), "{message}");
                assert!(p > 0);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let p = SynthParams { seed: 99, ..SynthParams::default() };
        let a = synth_scene::<f32>(&p).unwrap();
        let b = synth_scene::<f32>(&p).unwrap();
        assert_eq!(a.sample.image, b.sample.image);
        assert_eq!(a.sample.mask, b.sample.mask);
        let c = synth_scene::<f32>(&SynthParams { seed: 100, ..p }).unwrap();
        assert_ne!(a.sample.image, c.sample.image);
    }

    #[test]
    fn synth_zero_targets_empty_mask() {
        let p = SynthParams { n_targets: (0, 0), ..SynthParams::default() };
        let s = synth_scene::<f64>(&p).unwrap();
        assert!(s.sample.mask.data().iter().all(|&v| v == 0.0));
        assert!(s.targets.is_empty());
    }

    #[test]
    fn synth_values_bounded_and_rarely_clipped() {
        for seed in 0..20u64 {
            let p = SynthParams { seed, ..SynthParams::default() };
            let s = synth_scene::<f64>(&p).unwrap();
            for &v in s.sample.image.data() {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(s.clipped_fraction < 0.01, "seed {seed} clipped {}", s.clipped_fraction);
        }
    }

    #[test]
    fn synth_mask_components_nonempty_with_interior_centroids() {
        for seed in 0..20u64 {
            let p = SynthParams { seed: 1000 + seed, ..SynthParams::default() };
            let s = synth_scene::<f64>(&p).unwrap();
            let cc = connected_components(&s.sample.mask_binary());
            assert!(!cc.is_empty(), "seed {seed} produced no mask components");
            for comp in &cc.components {
                assert!(comp.pixels >= 1);
                assert!(comp.centroid.0 >= 0.0 && comp.centroid.0 < p.size as f64);
                assert!(comp.centroid.1 >= 0.0 && comp.centroid.1 < p.size as f64);
            }
        }
    }

    #[test]
    fn synth_measured_scr_tracks_request() {
        // single target at a pinned ratio; the mean measured value over many
        // seeds stays within 20%
        let mut measured = Vec::new();
        for seed in 0..100u64 {
            let p = SynthParams {
                n_targets: (1, 1),
                scr_target: (5.0, 5.0),
                seed: 5000 + seed,
                ..SynthParams::default()
            };
            let s = synth_scene::<f64>(&p).unwrap();
            let t = &s.targets[0];
            let img: Vec<f64> = s.sample.image.data().to_vec();
            if let Some(scr) =
                measure_scr(&img, p.size, t.cy, t.cx, t.sigma_y.max(t.sigma_x))
            {
                measured.push(scr);
            }
        }
        assert!(measured.len() >= 90);
        let mean = measured.iter().sum::<f64>() / measured.len() as f64;
        assert!((mean - 5.0).abs() / 5.0 < 0.20, "mean measured SCR {mean}");
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let text = "a, img/a.pgm, msk/a.pgm, train\n# comment\n\nb, img/b.pgm, msk/b.pgm, val\nc, i.pgm, m.pgm, train\n";
        let entries = parse_manifest(text).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].id, "a");
        assert_eq!(entries[1].split, Split::Val);
        // order-stable and idempotent through format/parse
        let again = parse_manifest(&format_manifest(&entries)).unwrap();
        assert_eq!(again, entries);

        match parse_manifest("x, a.pgm, b.pgm, test\n") {
            Err(Error::Parse { message, position: Some(1) }) => {
                assert!(message.contains("test"), "{message}")
            }
            other => panic!("expected parse error naming the token, got {other:?}"),
        }
        assert!(matches!(
            parse_manifest("x, a.pgm, b.pgm, train\nx, c.pgm, d.pgm, val\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_manifest("only, three, fields\n"),
            Err(Error::Parse { position: Some(1), .. })
        ));
    }

    #[test]
    fn emit_and_load_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let params = SynthParams { size: 32, seed: 7, ..SynthParams::default() };
        let entries = emit_synth_dataset(dir.path(), &params, 3, 2).unwrap();
        assert_eq!(entries.len(), 5);
        let manifest_text = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let parsed = parse_manifest(&manifest_text).unwrap();
        assert_eq!(parsed, entries);
        let train: Vec<Sample<f32>> = load_split(dir.path(), &parsed, Split::Train).unwrap();
        let val: Vec<Sample<f32>> = load_split(dir.path(), &parsed, Split::Val).unwrap();
        assert_eq!((train.len(), val.len()), (3, 2));
        assert_eq!(train[0].image.shape(), Shape::new(1, 1, 32, 32));
        // masks decode to exact 0/1
        for s in &train {
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }

        // missing file reported by id
        let mut broken = parsed.clone();
        broken[0].image_path = PathBuf::from("missing.pgm");
        match load_split::<f32>(dir.path(), &broken, Split::Train) {
            Err(Error::Validation(msg)) => assert!(msg.contains("train-00000"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
