//! Procedural multi-domain image benchmark: geometric shape classes rendered
//! once, then restyled per domain in pixel space.

use std::f64::consts::PI;
use std::path::Path;

use ndcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::augment::Rng;
use crate::error::{DsuError, Result};

pub const GENERATOR_VERSION: &str = "shapes-v1";
pub const MIN_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Membership test in shape-local coordinates scaled to unit radius.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs().max(v.abs()) <= 0.8,
            Shape::Triangle => {
                // vertices on the unit circle at 90, 210 and 330 degrees
                let s3 = 3f64.sqrt();
                v >= -0.5 && v <= 1.0 - s3 * u && v <= 1.0 + s3 * u
            }
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub channel_shift: [f64; 3],
    pub channel_scale: [f64; 3],
    pub texture_amp: f64,
    pub texture_freq: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Style that leaves raw renders unchanged.
    pub fn identity(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            channel_shift: [0.0; 3],
            channel_scale: [1.0; 3],
            texture_amp: 0.0,
            texture_freq: 1.0,
            noise_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(DsuError::Config(format!("domain `{}`: {what}", self.name)));
        if self.name.is_empty() {
            return Err(DsuError::Config("domain name must not be empty".into()));
        }
        if self.channel_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("channel_scale entries must be positive");
        }
        if self.channel_shift.iter().any(|s| !s.is_finite()) {
            return bad("channel_shift entries must be finite");
        }
        if !(self.texture_amp.is_finite() && self.texture_amp >= 0.0) {
            return bad("texture_amp must be >= 0");
        }
        if !(self.texture_freq.is_finite() && self.texture_freq > 0.0) {
            return bad("texture_freq must be > 0");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        Ok(())
    }
}

/// The four default domains. `art` is warm and low-contrast, `cartoon` dark and
/// high-contrast, `sketch` washed out and low-contrast with fine texture.
pub fn default_domains(seed: u64) -> Vec<DomainSpec> {
    let d = |i: u64, name: &str, shift: [f64; 3], scale: [f64; 3], amp: f64, freq: f64, noise: f64| DomainSpec {
        name: name.to_string(),
        channel_shift: shift,
        channel_scale: scale,
        texture_amp: amp,
        texture_freq: freq,
        noise_std: noise,
        seed: seed.wrapping_mul(1_000_003).wrapping_add(i),
    };
    vec![
        d(0, "photo", [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 1.0, 0.02),
        d(1, "art", [0.3, 0.15, 0.0], [0.5, 0.6, 0.7], 0.05, 3.0, 0.03),
        d(2, "cartoon", [-0.25, -0.1, -0.2], [1.6, 1.4, 1.5], 0.0, 1.0, 0.01),
        d(3, "sketch", [0.45, 0.45, 0.45], [0.4, 0.4, 0.4], 0.05, 6.0, 0.03),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3,H,W]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

/// Geometry and colouring of one raw render.
#[derive(Debug, Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    fg: [f64; 3],
    bg: [f64; 3],
}

impl Placement {
    fn draw(rng: &mut Rng, size: usize) -> Self {
        let s = size as f64;
        let mut span = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
        let cx = span(0.38, 0.62) * s;
        let cy = span(0.38, 0.62) * s;
        let radius = span(0.22, 0.34) * s;
        let angle = span(0.0, 2.0 * PI);
        let fg = [span(0.55, 0.95), span(0.55, 0.95), span(0.55, 0.95)];
        let bg = [span(0.05, 0.4), span(0.05, 0.4), span(0.05, 0.4)];
        Self {
            cx,
            cy,
            radius,
            angle,
            fg,
            bg,
        }
    }
}

/// Anti-aliased raw render in `[0,1]`, `[3,size,size]` row-major.
fn render(shape: Shape, p: &Placement, size: usize) -> Vec<f64> {
    const SUB: usize = 3;
    let (sin, cos) = p.angle.sin_cos();
    let mut cover = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - p.cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - p.cy;
                    let u = (cos * px + sin * py) / p.radius;
                    let v = (-sin * px + cos * py) / p.radius;
                    if shape.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            cover[y * size + x] = hits as f64 / (SUB * SUB) as f64;
        }
    }
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        out.extend(cover.iter().map(|a| p.bg[c] + (p.fg[c] - p.bg[c]) * a));
    }
    out
}

/// Applies a domain style to a raw render. `rng` feeds the texture phase
/// and the pixel noise. Values are clipped to `[0,1]` only when `clip` is set.
fn stylize(raw: &[f64], spec: &DomainSpec, size: usize, rng: &mut Rng, clip: bool) -> Vec<f64> {
    let phase = 2.0 * PI * rng.uniform();
    let theta = 2.0 * PI * rng.uniform();
    let (st, ct) = theta.sin_cos();
    let hw = size * size;
    let mut out = Vec::with_capacity(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        let c = i / hw;
        let (y, x) = ((i % hw) / size, i % size);
        let mut s = spec.channel_scale[c] * v + spec.channel_shift[c];
        if spec.texture_amp > 0.0 {
            let t = (x as f64 * ct + y as f64 * st) / size as f64;
            s += spec.texture_amp * (2.0 * PI * spec.texture_freq * t + phase).sin();
        }
        if spec.noise_std > 0.0 {
            s += spec.noise_std * rng.normal();
        }
        out.push(if clip { s.clamp(0.0, 1.0) } else { s });
    }
    out
}

fn check_request(classes: usize, n_per_class: usize, size: usize) -> Result<()> {
    if classes == 0 || classes > Shape::ALL.len() {
        return Err(DsuError::Config(format!(
            "classes must be in 1..={}, got {classes}",
            Shape::ALL.len()
        )));
    }
    if n_per_class == 0 {
        return Err(DsuError::Config("n_per_class must be >= 1".into()));
    }
    if size < MIN_SIZE {
        return Err(DsuError::Config(format!("image size must be >= {MIN_SIZE}, got {size}")));
    }
    Ok(())
}

/// Raw (unstyled) and styled pixels for sample `index` of a domain, the
/// styled one optionally unclipped. Labels cycle through the classes.
fn sample_pixels(spec: &DomainSpec, classes: usize, index: usize, size: usize, clip: bool) -> (usize, Vec<f64>, Vec<f64>) {
    let label = index % classes;
    let mut geo = Rng::stream(spec.seed, 2 * index as u64);
    let mut sty = Rng::stream(spec.seed, 2 * index as u64 + 1);
    let raw = render(Shape::ALL[label], &Placement::draw(&mut geo, size), size);
    let styled = stylize(&raw, spec, size, &mut sty, clip);
    (label, raw, styled)
}

/// Renders `classes * n_per_class` samples of one domain, deterministic in `spec.seed`.
pub fn generate_domain(spec: &DomainSpec, classes: usize, n_per_class: usize, size: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    check_request(classes, n_per_class, size)?;
    (0..classes * n_per_class)
        .map(|i| {
            let (label, _, px) = sample_pixels(spec, classes, i, size, true);
            Ok(Sample {
                image: Tensor::from_f64(&[3, size, size], &px)?,
                label,
                domain: spec.name.clone(),
            })
        })
        .collect()
}

/// Raw render and unclipped styled image of one sample, both `[3,H,W]`.
pub fn render_pair(spec: &DomainSpec, classes: usize, index: usize, size: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    spec.validate()?;
    check_request(classes, 1, size)?;
    let (_, raw, styled) = sample_pixels(spec, classes, index, size, false);
    Ok((
        Tensor::from_f64(&[3, size, size], &raw)?,
        Tensor::from_f64(&[3, size, size], &styled)?,
    ))
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Train on every domain except `held_out` (shuffled by `seed`), test on it.
pub fn leave_one_out(domains: &[Domain], held_out: &str, seed: u64) -> Result<Split> {
    if !domains.iter().any(|d| d.spec.name == held_out) {
        return Err(DsuError::UnknownDomain(held_out.to_string()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in domains {
        if d.spec.name == held_out {
            test.extend(d.samples.iter().cloned());
        } else {
            train.extend(d.samples.iter().cloned());
        }
    }
    Rng::new(seed).shuffle(&mut train);
    Ok(Split { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    Contrast,
    Brightness,
}

pub const MAX_SEVERITY: usize = 5;
/// Indexed by severity; entry 0 is the identity.
pub const NOISE_STD: [f64; 6] = [0.0, 0.04, 0.08, 0.12, 0.18, 0.26];
pub const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.75, 0.6, 0.45, 0.3, 0.2];
pub const BRIGHTNESS_OFFSET: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Pixel-level corruption at `severity` (0 leaves samples unchanged).
/// Noise draws depend only on `seed` and the sample position, so higher
/// severities scale the same draws.
pub fn corrupt(samples: &[Sample], kind: Corruption, severity: usize, seed: u64) -> Result<Vec<Sample>> {
    if severity > MAX_SEVERITY {
        return Err(DsuError::Config(format!(
            "severity must be in 0..={MAX_SEVERITY}, got {severity}"
        )));
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let px = s.image.data();
            let out: Vec<f32> = match kind {
                Corruption::GaussianNoise => {
                    let std = NOISE_STD[severity];
                    let mut rng = Rng::stream(seed, i as u64);
                    px.iter()
                        .map(|&v| (v as f64 + std * rng.normal()).clamp(0.0, 1.0) as f32)
                        .collect()
                }
                Corruption::Contrast => {
                    let f = CONTRAST_FACTOR[severity];
                    let hw = px.len() / 3;
                    px.chunks(hw)
                        .flat_map(|ch| {
                            let m = ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                            ch.iter().map(move |&v| (m + (v as f64 - m) * f) as f32)
                        })
                        .collect()
                }
                Corruption::Brightness => {
                    let o = BRIGHTNESS_OFFSET[severity];
                    px.iter().map(|&v| (v as f64 + o).clamp(0.0, 1.0) as f32).collect()
                }
            };
            Ok(Sample {
                image: Tensor::new(s.image.shape(), out)?,
                label: s.label,
                domain: s.domain.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub image_size: usize,
    pub n_per_class: usize,
    pub domains: Vec<DomainSpec>,
    /// Samples per domain, parallel to `domains`.
    pub counts: Vec<usize>,
}

impl DatasetManifest {
    pub fn new(seed: u64, classes: usize, n_per_class: usize, image_size: usize, domains: Vec<DomainSpec>) -> Result<Self> {
        check_request(classes, n_per_class, image_size)?;
        if domains.is_empty() {
            return Err(DsuError::Config("at least one domain is required".into()));
        }
        for (i, d) in domains.iter().enumerate() {
            d.validate()?;
            if domains[..i].iter().any(|e| e.name == d.name) {
                return Err(DsuError::Config(format!("duplicate domain `{}`", d.name)));
            }
        }
        Ok(Self {
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            classes: Shape::ALL[..classes].iter().map(|s| s.name().to_string()).collect(),
            image_size,
            n_per_class,
            counts: vec![classes * n_per_class; domains.len()],
            domains,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator_version != GENERATOR_VERSION {
            return Err(DsuError::Config(format!(
                "manifest generator_version `{}` is not `{GENERATOR_VERSION}`",
                self.generator_version
            )));
        }
        let fresh = Self::new(
            self.seed,
            self.classes.len(),
            self.n_per_class,
            self.image_size,
            self.domains.clone(),
        )?;
        if fresh.classes != self.classes || fresh.counts != self.counts {
            return Err(DsuError::Config("manifest classes or counts are inconsistent".into()));
        }
        Ok(())
    }

    /// Regenerates every domain. Domains render independently, in parallel.
    pub fn generate(&self) -> Result<Vec<Domain>> {
        use rayon::prelude::*;
        self.validate()?;
        self.domains
            .par_iter()
            .map(|spec| {
                Ok(Domain {
                    spec: spec.clone(),
                    samples: generate_domain(spec, self.classes.len(), self.n_per_class, self.image_size)?,
                })
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DsuError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `<name>.images.bin` (float32 `[N,3,H,W]` plus its JSON sidecar),
/// `<name>.labels.bin` (int32 `[N]`) per domain, and `manifest.json`.
pub fn export(dir: &Path, manifest: &DatasetManifest, domains: &[Domain]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DsuError::io(dir, e))?;
    for d in domains {
        let n = d.samples.len();
        let s = manifest.image_size;
        let mut px = Vec::with_capacity(n * 3 * s * s);
        let mut labels = Vec::with_capacity(n * 4);
        for smp in &d.samples {
            px.extend_from_slice(smp.image.data());
            labels.extend_from_slice(&(smp.label as i32).to_le_bytes());
        }
        Tensor::new(&[n, 3, s, s], px)?.save(&dir.join(format!("{}.images.bin", d.spec.name)))?;
        let lp = dir.join(format!("{}.labels.bin", d.spec.name));
        std::fs::write(&lp, labels).map_err(|e| DsuError::io(&lp, e))?;
    }
    let mp = dir.join(MANIFEST_FILE);
    std::fs::write(&mp, serde_json::to_vec_pretty(manifest)?).map_err(|e| DsuError::io(&mp, e))?;
    Ok(())
}

/// Reads a directory written by [`export`].
pub fn import(dir: &Path) -> Result<(DatasetManifest, Vec<Domain>)> {
    let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    let s = manifest.image_size;
    let mut domains = Vec::new();
    for (spec, &count) in manifest.domains.iter().zip(&manifest.counts) {
        let images = Tensor::<f32>::load(&dir.join(format!("{}.images.bin", spec.name)))?;
        if images.shape() != [count, 3, s, s] {
            return Err(DsuError::Input(format!(
                "domain `{}` images have shape {:?}, manifest says [{count},3,{s},{s}]",
                spec.name,
                images.shape()
            )));
        }
        let lp = dir.join(format!("{}.labels.bin", spec.name));
        let raw = std::fs::read(&lp).map_err(|e| DsuError::io(&lp, e))?;
        if raw.len() != 4 * count {
            return Err(DsuError::Input(format!("{} holds {} bytes, expected {}", lp.display(), raw.len(), 4 * count)));
        }
        let per = 3 * s * s;
        let samples = raw
            .chunks_exact(4)
            .zip(images.data().chunks_exact(per))
            .map(|(l, px)| {
                let label = i32::from_le_bytes([l[0], l[1], l[2], l[3]]);
                if label < 0 || label as usize >= manifest.classes.len() {
                    return Err(DsuError::Input(format!("label {label} out of range in {}", lp.display())));
                }
                Ok(Sample {
                    image: Tensor::new(&[3, s, s], px.to_vec())?,
                    label: label as usize,
                    domain: spec.name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        domains.push(Domain {
            spec: spec.clone(),
            samples,
        });
    }
    Ok((manifest, domains))
}

/// Stacks samples into a `[B,3,H,W]` batch and their labels.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| DsuError::Input("cannot batch zero samples".into()))?;
    let shape = first.image.shape();
    let mut px = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        px.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let t = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], px)?;
    Ok((t, labels))
}
