//! Procedural panoramic phantoms.
//!
//! A phantom is two dental arches drawn as rows of star-shaped tooth
//! outlines over a textured bone background. Every rendered tooth is the
//! rasterization of its annotated polygon, so ground truth is exact.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{rasterize_polygon, DatasetManifest, GrayImage, ManifestEntry};
use crate::domain::{FdiCode, Point, RadiographCategory, ToothAnnotation, ToothKind};
use crate::error::{Error, Result};

/// Smallest side length on which all 32 teeth can be laid out.
pub const MIN_RESOLUTION: usize = 256;

const OUTLINE_VERTICES: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    /// (height, width) in pixels.
    pub resolution: (usize, usize),
    pub category: RadiographCategory,
    pub missing_teeth: Vec<FdiCode>,
    /// Implants drawn in the gaps of missing teeth (category 5 only).
    pub implant_count: usize,
    /// Supernumerary distal molars (category 6 only).
    pub extra_teeth: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise_level: f64,
}

impl PhantomConfig {
    /// A full-dentition phantom of `category` with no extras.
    pub fn new(seed: u64, resolution: (usize, usize), category: RadiographCategory) -> Self {
        PhantomConfig {
            seed,
            resolution,
            category,
            missing_teeth: Vec::new(),
            implant_count: 0,
            extra_teeth: 0,
            noise_level: 0.02,
        }
    }

    /// Draws category-appropriate missing teeth, implants and extras.
    pub fn sample(seed: u64, resolution: (usize, usize), category: RadiographCategory) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ca7e_6041);
        let mut cfg = PhantomConfig::new(seed, resolution, category);
        let draw_missing = |rng: &mut ChaCha8Rng, k: usize| {
            let mut all: Vec<FdiCode> = FdiCode::all().collect();
            for i in 0..k {
                let j = rng.random_range(i..all.len());
                all.swap(i, j);
            }
            let mut out = all[..k].to_vec();
            out.sort();
            out
        };
        match category.id() {
            5 => {
                let k = rng.random_range(1..=4);
                cfg.missing_teeth = draw_missing(&mut rng, k);
                cfg.implant_count = rng.random_range(1..=k);
            }
            6 => cfg.extra_teeth = rng.random_range(1..=2),
            7..=10 => {
                let k = rng.random_range(1..=6);
                cfg.missing_teeth = draw_missing(&mut rng, k);
            }
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h < MIN_RESOLUTION || w < MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "phantom resolution {h}x{w} too small to place 32 teeth (minimum {MIN_RESOLUTION}x{MIN_RESOLUTION})"
            )));
        }
        let cat = self.category;
        if (self.implant_count > 0) != cat.has_implant() {
            return Err(Error::Config(format!(
                "category {} with implant_count {}",
                cat.id(),
                self.implant_count
            )));
        }
        if self.implant_count > self.missing_teeth.len() {
            return Err(Error::Config("each implant needs a missing tooth to replace".into()));
        }
        if (self.extra_teeth > 0) != cat.supernumerary() {
            return Err(Error::Config(format!(
                "category {} with {} extra teeth",
                cat.id(),
                self.extra_teeth
            )));
        }
        if self.extra_teeth > 4 {
            return Err(Error::Config("at most one extra distal molar per quadrant".into()));
        }
        if cat.has_32_teeth() && !self.missing_teeth.is_empty() {
            return Err(Error::Config(format!("category {} must show all 32 teeth", cat.id())));
        }
        if (7..=10).contains(&cat.id()) && self.missing_teeth.is_empty() {
            return Err(Error::Config(format!("category {} needs at least one missing tooth", cat.id())));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config("noise_level must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A rendered phantom and its manifest entry.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: GrayImage,
    pub entry: ManifestEntry,
}

/// Per-position (width, length) in units of the mean tooth width.
fn tooth_dims(fdi: FdiCode) -> (f64, f64) {
    let upper = fdi.is_upper();
    match (fdi.position(), upper) {
        (1, true) => (0.95, 3.0),
        (2, true) => (0.8, 2.8),
        (1, false) => (0.68, 2.7),
        (2, false) => (0.72, 2.7),
        (3, _) => (0.9, 3.5),
        (4, _) | (5, _) => (0.85, 2.9),
        (6, _) => (1.35, 2.6),
        (7, _) => (1.25, 2.5),
        _ => (1.1, 2.3),
    }
}

/// Tooth placement in image space.
#[derive(Debug, Clone, Copy)]
struct Placement {
    /// Crown-tip to apex axis center.
    cx: f64,
    cy: f64,
    half_w: f64,
    half_len: f64,
    /// Unit vector from center toward the root apex.
    ax: f64,
    ay: f64,
    kind: ToothKind,
    lobe_phase: f64,
}

impl Placement {
    /// Star-shaped outline around the center; every radius is positive, so
    /// the polygon is simple.
    fn outline(&self) -> Vec<Point> {
        let (a, b) = (self.half_w, self.half_len);
        let p = 2.6;
        (0..OUTLINE_VERTICES)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / OUTLINE_VERTICES as f64;
                // local frame: u across the tooth, v along the axis (+v = root)
                let (s, c) = t.sin_cos();
                let mut r = (c.abs().powf(p) / a.powf(p) + s.abs().powf(p) / b.powf(p)).powf(-1.0 / p);
                // angle from the root direction, in (-pi, pi]
                let phi = (t - PI / 2.0 + PI).rem_euclid(2.0 * PI) - PI;
                let crown = (-(phi.abs() - PI).powi(2) / 0.35).exp();
                match self.kind {
                    ToothKind::Canine => r *= 1.0 + 0.18 * crown,
                    ToothKind::Premolar => r *= 1.0 - 0.22 * (-(phi / 0.2).powi(2)).exp(),
                    ToothKind::Molar => {
                        let notch = |c0: f64| (-((phi - c0) / 0.14).powi(2)).exp();
                        r *= 1.0 - 0.25 * (notch(-0.35 + self.lobe_phase) + notch(0.35 + self.lobe_phase));
                    }
                    ToothKind::Incisor => {}
                }
                // root taper
                let taper = 1.0 - 0.25 * (phi.cos().max(0.0)).powi(2) * (c.abs());
                r *= taper;
                let (u, v) = (r * c, r * s);
                // v axis along (ax, ay), u axis perpendicular
                let x = self.cx + u * (-self.ay) + v * self.ax;
                let y = self.cy + u * self.ax + v * self.ay;
                Point::new((x * 100.0).round() / 100.0, (y * 100.0).round() / 100.0)
            })
            .collect()
    }

    /// Local (u, v) of an image point, v in [-1, 1] from crown to apex.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let v = dx * self.ax + dy * self.ay;
        let u = -dx * self.ay + dy * self.ax;
        (u / self.half_w, v / self.half_len)
    }
}

struct Layout {
    placements: Vec<(FdiCode, Placement)>,
    extras: Vec<(FdiCode, Placement)>,
    occlusal: Box<dyn Fn(f64) -> f64>,
}

fn layout(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Layout {
    let (h, w) = (cfg.resolution.0 as f64, cfg.resolution.1 as f64);
    let cx = w / 2.0 + rng.random_range(-0.03..0.03) * w;
    let cy = h / 2.0 + rng.random_range(-0.03..0.03) * h;
    let half_arch = w * 0.36 * rng.random_range(0.93..1.04);
    let smile = h * rng.random_range(0.03..0.08);
    let gap = h * 0.012;
    let occlusal = move |x: f64| cy - smile * ((x - cx) / half_arch).powi(2);
    let slope = move |x: f64| -2.0 * smile * (x - cx) / (half_arch * half_arch);
    // unit width so eight teeth and their gaps span the half arch
    let spacing = 0.06;
    let mut placements = Vec::with_capacity(32);
    let mut extras = Vec::new();
    let len_scale = h * 0.075 * rng.random_range(0.92..1.08);
    for quadrant in 1..=4u8 {
        let upper = quadrant <= 2;
        // patient's right (quadrants 1, 4) appears on the image left
        let side = if quadrant == 1 || quadrant == 4 { -1.0 } else { 1.0 };
        let widths: Vec<f64> = (1..=8)
            .map(|p| tooth_dims(FdiCode::from_parts(quadrant, p).unwrap()).0)
            .collect();
        let unit = half_arch / (widths.iter().sum::<f64>() + spacing * 8.5);
        let mut offset = spacing * unit / 2.0;
        let mut last_end = 0.0;
        for p in 1..=9u8 {
            let extra = p == 9;
            let fdi = FdiCode::from_parts(quadrant, p.min(8)).unwrap();
            let (wu, lu) = tooth_dims(fdi);
            let width = if extra { wu * 0.85 * unit } else { widths[p as usize - 1] * unit };
            let center_off = offset + width / 2.0;
            offset += width + spacing * unit;
            if !extra {
                last_end = offset;
            }
            let x = cx + side * center_off;
            let len = lu * len_scale * if extra { 0.8 } else { 1.0 };
            // perpendicular to the occlusal curve, pointing toward the root
            let s = slope(x);
            let norm = (1.0 + s * s).sqrt();
            let jitter: f64 = rng.random_range(-0.06..0.06);
            let (mut ax, mut ay) = (-s / norm, 1.0 / norm);
            if upper {
                ax = -ax;
                ay = -ay;
            }
            let (sj, cj) = jitter.sin_cos();
            let (ax, ay) = (ax * cj - ay * sj, ax * sj + ay * cj);
            let crown_y = occlusal(x) + if upper { -gap } else { gap };
            let half_len = len / 2.0;
            let pl = Placement {
                cx: x + ax * half_len,
                cy: crown_y + ay * half_len,
                half_w: width * 0.5,
                half_len,
                ax,
                ay,
                kind: fdi.kind(),
                lobe_phase: rng.random_range(-0.08..0.08),
            };
            if extra {
                extras.push((fdi, pl));
            } else {
                placements.push((fdi, pl));
            }
        }
        debug_assert!(last_end <= half_arch + 1e-9);
    }
    placements.sort_by_key(|(f, _)| f.channel());
    Layout {
        placements,
        extras,
        occlusal: Box::new(occlusal),
    }
}

/// Smooth pseudo-random field from a handful of oriented sinusoids.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, n: usize, freq: (f64, f64)) -> Self {
        let waves = (0..n)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let f = rng.random_range(freq.0..freq.1);
                (f * theta.cos(), f * theta.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
            })
            .collect();
        Texture { waves }
    }

    /// Value in roughly [-1, 1] at normalized coordinates.
    fn at(&self, u: f64, v: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (2.0 * PI * (fx * u + fy * v) + ph).sin())
            .sum::<f64>()
            / total
    }
}

/// Renders one phantom. Deterministic in `config`.
pub fn generate_phantom(config: &PhantomConfig, image_id: &str) -> Result<Phantom> {
    config.validate()?;
    let (h, w) = config.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lay = layout(config, &mut rng);
    let bone = Texture::new(&mut rng, 6, (1.0, 4.0));
    let grain = Texture::new(&mut rng, 6, (8.0, 20.0));
    let dentin = Texture::new(&mut rng, 4, (10.0, 25.0));

    let mut img = vec![0f64; h * w];
    let (hf, wf) = (h as f64, w as f64);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / wf, y as f64 / hf);
            let occ = (lay.occlusal)(x as f64);
            let jaw = (-((y as f64 - occ) / (0.28 * hf)).powi(2)).exp();
            let edge = ((u - 0.5).abs() * 2.0).powi(4);
            img[y * w + x] = 0.16 + 0.14 * jaw - 0.08 * edge + 0.05 * bone.at(u, v) + 0.02 * grain.at(u, v);
        }
    }

    let missing: Vec<FdiCode> = config.missing_teeth.clone();
    let mut annotations = Vec::new();
    let mut render = |fdi: FdiCode, pl: &Placement, img: &mut [f64], rng: &mut ChaCha8Rng| -> Result<Vec<u8>> {
        let poly = pl.outline();
        let mask = rasterize_polygon(&poly, h, w);
        let base = rng.random_range(0.58..0.68);
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] == 0 {
                    continue;
                }
                let (lu, lv) = pl.local(x as f64 + 0.5, y as f64 + 0.5);
                let mut val = base + 0.04 * dentin.at(x as f64 / wf, y as f64 / hf);
                if lv < -0.35 {
                    val += 0.15; // enamel
                }
                if lu.abs() < 0.15 && lv > -0.3 && lv < 0.8 {
                    val -= 0.12; // pulp canal
                }
                let i = y * w + x;
                img[i] = img[i].max(val);
            }
        }
        annotations.push(ToothAnnotation::from_polygon(image_id, fdi, poly)?);
        Ok(mask)
    };

    let mut crowns: Vec<(FdiCode, Placement)> = Vec::new();
    for (fdi, pl) in &lay.placements {
        if missing.contains(fdi) {
            continue;
        }
        render(*fdi, pl, &mut img, &mut rng)?;
        crowns.push((*fdi, *pl));
    }
    // supernumerary distal molars carry the code of the last molar
    let mut extra_quadrants: Vec<usize> = (0..4).collect();
    for i in 0..config.extra_teeth {
        let j = rng.random_range(i..4);
        extra_quadrants.swap(i, j);
    }
    for &q in &extra_quadrants[..config.extra_teeth] {
        let (fdi, pl) = lay.extras[q];
        render(fdi, &pl, &mut img, &mut rng)?;
    }

    if config.category.has_restoration() {
        let n = rng.random_range(2..=5).min(crowns.len());
        for _ in 0..n {
            let (_, pl) = crowns[rng.random_range(0..crowns.len())];
            let (r_u, r_v) = (rng.random_range(0.3..0.6), rng.random_range(0.15..0.3));
            paint(&mut img, h, w, &pl, |lu, lv| {
                (lu / r_u).powi(2) + ((lv + 0.65) / r_v).powi(2) <= 1.0
            }, 0.95);
        }
    }
    if config.category.has_appliance() {
        for (_, pl) in &crowns {
            paint(&mut img, h, w, pl, |lu, lv| lu.abs() < 0.45 && (lv + 0.55).abs() < 0.08, 0.93);
        }
        let thickness = (hf / 256.0).max(1.0);
        for x in 0..w {
            for upper in [true, false] {
                let occ = (lay.occlusal)(x as f64);
                let off = 0.9 * hf * 0.075 * if upper { -1.0 } else { 1.0 };
                let yc = occ + off;
                let y0 = (yc - thickness).max(0.0) as usize;
                let y1 = ((yc + thickness) as usize).min(h - 1);
                let in_arch = lay.placements.iter().any(|(_, p)| (p.cx - x as f64).abs() < p.half_w * 1.2);
                if in_arch {
                    for y in y0..=y1 {
                        img[y * w + x] = img[y * w + x].max(0.9);
                    }
                }
            }
        }
    }
    if config.implant_count > 0 {
        for fdi in missing.iter().take(config.implant_count) {
            let (_, pl) = lay.placements.iter().find(|(f, _)| f == fdi).copied().unwrap();
            paint(&mut img, h, w, &pl, |lu, lv| {
                lu.abs() < 0.32 * (1.0 - 0.3 * lv.max(0.0)) && lv > -0.5 && lv < 0.85
            }, 0.98);
        }
    }

    let noise = Normal::new(0.0, config.noise_level.max(1e-12)).unwrap();
    let data = img
        .iter()
        .map(|&v| {
            let n = if config.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    let image = GrayImage::from_vec(h, w, data)?;
    let entry = ManifestEntry {
        image_id: image_id.to_string(),
        file: format!("images/{image_id}.png"),
        width: w as u32,
        height: h as u32,
        category: config.category,
        annotations,
    };
    Ok(Phantom { image, entry })
}

fn paint(img: &mut [f64], h: usize, w: usize, pl: &Placement, inside: impl Fn(f64, f64) -> bool, value: f64) {
    let reach = pl.half_len.max(pl.half_w) + 2.0;
    let x0 = (pl.cx - reach).floor().max(0.0) as usize;
    let x1 = ((pl.cx + reach).ceil() as usize).min(w - 1);
    let y0 = (pl.cy - reach).floor().max(0.0) as usize;
    let y1 = ((pl.cy + reach).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (lu, lv) = pl.local(x as f64 + 0.5, y as f64 + 0.5);
            if inside(lu, lv) {
                img[y * w + x] = img[y * w + x].max(value);
            }
        }
    }
}

/// Per-image seed derived from the dataset seed (SplitMix64 step).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of images per category for `n` images drawn with `mix` weights
/// (largest-remainder rounding, so each count is within one of `n * weight`).
pub fn category_counts(n: usize, mix: &[f64; 10]) -> Result<[usize; 10]> {
    let total: f64 = mix.iter().sum();
    if !(total > 0.0) || mix.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Config(format!("invalid category mix {mix:?}")));
    }
    let exact: Vec<f64> = mix.iter().map(|w| n as f64 * w / total).collect();
    let mut counts = [0usize; 10];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..10).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Generates `n` phantoms with categories apportioned by `mix`, shuffled by `seed`.
pub fn generate_dataset(
    n: usize,
    mix: &[f64; 10],
    seed: u64,
    resolution: (usize, usize),
) -> Result<(DatasetManifest, Vec<GrayImage>)> {
    if n == 0 {
        return Err(Error::Config("generate_dataset needs n >= 1".into()));
    }
    let counts = category_counts(n, mix)?;
    let mut cats: Vec<RadiographCategory> = Vec::with_capacity(n);
    for (i, &c) in counts.iter().enumerate() {
        cats.extend(std::iter::repeat_n(RadiographCategory::new(i as u8 + 1)?, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..cats.len()).rev() {
        let j = rng.random_range(0..=i);
        cats.swap(i, j);
    }
    let mut manifest = DatasetManifest::default();
    let mut images = Vec::with_capacity(n);
    for (i, cat) in cats.into_iter().enumerate() {
        let cfg = PhantomConfig::sample(derive_seed(seed, i as u64), resolution, cat);
        let p = generate_phantom(&cfg, &format!("phantom_{i:04}"))?;
        manifest.entries.push(p.entry);
        images.push(p.image);
    }
    Ok((manifest, images))
}

/// Parses `cat:weight,...` (e.g. `4:1,8:2`); unspecified categories weigh 0.
pub fn parse_mix(spec: &str) -> Result<[f64; 10]> {
    let mut mix = [0.0; 10];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (cat, weight) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("mix entry {part:?} is not cat:weight")))?;
        let cat: u8 = cat.trim().parse().map_err(|_| Error::Config(format!("bad category in {part:?}")))?;
        let cat = RadiographCategory::new(cat)?;
        let weight: f64 = weight.trim().parse().map_err(|_| Error::Config(format!("bad weight in {part:?}")))?;
        mix[cat.id() as usize - 1] = weight;
    }
    Ok(mix)
}
