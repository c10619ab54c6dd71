//! Bounding-box prior sources: ground-truth oracle, detector output files,
//! a quality-degradation simulator, and rasterization into [`BBoxMap`]s.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{BBox, BBoxMap, Detection, DetectionSet, FdiCode, ToothAnnotation, NUM_TEETH};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorThresholds {
    pub confidence: f64,
    pub iou: f64,
}

impl Default for DetectorThresholds {
    fn default() -> Self {
        DetectorThresholds {
            confidence: 0.5,
            iou: 0.5,
        }
    }
}

impl DetectorThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("confidence", self.confidence), ("iou", self.iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} threshold must be in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    /// Probability of dropping each detection.
    pub drop_rate: f64,
    /// Half-width of the uniform per-edge perturbation, in pixels.
    pub jitter_px: f64,
    /// Expected spurious boxes per input detection.
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            drop_rate: 0.0,
            jitter_px: 0.0,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn dropping(drop_rate: f64, seed: u64) -> Self {
        DegradationSpec {
            drop_rate,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop_rate must be in [0, 1], got {}", self.drop_rate)));
        }
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return Err(Error::Config(format!("jitter_px must be finite and >= 0, got {}", self.jitter_px)));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::Config(format!(
                "false_positive_rate must be finite and >= 0, got {}",
                self.false_positive_rate
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.drop_rate == 0.0 && self.jitter_px == 0.0 && self.false_positive_rate == 0.0
    }
}

/// One entry per annotation with confidence 1.
pub fn oracle_detections(image_id: &str, annotations: &[ToothAnnotation]) -> DetectionSet {
    DetectionSet {
        image_id: image_id.to_string(),
        entries: annotations
            .iter()
            .map(|a| Detection {
                fdi: a.fdi,
                bbox: a.bbox,
                confidence: 1.0,
            })
            .collect(),
    }
}

/// Confidence thresholding followed by class-aware greedy suppression: among
/// same-tooth boxes overlapping with IoU above `thr.iou`, only the most
/// confident survives. Output is ordered by descending confidence.
pub fn filter_detections(det: &DetectionSet, thr: &DetectorThresholds) -> DetectionSet {
    let mut cands: Vec<&Detection> = det.entries.iter().filter(|d| d.confidence >= thr.confidence).collect();
    cands.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(cands.len());
    for d in cands {
        if kept.iter().all(|k| k.fdi != d.fdi || k.bbox.iou(&d.bbox) <= thr.iou) {
            kept.push(*d);
        }
    }
    DetectionSet {
        image_id: det.image_id.clone(),
        entries: kept,
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Simulated prior-quality loss. Randomness is keyed by `spec.seed` and the
/// image id, so every image gets its own reproducible draw. `image_size` is
/// `(width, height)` in the detections' coordinate frame and bounds jittered
/// and injected boxes.
pub fn degrade(det: &DetectionSet, spec: &DegradationSpec, image_size: (f64, f64)) -> Result<DetectionSet> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(det.clone());
    }
    let (width, height) = image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(&det.image_id));
    let mut entries = Vec::with_capacity(det.len());
    for d in &det.entries {
        // one draw per entry regardless of outcome keeps streams aligned
        let dropped = rng.random::<f64>() < spec.drop_rate;
        let mut edges = [0.0f64; 4];
        if spec.jitter_px > 0.0 {
            for e in edges.iter_mut() {
                *e = rng.random_range(-spec.jitter_px..=spec.jitter_px);
            }
        }
        if dropped {
            continue;
        }
        let bbox = if spec.jitter_px > 0.0 {
            let x0 = d.bbox.x + edges[0];
            let y0 = d.bbox.y + edges[1];
            let x1 = (d.bbox.x2() + edges[2]).max(x0);
            let y1 = (d.bbox.y2() + edges[3]).max(y0);
            BBox::new(x0, y0, x1 - x0, y1 - y0).clip(width, height)
        } else {
            d.bbox
        };
        entries.push(Detection { bbox, ..*d });
    }
    if spec.false_positive_rate > 0.0 && !det.is_empty() {
        let lambda = spec.false_positive_rate * det.len() as f64;
        let count = Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng) as usize;
        // spurious boxes borrow sizes from the real ones
        for _ in 0..count {
            let src = &det.entries[rng.random_range(0..det.len())];
            let (w, h) = (src.bbox.w.min(width), src.bbox.h.min(height));
            let x = rng.random_range(0.0..=(width - w).max(0.0));
            let y = rng.random_range(0.0..=(height - h).max(0.0));
            let fdi = FdiCode::from_channel(rng.random_range(0..NUM_TEETH))?;
            entries.push(Detection {
                fdi,
                bbox: BBox::new(x, y, w, h),
                confidence: rng.random_range(0.5..=1.0),
            });
        }
    }
    Ok(DetectionSet {
        image_id: det.image_id.clone(),
        entries,
    })
}

/// Pixel range `[lo, hi)` whose centres fall inside `[a, b)`.
fn covered(a: f64, b: f64, n: usize) -> (usize, usize) {
    let lo = (a - 0.5).ceil().max(0.0);
    let hi = (b - 0.5).ceil().clamp(0.0, n as f64);
    (lo.min(n as f64) as usize, hi as usize)
}

/// Rasterizes boxes given in a `source_size = (width, height)` frame onto a
/// map of `resolution = (height, width)`. A pixel is set when its centre lies
/// inside a scaled, clipped box of that tooth.
pub fn build_bbox_map(det: &DetectionSet, source_size: (f64, f64), resolution: (usize, usize)) -> BBoxMap {
    let (h, w) = resolution;
    let sx = w as f64 / source_size.0;
    let sy = h as f64 / source_size.1;
    let mut map = BBoxMap::new(h, w);
    for d in &det.entries {
        let b = d.bbox.scale(sx, sy).clip(w as f64, h as f64);
        let (x0, x1) = covered(b.x, b.x2(), w);
        let (y0, y1) = covered(b.y, b.y2(), h);
        let plane = map.channel_mut(d.fdi.channel());
        for y in y0..y1 {
            plane[y * w + x0..y * w + x1.max(x0)].iter_mut().for_each(|v| *v = 1);
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    fdi: u32,
    bbox: [f64; 4],
    confidence: f64,
}

/// Reads a JSON Lines detections file, grouped by image id. Blank lines are
/// skipped.
pub fn read_detections_jsonl(path: &Path) -> Result<BTreeMap<String, DetectionSet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, DetectionSet> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("{}:{}", path.display(), lineno + 1),
            source: e,
        })?;
        let det = Detection {
            fdi: FdiCode::new(rec.fdi)?,
            bbox: rec.bbox.into(),
            confidence: rec.confidence,
        };
        let set = out
            .entry(rec.image_id.clone())
            .or_insert_with(|| DetectionSet::new(rec.image_id.clone()));
        set.entries.push(det);
    }
    for set in out.values() {
        set.validate()
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    }
    Ok(out)
}

pub fn write_detections_jsonl<'a>(path: &Path, sets: impl IntoIterator<Item = &'a DetectionSet>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for set in sets {
        for d in &set.entries {
            let rec = DetectionRecord {
                image_id: set.image_id.clone(),
                fdi: d.fdi.code(),
                bbox: d.bbox.into(),
                confidence: d.confidence,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Json {
                context: "detection record".into(),
                source: e,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
