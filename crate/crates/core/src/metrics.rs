//! Detection and segmentation metrics.
//!
//! Rates are fractions in `[0, 1]`. Quantities with a zero denominator are
//! `None` ("undefined") and are left out of every mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{BBox, DetectionSet, FdiCode, MaskStack, ToothAnnotation, ToothKind, NUM_TEETH};
use crate::error::{Error, Result};

/// Row index of ground-truth instances that no detection claimed.
pub const UNCLASSIFIED: usize = NUM_TEETH;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Intersection over union of two `(x, y, w, h)` boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_finite() || bx.w < 0.0 || bx.h < 0.0 {
            return Err(Error::Config(format!("box with negative or non-finite size: {bx:?}")));
        }
    }
    Ok(a.iou(b))
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// 33 x 32 matrix: rows are predicted teeth plus the unclassified row,
/// columns are ground-truth teeth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    /// Detections matched to no ground truth, by predicted tooth. These have
    /// no cell in the matrix.
    pub unmatched_predictions: Vec<u64>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        ConfusionMatrix {
            counts: vec![0; (NUM_TEETH + 1) * NUM_TEETH],
            unmatched_predictions: vec![0; NUM_TEETH],
        }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * NUM_TEETH + col]
    }

    pub fn add(&mut self, row: usize, col: usize, n: u64) {
        self.counts[row * NUM_TEETH + col] += n;
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row * NUM_TEETH..(row + 1) * NUM_TEETH].iter().sum()
    }

    pub fn col_sum(&self, col: usize) -> u64 {
        (0..=NUM_TEETH).map(|r| self.get(r, col)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_TEETH).map(|i| self.get(i, i)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unmatched_predictions.iter_mut().zip(&other.unmatched_predictions) {
            *a += b;
        }
    }

    /// CSV grid with a header of ground-truth FDI codes and one row per
    /// predicted FDI code, the last row labelled `unclassified`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("predicted\\truth");
        for f in FdiCode::all() {
            let _ = write!(s, ",{f}");
        }
        s.push('\n');
        for r in 0..=NUM_TEETH {
            if r == UNCLASSIFIED {
                s.push_str("unclassified");
            } else {
                let _ = write!(s, "{}", FdiCode::from_channel(r).expect("valid channel"));
            }
            for c in 0..NUM_TEETH {
                let _ = write!(s, ",{}", self.get(r, c));
            }
            s.push('\n');
        }
        s
    }
}

/// Per-class detection outcome counts for one matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(detection index, ground-truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub per_class: Vec<ClassCounts>,
    pub confusion: ConfusionMatrix,
}

/// Greedy matching by descending confidence: each detection takes the
/// unmatched ground truth of highest IoU, if that IoU reaches the threshold.
/// Matching ignores the tooth label; a label disagreement lands off the
/// diagonal and counts as a false positive for the predicted tooth and a miss
/// for the true one.
pub fn match_detections(det: &DetectionSet, truth: &[ToothAnnotation], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..det.len()).collect();
    order.sort_by(|&a, &b| det.entries[b].confidence.total_cmp(&det.entries[a].confidence));
    let mut taken = vec![false; truth.len()];
    let mut pairs = Vec::new();
    let mut per_class = vec![ClassCounts::default(); NUM_TEETH];
    let mut confusion = ConfusionMatrix::new();
    for di in order {
        let d = &det.entries[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in truth.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = d.bbox.iou(&g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        let pc = d.fdi.channel();
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                pairs.push((di, gi));
                let tc = truth[gi].fdi.channel();
                confusion.add(pc, tc, 1);
                if pc == tc {
                    per_class[pc].tp += 1;
                } else {
                    per_class[pc].fp += 1;
                    per_class[tc].fn_ += 1;
                }
            }
            None => {
                per_class[pc].fp += 1;
                confusion.unmatched_predictions[pc] += 1;
            }
        }
    }
    for (gi, g) in truth.iter().enumerate() {
        if !taken[gi] {
            let tc = g.fdi.channel();
            confusion.add(UNCLASSIFIED, tc, 1);
            per_class[tc].fn_ += 1;
        }
    }
    MatchResult {
        pairs,
        per_class,
        confusion,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub accuracy: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
}

/// `recall_i = M_ii / column sum`, `precision_i = M_ii / row sum`,
/// `accuracy = trace / total` (the unclassified row included).
pub fn precision_recall(m: &ConfusionMatrix) -> PrecisionRecall {
    let precision: Vec<Option<f64>> = (0..NUM_TEETH).map(|i| ratio(m.get(i, i), m.row_sum(i))).collect();
    let recall: Vec<Option<f64>> = (0..NUM_TEETH).map(|i| ratio(m.get(i, i), m.col_sum(i))).collect();
    PrecisionRecall {
        mean_precision: mean(precision.iter().copied()),
        mean_recall: mean(recall.iter().copied()),
        accuracy: ratio(m.trace(), m.total()),
        precision,
        recall,
    }
}

/// One image's detections paired with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalImage<'a> {
    pub detections: &'a DetectionSet,
    pub truth: &'a [ToothAnnotation],
}

/// Per-class precision/recall points at every distinct confidence, highest
/// first, together with the ground-truth count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub num_truth: usize,
    /// `(confidence threshold, precision, recall)`
    pub points: Vec<(f64, f64, f64)>,
}

impl PrCurve {
    /// Rectangular rule: `sum_j (R_j - R_{j-1}) * P_j` with `R_0 = 0`.
    pub fn area(&self) -> Option<f64> {
        if self.num_truth == 0 {
            return None;
        }
        let mut prev = 0.0;
        let mut ap = 0.0;
        for &(_, p, r) in &self.points {
            ap += (r - prev) * p;
            prev = r;
        }
        Some(ap)
    }
}

/// Precision-recall curves of one tooth class at a fixed IoU threshold.
/// Within each image, detections of the class are matched greedily by
/// descending confidence to same-class ground truth of highest IoU.
pub fn pr_curve(images: &[EvalImage<'_>], fdi: FdiCode, iou_threshold: f64) -> PrCurve {
    // (confidence, is_tp)
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_truth = 0;
    for im in images {
        let gts: Vec<&BBox> = im.truth.iter().filter(|a| a.fdi == fdi).map(|a| &a.bbox).collect();
        num_truth += gts.len();
        let mut dets: Vec<(f64, &BBox)> = im
            .detections
            .entries
            .iter()
            .filter(|d| d.fdi == fdi)
            .map(|d| (d.confidence, &d.bbox))
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut taken = vec![false; gts.len()];
        for (conf, bb) in dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                let v = bb.iou(g);
                if !taken[gi] && v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            scored.push((conf, best.is_some()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            seen += 1;
            tp += scored[i].1 as usize;
            i += 1;
        }
        let recall = if num_truth > 0 { tp as f64 / num_truth as f64 } else { 0.0 };
        points.push((t, tp as f64 / seen as f64, recall));
    }
    PrCurve { num_truth, points }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// AP per class at IoU 0.5; `None` for classes without ground truth.
    pub ap50: Vec<Option<f64>>,
    /// AP per class averaged over IoU 0.50:0.05:0.95.
    pub ap_coco: Vec<Option<f64>>,
    /// Mean over classes of `ap50`: the confidence-sweep-only reading.
    pub map50: Option<f64>,
    /// Mean over classes of `ap_coco`: the IoU-sweep reading.
    pub map: Option<f64>,
}

/// Per-class AP at one IoU threshold.
pub fn average_precision(images: &[EvalImage<'_>], iou_threshold: f64) -> Vec<Option<f64>> {
    FdiCode::all().map(|f| pr_curve(images, f, iou_threshold).area()).collect()
}

pub fn ap_summary(images: &[EvalImage<'_>]) -> ApSummary {
    let ap50 = average_precision(images, 0.5);
    let sweeps: Vec<Vec<Option<f64>>> = coco_iou_thresholds()
        .into_iter()
        .map(|t| average_precision(images, t))
        .collect();
    let ap_coco: Vec<Option<f64>> = (0..NUM_TEETH)
        .map(|c| ap50[c].map(|_| sweeps.iter().map(|s| s[c].unwrap_or(0.0)).sum::<f64>() / sweeps.len() as f64))
        .collect();
    let absent: Vec<String> = FdiCode::all()
        .filter(|f| ap50[f.channel()].is_none())
        .map(|f| f.to_string())
        .collect();
    if !absent.is_empty() && absent.len() < NUM_TEETH {
        log::warn!("teeth without ground truth excluded from AP means: {}", absent.join(" "));
    }
    ApSummary {
        map50: mean(ap50.iter().copied()),
        map: mean(ap_coco.iter().copied()),
        ap50,
        ap_coco,
    }
}

/// Dice per channel of one mask pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_channel: Vec<Option<f64>>,
    pub per_kind: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

/// `2|P and G| / (|P| + |G|)` per channel; channels empty on both sides are
/// undefined and excluded.
pub fn dice_score(pred: &MaskStack, truth: &MaskStack) -> Result<DiceScores> {
    if pred.resolution() != truth.resolution() {
        return Err(Error::shape("dice_score", truth.resolution(), pred.resolution()));
    }
    let mut acc = DiceAccumulator::new();
    acc.add(pred, truth)?;
    let per_channel = acc.per_channel_last.clone();
    let per_kind = ToothKind::ALL
        .iter()
        .map(|k| mean(FdiCode::all().filter(|f| f.kind() == *k).map(|f| per_channel[f.channel()])))
        .collect();
    Ok(DiceScores {
        overall: mean(per_channel.iter().copied()),
        per_channel,
        per_kind,
    })
}

/// Dataset-level Dice: per-tooth, per-kind and overall means over every
/// included (image, channel) pair. Merging is associative.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceAccumulator {
    sums: Vec<f64>,
    counts: Vec<u64>,
    #[serde(skip)]
    per_channel_last: Vec<Option<f64>>,
}

impl DiceAccumulator {
    pub fn new() -> Self {
        DiceAccumulator {
            sums: vec![0.0; NUM_TEETH],
            counts: vec![0; NUM_TEETH],
            per_channel_last: Vec::new(),
        }
    }

    pub fn add(&mut self, pred: &MaskStack, truth: &MaskStack) -> Result<()> {
        if pred.resolution() != truth.resolution() {
            return Err(Error::shape("dice_score", truth.resolution(), pred.resolution()));
        }
        self.per_channel_last.clear();
        for c in 0..NUM_TEETH {
            let (p, g) = (pred.channel(c), truth.channel(c));
            let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
            for (&a, &b) in p.iter().zip(g) {
                let (a, b) = ((a != 0) as u64, (b != 0) as u64);
                inter += a & b;
                np += a;
                ng += b;
            }
            let d = (np + ng > 0).then(|| 2.0 * inter as f64 / (np + ng) as f64);
            if let Some(v) = d {
                self.sums[c] += v;
                self.counts[c] += 1;
            }
            self.per_channel_last.push(d);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DiceAccumulator) {
        for c in 0..NUM_TEETH {
            self.sums[c] += other.sums[c];
            self.counts[c] += other.counts[c];
        }
    }

    pub fn per_fdi(&self) -> Vec<Option<f64>> {
        (0..NUM_TEETH)
            .map(|c| (self.counts[c] > 0).then(|| self.sums[c] / self.counts[c] as f64))
            .collect()
    }

    pub fn kind(&self, kind: ToothKind) -> Option<f64> {
        let (mut s, mut n) = (0.0, 0u64);
        for f in FdiCode::all().filter(|f| f.kind() == kind) {
            s += self.sums[f.channel()];
            n += self.counts[f.channel()];
        }
        (n > 0).then(|| s / n as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let n: u64 = self.counts.iter().sum();
        (n > 0).then(|| self.sums.iter().sum::<f64>() / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub fdi: u32,
    pub kind: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub ap50: Option<f64>,
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub map: Option<f64>,
    /// Mean AP from the confidence sweep at IoU 0.5 only.
    pub map_confidence_sweep: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub dice_overall: Option<f64>,
    /// Keyed by tooth kind; `dice_kind_order` lists incisor, canine,
    /// premolar, molar.
    pub dice_by_kind: BTreeMap<String, Option<f64>>,
    pub dice_kind_order: Vec<String>,
}

/// Everything an evaluation produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    /// `prior` when detections come from the box prior, `masks` when they
    /// are read off the predicted segmentation.
    #[serde(default)]
    pub detection_source: String,
    pub detection: DetectionSummary,
    pub segmentation: SegmentationSummary,
    pub per_class: Vec<ClassRow>,
    pub confusion: ConfusionMatrix,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// Assembles the report from per-image detections (already thresholded
    /// and suppressed) and a Dice accumulator.
    pub fn build(images: &[EvalImage<'_>], dice: &DiceAccumulator, iou_threshold: f64) -> MetricsReport {
        let mut confusion = ConfusionMatrix::new();
        for im in images {
            confusion.merge(&match_detections(im.detections, im.truth, iou_threshold).confusion);
        }
        let pr = precision_recall(&confusion);
        let ap = ap_summary(images);
        let per_fdi = dice.per_fdi();
        let per_class = FdiCode::all()
            .map(|f| {
                let c = f.channel();
                ClassRow {
                    fdi: f.code(),
                    kind: f.kind().name().to_string(),
                    precision: pr.precision[c],
                    recall: pr.recall[c],
                    ap50: ap.ap50[c],
                    ap: ap.ap_coco[c],
                    dice: per_fdi[c],
                }
            })
            .collect();
        let order: Vec<String> = ToothKind::ALL.iter().map(|k| k.name().to_string()).collect();
        MetricsReport {
            images: images.len(),
            detection_source: String::new(),
            detection: DetectionSummary {
                precision: pr.mean_precision,
                recall: pr.mean_recall,
                accuracy: pr.accuracy,
                ap50: ap.map50,
                map: ap.map,
                map_confidence_sweep: ap.map50,
            },
            segmentation: SegmentationSummary {
                dice_overall: dice.overall(),
                dice_by_kind: ToothKind::ALL.iter().map(|k| (k.name().to_string(), dice.kind(*k))).collect(),
                dice_kind_order: order,
            },
            per_class,
            confusion,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            context: "metrics report".into(),
            source: e,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Json {
            context: "metrics report".into(),
            source: e,
        })
    }

    /// One row per tooth; undefined values are written as `NA`.
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("fdi,kind,precision,recall,ap50,ap,dice\n");
        for r in &self.per_class {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.fdi,
                r.kind,
                fmt_opt(r.precision),
                fmt_opt(r.recall),
                fmt_opt(r.ap50),
                fmt_opt(r.ap),
                fmt_opt(r.dice)
            );
        }
        s
    }

    /// Dice by tooth kind in incisor, canine, premolar, molar order, then
    /// overall.
    pub fn dice_table_csv(&self) -> String {
        let mut s = String::from("group,dice\n");
        for k in &self.segmentation.dice_kind_order {
            let _ = writeln!(s, "{k},{}", fmt_opt(self.segmentation.dice_by_kind.get(k).copied().flatten()));
        }
        let _ = writeln!(s, "overall,{}", fmt_opt(self.segmentation.dice_overall));
        s
    }

    /// Writes `report.json`, `per_class.csv`, `dice.csv` and `confusion.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()?),
            ("per_class.csv", self.per_class_csv()),
            ("dice.csv", self.dice_table_csv()),
            ("confusion.csv", self.confusion.to_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
