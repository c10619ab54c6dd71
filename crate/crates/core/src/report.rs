//! Static report rendering: training curves, confusion heatmap, per-kind
//! Dice bars, mask overlays and summary tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use plotters::prelude::*;

use crate::data::GrayImage;
use crate::domain::{FdiCode, MaskStack, NUM_TEETH};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, UNCLASSIFIED};
use crate::train::History;

/// An image with its predicted (and optionally true) masks, for overlays.
#[derive(Debug, Clone)]
pub struct OverlaySample {
    pub image_id: String,
    pub image: GrayImage,
    pub pred: MaskStack,
    pub truth: Option<MaskStack>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderedReport {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

fn plot_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Plot {
        path: path.to_path_buf(),
        message: format!("{e:?}"),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

const SERIES: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(70, 70, 70),
];

/// Lines over epochs `1..=n`; `None` points break nothing, they are skipped.
fn line_plot(path: &Path, title: &str, y_desc: &str, series: &[(&str, Vec<Option<f64>>)], y_max: Option<f64>) -> Result<()> {
    let err = plot_err(path);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0);
    let top = y_max.unwrap_or_else(|| {
        series
            .iter()
            .flat_map(|s| s.1.iter().flatten())
            .fold(0.0f64, |a, &b| a.max(b))
            .max(1e-6)
            * 1.05
    });
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.5f64..n as f64 + 0.5, 0f64..top)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_desc)
        .x_labels(n.min(20))
        .x_label_formatter(&|v| format!("{}", v.round() as i64))
        .draw()
        .map_err(&err)?;
    for (i, (name, values)) in series.iter().enumerate() {
        let color = SERIES[i % SERIES.len()];
        let pts: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .filter_map(|(e, v)| v.map(|v| (e as f64 + 1.0, v)))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(&err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

pub fn loss_curves(path: &Path, history: &History) -> Result<()> {
    let train: Vec<Option<f64>> = history.records.iter().map(|r| Some(r.train_loss)).collect();
    let val: Vec<Option<f64>> = history.records.iter().map(|r| Some(r.val_loss)).collect();
    line_plot(path, "Training loss", "loss", &[("train", train), ("validation", val)], None)
}

pub fn dice_curves(path: &Path, history: &History) -> Result<()> {
    let names = ["incisor", "canine", "premolar", "molar"];
    let mut series: Vec<(&str, Vec<Option<f64>>)> = names
        .iter()
        .enumerate()
        .map(|(k, n)| (*n, history.records.iter().map(|r| r.val_dice_by_kind[k]).collect()))
        .collect();
    series.push(("overall", history.records.iter().map(|r| r.val_dice).collect()));
    line_plot(path, "Validation Dice by tooth kind", "Dice", &series, Some(1.0))
}

/// Heatmap of the 33 x 32 matrix; cell shade grows with log count.
pub fn confusion_heatmap(path: &Path, report: &MetricsReport) -> Result<()> {
    let err = plot_err(path);
    let m = &report.confusion;
    let max = (0..=UNCLASSIFIED)
        .flat_map(|r| (0..NUM_TEETH).map(move |c| (r, c)))
        .map(|(r, c)| m.get(r, c))
        .max()
        .unwrap_or(0)
        .max(1);
    let code = |i: usize| FdiCode::from_channel(i).map(|f| f.to_string()).unwrap_or_default();
    let root = SVGBackend::new(path, (900, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Confusion matrix (rows predicted, columns true)", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..NUM_TEETH as f64, 0f64..(NUM_TEETH + 1) as f64)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(NUM_TEETH)
        .y_labels(NUM_TEETH + 1)
        .x_label_formatter(&|v| code(v.floor() as usize))
        .y_label_formatter(&|v| {
            let r = v.floor() as usize;
            let row = NUM_TEETH - r.min(NUM_TEETH);
            if row == UNCLASSIFIED {
                "uncl.".into()
            } else {
                code(row)
            }
        })
        .x_desc("true FDI")
        .y_desc("predicted FDI")
        .draw()
        .map_err(&err)?;
    let cells = (0..=UNCLASSIFIED).flat_map(|row| {
        (0..NUM_TEETH).map(move |col| {
            let v = m.get(row, col);
            let t = if v == 0 {
                0.0
            } else {
                (1.0 + v as f64).ln() / (1.0 + max as f64).ln()
            };
            let shade = (255.0 * (1.0 - t)) as u8;
            // row 0 at the top
            let y = (NUM_TEETH - row) as f64;
            Rectangle::new(
                [(col as f64, y), (col as f64 + 1.0, y + 1.0)],
                RGBColor(shade, shade, 255).filled(),
            )
        })
    });
    chart.draw_series(cells).map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

pub fn dice_bars(path: &Path, report: &MetricsReport) -> Result<()> {
    let err = plot_err(path);
    let seg = &report.segmentation;
    let mut bars: Vec<(String, Option<f64>)> = seg
        .dice_kind_order
        .iter()
        .map(|k| (k.clone(), seg.dice_by_kind.get(k).copied().flatten()))
        .collect();
    bars.push(("overall".into(), seg.dice_overall));
    let names: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let root = SVGBackend::new(path, (700, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Dice by tooth kind", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..bars.len() as f64, 0f64..1.0)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(bars.len() * 2 + 1)
        .x_label_formatter(&|v| {
            let f = v - v.floor();
            if (f - 0.5).abs() < 1e-6 {
                names.get(v.floor() as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("Dice")
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(bars.iter().enumerate().filter_map(|(i, (_, v))| {
            v.map(|v| Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v)], SERIES[i % 5].filled()))
        }))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// Aggregate metrics as `metric,value` rows in a fixed order.
pub fn summary_csv(report: &MetricsReport) -> String {
    let d = &report.detection;
    let s = &report.segmentation;
    let mut out = String::from("metric,value\n");
    let mut row = |k: &str, v: String| {
        let _ = writeln!(out, "{k},{v}");
    };
    row("images", report.images.to_string());
    row("detection_source", report.detection_source.clone());
    row("precision", fmt_opt(d.precision));
    row("recall", fmt_opt(d.recall));
    row("accuracy", fmt_opt(d.accuracy));
    row("ap50", fmt_opt(d.ap50));
    row("map", fmt_opt(d.map));
    row("map_confidence_sweep", fmt_opt(d.map_confidence_sweep));
    for k in &s.dice_kind_order {
        row(&format!("dice_{k}"), fmt_opt(s.dice_by_kind.get(k).copied().flatten()));
    }
    row("dice_overall", fmt_opt(s.dice_overall));
    out
}

/// Per-channel overlay color, spread around the hue circle.
fn tooth_color(c: usize) -> Rgb<u8> {
    let h = (c as f64 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// 3x5 digit glyphs, one row per `u8`, bit 2 is the leftmost column.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, px: i64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for (i, ch) in text.chars().enumerate() {
        let Some(d) = ch.to_digit(10) else { continue };
        let ox = x + i as i64 * 4 * px;
        for (row, bits) in DIGITS[d as usize].iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..px {
                    for dx in 0..px {
                        let (xx, yy) = (ox + col * px + dx, y + row as i64 * px + dy);
                        if (0..w).contains(&xx) && (0..h).contains(&yy) {
                            img.put_pixel(xx as u32, yy as u32, color);
                        }
                    }
                }
            }
        }
    }
}

/// X-ray upscaled by `scale` with predicted mask contours and FDI labels at
/// each tooth's centroid. True contours, when given, are drawn in white
/// underneath.
pub fn overlay_image(sample: &OverlaySample, scale: usize) -> RgbImage {
    let (h, w) = (sample.image.height, sample.image.width);
    let s = scale.max(1);
    let mut img = RgbImage::new((w * s) as u32, (h * s) as u32);
    for y in 0..h * s {
        for x in 0..w * s {
            let v = (sample.image.get(y / s, x / s).clamp(0.0, 1.0) * 255.0) as u8;
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }
    let contour = |mask: &MaskStack, c: usize, color: Rgb<u8>, img: &mut RgbImage| {
        let ch = mask.channel(c);
        let at = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && ch[y as usize * w + x as usize] != 0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                    for dy in 0..s {
                        for dx in 0..s {
                            img.put_pixel((x as usize * s + dx) as u32, (y as usize * s + dy) as u32, color);
                        }
                    }
                }
            }
        }
    };
    if let Some(t) = &sample.truth {
        for c in t.nonempty_channels() {
            contour(t, c, Rgb([255, 255, 255]), &mut img);
        }
    }
    for c in sample.pred.nonempty_channels() {
        contour(&sample.pred, c, tooth_color(c), &mut img);
    }
    let label_px = (s as i64 / 2).max(1);
    for c in sample.pred.nonempty_channels() {
        let ch = sample.pred.channel(c);
        let (mut sy, mut sx, mut n) = (0usize, 0usize, 0usize);
        for (i, &v) in ch.iter().enumerate() {
            if v != 0 {
                sy += i / w;
                sx += i % w;
                n += 1;
            }
        }
        let code = FdiCode::from_channel(c).map(|f| f.to_string()).unwrap_or_default();
        let cx = (sx * s / n) as i64 - 4 * label_px;
        let cy = (sy * s / n) as i64 - 2 * label_px;
        draw_text(&mut img, &code, cx, cy, label_px, Rgb([255, 255, 0]));
    }
    img
}

/// Writes curves and charts under `dir/plots/` and tables under `dir/`.
/// Missing inputs are skipped with a notice.
pub fn render_report(
    dir: &Path,
    history: Option<&History>,
    metrics: Option<&MetricsReport>,
    samples: &[OverlaySample],
) -> Result<RenderedReport> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut out = RenderedReport::default();
    match history {
        Some(h) if !h.is_empty() => {
            let p = plots.join("loss_curves.svg");
            loss_curves(&p, h)?;
            out.files.push(p);
            let p = plots.join("dice_curves.svg");
            dice_curves(&p, h)?;
            out.files.push(p);
        }
        _ => out.notices.push("no training history; curves skipped".into()),
    }
    match metrics {
        Some(m) => {
            let p = plots.join("confusion_matrix.svg");
            confusion_heatmap(&p, m)?;
            out.files.push(p);
            let p = plots.join("dice_by_kind.svg");
            dice_bars(&p, m)?;
            out.files.push(p);
            for (name, text) in [
                ("summary.csv", summary_csv(m)),
                ("per_class.csv", m.per_class_csv()),
                ("dice.csv", m.dice_table_csv()),
                ("confusion.csv", m.confusion.to_csv()),
            ] {
                let p = dir.join(name);
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                out.files.push(p);
            }
        }
        None => out.notices.push("no metrics report; charts and tables skipped".into()),
    }
    for (i, s) in samples.iter().enumerate() {
        let p = plots.join(format!("overlay_{i:02}_{}.png", s.image_id));
        overlay_image(s, 4).save(&p).map_err(|source| Error::Image {
            path: p.clone(),
            source,
        })?;
        out.files.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BBox, Detection, DetectionSet, ToothAnnotation};
    use crate::metrics::{DiceAccumulator, EvalImage};
    use crate::train::EpochRecord;

    fn history(n: usize) -> History {
        History {
            records: (1..=n)
                .map(|e| EpochRecord {
                    epoch: e,
                    lr: 3e-4,
                    train_loss: 1.0 / e as f64,
                    val_loss: 1.1 / e as f64,
                    val_dice: Some(e as f64 / n as f64),
                    val_dice_by_kind: [Some(0.5), Some(0.4), None, Some(0.3)],
                    lr_reduced: false,
                })
                .collect(),
        }
    }

    fn perfect_report() -> MetricsReport {
        let truth: Vec<ToothAnnotation> = FdiCode::all()
            .enumerate()
            .map(|(i, f)| ToothAnnotation {
                image_id: "a".into(),
                fdi: f,
                polygon: vec![],
                bbox: BBox::new(i as f64 * 10.0, 0.0, 8.0, 8.0),
            })
            .collect();
        let det = DetectionSet {
            image_id: "a".into(),
            entries: truth
                .iter()
                .map(|t| Detection {
                    fdi: t.fdi,
                    bbox: t.bbox,
                    confidence: 0.9,
                })
                .collect(),
        };
        let mut mask = MaskStack::new(8, 8);
        mask.set(3, 2, 2, true);
        let mut dice = DiceAccumulator::new();
        dice.add(&mask, &mask).unwrap();
        MetricsReport::build(
            &[EvalImage {
                detections: &det,
                truth: &truth,
            }],
            &dice,
            0.5,
        )
    }

    #[test]
    fn curves_span_every_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.svg");
        loss_curves(&p, &history(60)).unwrap();
        let svg = fs::read_to_string(&p).unwrap();
        let longest = svg
            .split("<polyline")
            .skip(1)
            .map(|el| el.split("points=\"").nth(1).unwrap().split('"').next().unwrap())
            .map(|pts| pts.split_whitespace().count())
            .max()
            .unwrap();
        assert_eq!(longest, 60);
        assert!(svg.contains("\n60\n</text>"));
    }

    #[test]
    fn perfect_predictions_give_diagonal_heatmap() {
        let m = perfect_report();
        assert_eq!(m.confusion.trace(), 32);
        assert_eq!(m.confusion.total(), 32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.svg");
        confusion_heatmap(&p, &m).unwrap();
        let svg = fs::read_to_string(&p).unwrap();
        // 32 dark diagonal cells, everything else white
        assert_eq!(svg.matches("fill=\"#0000FF\"").count(), 32);
    }

    #[test]
    fn tables_are_reproducible_and_empty_history_is_noted() {
        let m = perfect_report();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = render_report(a.path(), Some(&History::default()), Some(&m), &[]).unwrap();
        render_report(b.path(), None, Some(&m), &[]).unwrap();
        assert_eq!(ra.notices.len(), 1);
        for name in ["summary.csv", "per_class.csv", "dice.csv", "confusion.csv"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        assert!(!a.path().join("plots/loss_curves.svg").exists());
        assert!(a.path().join("plots/confusion_matrix.svg").exists());
    }

    #[test]
    fn overlay_marks_contours_and_labels() {
        let image = GrayImage::new(16, 16);
        let mut pred = MaskStack::new(16, 16);
        for y in 4..12 {
            for x in 4..12 {
                pred.set(0, y, x, true);
            }
        }
        let s = OverlaySample {
            image_id: "x".into(),
            image,
            pred,
            truth: None,
        };
        let img = overlay_image(&s, 4);
        assert_eq!(img.dimensions(), (64, 64));
        assert_eq!(*img.get_pixel(16, 16), tooth_color(0));
        assert_eq!(*img.get_pixel(0, 0), Rgb([0, 0, 0]));
        assert!(img.pixels().any(|p| *p == Rgb([255, 255, 0])));
    }
}
