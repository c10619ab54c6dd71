//! Python bindings: FDI helpers, geometry, phantoms, the loss, networks and
//! the command line.

use std::path::PathBuf;

use oralbb::data::{rasterize_polygon as raster, shoelace_area as shoelace, GrayImage};
use oralbb::detect::build_bbox_map;
use oralbb::domain::{BBox, Detection, DetectionSet, FdiCode, FlipAxis, Point, RadiographCategory};
use oralbb::loss::{dice_loss as loss_fn, LossConfig};
use oralbb::model::{image_batch, predict_mask, Checkpoint, Network, NetworkConfig, PriorPyramid, Variant};
use oralbb::synth::{generate_phantom, PhantomConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

/// `(fdi, (x, y, w, h))`
type ToothBox = (u32, (f64, f64, f64, f64));

fn err(e: oralbb::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn points(p: &[(f64, f64)]) -> Vec<Point> {
    p.iter().map(|&(x, y)| Point::new(x, y)).collect()
}

fn axis(name: &str) -> PyResult<FlipAxis> {
    match name {
        "horizontal" | "h" => Ok(FlipAxis::Horizontal),
        "vertical" | "v" => Ok(FlipAxis::Vertical),
        other => Err(PyValueError::new_err(format!("unknown flip axis {other:?}"))),
    }
}

/// Mask channel (0..32) of an FDI code.
#[pyfunction]
fn fdi_to_channel(code: u32) -> PyResult<usize> {
    oralbb::domain::channel_of_fdi(code).map_err(err)
}

#[pyfunction]
fn channel_to_fdi(channel: usize) -> PyResult<u32> {
    FdiCode::from_channel(channel).map(FdiCode::code).map_err(err)
}

/// FDI code after mirroring the radiograph; `axis` is "horizontal" or "vertical".
#[pyfunction]
fn flip_fdi(code: u32, axis_name: &str) -> PyResult<u32> {
    Ok(FdiCode::new(code).map_err(err)?.flip(axis(axis_name)?).code())
}

/// Tooth kind name ("incisor", "canine", "premolar", "molar").
#[pyfunction]
fn tooth_kind(code: u32) -> PyResult<&'static str> {
    Ok(FdiCode::new(code).map_err(err)?.kind().name())
}

#[pyfunction]
fn shoelace_area(polygon: Vec<(f64, f64)>) -> f64 {
    shoelace(&points(&polygon))
}

/// Row-major 0/1 mask of the pixels whose centres fall inside the polygon.
#[pyfunction]
fn rasterize_polygon<'py>(
    py: Python<'py>,
    polygon: Vec<(f64, f64)>,
    height: usize,
    width: usize,
) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &raster(&points(&polygon), height, width))
}

/// IoU of two `(x, y, w, h)` boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    oralbb::metrics::iou(&BBox::new(a.0, a.1, a.2, a.3), &BBox::new(b.0, b.1, b.2, b.3)).map_err(err)
}

/// Regularized Dice loss of one sample laid out channel-major. Returns
/// `(loss, gradient)`.
#[pyfunction]
#[pyo3(signature = (pred, truth, channels, lam = 0.1))]
fn dice_loss(pred: Vec<f64>, truth: Vec<f64>, channels: usize, lam: f64) -> PyResult<(f64, Vec<f64>)> {
    let cfg = LossConfig {
        lambda: lam,
        ..LossConfig::default()
    };
    let out = loss_fn(&pred, &truth, channels, &cfg).map_err(err)?;
    Ok((out.loss, out.grad))
}

/// Runs the command line with `args` (without the program name) and
/// returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    oralbb::cli::run(std::iter::once("oralbb".to_string()).chain(args))
}

/// A synthetic panoramic radiograph with exact tooth annotations.
#[pyclass(module = "oralbb_py")]
struct Phantom {
    image: GrayImage,
    entry: oralbb::data::ManifestEntry,
}

#[pymethods]
impl Phantom {
    #[new]
    #[pyo3(signature = (seed, category = 4, height = 256, width = 512, image_id = "phantom"))]
    fn new(seed: u64, category: u8, height: usize, width: usize, image_id: &str) -> PyResult<Self> {
        let cat = RadiographCategory::new(category).map_err(err)?;
        let cfg = PhantomConfig::sample(seed, (height, width), cat);
        let p = generate_phantom(&cfg, image_id).map_err(err)?;
        Ok(Phantom {
            image: p.image,
            entry: p.entry,
        })
    }

    #[getter]
    fn image_id(&self) -> &str {
        &self.entry.image_id
    }

    #[getter]
    fn category(&self) -> u8 {
        self.entry.category.id()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }

    /// Row-major intensities in [0, 1].
    fn pixels(&self) -> Vec<f32> {
        self.image.data.clone()
    }

    /// FDI codes of the annotated teeth.
    fn teeth(&self) -> Vec<u32> {
        self.entry.annotations.iter().map(|a| a.fdi.code()).collect()
    }

    /// `(fdi, (x, y, w, h))` for every annotated tooth.
    fn boxes(&self) -> Vec<ToothBox> {
        self.entry
            .annotations
            .iter()
            .map(|a| (a.fdi.code(), (a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h)))
            .collect()
    }

    fn polygon(&self, fdi: u32) -> Option<Vec<(f64, f64)>> {
        self.entry
            .annotations
            .iter()
            .find(|a| a.fdi.code() == fdi)
            .map(|a| a.polygon.iter().map(|p| (p.x, p.y)).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Phantom(id={:?}, category={}, {}x{}, teeth={})",
            self.entry.image_id,
            self.entry.category.id(),
            self.image.height,
            self.image.width,
            self.entry.annotations.len()
        )
    }
}

/// The baseline U-Net (`variant="unet"`) or the box-gated network.
#[pyclass(name = "Network", module = "oralbb_py")]
struct PyNetwork {
    net: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (variant = "oralbbnet", base_filters = 8, depth = 4, bb_levels = None, drop_rate = 0.12, seed = 0))]
    fn new(
        variant: &str,
        base_filters: usize,
        depth: usize,
        bb_levels: Option<usize>,
        drop_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(err)?;
        let cfg = NetworkConfig {
            variant,
            base_filters,
            depth,
            bb_levels: bb_levels.unwrap_or(depth),
            drop_rate,
            ..NetworkConfig::default()
        };
        Ok(PyNetwork {
            net: Network::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            net: Checkpoint::load(&path).map_err(err)?.network,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            network: self.net.clone(),
            step: 0,
        }
        .save(&path)
        .map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.net.config.variant.to_string()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    #[getter]
    fn is_gated(&self) -> bool {
        self.net.is_gated()
    }

    /// Eval-mode softmax probabilities, channel-major `33 x height x width`.
    /// `boxes` is a list of `(fdi, (x, y, w, h))` in image pixels and is
    /// required by the gated network.
    #[pyo3(signature = (pixels, height, width, boxes = None))]
    fn forward(
        &self,
        py: Python<'_>,
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        boxes: Option<Vec<ToothBox>>,
    ) -> PyResult<Vec<f32>> {
        let image = GrayImage::from_vec(height, width, pixels).map_err(err)?;
        let map = match boxes {
            Some(b) => {
                let mut det = DetectionSet::new("input");
                for (code, (x, y, w, h)) in b {
                    det.entries.push(Detection {
                        fdi: FdiCode::new(code).map_err(err)?,
                        bbox: BBox::new(x, y, w, h),
                        confidence: 1.0,
                    });
                }
                Some(build_bbox_map(&det, (width as f64, height as f64), (height, width)))
            }
            None => None,
        };
        let net = &self.net;
        py.detach(|| {
            let x = image_batch(&[&image])?;
            let prior = match (&map, net.is_gated()) {
                (Some(m), true) => Some(PriorPyramid::new(&[m], net.config.bb_levels)?),
                _ => None,
            };
            Ok(net.forward(&x, prior.as_ref())?.data)
        })
        .map_err(err)
    }

    /// FDI codes whose argmax mask is non-empty, from `forward` output.
    fn predicted_teeth(&self, probs: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<u32>> {
        let c = self.net.config.output_channels;
        let t = oralbb::model::Tensor::from_vec(1, c, height, width, probs).map_err(err)?;
        let masks = predict_mask(&t, 0).map_err(err)?;
        masks
            .nonempty_channels()
            .into_iter()
            .map(|ch| FdiCode::from_channel(ch).map(FdiCode::code).map_err(err))
            .collect()
    }

    fn __repr__(&self) -> String {
        let c = &self.net.config;
        format!(
            "Network(variant={}, base_filters={}, depth={}, params={})",
            c.variant,
            c.base_filters,
            c.depth,
            self.net.num_params()
        )
    }
}

/// Adds every binding to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fdi_to_channel, m)?)?;
    m.add_function(wrap_pyfunction!(channel_to_fdi, m)?)?;
    m.add_function(wrap_pyfunction!(flip_fdi, m)?)?;
    m.add_function(wrap_pyfunction!(tooth_kind, m)?)?;
    m.add_function(wrap_pyfunction!(shoelace_area, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize_polygon, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Phantom>()?;
    m.add_class::<PyNetwork>()?;
    Ok(())
}

#[pymodule]
fn oralbb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
