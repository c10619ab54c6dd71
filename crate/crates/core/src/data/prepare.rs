use super::clahe::{clahe, PreprocessConfig};
use super::image::GrayImage;
use super::io::ManifestEntry;
use super::raster::build_mask_stack;
use crate::domain::{MaskStack, Point, RadiographCategory, ToothAnnotation};
use crate::error::Result;

/// One image at network resolution with its ground truth.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image_id: String,
    pub category: RadiographCategory,
    pub image: GrayImage,
    pub masks: MaskStack,
    /// Annotations in the target-resolution pixel frame.
    pub annotations: Vec<ToothAnnotation>,
    /// Factors mapping source pixels to target pixels, (sx, sy).
    pub scale: (f64, f64),
}

pub fn scale_annotations(annotations: &[ToothAnnotation], sx: f64, sy: f64) -> Vec<ToothAnnotation> {
    annotations
        .iter()
        .map(|a| ToothAnnotation {
            image_id: a.image_id.clone(),
            fdi: a.fdi,
            polygon: a.polygon.iter().map(|p| Point::new(p.x * sx, p.y * sy)).collect(),
            bbox: a.bbox.scale(sx, sy),
        })
        .collect()
}

/// Resizes to the target resolution, then equalizes, then rasterizes the
/// scaled annotations.
pub fn prepare_sample(entry: &ManifestEntry, source: &GrayImage, config: &PreprocessConfig) -> Result<PreparedSample> {
    config.validate()?;
    let (th, tw) = config.target_resolution;
    let resized = source.resized(th, tw);
    let image = if config.apply_clahe {
        clahe(&resized, config)?
    } else {
        resized
    };
    let sx = tw as f64 / source.width as f64;
    let sy = th as f64 / source.height as f64;
    let annotations = scale_annotations(&entry.annotations, sx, sy);
    let masks = build_mask_stack(&annotations, th, tw)?;
    Ok(PreparedSample {
        image_id: entry.image_id.clone(),
        category: entry.category,
        image,
        masks,
        annotations,
        scale: (sx, sy),
    })
}
