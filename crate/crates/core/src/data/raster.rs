use log::warn;

use crate::domain::{MaskStack, Point, ToothAnnotation};
use crate::error::{Error, Result};

/// Signed area of a closed polygon by the shoelace formula (positive when
/// counter-clockwise in a y-up frame).
pub fn shoelace_area(polygon: &[Point]) -> f64 {
    let n = polygon.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

/// Scanline fill of `polygon` on a `height x width` grid. A pixel is set
/// when its center `(x + 0.5, y + 0.5)` is inside by the even-odd rule.
/// Vertices outside the grid are fine; only in-bounds pixels are written.
pub fn rasterize_polygon(polygon: &[Point], height: usize, width: usize) -> Vec<u8> {
    let mut mask = vec![0u8; height * width];
    if polygon.len() < 3 || shoelace_area(polygon).abs() < 1e-12 {
        warn!("degenerate polygon with {} vertices, empty mask", polygon.len());
        return mask;
    }
    let n = polygon.len();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, b) = (polygon[i], polygon[(i + 1) % n]);
            // half-open in y so shared vertices are counted once
            if (a.y <= yc) != (b.y <= yc) {
                let t = (yc - a.y) / (b.y - a.y);
                xs.push(a.x + t * (b.x - a.x));
            }
        }
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let row = &mut mask[y * width..(y + 1) * width];
        for pair in xs.chunks_exact(2) {
            // centers with x0 <= xc < x1
            let lo = (pair[0] - 0.5).ceil();
            let hi = (pair[1] - 0.5).ceil() - 1.0;
            let lo = lo.max(0.0);
            let hi = hi.min(width as f64 - 1.0);
            if lo > hi {
                continue;
            }
            for px in row[lo as usize..=hi as usize].iter_mut() {
                *px = 1;
            }
        }
    }
    mask
}

/// Stacks one image's annotations into a 32-channel mask. Coordinates must
/// already be in the target resolution's pixel frame.
pub fn build_mask_stack(annotations: &[ToothAnnotation], height: usize, width: usize) -> Result<MaskStack> {
    let mut stack = MaskStack::new(height, width);
    if let Some(first) = annotations.first() {
        if let Some(other) = annotations.iter().find(|a| a.image_id != first.image_id) {
            return Err(Error::Dataset(format!(
                "build_mask_stack: annotations span images {} and {}",
                first.image_id, other.image_id
            )));
        }
    }
    let mut seen = [false; crate::domain::NUM_TEETH];
    for ann in annotations {
        let c = ann.fdi.channel();
        if seen[c] {
            warn!("image {}: tooth {} annotated more than once, taking the union", ann.image_id, ann.fdi);
        }
        seen[c] = true;
        let mask = rasterize_polygon(&ann.polygon, height, width);
        stack.union_channel(c, &mask)?;
    }
    Ok(stack)
}
