use super::image::GrayImage;
use crate::domain::{BBoxMap, FlipAxis, MaskStack};
use crate::error::{Error, Result};

/// Mirrors an image with its masks and box prior. Mask and prior channels
/// are permuted through [`crate::domain::FdiCode::flip`] so every channel
/// keeps its anatomical meaning.
pub fn flip_sample(
    image: &GrayImage,
    masks: &MaskStack,
    prior: &BBoxMap,
    axis: FlipAxis,
) -> Result<(GrayImage, MaskStack, BBoxMap)> {
    let res = (image.height, image.width);
    if masks.resolution() != res || prior.resolution() != res {
        return Err(Error::shape(
            "flip_sample",
            res,
            (masks.resolution(), prior.resolution()),
        ));
    }
    Ok((image.flipped(axis), masks.flipped(axis), prior.flipped(axis)))
}
