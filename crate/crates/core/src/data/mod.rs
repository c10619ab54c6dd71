//! Dataset ingestion and preprocessing.

mod augment;
mod clahe;
mod image;
mod io;
mod prepare;
mod raster;
mod split;

pub use self::augment::flip_sample;
pub use self::clahe::{clahe, PreprocessConfig};
pub use self::image::GrayImage;
pub use self::io::{
    load_dataset, read_gray_png, write_dataset, write_gray_png, AnnotationFile, Dataset, DatasetManifest,
    ManifestEntry, ValidationReport,
};
pub use self::prepare::{prepare_sample, scale_annotations, PreparedSample};
pub use self::raster::{build_mask_stack, rasterize_polygon, shoelace_area};
pub use self::split::{make_splits, SplitConfig, SplitName, Splits};
