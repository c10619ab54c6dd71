//! Domain types shared across the pipeline.

mod annotation;
mod category;
mod fdi;
mod stack;

pub use annotation::{BBox, Detection, DetectionSet, Point, ToothAnnotation};
pub use category::RadiographCategory;
pub use fdi::{channel_of_fdi, FdiCode, FlipAxis, ToothKind, NUM_TEETH};
pub use stack::{BBoxMap, BoxPrior, ChannelStack, MaskStack, ToothMask};

pub(crate) use stack::flip_plane as stack_flip_plane;
