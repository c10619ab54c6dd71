use std::collections::BTreeMap;

use crate::data::{prepare_sample, Dataset, DatasetManifest, GrayImage, PreparedSample, PreprocessConfig};
use crate::detect::{build_bbox_map, degrade, filter_detections, oracle_detections, DegradationSpec, DetectorThresholds};
use crate::domain::{BBox, BBoxMap, Detection, DetectionSet};
use crate::error::{Error, Result};

/// A prepared image together with its frozen prior.
#[derive(Debug, Clone)]
pub struct Sample {
    pub prepared: PreparedSample,
    /// Accepted detections in the network-resolution frame.
    pub detections: Option<DetectionSet>,
    pub prior: Option<BBoxMap>,
}

impl Sample {
    pub fn image_id(&self) -> &str {
        &self.prepared.image_id
    }
}

/// Source of raw detections, before degradation and thresholding.
#[derive(Debug, Clone)]
pub enum PriorProvider {
    Oracle,
    /// Detections keyed by image id, in source-image pixels.
    Detections(BTreeMap<String, DetectionSet>),
    None,
}

/// How raw detections become a prior.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PriorSettings {
    pub thresholds: DetectorThresholds,
    pub degradation: DegradationSpec,
}

fn scale_set(det: &DetectionSet, sx: f64, sy: f64) -> DetectionSet {
    DetectionSet {
        image_id: det.image_id.clone(),
        entries: det
            .entries
            .iter()
            .map(|d| Detection {
                bbox: BBox::scale(&d.bbox, sx, sy),
                ..*d
            })
            .collect(),
    }
}

/// Resolves, degrades, thresholds and rasterizes one sample's prior. The
/// provider is only read.
pub fn attach_prior(prepared: PreparedSample, provider: &PriorProvider, settings: &PriorSettings) -> Result<Sample> {
    let (h, w) = (prepared.image.height, prepared.image.width);
    let raw = match provider {
        PriorProvider::None => {
            return Ok(Sample {
                prepared,
                detections: None,
                prior: None,
            })
        }
        PriorProvider::Oracle => oracle_detections(&prepared.image_id, &prepared.annotations),
        PriorProvider::Detections(map) => {
            let det = map
                .get(&prepared.image_id)
                .ok_or_else(|| Error::MissingPrior(prepared.image_id.clone()))?;
            scale_set(det, prepared.scale.0, prepared.scale.1).clipped(w as f64, h as f64)
        }
    };
    let degraded = degrade(&raw, &settings.degradation, (w as f64, h as f64))?;
    let accepted = filter_detections(&degraded, &settings.thresholds);
    let prior = build_bbox_map(&accepted, (w as f64, h as f64), (h, w));
    Ok(Sample {
        prepared,
        detections: Some(accepted),
        prior: Some(prior),
    })
}

pub fn attach_priors(
    prepared: Vec<PreparedSample>,
    provider: &PriorProvider,
    settings: &PriorSettings,
) -> Result<Vec<Sample>> {
    prepared.into_iter().map(|p| attach_prior(p, provider, settings)).collect()
}

/// Loads and prepares the listed images of an on-disk dataset, in the given
/// order.
pub fn prepare_from_dataset(dataset: &Dataset, ids: &[String], config: &PreprocessConfig) -> Result<Vec<PreparedSample>> {
    ids.iter()
        .map(|id| {
            let entry = dataset
                .manifest
                .get(id)
                .ok_or_else(|| Error::Dataset(format!("image {id} is not in the manifest")))?;
            prepare_sample(entry, &dataset.load_image(entry)?, config)
        })
        .collect()
}

/// Prepares images already held in memory (`images[i]` belongs to
/// `manifest.entries[i]`).
pub fn prepare_in_memory(
    manifest: &DatasetManifest,
    images: &[GrayImage],
    ids: &[String],
    config: &PreprocessConfig,
) -> Result<Vec<PreparedSample>> {
    if images.len() != manifest.len() {
        return Err(Error::shape("in-memory dataset", manifest.len(), images.len()));
    }
    let index: BTreeMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_id.as_str(), i))
        .collect();
    ids.iter()
        .map(|id| {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::Dataset(format!("image {id} is not in the manifest")))?;
            prepare_sample(&manifest.entries[i], &images[i], config)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{FdiCode, RadiographCategory};
    use crate::synth::{generate_phantom, PhantomConfig};

    fn prepared() -> PreparedSample {
        let cfg = PhantomConfig::new(1, (256, 256), RadiographCategory::new(4).unwrap());
        let p = generate_phantom(&cfg, "img").unwrap();
        let pre = PreprocessConfig {
            target_resolution: (128, 128),
            ..Default::default()
        };
        prepare_sample(&p.entry, &p.image, &pre).unwrap()
    }

    #[test]
    fn oracle_prior_covers_every_tooth() {
        let s = attach_prior(prepared(), &PriorProvider::Oracle, &PriorSettings::default()).unwrap();
        let prior = s.prior.unwrap();
        assert_eq!(prior.nonempty_channels().len(), 32);
        // each mask pixel lies inside its own box channel
        for c in 0..32 {
            for (m, b) in s.prepared.masks.channel(c).iter().zip(prior.channel(c)) {
                assert!(*m == 0 || *b == 1);
            }
        }
    }

    #[test]
    fn full_drop_gives_empty_prior() {
        let settings = PriorSettings {
            degradation: DegradationSpec::dropping(1.0, 3),
            ..Default::default()
        };
        let s = attach_prior(prepared(), &PriorProvider::Oracle, &settings).unwrap();
        assert_eq!(s.prior.unwrap().total_count(), 0);
        assert!(s.detections.unwrap().is_empty());
    }

    #[test]
    fn detector_file_boxes_are_rescaled() {
        let p = prepared();
        let mut set = DetectionSet::new("img");
        set.entries.push(Detection {
            fdi: FdiCode::new(25).unwrap(),
            bbox: BBox::new(4.0, 8.0, 20.0, 16.0),
            confidence: 0.9,
        });
        set.entries.push(Detection {
            fdi: FdiCode::new(11).unwrap(),
            bbox: BBox::new(0.0, 0.0, 20.0, 16.0),
            confidence: 0.3,
        });
        let provider = PriorProvider::Detections(BTreeMap::from([("img".to_string(), set)]));
        let s = attach_prior(p, &provider, &PriorSettings::default()).unwrap();
        let det = s.detections.unwrap();
        assert_eq!(det.len(), 1);
        assert_eq!(det.entries[0].bbox, BBox::new(2.0, 4.0, 10.0, 8.0));
        let prior = s.prior.unwrap();
        assert_eq!(prior.count(12), 80);
        assert_eq!(prior.count(0), 0);
    }

    #[test]
    fn missing_detections_name_the_image() {
        let provider = PriorProvider::Detections(BTreeMap::new());
        match attach_prior(prepared(), &provider, &PriorSettings::default()) {
            Err(Error::MissingPrior(id)) => assert_eq!(id, "img"),
            other => panic!("{other:?}"),
        }
    }
}
