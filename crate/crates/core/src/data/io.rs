use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::domain::{BBox, FdiCode, Point, RadiographCategory, ToothAnnotation};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

/// On-disk `annotations.json` document. Codes are kept raw here so that
/// validation can report bad values instead of failing the parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub category: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub fdi: u32,
    pub polygon: Vec<[f64; 2]>,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Image path relative to the dataset root.
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub category: RadiographCategory,
    pub annotations: Vec<ToothAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub images: usize,
    pub annotations: usize,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn total_annotations(&self) -> usize {
        self.entries.iter().map(|e| e.annotations.len()).sum()
    }

    pub fn to_annotation_file(&self) -> AnnotationFile {
        let mut images = Vec::with_capacity(self.entries.len());
        let mut annotations = Vec::new();
        for e in &self.entries {
            images.push(ImageRecord {
                id: e.image_id.clone(),
                file: e.file.clone(),
                width: e.width,
                height: e.height,
                category: e.category.id(),
            });
            for a in &e.annotations {
                annotations.push(AnnotationRecord {
                    image_id: a.image_id.clone(),
                    fdi: a.fdi.code(),
                    polygon: a.polygon.iter().map(|&p| p.into()).collect(),
                    bbox: a.bbox.into(),
                });
            }
        }
        AnnotationFile { images, annotations }
    }

    /// Converts and validates an annotation document. Invalid records are
    /// reported as errors and left out of the manifest.
    pub fn from_annotation_file(file: &AnnotationFile) -> (DatasetManifest, ValidationReport) {
        let mut report = ValidationReport::default();
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for rec in &file.images {
            if index.contains_key(&rec.id) {
                report.errors.push(format!("duplicate image id {}", rec.id));
                continue;
            }
            let category = match RadiographCategory::new(rec.category) {
                Ok(c) => c,
                Err(e) => {
                    report.errors.push(format!("image {}: {e}", rec.id));
                    continue;
                }
            };
            if rec.width == 0 || rec.height == 0 {
                report.errors.push(format!("image {}: zero size", rec.id));
                continue;
            }
            index.insert(rec.id.clone(), entries.len());
            entries.push(ManifestEntry {
                image_id: rec.id.clone(),
                file: rec.file.clone(),
                width: rec.width,
                height: rec.height,
                category,
                annotations: Vec::new(),
            });
        }
        let mut seen: HashSet<(usize, FdiCode)> = HashSet::new();
        for rec in &file.annotations {
            let Some(&slot) = index.get(&rec.image_id) else {
                report.errors.push(format!("annotation references unknown image {}", rec.image_id));
                continue;
            };
            let fdi = match FdiCode::new(rec.fdi) {
                Ok(f) => f,
                Err(e) => {
                    report.errors.push(format!("image {}: {e}", rec.image_id));
                    continue;
                }
            };
            let ann = ToothAnnotation {
                image_id: rec.image_id.clone(),
                fdi,
                polygon: rec.polygon.iter().map(|&p| Point::from(p)).collect(),
                bbox: BBox::from(rec.bbox),
            };
            if let Err(e) = ann.validate() {
                report.errors.push(e.to_string());
                continue;
            }
            let entry = &mut entries[slot];
            let (w, h) = (entry.width as f64, entry.height as f64);
            if ann.polygon.iter().any(|p| p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h) {
                report
                    .warnings
                    .push(format!("image {} tooth {}: polygon leaves the image, clipped on rasterization", ann.image_id, fdi));
            }
            if !seen.insert((slot, fdi)) {
                report.warnings.push(format!(
                    "image {} tooth {}: repeated FDI code, masks will be merged",
                    ann.image_id, fdi
                ));
            }
            entry.annotations.push(ann);
        }
        report.images = entries.len();
        report.annotations = entries.iter().map(|e| e.annotations.len()).sum();
        (DatasetManifest { entries }, report)
    }
}

/// A dataset rooted at a directory holding `images/` and `annotations.json`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.file)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<GrayImage> {
        let img = read_gray_png(&self.image_path(entry))?;
        if (img.width as u32, img.height as u32) != (entry.width, entry.height) {
            return Err(Error::Dataset(format!(
                "image {}: file is {}x{}, manifest says {}x{}",
                entry.image_id, img.width, img.height, entry.width, entry.height
            )));
        }
        Ok(img)
    }
}

/// Reads and validates a dataset. Missing image files are validation errors.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<(Dataset, ValidationReport)> {
    let root = root.as_ref().to_path_buf();
    let path = root.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    let (manifest, mut report) = DatasetManifest::from_annotation_file(&file);
    for e in &manifest.entries {
        if !root.join(&e.file).is_file() {
            report.errors.push(format!("image {}: missing file {}", e.image_id, e.file));
        }
    }
    Ok((Dataset { root, manifest }, report))
}

/// Writes `annotations.json` under `root` (images are written by the caller).
pub fn write_dataset(root: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join(IMAGES_DIR)).map_err(|e| Error::io(root, e))?;
    let path = root.join(ANNOTATIONS_FILE);
    let text = serde_json::to_string_pretty(&manifest.to_annotation_file()).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let img = ::image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    GrayImage::from_vec(h as usize, w as usize, data)
}

pub fn write_gray_png(path: &Path, image: &GrayImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = ::image::GrayImage::from_raw(image.width as u32, image.height as u32, image.to_u8())
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> AnnotationFile {
        serde_json::from_str(
            r#"{"images":[{"id":"a","file":"images/a.png","width":64,"height":32,"category":4},
                          {"id":"b","file":"images/b.png","width":64,"height":32,"category":6}],
                "annotations":[{"image_id":"a","fdi":11,"polygon":[[1,1],[5,1],[5,9]],"bbox":[1,1,4,8]},
                               {"image_id":"b","fdi":11,"polygon":[[1,1],[5,1],[5,9]],"bbox":[1,1,4,8]},
                               {"image_id":"b","fdi":11,"polygon":[[7,1],[9,1],[9,9]],"bbox":[7,1,2,8]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn parses_and_round_trips() {
        let (m, report) = DatasetManifest::from_annotation_file(&doc());
        assert!(report.is_ok(), "{report:?}");
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(m.len(), 2);
        assert_eq!(m.total_annotations(), 3);
        let (again, _) = DatasetManifest::from_annotation_file(&m.to_annotation_file());
        assert_eq!(again, m);
    }

    #[test]
    fn reports_bad_records() {
        let mut d = doc();
        d.images.push(d.images[0].clone());
        d.annotations[0].fdi = 19;
        d.annotations[1].image_id = "zzz".into();
        d.annotations[2].bbox = [0.0, 0.0, 30.0, 30.0];
        let (m, report) = DatasetManifest::from_annotation_file(&d);
        assert_eq!(report.errors.len(), 4, "{report:?}");
        assert_eq!(m.total_annotations(), 0);
    }
}
