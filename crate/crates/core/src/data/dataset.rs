use std::path::{Path, PathBuf};

use image::GrayImage;

use crate::error::{Error, Result};
use crate::types::BinaryMask;

pub const PATIENT_PREFIX: &str = "patient_";

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub pixels: GrayImage,
    pub patient_id: String,
    pub frame_id: String,
}

impl ImageRecord {
    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }
}

/// One indexed frame. Pixel data stays on disk until requested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleEntry {
    pub patient_id: String,
    pub frame_id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
}

impl SampleEntry {
    /// `patient/frame`, unique within a dataset.
    pub fn key(&self) -> String {
        format!("{}/{}", self.patient_id, self.frame_id)
    }

    pub fn load_image(&self) -> Result<ImageRecord> {
        let pixels = image::open(&self.image_path)
            .map_err(|e| Error::load(&self.image_path, e.to_string()))?
            .into_luma8();
        Ok(ImageRecord {
            pixels,
            patient_id: self.patient_id.clone(),
            frame_id: self.frame_id.clone(),
        })
    }

    pub fn load_mask(&self) -> Result<BinaryMask> {
        let path = self.mask_path.as_ref().ok_or_else(|| {
            Error::load(&self.image_path, "missing mask")
        })?;
        read_mask(path)
    }
}

/// Index over a `root/patient_<id>/{images,masks}/<frame>.png` tree, sorted by
/// (patient id, frame id).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<SampleEntry>,
}

impl Dataset {
    pub fn patients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.samples.iter().map(|s| s.patient_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn has_all_masks(&self) -> bool {
        self.samples.iter().all(|s| s.mask_path.is_some())
    }

    pub fn for_patients<'a>(&'a self, patients: &'a [String]) -> impl Iterator<Item = &'a SampleEntry> + 'a {
        self.samples.iter().filter(move |s| patients.contains(&s.patient_id))
    }
}

/// Reads an 8-bit mask PNG where foreground is 255 and background 0.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for v in luma.into_raw() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::load(path, format!("non-binary mask value {other}")));
            }
        }
    }
    BinaryMask::from_vec(w as usize, h as usize, data)
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.as_slice().iter().map(|v| v * 255).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::load(dir, e.to_string()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Indexes a dataset tree and checks every image/mask pair.
///
/// Every image must have a mask of the same size whose values are 0 or 255.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    index_dataset(root.as_ref(), true)
}

/// Like [`load_dataset`] but accepts frames with no mask (inference inputs).
/// Masks that are present are still validated.
pub fn load_dataset_unlabeled(root: impl AsRef<Path>) -> Result<Dataset> {
    index_dataset(root.as_ref(), false)
}

/// Inference inputs: a dataset tree, or a flat directory of PNG frames
/// (indexed under the directory's name as patient id).
pub fn load_image_dir(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    if let Ok(ds) = index_dataset(root, false) {
        return Ok(ds);
    }
    let patient = root.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_else(|| "images".into());
    let mut samples = Vec::new();
    for frame in png_stems(root)? {
        let image_path = root.join(format!("{frame}.png"));
        let (width, height) = image::image_dimensions(&image_path).map_err(|e| Error::load(&image_path, e.to_string()))?;
        samples.push(SampleEntry { patient_id: patient.clone(), frame_id: frame, image_path, mask_path: None, width, height });
    }
    if samples.is_empty() {
        return Err(Error::load(root, "no PNG images"));
    }
    Ok(Dataset { root: root.to_path_buf(), samples })
}

fn index_dataset(root: &Path, require_masks: bool) -> Result<Dataset> {
    let mut patient_dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::load(root, e.to_string()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if entry.file_type()?.is_dir() {
            if let Some(id) = name.strip_prefix(PATIENT_PREFIX) {
                if id.is_empty() {
                    return Err(Error::load(entry.path(), "empty patient id"));
                }
                patient_dirs.push((id.to_string(), entry.path()));
            }
        }
    }
    if patient_dirs.is_empty() {
        return Err(Error::load(root, "no patient_<id> directories"));
    }
    patient_dirs.sort();

    let mut samples = Vec::new();
    for (patient_id, dir) in patient_dirs {
        let images_dir = dir.join("images");
        let masks_dir = dir.join("masks");
        for frame in png_stems(&images_dir)? {
            let image_path = images_dir.join(format!("{frame}.png"));
            let mask_candidate = masks_dir.join(format!("{frame}.png"));
            let (width, height) = image::image_dimensions(&image_path)
                .map_err(|e| Error::load(&image_path, e.to_string()))?;
            let mask_path = if mask_candidate.is_file() {
                let mask = read_mask(&mask_candidate)?;
                if mask.dims() != (width as usize, height as usize) {
                    return Err(Error::load(
                        &mask_candidate,
                        format!(
                            "size mismatch: mask {}x{} vs image {width}x{height}",
                            mask.width(),
                            mask.height()
                        ),
                    ));
                }
                Some(mask_candidate)
            } else if require_masks {
                return Err(Error::load(&image_path, format!("missing mask {}", mask_candidate.display())));
            } else {
                None
            };
            samples.push(SampleEntry {
                patient_id: patient_id.clone(),
                frame_id: frame,
                image_path,
                mask_path,
                width,
                height,
            });
        }
    }
    Ok(Dataset { root: root.to_path_buf(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(root: &Path, patient: &str, frame: &str, img: (u32, u32), mask: Option<(u32, u32, u8)>) {
        let pdir = root.join(format!("patient_{patient}"));
        std::fs::create_dir_all(pdir.join("images")).unwrap();
        std::fs::create_dir_all(pdir.join("masks")).unwrap();
        GrayImage::new(img.0, img.1).save(pdir.join("images").join(format!("{frame}.png"))).unwrap();
        if let Some((w, h, v)) = mask {
            GrayImage::from_pixel(w, h, image::Luma([v]))
                .save(pdir.join("masks").join(format!("{frame}.png")))
                .unwrap();
        }
    }

    #[test]
    fn indexes_well_formed_tree() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "b", "f1", (8, 6), Some((8, 6, 255)));
        write_pair(dir.path(), "a", "f2", (8, 6), Some((8, 6, 0)));
        write_pair(dir.path(), "a", "f1", (8, 6), Some((8, 6, 0)));
        let ds = load_dataset(dir.path()).unwrap();
        let keys: Vec<_> = ds.samples.iter().map(|s| s.key()).collect();
        assert_eq!(keys, vec!["a/f1", "a/f2", "b/f1"]);
        assert_eq!(ds.patients(), vec!["a", "b"]);
        assert_eq!(ds.samples[2].load_mask().unwrap().count(), 48);
    }

    #[test]
    fn size_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", "f1", (711, 457), Some((100, 100, 0)));
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("size mismatch"), "{err}");
        assert!(err.contains("f1.png"), "{err}");
    }

    #[test]
    fn missing_and_non_binary_masks_fail() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", "f1", (4, 4), None);
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing mask"), "{err}");
        assert_eq!(load_dataset_unlabeled(dir.path()).unwrap().samples.len(), 1);

        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", "f1", (4, 4), Some((4, 4, 7)));
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("non-binary"), "{err}");
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(9, 5, |x, y| (x + y) % 3 == 0);
        let p = dir.path().join("m.png");
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }
}
