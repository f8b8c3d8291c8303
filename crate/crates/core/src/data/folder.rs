use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3};

use super::{DatasetKind, Label, Sample};
use crate::error::{Error, Result};
use crate::objectives::Trimap;

/// Samples plus the number of files that could not be decoded.
#[derive(Debug)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub skipped: usize,
}

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

/// Decodes an RGB image, bilinear-resized to `size × size`, scaled to `[0, 1]`.
pub(crate) fn read_image(path: &Path, size: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rgb = img
        .resize_exact(size as u32, size as u32, FilterType::Triangle)
        .to_rgb8();
    Ok(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Maps stored tri-map values to labels: 1 → foreground (0), 2 → background
/// (1), 3 → unknown (2).
pub fn map_trimap_value(v: u8) -> Option<u8> {
    match v {
        1 => Some(0),
        2 => Some(1),
        3 => Some(2),
        _ => None,
    }
}

/// Decodes a tri-map with nearest-neighbour resizing.
pub(crate) fn read_trimap(path: &Path, size: usize) -> Result<Trimap> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let luma = img
        .resize_exact(size as u32, size as u32, FilterType::Nearest)
        .to_luma8();
    let mut labels = Array2::zeros((size, size));
    for ((y, x), l) in labels.indexed_iter_mut() {
        let v = luma.get_pixel(x as u32, y as u32)[0];
        *l = map_trimap_value(v)
            .ok_or_else(|| Error::Label(format!("{}: tri-map value {v} not in {{1,2,3}}", path.display())))?;
    }
    Trimap::new(labels)
}

/// Reads a dataset directory.
///
/// * unlabeled: image files directly in `root`
/// * classification: one subdirectory per class, class index = sorted rank
/// * segmentation: `root/images/*` with tri-maps in `root/trimaps/` sharing
///   the file stem
///
/// Files are visited in lexicographic order. Undecodable files are skipped
/// with a warning and counted.
pub fn load_folder(root: &Path, kind: DatasetKind, image_size: usize) -> Result<LoadReport> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut push = |res: Result<Sample>, path: &Path| match res {
        Ok(s) => samples.push(s),
        Err(e) => {
            log::warn!("skipping {}: {e}", path.display());
            skipped += 1;
        }
    };

    match kind {
        DatasetKind::Unlabeled => {
            for path in image_files(root)? {
                let res = read_image(&path, image_size).map(|image| Sample {
                    image,
                    label: Label::None,
                });
                push(res, &path);
            }
        }
        DatasetKind::Classification => {
            let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
            for (class, dir) in classes.iter().enumerate() {
                for path in image_files(dir)? {
                    let res = read_image(&path, image_size).map(|image| Sample {
                        image,
                        label: Label::Class(class),
                    });
                    push(res, &path);
                }
            }
        }
        DatasetKind::Segmentation => {
            let trimaps: BTreeMap<String, PathBuf> = image_files(&root.join("trimaps"))?
                .into_iter()
                .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
                .collect();
            for path in image_files(&root.join("images"))? {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let res = match trimaps.get(stem) {
                    Some(tp) => read_image(&path, image_size).and_then(|image| {
                        Ok(Sample {
                            image,
                            label: Label::Trimap(read_trimap(tp, image_size)?),
                        })
                    }),
                    None => Err(Error::Data(format!("no tri-map for {stem}"))),
                };
                push(res, &path);
            }
        }
    }

    if samples.is_empty() {
        return Err(Error::Data(format!("no usable samples under {}", root.display())));
    }
    Ok(LoadReport { samples, skipped })
}
