use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rayon::prelude::*;

use super::{content_hash, Dataset, GrayImage, PreprocessRecipe, Sample, Split};
use crate::error::{data_err, Error, Result};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        v.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes an 8-bit gray or RGB(A) file to unscaled gray values and its
/// content hash. Higher bit depths are refused.
pub(crate) fn decode(path: &Path) -> Result<(GrayImage, String)> {
    let img = image::open(path).map_err(|e| data_err!("cannot read image {}: {e}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => Ok((GrayImage::from_u8(h, w, b.as_raw())?, content_hash(h, w, 1, b.as_raw()))),
        DynamicImage::ImageLumaA8(_) => {
            let b = img.to_luma8();
            Ok((GrayImage::from_u8(h, w, b.as_raw())?, content_hash(h, w, 1, b.as_raw())))
        }
        DynamicImage::ImageRgb8(b) => Ok((GrayImage::from_rgb8(h, w, b.as_raw())?, content_hash(h, w, 3, b.as_raw()))),
        DynamicImage::ImageRgba8(_) => {
            let b = img.to_rgb8();
            Ok((GrayImage::from_rgb8(h, w, b.as_raw())?, content_hash(h, w, 3, b.as_raw())))
        }
        other => Err(data_err!(
            "unsupported pixel format {:?} in {}: only 8-bit gray or RGB images are accepted",
            other.color(),
            path.display()
        )),
    }
}

/// Loads `root/<class>/<file>`: classes are the sorted subdirectory names,
/// files are taken in lexicographic path order and run through `recipe`.
pub fn load_image_folder(root: &Path, recipe: &PreprocessRecipe, split: Split) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(data_err!("{} contains no class folders", root.display()));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(data_err!("class folder {} has no PNG or PGM images", dir.display()));
        }
        let decoded = files
            .par_iter()
            .map(|f| {
                let (raw, hash) = decode(f)?;
                let image = recipe.apply(&raw).map_err(|e| data_err!("{}: {e}", f.display()))?;
                let id = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
                Ok(Sample { id, label, image, hash })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.extend(decoded);
        class_names.push(name);
    }
    Ok(Dataset { class_names, samples, split })
}
