//! MVTec-style category loader: per-category directories of PNGs with
//! `train/good`, `test/good` and `test/<defect>` subfolders.

use crate::{Error, Result, Scalar};
use ndarray::Array3;
use std::path::Path;

/// Label 0 is reserved for defect-free images; defect folders get labels
/// 1.. in sorted order.
pub const GOOD_LABEL: u32 = 0;

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn load_image<F: Scalar>(path: &Path) -> Result<Array3<F>> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, format!("decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let scale = F::from_f64_c(1.0 / 255.0);
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = F::from_f64_c(px.0[ch] as f64) * scale;
        }
    }
    Ok(out)
}

fn load_dir<F: Scalar>(
    dir: &Path,
    label: u32,
    images: &mut Vec<Array3<F>>,
    labels: &mut Vec<u32>,
) -> Result<()> {
    for path in sorted_entries(dir)? {
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        if is_image {
            images.push(load_image(&path)?);
            labels.push(label);
        }
    }
    Ok(())
}

pub struct CategoryData<F: Scalar> {
    pub train_images: Vec<Array3<F>>,
    pub train_labels: Vec<u32>,
    pub test_images: Vec<Array3<F>>,
    pub test_labels: Vec<u32>,
    /// Index = label; `label_names[0] == "good"`.
    pub label_names: Vec<String>,
}

/// Loads one category from `<root>/<category>/{train,test}/...`.
pub fn load_category<F: Scalar>(root: &Path, category: &str) -> Result<CategoryData<F>> {
    let cat_dir = root.join(category);
    let train_good = cat_dir.join("train").join("good");
    let test_dir = cat_dir.join("test");
    if !train_good.is_dir() || !test_dir.is_dir() {
        return Err(Error::data(
            &cat_dir,
            "expected <category>/train/good and <category>/test directories",
        ));
    }

    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    load_dir(&train_good, GOOD_LABEL, &mut train_images, &mut train_labels)?;
    if train_images.is_empty() {
        return Err(Error::data(&train_good, "no training images found"));
    }

    let mut defect_names: Vec<String> = sorted_entries(&test_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .filter(|n| n != "good")
        .collect();
    defect_names.sort();

    let mut label_names = vec!["good".to_string()];
    label_names.extend(defect_names.iter().cloned());

    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    let good_dir = test_dir.join("good");
    if good_dir.is_dir() {
        load_dir(&good_dir, GOOD_LABEL, &mut test_images, &mut test_labels)?;
    }
    for (i, name) in defect_names.iter().enumerate() {
        load_dir(
            &test_dir.join(name),
            (i + 1) as u32,
            &mut test_images,
            &mut test_labels,
        )?;
    }
    if test_images.is_empty() {
        return Err(Error::data(&test_dir, "no test images found"));
    }

    Ok(CategoryData {
        train_images,
        train_labels,
        test_images,
        test_labels,
        label_names,
    })
}

/// Lists category directories under an MVTec-style root.
pub fn list_categories(root: &Path) -> Result<Vec<String>> {
    let mut cats: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir() && p.join("train").join("good").is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .collect();
    cats.sort();
    if cats.is_empty() {
        return Err(Error::data(root, "no category directories found"));
    }
    Ok(cats)
}
