//! Dataset directories: `root/images/NNNN.ppm` with `root/labels/NNNN.pgm`.

use std::path::Path;

use stdcma_core::dataset::SegSample;

use crate::error::AppError;
use crate::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm, GrayMap};

pub fn write_dataset(root: &Path, samples: &[SegSample]) -> Result<(), AppError> {
    for dir in ["images", "labels"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| AppError::io(&d, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&root.join(format!("images/{i:04}.ppm")), &s.image)?;
        let map = GrayMap { width: s.width(), height: s.height(), data: s.labels.clone() };
        write_pgm(&root.join(format!("labels/{i:04}.pgm")), &map)?;
    }
    Ok(())
}

/// Loads every `images/*.ppm` in name order with its same-stem label map.
pub fn read_dataset(root: &Path) -> Result<Vec<SegSample>, AppError> {
    let images = root.join("images");
    let mut names: Vec<String> = std::fs::read_dir(&images)
        .map_err(|e| AppError::io(&images, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(AppError::data(format!("{}: no .ppm images", images.display())));
    }
    names
        .iter()
        .map(|name| {
            let stem = name.trim_end_matches(".ppm");
            let image = read_ppm(&images.join(name))?;
            let label_path = root.join("labels").join(format!("{stem}.pgm"));
            let labels = read_pgm(&label_path)?;
            if (labels.width, labels.height) != (image.width(), image.height()) {
                return Err(AppError::data(format!(
                    "{}: {}x{} labels for a {}x{} image",
                    label_path.display(),
                    labels.width,
                    labels.height,
                    image.width(),
                    image.height()
                )));
            }
            Ok(SegSample::new(image, labels.data)?)
        })
        .collect()
}
