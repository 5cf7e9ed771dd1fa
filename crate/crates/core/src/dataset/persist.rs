//! A dataset directory holds `images.symt` (f32, dims N×C×H×W) and
//! `manifest.csv` with one ground-truth record per image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SampleRecord, Split, SymDataset};
use crate::error::{Error, Result};
use crate::format::{csv_error, Blob};
use crate::group::Angle;
use crate::image::Image;

pub const IMAGES_FILE: &str = "images.symt";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: u64,
    class_id: usize,
    base_index: usize,
    angle: f64,
    spec: String,
    split: String,
}

const HEADER: [&str; 6] = ["sample_id", "class_id", "base_index", "angle", "spec", "split"];

pub fn save_dataset(ds: &SymDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = ds.images.first().map(Image::shape).unwrap_or((1, 0, 0));
    let mut data = Vec::with_capacity(ds.len() * c * h * w);
    for img in &ds.images {
        if img.shape() != (c, h, w) {
            return Err(Error::Shape(format!("mixed image shapes {:?} and {:?}", (c, h, w), img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Blob::f32(vec![ds.len(), c, h, w], data)?.write(&dir.join(IMAGES_FILE))?;

    let path = dir.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in &ds.records {
        writer
            .serialize(ManifestRow {
                sample_id: r.sample_id,
                class_id: r.class_id,
                base_index: r.base_index,
                angle: r.angle.degrees(),
                spec: r.spec.to_string(),
                split: ds.split.to_string(),
            })
            .map_err(|e| csv_error(&path, e))?;
    }
    if ds.records.is_empty() {
        writer.write_record(HEADER).map_err(|e| csv_error(&path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SymDataset> {
    let images_path = dir.join(IMAGES_FILE);
    let source = images_path.display().to_string();
    let (dims, data) = Blob::read(&images_path)?.into_f32(&source)?;
    let [n, c, h, w]: [usize; 4] = dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::format(&source, "offset 9", format!("expected 4 dims, found {}", dims.len())))?;
    let plane = c * h * w;
    let images = (0..n)
        .map(|i| Image::new(h, w, c, data[i * plane..(i + 1) * plane].to_vec()))
        .collect::<Result<Vec<_>>>()?;

    let path = dir.join(MANIFEST_FILE);
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let header = reader.headers().map_err(|e| csv_error(&path, e))?;
    if header.iter().ne(HEADER) {
        return Err(Error::format(&name, "line 1", format!("expected header {}", HEADER.join(","))));
    }
    let mut records = Vec::with_capacity(n);
    let mut split = None;
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| csv_error(&path, e))?;
        let line = records.len() + 2;
        let at = || format!("line {line}");
        let spec = row.spec.parse().map_err(|e| Error::format(&name, at(), format!("{e}")))?;
        let angle = Angle::new(row.angle).map_err(|e| Error::format(&name, at(), format!("{e}")))?;
        if angle.degrees() != row.angle {
            return Err(Error::format(&name, at(), format!("angle {} is not canonical", row.angle)));
        }
        let row_split: Split = row.split.parse().map_err(|e| Error::format(&name, at(), format!("{e}")))?;
        if *split.get_or_insert(row_split) != row_split {
            return Err(Error::format(&name, at(), "mixed split tags"));
        }
        records.push(SampleRecord {
            sample_id: row.sample_id,
            class_id: row.class_id,
            base_index: row.base_index,
            angle,
            spec,
        });
    }
    if records.len() != images.len() {
        return Err(Error::format(
            &name,
            format!("line {}", records.len() + 2),
            format!("{} records for {} images", records.len(), images.len()),
        ));
    }
    SymDataset::new(images, records, split.unwrap_or(Split::Train))
}
