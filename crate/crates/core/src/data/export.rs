use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ClassRecord, DomainDataset, DomainId, Image, ImageId};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: u32,
    pub file: String,
    pub image_indices: Vec<u32>,
}

/// Directory manifest. Each class is one file of little-endian `f32` values,
/// `images × 3 × S × S` in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub domain: DomainId,
    pub image_shape: [usize; 3],
    pub seed: u64,
    pub spec: serde_json::Value,
    pub classes: Vec<ClassEntry>,
}

pub fn export_dataset(ds: &DomainDataset, dir: &Path, seed: u64, spec: serde_json::Value) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut classes = Vec::with_capacity(ds.classes.len());
    for c in &ds.classes {
        let file = format!("class_{}.f32", c.class_id);
        let mut bytes = Vec::with_capacity(c.images.len() * 3 * ds.image_size * ds.image_size * 4);
        for img in &c.images {
            for &p in img.pixels.iter() {
                bytes.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        fs::write(dir.join(&file), bytes)?;
        classes.push(ClassEntry {
            class_id: c.class_id,
            file,
            image_indices: c.images.iter().map(|i| i.id.index).collect(),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        domain: ds.domain,
        image_shape: [3, ds.image_size, ds.image_size],
        seed,
        spec,
        classes,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn import_dataset(dir: &Path) -> Result<(DomainDataset, DatasetManifest)> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let [ch, h, w] = manifest.image_shape;
    if ch != 3 || h != w || h == 0 {
        return Err(Error::data(format!(
            "unsupported image shape {:?}",
            manifest.image_shape
        )));
    }
    let per = ch * h * w;
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for entry in &manifest.classes {
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() != entry.image_indices.len() * per * 4 {
            return Err(Error::data(format!(
                "{}: expected {} images of {per} floats",
                entry.file,
                entry.image_indices.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let images = entry
            .image_indices
            .iter()
            .zip(values.chunks_exact(per))
            .map(|(&index, px)| Image {
                id: ImageId {
                    class_id: entry.class_id,
                    index,
                },
                domain: manifest.domain,
                pixels: Arc::from(px),
            })
            .collect();
        classes.push(ClassRecord {
            class_id: entry.class_id,
            images,
        });
    }
    let ds = DomainDataset {
        domain: manifest.domain,
        image_size: h,
        classes,
    };
    ds.validate()?;
    Ok((ds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DomainSpec};

    #[test]
    fn export_then_import_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::target();
        let ds = generate_dataset(&spec, 3, 4, 5).unwrap();
        let m = export_dataset(&ds, dir.path(), 5, serde_json::to_value(&spec).unwrap()).unwrap();
        let (back, m2) = import_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.class_ids(), ds.class_ids());
        for (a, b) in ds.images().zip(back.images()) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.pixels.iter().zip(b.pixels.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn truncated_class_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&DomainSpec::source(), 2, 2, 5).unwrap();
        let m = export_dataset(&ds, dir.path(), 5, serde_json::Value::Null).unwrap();
        let f = dir.path().join(&m.classes[0].file);
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        assert!(import_dataset(dir.path()).is_err());
    }
}
