use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{chip_to_rgb8, rgb8_to_chip, GtBox, Provenance, Scene};
use crate::error::{ensure, Error, Result};

/// The JSON sidecar stored next to each canvas image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub canvas_size: usize,
    pub truths: Vec<GtBox>,
    pub provenance: Vec<Provenance>,
}

fn stem(id: usize) -> String {
    format!("scene_{id:05}")
}

pub fn scene_image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("{}.png", stem(id)))
}

fn write_png(path: &Path, rgb: &[u8], size: usize) -> Result<()> {
    image::save_buffer_with_format(path, rgb, size as u32, size as u32, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })
}

/// Writes `scene_NNNNN.png` (8-bit RGB) and `scene_NNNNN.json` per scene.
pub fn write_scene_archive(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, scene) in scenes.iter().enumerate() {
        let size = scene.canvas_size();
        write_png(&scene_image_path(dir, id), &chip_to_rgb8(&scene.canvas), size)?;
        let record = SceneRecord {
            id,
            canvas_size: size,
            truths: scene.truths.clone(),
            provenance: scene.provenance.clone(),
        };
        let json_path = dir.join(format!("{}.json", stem(id)));
        let text = serde_json::to_string_pretty(&record)?;
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    }
    Ok(())
}

/// Reads every `scene_*.json` in `dir`, in id order. Canvases come back at
/// 8-bit precision.
pub fn read_scene_archive(dir: &Path) -> Result<Vec<Scene>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut sidecars = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_sidecar = path.extension().is_some_and(|e| e == "json")
            && path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("scene_"));
        if is_sidecar {
            sidecars.push(path);
        }
    }
    sidecars.sort();
    let mut scenes = Vec::with_capacity(sidecars.len());
    for path in sidecars {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: SceneRecord = serde_json::from_str(&text)?;
        ensure!(record.id == scenes.len(), Data, "{}: expected scene id {}", path.display(), scenes.len());
        ensure!(
            record.truths.len() == record.provenance.len(),
            Data,
            "{}: truths and provenance differ in length",
            path.display()
        );
        let img_path = scene_image_path(dir, record.id);
        let img = image::open(&img_path)
            .map_err(|e| Error::Image {
                path: img_path.clone(),
                message: e.to_string(),
            })?
            .into_rgb8();
        let size = record.canvas_size;
        ensure!(
            img.width() as usize == size && img.height() as usize == size,
            Data,
            "{}: expected {size}x{size} canvas",
            img_path.display()
        );
        scenes.push(Scene {
            canvas: rgb8_to_chip(img.as_raw(), size, size)?,
            truths: record.truths,
            provenance: record.provenance,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::{compose_scene, DegradationSpec, ImageChip, SceneObject};
    use crate::geometry::BBox;

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let objs = [SceneObject {
            chip: ImageChip::filled(3, 32, 32, 1.0),
            class_id: 7,
            source_index: Some(12),
        }];
        let place = [(BBox::new(0.3, 0.6, 0.2, 0.2), DegradationSpec::new(0.5, 0.0, 0.0))];
        let scenes = vec![
            compose_scene(&objs, 64, &place, 1).unwrap(),
            compose_scene(&[], 64, &[], 2).unwrap(),
        ];
        write_scene_archive(dir.path(), &scenes).unwrap();
        let back = read_scene_archive(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.truths, b.truths);
            assert_eq!(a.provenance, b.provenance);
            assert_eq!(chip_to_rgb8(&a.canvas), chip_to_rgb8(&b.canvas));
        }
    }
}
