//! On-disk dataset layout: `manifest.jsonl` plus one HCT1 image per scene.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, GenConfig, Region, SceneObject, SceneRecord, Split};
use crate::diffcore::io as tio;
use crate::encoders::Image;

pub const MANIFEST: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const GEN_CONFIG: &str = "genconfig.json";

/// Records the generator settings next to a dataset.
pub fn write_gen_config(config: &GenConfig, dir: &Path) -> Result<(), DataError> {
    let path = dir.join(GEN_CONFIG);
    let text = serde_json::to_string_pretty(config).expect("configs serialise");
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))
}

/// The generator settings of a dataset, if they were recorded.
pub fn read_gen_config(dir: &Path) -> Result<Option<GenConfig>, DataError> {
    let path = dir.join(GEN_CONFIG);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| DataError::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    scene_id: String,
    caption: String,
    split: Split,
    image: String,
    texture_seed: u64,
    objects: Vec<SceneObject>,
    regions: Vec<Region>,
}

/// Writes every record's image and one manifest line per record, in order.
pub fn write_dataset(records: &[SceneRecord], dir: &Path) -> Result<(), DataError> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let path = dir.join(MANIFEST);
    let file = fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let name = format!("{IMAGE_DIR}/{}.hct", rec.scene_id);
        tio::save(&rec.image.to_tensor(), &dir.join(&name))?;
        let entry = ManifestEntry {
            scene_id: rec.scene_id.clone(),
            caption: rec.global_caption.clone(),
            split: rec.split,
            image: name,
            texture_seed: rec.texture_seed,
            objects: rec.objects.clone(),
            regions: rec.regions.clone(),
        };
        let line = serde_json::to_string(&entry).expect("manifest entries serialise");
        writeln!(out, "{line}").map_err(|e| DataError::io(&path, e))?;
    }
    out.flush().map_err(|e| DataError::io(&path, e))
}

/// Reads and validates a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneRecord>, DataError> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| DataError::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| DataError::Manifest { line: n + 1, detail: e.to_string() })?;
        let bad = |detail: String| DataError::Manifest { line: n + 1, detail };
        if !(2..=8).contains(&entry.regions.len()) {
            return Err(bad(format!("scene {} has {} regions; expected 2 to 8", entry.scene_id, entry.regions.len())));
        }
        for r in &entry.regions {
            r.bbox.validate().map_err(|e| bad(format!("scene {}: {e}", entry.scene_id)))?;
            if r.objects.iter().any(|&o| o >= entry.objects.len()) {
                return Err(bad(format!("scene {}: region refers to a missing object", entry.scene_id)));
            }
        }
        let img_path = dir.join(&entry.image);
        if !img_path.is_file() {
            return Err(DataError::MissingImage { scene_id: entry.scene_id, path: img_path });
        }
        let image = Image::from_tensor(&tio::load::<f32>(&img_path)?)?;
        records.push(SceneRecord {
            scene_id: entry.scene_id,
            split: entry.split,
            global_caption: entry.caption,
            regions: entry.regions,
            objects: entry.objects,
            texture_seed: entry.texture_seed,
            image,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{derive_seed, generate_scene, GenConfig};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let recs: Vec<SceneRecord> =
            (0..10).map(|i| generate_scene(&cfg, Split::Test, i, derive_seed(8, 3, i as u64)).unwrap()).collect();
        write_dataset(&recs, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), recs);
    }

    #[test]
    fn zero_width_box_and_missing_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let recs = vec![generate_scene(&cfg, Split::Train, 0, 1).unwrap()];
        write_dataset(&recs, dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&manifest).unwrap();
        let w = recs[0].regions[0].bbox.w;
        fs::write(&manifest, text.replacen(&format!("\"w\":{w}"), "\"w\":0.0", 1)).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("0 < w"), "{err}");

        fs::write(&manifest, text).unwrap();
        fs::remove_file(dir.path().join(format!("{IMAGE_DIR}/{}.hct", recs[0].scene_id))).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DataError::MissingImage { .. })));

        fs::write(&manifest, "{not json\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DataError::Manifest { line: 1, .. })));
    }
}
