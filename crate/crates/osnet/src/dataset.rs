//! On-disk layout of a generated dataset.
//!
//! ```text
//! DIR/dataset.json          generator settings
//! DIR/<split>/manifest.json [{"id": .., "camera": .., "file": "00000.bin"}, ...]
//! DIR/<split>/00000.bin     one 3×H×W image in the checkpoint container
//! ```

use std::fs;
use std::path::Path;

use osnet_core::data::{Dataset, PersonImage, Split, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::read_json;
use crate::error::{Error, Result};

pub const SPLITS: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub camera: usize,
    pub file: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_json(&dir.join("dataset.json"), &dataset.config)?;
    for split in SPLITS {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(Error::io(&sub))?;
        let mut manifest = Vec::new();
        for (i, p) in dataset.split(split).iter().enumerate() {
            let file = format!("{i:05}.bin");
            Checkpoint::from_tensor("image", &p.image).write(&sub.join(&file))?;
            manifest.push(ManifestEntry { id: p.identity, camera: p.camera, file });
        }
        write_json(&sub.join("manifest.json"), &manifest)?;
    }
    Ok(())
}

fn read_split(dir: &Path, split: Split) -> Result<Vec<PersonImage>> {
    let sub = dir.join(split.name());
    let manifest: Vec<ManifestEntry> = read_json(&sub.join("manifest.json"))?;
    manifest
        .into_iter()
        .map(|m| {
            let image = Checkpoint::read(&sub.join(&m.file))?.tensor()?;
            if image.shape().len() != 3 || image.shape()[0] != 3 {
                return Err(Error::Malformed(format!("{}: expected a 3×H×W image, got {:?}", m.file, image.shape())));
            }
            Ok(PersonImage { image, identity: m.id, camera: m.camera, split })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let config: SynthConfig = read_json(&dir.join("dataset.json"))?;
    Ok(Dataset {
        config,
        train: read_split(dir, Split::Train)?,
        query: read_split(dir, Split::Query)?,
        gallery: read_split(dir, Split::Gallery)?,
    })
}
