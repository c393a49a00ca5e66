//! Dataset directories: `meta.json` plus one tensor record per image
//! (`img_%06d`, f64 `H×W×3`) and per label map (`lbl_%06d`, u8 `H×W`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{scene_seed, Dataset, DatasetSpec, LabelMap, Scene};
use crate::error::{Error, Result};
use crate::tensor::{read_record, write_record, Record};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: DatasetSpec,
    pub master_seed: u64,
    pub scene_seeds: Vec<u64>,
    pub count: usize,
    pub class_names: Vec<String>,
}

fn image_name(i: usize) -> String {
    format!("img_{i:06}")
}

fn label_name(i: usize) -> String {
    format!("lbl_{i:06}")
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        spec: data.spec.clone(),
        master_seed: data.spec.seed,
        scene_seeds: (0..data.len()).map(|i| scene_seed(data.spec.seed, i)).collect(),
        count: data.len(),
        class_names: data.spec.class_names(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    for (i, scene) in data.scenes.iter().enumerate() {
        let img = Record::F64(scene.image.clone());
        let lbl = Record::U8 {
            shape: vec![scene.labels.height, scene.labels.width],
            data: scene.labels.data.clone(),
        };
        for (name, rec) in [(image_name(i), img), (label_name(i), lbl)] {
            let path = dir.join(name);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_record(BufWriter::new(f), &rec).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn read_one(path: &Path) -> Result<Record> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_record(BufReader::new(f))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    let bad = |reason: String| Error::Format {
        what: "dataset directory",
        reason,
    };
    let mut scenes = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let image = match read_one(&dir.join(image_name(i)))? {
            Record::F64(t) => t,
            other => other.into_tensor()?,
        };
        let labels = match read_one(&dir.join(label_name(i)))? {
            Record::U8 { shape, data } if shape.len() == 2 => LabelMap {
                height: shape[0],
                width: shape[1],
                data,
            },
            _ => return Err(bad(format!("{} is not a u8 label map", label_name(i)))),
        };
        if image.shape() != [labels.height, labels.width, 3] {
            return Err(bad(format!("sample {i}: image and label sizes disagree")));
        }
        scenes.push(Scene { image, labels });
    }
    Ok(Dataset {
        spec: meta.spec,
        scenes,
    })
}
