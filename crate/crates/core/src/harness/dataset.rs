//! Dataset directories: per split, one tensor bundle of images and a JSON-lines
//! annotation file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{GroundTruthBox, Sample};
use crate::error::{Error, Result};
use crate::harness::synth::{generate_splits, DataConfig};
use crate::tensor::io::{load_bundle, save_bundle};

pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const IMAGES_STEM: &str = "images";
pub const METADATA: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Annotation {
    image: String,
    /// `[x1, y1, x2, y2, class]`.
    boxes: Vec<[f64; 5]>,
}

/// Provenance stored next to the splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: DataConfig,
}

fn image_name(i: usize) -> String {
    format!("img_{i:05}")
}

pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..samples.len()).map(image_name).collect();
    save_bundle(dir.join(IMAGES_STEM), names.iter().map(String::as_str).zip(samples.iter().map(|s| &s.image)))?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(ANNOTATIONS))?);
    for (name, s) in names.iter().zip(samples) {
        let a = Annotation {
            image: name.clone(),
            boxes: s.boxes.iter().map(|b| [b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3], b.class as f64]).collect(),
        };
        writeln!(f, "{}", serde_json::to_string(&a)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_split(dir: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let images = load_bundle(dir.join(IMAGES_STEM))?;
    let mut by_name: std::collections::HashMap<String, crate::Tensor4> = images.into_iter().collect();
    let f = fs::File::open(dir.join(ANNOTATIONS))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", dir.join(ANNOTATIONS).display(), lineno + 1)))?;
        let image = by_name
            .remove(&a.image)
            .ok_or_else(|| Error::Format(format!("annotation references unknown or repeated image `{}`", a.image)))?;
        let mut boxes = Vec::with_capacity(a.boxes.len());
        for b in &a.boxes {
            if b[4] < 0.0 || b[4].fract() != 0.0 {
                return Err(Error::Format(format!("image `{}`: class {} is not an index", a.image, b[4])));
            }
            let g = GroundTruthBox::new([b[0], b[1], b[2], b[3]], b[4] as usize);
            g.validate(num_classes)?;
            boxes.push(g);
        }
        out.push(Sample { image, boxes });
    }
    Ok(out)
}

/// Generates and writes `train/` and `val/` plus metadata.
pub fn write_dataset(dir: &Path, cfg: &DataConfig, seed: u64) -> Result<()> {
    let (train, val) = generate_splits(cfg, seed)?;
    write_split(&dir.join("train"), &train)?;
    write_split(&dir.join("val"), &val)?;
    let meta = DatasetMeta { seed, config: cfg.clone() };
    fs::write(dir.join(METADATA), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path, num_classes: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((read_split(&dir.join("train"), num_classes)?, read_split(&dir.join("val"), num_classes)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig { train_images: 6, val_images: 3, ..DataConfig::default() }
    }

    #[test]
    fn roundtrip_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &cfg(), 7).unwrap();
        write_dataset(b.path(), &cfg(), 7).unwrap();
        for split in ["train", "val"] {
            let fa = fs::read(a.path().join(split).join(ANNOTATIONS)).unwrap();
            let fb = fs::read(b.path().join(split).join(ANNOTATIONS)).unwrap();
            assert_eq!(fa, fb);
        }
        let (train, val) = read_dataset(a.path(), 4).unwrap();
        let (gt, gv) = generate_splits(&cfg(), 7).unwrap();
        assert_eq!(train, gt);
        assert_eq!(val, gv);
    }

    #[test]
    fn bad_annotations_rejected() {
        let d = tempfile::tempdir().unwrap();
        write_split(d.path(), &generate_splits(&cfg(), 1).unwrap().0).unwrap();
        assert!(read_split(d.path(), 4).is_ok());
        // Round-robin labels reach class 3, which a 2-class reader must refuse.
        assert!(read_split(d.path(), 2).is_err());
        fs::write(d.path().join(ANNOTATIONS), "{\"image\": \"nope\", \"boxes\": []}\n").unwrap();
        assert!(read_split(d.path(), 4).is_err());
    }
}
