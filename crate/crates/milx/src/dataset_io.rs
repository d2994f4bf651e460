//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<bag_id>/<index>.png   8-bit RGB
//! <dir>/masks/<bag_id>/<index>.png    8-bit gray, 255 inside the motif
//! ```
//!
//! `manifest.json` (schema version 1):
//!
//! ```json
//! { "schema_version": 1, "num_classes": 3, "image_size": 32, "channels": 3,
//!   "provenance": { "config_digest": "...", "checkpoint_digest": "" },
//!   "bags": [ { "bag_id": "bag-00000", "label": 1, "split": "train",
//!               "instances": [ { "instance_id": "bag-00000/i00",
//!                                "image": "images/bag-00000/000.png",
//!                                "mask": "masks/bag-00000/000.png" } ] } ] }
//! ```
//!
//! `mask` is `null` when an instance has no ground truth; generated data
//! always carries one (all zero without a motif). Generated pixel values are
//! multiples of 1/255, so the 8-bit round trip is exact.

use std::collections::BTreeMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use milx_core::bagdata::{Bag, Dataset, Instance, SplitTag, CHANNELS};
use milx_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::digest::Provenance;
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub provenance: Provenance,
    pub bags: Vec<BagEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub bag_id: String,
    pub label: usize,
    pub split: SplitTag,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub instance_id: String,
    pub image: String,
    pub mask: Option<String>,
}

/// A loaded dataset: every bag plus its split tag.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub manifest: Manifest,
    pub bags: Vec<(Bag, SplitTag)>,
}

impl DatasetDir {
    pub fn split(&self, tag: SplitTag) -> Dataset {
        let bags = self.bags.iter().filter(|(_, t)| *t == tag).map(|(b, _)| b.clone()).collect();
        Dataset { bags, num_classes: self.manifest.num_classes, split_tag: tag }
    }

    pub fn all(&self) -> Dataset {
        Dataset { bags: self.bags.iter().map(|(b, _)| b.clone()).collect(), num_classes: self.manifest.num_classes, split_tag: SplitTag::Unsplit }
    }

    /// `train`, `val`, `test` or `all`.
    pub fn select(&self, name: &str) -> Result<Dataset> {
        Ok(match name {
            "all" => self.all(),
            other => self.split(parse_split(other)?),
        })
    }
}

pub fn parse_split(name: &str) -> Result<SplitTag> {
    match name {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        "unsplit" => Ok(SplitTag::Unsplit),
        _ => Err(Error::Config(format!("unknown split `{name}`; expected train, val, test or all"))),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG with a provenance text chunk.
pub fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8], provenance: &Provenance) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let encoded = |e: png::EncodingError| Error::Runtime(format!("{}: {e}", path.display()));
    enc.add_text_chunk("milx:config_digest".into(), provenance.config_digest.clone()).map_err(encoded)?;
    enc.add_text_chunk("milx:checkpoint_digest".into(), provenance.checkpoint_digest.clone()).map_err(encoded)?;
    let mut writer = enc.write_header().map_err(encoded)?;
    writer.write_image_data(data).map_err(encoded)?;
    writer.finish().map_err(encoded)
}

/// Decoded 8-bit PNG: width, height, channels, bytes and text chunks.
pub struct Png {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    pub text: BTreeMap<String, String>,
}

pub fn read_png(path: &Path) -> Result<Png> {
    let file = std::fs::File::open(path).map_err(|e| Error::read(path, e))?;
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(bad)?;
    let mut data = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut data).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!("{}: expected an 8-bit image", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Data(format!("{}: unsupported colour type {other:?}", path.display()))),
    };
    data.truncate(info.buffer_size());
    let text = reader.info().uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect();
    Ok(Png { width: info.width as usize, height: info.height as usize, channels, data, text })
}

/// Channel-first floats to interleaved RGB bytes.
pub fn rgb_bytes(pixels: &Tensor) -> Vec<u8> {
    let hw = pixels.spatial_len();
    let c = pixels.shape()[0];
    (0..hw * c).map(|i| to_u8(pixels.data()[(i % c) * hw + i / c])).collect()
}

/// Files are named by position in the bag; instance ids may contain `/`.
fn instance_paths(bag_id: &str, index: usize) -> (String, String) {
    (format!("images/{bag_id}/{index:03}.png"), format!("masks/{bag_id}/{index:03}.png"))
}

/// Writes `bags` into `dir` (which must exist) and returns the manifest.
pub fn write_dataset(dir: &Path, bags: &[(Bag, SplitTag)], num_classes: usize, provenance: &Provenance) -> Result<Manifest> {
    let image_size = bags.first().and_then(|(b, _)| b.instances.first()).map_or(0, |i| i.height());
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, split) in bags {
        for sub in ["images", "masks"] {
            let d = dir.join(sub).join(&bag.bag_id);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut instances = Vec::with_capacity(bag.len());
        for (k, inst) in bag.instances.iter().enumerate() {
            let (image, mask) = instance_paths(&bag.bag_id, k);
            write_png(&dir.join(&image), inst.width(), inst.height(), png::ColorType::Rgb, &rgb_bytes(&inst.pixels), provenance)?;
            let mask = match &inst.ground_truth_mask {
                Some(m) => {
                    let bytes: Vec<u8> = m.data().iter().map(|&v| to_u8(v)).collect();
                    write_png(&dir.join(&mask), inst.width(), inst.height(), png::ColorType::Grayscale, &bytes, provenance)?;
                    Some(mask)
                }
                None => None,
            };
            instances.push(InstanceEntry { instance_id: inst.instance_id.clone(), image, mask });
        }
        entries.push(BagEntry { bag_id: bag.bag_id.clone(), label: bag.label, split: *split, instances });
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        num_classes,
        image_size,
        channels: CHANNELS,
        provenance: provenance.clone(),
        bags: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::read(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Data(format!(
                "{}: dataset format version {v} is not supported (expected {DATASET_SCHEMA_VERSION})",
                path.display()
            )))
        }
        None => return Err(Error::Data(format!("{}: missing `schema_version`", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_dataset(dir: &Path) -> Result<DatasetDir> {
    let manifest = read_manifest(dir)?;
    if manifest.channels != CHANNELS {
        return Err(Error::Data(format!("dataset has {} channels, expected {CHANNELS}", manifest.channels)));
    }
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        let instances = entry
            .instances
            .iter()
            .map(|ie| read_instance(dir, ie, manifest.image_size))
            .collect::<Result<Vec<_>>>()?;
        let bag = Bag::new(entry.bag_id.clone(), entry.label, instances)?;
        bags.push((bag, entry.split));
    }
    let loaded = DatasetDir { manifest, bags };
    loaded.all().validate()?;
    Ok(loaded)
}

fn read_instance(dir: &Path, entry: &InstanceEntry, size: usize) -> Result<Instance> {
    let img = read_png(&resolve(dir, &entry.image)?)?;
    if img.channels != CHANNELS || img.width != size || img.height != size {
        return Err(Error::Data(format!("{}: expected a {size}x{size} RGB image", entry.image)));
    }
    let hw = size * size;
    let data = (0..CHANNELS * hw).map(|i| img.data[(i % hw) * CHANNELS + i / hw] as f64 / 255.0).collect();
    let pixels = Tensor::from_vec(&[CHANNELS, size, size], data);
    let mask = match &entry.mask {
        Some(m) => {
            let png = read_png(&resolve(dir, m)?)?;
            if png.channels != 1 || png.width != size || png.height != size {
                return Err(Error::Data(format!("{m}: expected a {size}x{size} grayscale mask")));
            }
            Some(Tensor::from_vec(&[size, size], png.data.iter().map(|&v| v as f64 / 255.0).collect()))
        }
        None => None,
    };
    Ok(Instance::new(entry.instance_id.clone(), pixels, mask)?)
}

/// Manifest paths are relative and may not leave the dataset directory.
fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Data(format!("manifest path `{rel}` must stay inside the dataset directory")));
    }
    Ok(dir.join(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use milx_core::bagdata::{generate_synthetic, SynthConfig};

    #[test]
    fn round_trip_is_exact() {
        let data = generate_synthetic(&SynthConfig { num_bags: 3, bag_size: 2, ..SynthConfig::default() }).unwrap();
        let tagged: Vec<_> = data.bags.iter().cloned().map(|b| (b, SplitTag::Test)).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tagged, data.num_classes, &Provenance::default()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.split(SplitTag::Test).bags, data.bags);
    }

    #[test]
    fn newer_schema_is_a_versioned_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST), r#"{"schema_version": 2}"#).unwrap();
        let err = read_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("version 2")), "{err}");
    }

    #[test]
    fn escaping_paths_are_rejected() {
        assert!(resolve(Path::new("d"), "../x.png").is_err());
    }
}
