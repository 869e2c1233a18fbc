//! On-disk dataset layout:
//!
//! ```text
//! <dir>/images/<id>.png      8-bit RGB
//! <dir>/annotations.jsonl    one SampleRecord per line
//! <dir>/manifest.json        Manifest
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::types::{AnnotatedSample, Dataset, Label, RegionInput};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Decodes a PNG into `[3, H, W]` with values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::new(vec![3, h, w], {
        let mut data = vec![0f32; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = byte_to_unit(px[c]);
            }
        }
        data
    })
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push(unit_to_byte(d[c * h * w + i] as f64));
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

/// Bilinear resize of a `[C, H, W]` image (pixel-center aligned).
pub fn resize_image(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let axis = |i: usize, n_in: usize, n_out: usize| {
        let v = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = v.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), (v - i0 as f64) as f32)
    };
    Tensor::from_fn(vec![c, out_h, out_w], |i| {
        let (ch, r, col) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let (y0, y1, fy) = axis(r, h, out_h);
        let (x0, x1, fx) = axis(col, w, out_w);
        let a = src.at3(ch, y0, x0) * (1.0 - fx) + src.at3(ch, y0, x1) * fx;
        let b = src.at3(ch, y1, x0) * (1.0 - fx) + src.at3(ch, y1, x1) * fx;
        a * (1.0 - fy) + b * fy
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: usize,
    pub image: String,
    pub split: SplitTag,
    pub label: Label,
    pub object_box: BBox,
    pub regions: Vec<RegionInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    /// SHA-256 of the generating config as canonical JSON.
    pub config_hash: String,
    /// SHA-256 over pixels and annotations of every sample.
    pub dataset_hash: String,
    pub num_classes: usize,
    pub region_names: Vec<String>,
    pub image_size: usize,
    pub num_train: usize,
    pub num_test: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of any serializable config, via its JSON form with sorted keys.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    Ok(sha256_hex(serde_json::to_string(&value)?.as_bytes()))
}

/// Hash over 8-bit pixels and annotations, in sample order.
pub fn dataset_hash(datasets: &[&Dataset]) -> Result<String> {
    let mut h = Sha256::new();
    for d in datasets {
        h.update(serde_json::to_vec(&(&d.num_classes, &d.region_names, &d.image_size))?);
        for s in &d.samples {
            let bytes: Vec<u8> = s.image.data().iter().map(|&v| unit_to_byte(v as f64)).collect();
            h.update(&bytes);
            h.update(serde_json::to_vec(&(s.id, s.label, s.object_box, &s.regions))?);
        }
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: Manifest,
}

/// Writes both splits into `dir`. Refuses to overwrite an existing
/// manifest unless `force` is set.
pub fn save_dataset(
    dir: &Path,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    config_hash: String,
    force: bool,
) -> Result<Manifest> {
    if train.num_classes != test.num_classes
        || train.region_names != test.region_names
        || train.image_size != test.image_size
    {
        return Err(Error::Argument("train and test headers differ".into()));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut ann = Vec::new();
    for (tag, d) in [(SplitTag::Train, train), (SplitTag::Test, test)] {
        for s in &d.samples {
            let name = format!("images/{:06}.png", s.id);
            save_png(&s.image, &dir.join(&name))?;
            let rec = SampleRecord {
                id: s.id,
                image: name,
                split: tag,
                label: s.label,
                object_box: s.object_box,
                regions: s.regions.clone(),
            };
            serde_json::to_writer(&mut ann, &rec)?;
            ann.push(b'\n');
        }
    }
    fs::write(&ann_path, ann).map_err(|e| Error::io(&ann_path, e))?;
    let manifest = Manifest {
        seed,
        config_hash,
        dataset_hash: dataset_hash(&[train, test])?,
        num_classes: train.num_classes,
        region_names: train.region_names.clone(),
        image_size: train.image_size,
        num_train: train.len(),
        num_test: test.len(),
    };
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e.line(), e.to_string()))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let f = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let empty = || Dataset {
        num_classes: manifest.num_classes,
        region_names: manifest.region_names.clone(),
        image_size: manifest.image_size,
        samples: Vec::new(),
    };
    let (mut train, mut test) = (empty(), empty());
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(&ann_path, i + 1, e.to_string()))?;
        let image = load_png(&dir.join(&rec.image))?;
        let sample = AnnotatedSample {
            id: rec.id,
            image,
            label: rec.label,
            object_box: rec.object_box,
            regions: rec.regions,
        };
        match rec.split {
            SplitTag::Train => train.samples.push(sample),
            SplitTag::Test => test.samples.push(sample),
        }
    }
    for d in [&train, &test] {
        d.validate().map_err(|e| Error::parse(&ann_path, 0, e.to_string()))?;
    }
    Ok(StoredDataset { train, test, manifest })
}
