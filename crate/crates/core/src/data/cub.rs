//! CUB-200-2011 annotation files.
//!
//! Layout under the dataset root, all whitespace separated:
//!
//! | file | row |
//! |---|---|
//! | `images.txt` | `<image_id> <path>` |
//! | `image_class_labels.txt` | `<image_id> <class_id>` |
//! | `bounding_boxes.txt` | `<image_id> <x> <y> <w> <h>` (top-left origin) |
//! | `train_test_split.txt` | `<image_id> <is_train>` |
//! | `classes.txt` | `<class_id> <name>` |
//! | `parts/parts.txt` | `<part_id> <name with spaces>` |
//! | `parts/part_locs.txt` | `<image_id> <part_id> <x> <y> <visible>` |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::regions::{parts_to_regions, PartCenter, PartMergeMap};
use super::store::{load_png, resize_image};
use super::types::{AnnotatedSample, Dataset, Label, RegionInput};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const CUB_FILES: [&str; 7] = [
    "images.txt",
    "image_class_labels.txt",
    "bounding_boxes.txt",
    "train_test_split.txt",
    "classes.txt",
    "parts/parts.txt",
    "parts/part_locs.txt",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubImage {
    pub image_id: u32,
    pub path: String,
    pub class_id: u32,
    /// `[x, y, w, h]` exactly as stored, top-left origin.
    pub bbox_top_left: [f64; 4],
    pub is_train: bool,
    /// Ordered as in `part_locs.txt`.
    pub parts: Vec<PartCenter>,
}

impl CubImage {
    /// Object box in center form.
    pub fn object_box(&self) -> Result<BBox> {
        let [x, y, w, h] = self.bbox_top_left;
        BBox::from_top_left(x, y, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubAnnotations {
    pub classes: Vec<(u32, String)>,
    pub parts: Vec<(u32, String)>,
    pub images: Vec<CubImage>,
}

struct Rows {
    path: PathBuf,
    text: String,
}

impl Rows {
    fn read(root: &Path, name: &str) -> Result<Self> {
        let path = root.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::parse(&path, 0, format!("cannot read file: {e}")))?;
        Ok(Self { path, text })
    }

    /// Non-blank rows with their 1-based line numbers.
    fn rows(&self) -> impl Iterator<Item = (usize, Vec<&str>)> {
        self.text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
            .filter(|(_, f)| !f.is_empty())
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(&self.path, line, msg)
    }

    fn expect_fields(&self, line: usize, fields: &[&str], n: usize) -> Result<()> {
        if fields.len() != n {
            return Err(self.err(line, format!("expected {n} fields, found {}", fields.len())));
        }
        Ok(())
    }

    fn field<T: FromStr>(&self, line: usize, fields: &[&str], i: usize, what: &str) -> Result<T> {
        fields[i]
            .parse()
            .map_err(|_| self.err(line, format!("invalid {what} `{}`", fields[i])))
    }

    /// Rows of `<id> <rest...>`, with unique ids.
    fn id_and_text(&self) -> Result<Vec<(u32, String, usize)>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (line, f) in self.rows() {
            if f.len() < 2 {
                return Err(self.err(line, format!("expected at least 2 fields, found {}", f.len())));
            }
            let id: u32 = self.field(line, &f, 0, "id")?;
            if !seen.insert(id) {
                return Err(self.err(line, format!("duplicate id {id}")));
            }
            out.push((id, f[1..].join(" "), line));
        }
        Ok(out)
    }

    /// Rows keyed by image id; each id must be a known image and appear once.
    fn per_image<T>(
        &self,
        images: &BTreeSet<u32>,
        n_fields: usize,
        mut parse: impl FnMut(usize, &[&str]) -> Result<T>,
    ) -> Result<BTreeMap<u32, T>> {
        let mut out = BTreeMap::new();
        for (line, f) in self.rows() {
            self.expect_fields(line, &f, n_fields)?;
            let id: u32 = self.field(line, &f, 0, "image id")?;
            if !images.contains(&id) {
                return Err(self.err(line, format!("unknown image id {id}")));
            }
            let v = parse(line, &f)?;
            if out.insert(id, v).is_some() {
                return Err(self.err(line, format!("duplicate image id {id}")));
            }
        }
        if let Some(missing) = images.iter().find(|id| !out.contains_key(id)) {
            return Err(self.err(self.text.lines().count(), format!("no row for image id {missing}")));
        }
        Ok(out)
    }
}

/// Reads and cross-validates the seven annotation files under `root`.
/// Pixels are not touched.
pub fn load_cub(root: &Path) -> Result<CubAnnotations> {
    let images_f = Rows::read(root, "images.txt")?;
    let labels_f = Rows::read(root, "image_class_labels.txt")?;
    let boxes_f = Rows::read(root, "bounding_boxes.txt")?;
    let split_f = Rows::read(root, "train_test_split.txt")?;
    let classes_f = Rows::read(root, "classes.txt")?;
    let parts_f = Rows::read(root, "parts/parts.txt")?;
    let locs_f = Rows::read(root, "parts/part_locs.txt")?;

    let classes: Vec<(u32, String)> = classes_f.id_and_text()?.into_iter().map(|(i, n, _)| (i, n)).collect();
    let class_ids: BTreeSet<u32> = classes.iter().map(|c| c.0).collect();
    let parts: Vec<(u32, String)> = parts_f.id_and_text()?.into_iter().map(|(i, n, _)| (i, n)).collect();
    let part_ids: BTreeSet<u32> = parts.iter().map(|p| p.0).collect();

    let mut image_rows = Vec::new();
    for (id, path, line) in images_f.id_and_text()? {
        if path.contains(' ') {
            return Err(images_f.err(line, "expected 2 fields"));
        }
        image_rows.push((id, path));
    }
    let image_ids: BTreeSet<u32> = image_rows.iter().map(|r| r.0).collect();

    let labels = labels_f.per_image(&image_ids, 2, |line, f| {
        let c: u32 = labels_f.field(line, f, 1, "class id")?;
        if !class_ids.contains(&c) {
            return Err(labels_f.err(line, format!("unknown class id {c}")));
        }
        Ok(c)
    })?;
    let boxes = boxes_f.per_image(&image_ids, 5, |line, f| {
        let mut v = [0.0; 4];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = boxes_f.field(line, f, i + 1, "coordinate")?;
        }
        BBox::from_top_left(v[0], v[1], v[2], v[3]).map_err(|e| boxes_f.err(line, e.to_string()))?;
        Ok(v)
    })?;
    let split = split_f.per_image(&image_ids, 2, |line, f| match f[1] {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(split_f.err(line, format!("is_training flag `{other}` must be 0 or 1"))),
    })?;

    let mut locs: BTreeMap<u32, Vec<PartCenter>> = BTreeMap::new();
    for (line, f) in locs_f.rows() {
        locs_f.expect_fields(line, &f, 5)?;
        let img: u32 = locs_f.field(line, &f, 0, "image id")?;
        let part_id: u32 = locs_f.field(line, &f, 1, "part id")?;
        let x: f64 = locs_f.field(line, &f, 2, "x")?;
        let y: f64 = locs_f.field(line, &f, 3, "y")?;
        let visible = match f[4] {
            "0" => false,
            "1" => true,
            other => return Err(locs_f.err(line, format!("visible flag `{other}` must be 0 or 1"))),
        };
        if !image_ids.contains(&img) {
            return Err(locs_f.err(line, format!("unknown image id {img}")));
        }
        if !part_ids.contains(&part_id) {
            return Err(locs_f.err(line, format!("unknown part id {part_id}")));
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(locs_f.err(line, "non-finite coordinate"));
        }
        let entry = locs.entry(img).or_default();
        if entry.iter().any(|p| p.part_id == part_id) {
            return Err(locs_f.err(line, format!("duplicate part {part_id} for image {img}")));
        }
        entry.push(PartCenter { part_id, x, y, visible });
    }

    let images = image_rows
        .into_iter()
        .map(|(id, path)| CubImage {
            image_id: id,
            path,
            class_id: labels[&id],
            bbox_top_left: boxes[&id],
            is_train: split[&id],
            parts: locs.remove(&id).unwrap_or_default(),
        })
        .collect();
    Ok(CubAnnotations { classes, parts, images })
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the seven files under `root` in the layout [`load_cub`] reads.
pub fn save_cub(ann: &CubAnnotations, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("parts")).map_err(|e| Error::io(root, e))?;
    let mut files: BTreeMap<&str, String> = CUB_FILES.iter().map(|f| (*f, String::new())).collect();
    let mut push = |name: &str, row: String| {
        let buf = files.get_mut(name).expect("known file");
        buf.push_str(&row);
        buf.push('\n');
    };
    for (id, name) in &ann.classes {
        push("classes.txt", format!("{id} {name}"));
    }
    for (id, name) in &ann.parts {
        push("parts/parts.txt", format!("{id} {name}"));
    }
    for img in &ann.images {
        let id = img.image_id;
        let [x, y, w, h] = img.bbox_top_left;
        push("images.txt", format!("{id} {}", img.path));
        push("image_class_labels.txt", format!("{id} {}", img.class_id));
        push(
            "bounding_boxes.txt",
            format!("{id} {} {} {} {}", num(x), num(y), num(w), num(h)),
        );
        push("train_test_split.txt", format!("{id} {}", u8::from(img.is_train)));
        for p in &img.parts {
            push(
                "parts/part_locs.txt",
                format!("{id} {} {} {} {}", p.part_id, num(p.x), num(p.y), u8::from(p.visible)),
            );
        }
    }
    for (name, text) in files {
        let path = root.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Region annotations for one image, in original pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CubRegions {
    pub image_id: u32,
    pub label: Label,
    pub object_box: BBox,
    pub regions: Vec<RegionInput>,
}

impl CubAnnotations {
    /// Class ids mapped to contiguous labels in `classes.txt` order.
    pub fn label_of(&self, class_id: u32) -> Option<Label> {
        self.classes.iter().position(|c| c.0 == class_id).map(Label)
    }

    /// Merges part centers into region boxes. Image bounds are taken as the
    /// tightest box covering the object and every part.
    pub fn regions(&self, merge: &PartMergeMap, region_scale: f64) -> Result<Vec<CubRegions>> {
        let ids: BTreeSet<u32> = self.parts.iter().map(|p| p.0).collect();
        merge.validate(&ids)?;
        self.images
            .iter()
            .map(|img| {
                let obj = img.object_box()?;
                let w = img.parts.iter().map(|p| p.x).fold(obj.right(), f64::max);
                let h = img.parts.iter().map(|p| p.y).fold(obj.bottom(), f64::max);
                Ok(CubRegions {
                    image_id: img.image_id,
                    label: self.label_of(img.class_id).expect("validated class id"),
                    object_box: obj,
                    regions: parts_to_regions(&img.parts, &obj, merge, region_scale, w, h)?,
                })
            })
            .collect()
    }

    /// Decodes each image from `images/<path>` (PNG only), resizes it to
    /// `image_size` and scales the annotations with it. Returns the train
    /// and test sets given by `train_test_split.txt`.
    pub fn to_datasets(
        &self,
        root: &Path,
        merge: &PartMergeMap,
        region_scale: f64,
        image_size: usize,
    ) -> Result<(Dataset, Dataset)> {
        let ids: BTreeSet<u32> = self.parts.iter().map(|p| p.0).collect();
        merge.validate(&ids)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        let s = image_size as f64;
        for (idx, img) in self.images.iter().enumerate() {
            let path = root.join("images").join(&img.path);
            let raw = load_png(&path)?;
            let (h0, w0) = (raw.shape()[1] as f64, raw.shape()[2] as f64);
            let (kx, ky) = (s / w0, s / h0);
            let obj = img.object_box()?;
            let obj = BBox::new(obj.x * kx, obj.y * ky, obj.w * kx, obj.h * ky)?.clamp_to(s, s);
            let parts: Vec<PartCenter> = img
                .parts
                .iter()
                .map(|p| PartCenter {
                    x: p.x * kx,
                    y: p.y * ky,
                    ..*p
                })
                .collect();
            let sample = AnnotatedSample {
                id: idx,
                image: resize_image(&raw, image_size, image_size),
                label: self.label_of(img.class_id).expect("validated class id"),
                object_box: obj,
                regions: parts_to_regions(&parts, &obj, merge, region_scale, s, s)?,
            };
            if img.is_train {
                train.push(sample)
            } else {
                test.push(sample)
            }
        }
        let make = |samples| Dataset {
            num_classes: self.classes.len(),
            region_names: merge.region_names(),
            image_size,
            samples,
        };
        Ok((make(train), make(test)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(root: &Path, bbox_row: &str) {
        fs::create_dir_all(root.join("parts")).unwrap();
        fs::write(root.join("images.txt"), "1 001.A/a.png\n").unwrap();
        fs::write(root.join("image_class_labels.txt"), "1 1\n").unwrap();
        fs::write(root.join("bounding_boxes.txt"), format!("{bbox_row}\n")).unwrap();
        fs::write(root.join("train_test_split.txt"), "1 1\n").unwrap();
        fs::write(root.join("classes.txt"), "1 001.A\n").unwrap();
        fs::write(root.join("parts/parts.txt"), "1 back\n2 left eye\n").unwrap();
        fs::write(root.join("parts/part_locs.txt"), "1 1 100.0 80.0 1\n1 2 0.0 0.0 0\n").unwrap();
    }

    #[test]
    fn top_left_box_becomes_center_form() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1 60.0 27.0 325.0 304.0");
        let ann = load_cub(dir.path()).unwrap();
        let b = ann.images[0].object_box().unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (222.5, 179.0, 325.0, 304.0));
        assert_eq!(ann.parts[1].1, "left eye");
        assert!(!ann.images[0].parts[1].visible);

        let mut merge = PartMergeMap::identity(&["back".into(), "eye".into()]);
        merge.regions[0].parts = vec![1];
        merge.regions[1].parts = vec![2];
        let r = ann.regions(&merge, 0.25).unwrap();
        assert!(r[0].regions[0].present);
        assert!(!r[0].regions[1].present);
    }

    #[test]
    fn short_row_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1 60.0 27.0 325.0");
        match load_cub(dir.path()) {
            Err(Error::Parse { file, line, .. }) => {
                assert!(file.ends_with("bounding_boxes.txt"));
                assert_eq!(line, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1 60.5 27.25 325.0 304.125");
        let a = load_cub(dir.path()).unwrap();
        let out = dir.path().join("copy");
        save_cub(&a, &out).unwrap();
        assert_eq!(load_cub(&out).unwrap(), a);
    }
}
