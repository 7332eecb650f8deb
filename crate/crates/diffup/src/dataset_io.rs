//! Dataset directory layout:
//!
//! ```text
//! images/{train,test}/{class_id}/{idx}.png   8-bit RGB
//! masks/{train,test}/{class_id}/{idx}.png    8-bit gray, 0 or 255
//! classes.json                               class_id -> shape, texture, attributes
//! splits.json                                fold -> novel class ids
//! dataset.json                               generator settings
//! ```

use std::path::{Path, PathBuf};

use diffup_core::grid::{BinaryGrid, Image};
use diffup_core::synthshapes::{all_classes, ClassDef, Dataset, Sample, Split, NUM_FOLDS, SPLITS};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::DatasetConfig;
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub clutter_fold: usize,
    pub max_clutter: usize,
}

impl DatasetManifest {
    pub fn from_config(c: &DatasetConfig) -> Self {
        Self {
            seed: c.seed,
            size: diffup_core::synthshapes::IMAGE_SIZE,
            train_per_class: c.train_per_class,
            test_per_class: c.test_per_class,
            clutter_fold: c.clutter_fold,
            max_clutter: c.max_clutter,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ClassRecord {
    class_id: usize,
    shape: String,
    texture: String,
    attribute_vector: Vec<u8>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps pixel values to the 8-bit grid PNG storage uses, so a generated
/// dataset and its reloaded copy are bit-identical.
pub fn quantize(data: &mut Dataset) {
    for split in [&mut data.train, &mut data.test] {
        for s in split.iter_mut().flatten() {
            for v in s.image.data.iter_mut() {
                *v = to_u8(*v) as f32 / 255.0;
            }
        }
    }
}

/// Generates and quantizes the dataset described by `c`.
pub fn generate(c: &DatasetConfig) -> Result<Dataset> {
    let mut d = Dataset::generate(c.seed, c.train_per_class, c.test_per_class, c.clutter_fold, c.max_clutter)?;
    quantize(&mut d);
    Ok(d)
}

fn sample_path(root: &Path, kind: &str, split: Split, class: usize, idx: usize) -> PathBuf {
    root.join(kind).join(split.name()).join(class.to_string()).join(format!("{idx}.png"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).at(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save(root: &Path, data: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        for (class, samples) in data.split(split).iter().enumerate() {
            for kind in ["images", "masks"] {
                let dir = root.join(kind).join(split.name()).join(class.to_string());
                std::fs::create_dir_all(&dir).at(&dir)?;
            }
            for (i, s) in samples.iter().enumerate() {
                let (h, w) = (s.image.h, s.image.w);
                let p = h * w;
                let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let k = y as usize * w + x as usize;
                    Rgb([to_u8(s.image.data[k]), to_u8(s.image.data[p + k]), to_u8(s.image.data[2 * p + k])])
                });
                let path = sample_path(root, "images", split, class, i);
                img.save(&path).map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?;
                let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    Luma([if s.mask.get(y as usize, x as usize) { 255 } else { 0 }])
                });
                let path = sample_path(root, "masks", split, class, i);
                mask.save(&path).map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?;
            }
        }
    }
    let classes: Vec<ClassRecord> = data
        .classes
        .iter()
        .map(|c| ClassRecord {
            class_id: c.class_id,
            shape: format!("{:?}", c.shape).to_lowercase(),
            texture: format!("{:?}", c.texture).to_lowercase(),
            attribute_vector: c.attribute_vector.clone(),
        })
        .collect();
    write_json(&root.join("classes.json"), &classes)?;
    let splits: Vec<(usize, Vec<usize>)> = (0..NUM_FOLDS).map(|f| (f, SPLITS[f].to_vec())).collect();
    write_json(&root.join("splits.json"), &splits)?;
    write_json(&root.join("dataset.json"), manifest)
}

pub fn exists(root: &Path) -> bool {
    root.join("dataset.json").is_file()
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    read_json(&root.join("dataset.json"))
}

fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(h, w);
    let p = h * w;
    for (x, y, px) in img.enumerate_pixels() {
        let k = y as usize * w + x as usize;
        for c in 0..3 {
            out.data[c * p + k] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn load_mask(path: &Path) -> Result<BinaryGrid> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = BinaryGrid::new(h, w);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(y as usize, x as usize, px[0] >= 128);
    }
    Ok(out)
}

pub fn load(root: &Path) -> Result<Dataset> {
    let m = read_manifest(root)?;
    let classes: Vec<ClassDef> = all_classes();
    let read_split = |split: Split, n: usize| -> Result<Vec<Vec<Sample>>> {
        (0..classes.len())
            .map(|c| {
                (0..n)
                    .map(|i| {
                        let image = load_image(&sample_path(root, "images", split, c, i))?;
                        let mask = load_mask(&sample_path(root, "masks", split, c, i))?;
                        if image.h != m.size || mask.h != m.size {
                            return Err(Error::Format(format!("class {c} sample {i} is not {0}x{0}", m.size)));
                        }
                        Ok(Sample { image, mask })
                    })
                    .collect()
            })
            .collect()
    };
    Ok(Dataset {
        seed: m.seed,
        size: m.size,
        clutter_fold: m.clutter_fold,
        classes: classes.clone(),
        train: read_split(Split::Train, m.train_per_class)?,
        test: read_split(Split::Test, m.test_per_class)?,
    })
}

/// The dataset on disk at the configured root, or a freshly generated one
/// when the root holds none. A stored dataset must match the configured
/// generator settings.
pub fn load_or_generate(c: &DatasetConfig) -> Result<Dataset> {
    let root = c.resolved_root();
    if exists(&root) {
        let m = read_manifest(&root)?;
        if m != DatasetManifest::from_config(c) {
            return Err(Error::Config(format!(
                "dataset at {} was generated with {m:?}, config asks for {:?}",
                root.display(),
                DatasetManifest::from_config(c)
            )));
        }
        load(&root)
    } else {
        generate(c)
    }
}
