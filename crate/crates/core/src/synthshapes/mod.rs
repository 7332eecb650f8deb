//! Procedural few-shot benchmark: 24 classes (8 shapes x 3 textures) on
//! 64x64 canvases, weak-annotation synthesis and episodic sampling.

mod annotate;
mod dataset;
mod raster;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use annotate::{make_bbox, make_scribble, rasterize_bbox, BBox};
pub use dataset::{sample_episode, Dataset, EpisodeRequest, Sample, Split};
pub use raster::{gen_sample, rasterize_shape, GenParams, MAX_ATTEMPTS};

use crate::grid::{BinaryGrid, GtMask, Image};
use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const NUM_SHAPES: usize = 8;
pub const NUM_TEXTURES: usize = 3;
pub const NUM_CLASSES: usize = NUM_SHAPES * NUM_TEXTURES;
pub const NUM_FOLDS: usize = 4;
pub const NOVEL_PER_FOLD: usize = 6;
/// Length of [`ClassDef::attribute_vector`].
pub const ATTR_DIM: usize = NUM_SHAPES + NUM_TEXTURES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Ring,
    Crescent,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_SHAPES] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Crescent,
        ShapeKind::Diamond,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
}

impl Texture {
    pub const ALL: [Texture; NUM_TEXTURES] = [Texture::Solid, Texture::Stripes, Texture::Dots];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub class_id: usize,
    pub shape: ShapeKind,
    pub texture: Texture,
    /// Shape one-hot followed by texture one-hot.
    pub attribute_vector: Vec<u8>,
}

impl ClassDef {
    pub fn new(shape: ShapeKind, texture: Texture) -> Self {
        let mut attribute_vector = alloc::vec![0u8; ATTR_DIM];
        attribute_vector[shape.index()] = 1;
        attribute_vector[NUM_SHAPES + texture.index()] = 1;
        Self { class_id: shape.index() * NUM_TEXTURES + texture.index(), shape, texture, attribute_vector }
    }
}

/// All 24 classes ordered by `class_id`.
pub fn all_classes() -> Vec<ClassDef> {
    ShapeKind::ALL
        .iter()
        .flat_map(|s| Texture::ALL.iter().map(move |t| ClassDef::new(*s, *t)))
        .collect()
}

/// Novel classes of each fold. Class `(s, t)` is novel in fold
/// `(s + 3t) mod 4`, so every fold holds out at most one texture per shape
/// and two classes per texture.
pub const SPLITS: [[usize; NOVEL_PER_FOLD]; NUM_FOLDS] = [
    [0, 4, 8, 12, 16, 20],
    [3, 7, 11, 15, 19, 23],
    [2, 6, 10, 14, 18, 22],
    [1, 5, 9, 13, 17, 21],
];

/// `(base, novel)` class ids for a fold.
pub fn split_classes(fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let novel = SPLITS.get(fold).ok_or(Error::InvalidFold(fold))?;
    let base = (0..NUM_CLASSES).filter(|c| !novel.contains(c)).collect();
    Ok((base, novel.to_vec()))
}

/// Weak or full support annotation.
#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Mask(GtMask),
    BBox(BBox),
    Scribble(BinaryGrid),
    Text(usize),
    None,
}

impl Annotation {
    /// Pixel-level grid for visual annotations; `None` for text or no annotation.
    pub fn to_grid(&self, h: usize, w: usize) -> Option<BinaryGrid> {
        match self {
            Annotation::Mask(m) | Annotation::Scribble(m) => Some(m.clone()),
            Annotation::BBox(b) => Some(rasterize_bbox(b, h, w)),
            Annotation::Text(_) | Annotation::None => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Mask,
    Bbox,
    Scribble,
    Text,
    ImageOnly,
}

impl AnnotationKind {
    pub const ALL: [AnnotationKind; 5] = [
        AnnotationKind::Mask,
        AnnotationKind::Bbox,
        AnnotationKind::Scribble,
        AnnotationKind::Text,
        AnnotationKind::ImageOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnnotationKind::Mask => "mask",
            AnnotationKind::Bbox => "bbox",
            AnnotationKind::Scribble => "scribble",
            AnnotationKind::Text => "text",
            AnnotationKind::ImageOnly => "image_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

/// One 1-way few-shot task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub supports: Vec<(Image, Annotation)>,
    pub text: Option<usize>,
    pub query: Image,
    pub query_gt: GtMask,
    pub class_id: usize,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }
}
