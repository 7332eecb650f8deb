use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{all_classes, gen_sample, make_bbox, make_scribble, split_classes, Annotation, AnnotationKind, ClassDef, Episode, GenParams, IMAGE_SIZE};
use crate::grid::{GtMask, Image};
use crate::rng::{derive_seed, tag, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: GtMask,
}

/// In-memory benchmark: every class has a train and a test list.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub size: usize,
    /// Fold whose base classes supply distractor clutter.
    pub clutter_fold: usize,
    pub classes: Vec<ClassDef>,
    pub train: Vec<Vec<Sample>>,
    pub test: Vec<Vec<Sample>>,
}

impl Dataset {
    /// Seed of sample `index` of `class_id` in `split`.
    pub fn sample_seed(master: u64, split: Split, class_id: usize, index: usize) -> u64 {
        derive_seed(derive_seed(master, tag(split.name()), class_id as u64), tag("index"), index as u64)
    }

    pub fn generate(
        seed: u64,
        per_class_train: usize,
        per_class_test: usize,
        clutter_fold: usize,
        max_clutter: usize,
    ) -> Result<Self> {
        let classes = all_classes();
        let (base, _) = split_classes(clutter_fold)?;
        let distractors: Vec<ClassDef> = base.iter().map(|c| classes[*c].clone()).collect();
        let make = |split: Split, n: usize| -> Result<Vec<Vec<Sample>>> {
            classes
                .iter()
                .map(|c| {
                    (0..n)
                        .map(|i| {
                            let s = Self::sample_seed(seed, split, c.class_id, i);
                            let clutter = Rng::derived(s, "clutter", 0).range(0, max_clutter + 1);
                            let params = GenParams { size: IMAGE_SIZE, clutter, distractors: &distractors };
                            gen_sample(c, s, &params).map(|(image, mask)| Sample { image, mask })
                        })
                        .collect()
                })
                .collect()
        };
        let train = make(Split::Train, per_class_train)?;
        let test = make(Split::Test, per_class_test)?;
        Ok(Self { seed, size: IMAGE_SIZE, clutter_fold, classes, train, test })
    }

    pub fn split(&self, split: Split) -> &[Vec<Sample>] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// What [`sample_episode`] should draw.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeRequest<'a> {
    pub split: Split,
    pub pool: &'a [usize],
    pub shots: usize,
    pub kind: AnnotationKind,
    /// Attach the class text cue to visual episodes as well.
    pub with_text: bool,
    pub seed: u64,
}

/// Draws one 1-way episode. `Text` episodes carry no support images;
/// `shots == 0` always yields a text episode. `ImageOnly` supports come
/// without annotation and always carry the text cue.
pub fn sample_episode(data: &Dataset, req: &EpisodeRequest<'_>) -> Result<Episode> {
    if req.pool.is_empty() {
        return Err(Error::InsufficientSamples("empty class pool".into()));
    }
    let mut rng = Rng::derived(req.seed, "episode", 0);
    let class_id = req.pool[rng.range(0, req.pool.len())];
    let kind = if req.shots == 0 { AnnotationKind::Text } else { req.kind };
    let shots = if kind == AnnotationKind::Text { 0 } else { req.shots };
    let samples = &data.split(req.split)[class_id];
    if samples.len() < shots + 1 {
        return Err(Error::InsufficientSamples(format!(
            "class {class_id} has {} samples, episode needs {}",
            samples.len(),
            shots + 1
        )));
    }
    let picks = rng.sample_distinct(samples.len(), shots + 1);
    let query = &samples[picks[0]];
    let mut supports = Vec::with_capacity(shots);
    for (i, p) in picks[1..].iter().enumerate() {
        let s = &samples[*p];
        let ann = match kind {
            AnnotationKind::Mask => Annotation::Mask(s.mask.clone()),
            AnnotationKind::Bbox => Annotation::BBox(make_bbox(&s.mask)?),
            AnnotationKind::Scribble => Annotation::Scribble(make_scribble(&s.mask, derive_seed(req.seed, tag("scribble"), i as u64))?),
            AnnotationKind::ImageOnly => Annotation::None,
            AnnotationKind::Text => Annotation::Text(class_id),
        };
        supports.push((s.image.clone(), ann));
    }
    let text = match kind {
        AnnotationKind::Text | AnnotationKind::ImageOnly => Some(class_id),
        _ if req.with_text => Some(class_id),
        _ => None,
    };
    Ok(Episode { supports, text, query: query.image.clone(), query_gt: query.mask.clone(), class_id })
}
