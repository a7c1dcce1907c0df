//! Attributed image data: synthetic generation, manifest ingestion, episodic
//! sampling and augmentation with key recording.

mod augment;
mod episode;
mod image;
mod manifest;
mod synthetic;

pub use self::augment::{
    augment, augment_with, sample_unsup_batch, AugParams, AugSet, Augmentation, AugmentationKey,
    UnlabeledPool, UnsupBatch, UnsupPair, KEY_BITS,
};
pub use self::episode::{sample_episode, Episode};
pub use self::image::Image;
pub use self::manifest::{load_manifest, write_dataset, Manifest, ManifestClass};
pub use self::synthetic::{generate_synthetic, SyntheticClass, SYNTHETIC_ATTRIBUTES};

use crate::error::{ArlError, Result};

/// Per-class semantic annotation with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector(pub Vec<f64>);

impl AttributeVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One class: a shared attribute vector and its instances.
#[derive(Clone, Debug)]
pub struct ClassRecord {
    pub id: i64,
    pub attribute: AttributeVector,
    pub images: Vec<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = ArlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ArlError::Config(format!("unknown split `{}`", other))),
        }
    }
}

/// Class-disjoint partition of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// 60/20/20 of `n` classes in order; validation and test sizes are rounded.
    pub fn by_ratio(n: usize) -> Splits {
        let n_val = (n as f64 * 0.2).round() as usize;
        let n_test = (n as f64 * 0.2).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        Splits {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// An immutable attributed dataset. Instance ids are class-major and contiguous.
#[derive(Clone, Debug)]
pub struct Dataset {
    classes: Vec<ClassRecord>,
    splits: Splits,
    offsets: Vec<usize>,
    attribute_dim: usize,
}

impl Dataset {
    pub fn new(classes: Vec<ClassRecord>) -> Result<Dataset> {
        let splits = Splits::by_ratio(classes.len());
        Self::with_splits(classes, splits)
    }

    pub fn with_splits(classes: Vec<ClassRecord>, splits: Splits) -> Result<Dataset> {
        let attribute_dim = classes.first().map(|c| c.attribute.len()).unwrap_or(0);
        if let Some(bad) = classes.iter().find(|c| c.attribute.len() != attribute_dim) {
            return Err(ArlError::Format(format!(
                "class {} has {} attributes, expected {}",
                bad.id,
                bad.attribute.len(),
                attribute_dim
            )));
        }
        let mut seen = vec![false; classes.len()];
        for &c in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if c >= classes.len() || seen[c] {
                return Err(ArlError::Contract(format!(
                    "split assignment lists class index {} twice or out of range",
                    c
                )));
            }
            seen[c] = true;
        }
        let mut offsets = Vec::with_capacity(classes.len() + 1);
        let mut acc = 0;
        for c in &classes {
            offsets.push(acc);
            acc += c.images.len();
        }
        offsets.push(acc);
        Ok(Dataset {
            classes,
            splits,
            offsets,
            attribute_dim,
        })
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn attribute_dim(&self) -> usize {
        self.attribute_dim
    }

    pub fn num_instances(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Global instance id of image `k` of class index `class`.
    pub fn instance_id(&self, class: usize, k: usize) -> usize {
        self.offsets[class] + k
    }

    /// Class index owning an instance.
    pub fn class_of(&self, instance: usize) -> usize {
        match self.offsets.binary_search(&instance) {
            Ok(mut i) => {
                // skip empty classes sharing the offset
                while self.classes[i].images.is_empty() {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        }
    }

    pub fn image(&self, instance: usize) -> &Image {
        let c = self.class_of(instance);
        &self.classes[c].images[instance - self.offsets[c]]
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.classes
            .iter()
            .flat_map(|c| c.images.first())
            .next()
            .map(|im| (im.channels, im.height, im.width))
    }

    /// Instance ids of all images in a split.
    pub fn split_instances(&self, split: Split) -> Vec<usize> {
        self.splits
            .get(split)
            .iter()
            .flat_map(|&c| self.offsets[c]..self.offsets[c + 1])
            .collect()
    }

    /// Training vocabulary position of a class index, if it is a training class.
    pub fn train_vocab_index(&self, class: usize) -> Option<usize> {
        self.splits.train.iter().position(|&c| c == class)
    }
}

#[cfg(test)]
mod tests;
