//! Two-domain synthetic image benchmark: generation, class-disjoint splits,
//! the auxiliary target set and N-way K-shot episode sampling.

mod episode;
mod export;
mod generate;
mod split;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub(crate) use episode::Starved;
pub use episode::{sample_episode, Episode, EpisodeSource};
pub use export::{export_dataset, import_dataset, DatasetManifest};
pub use generate::{generate_dataset, DomainSpec};
pub use split::{build_auxiliary, split_dataset, SplitBundle, SplitFractions};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Domain label as used by the domain classifier: source is class 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainId {
    Target = 0,
    Source = 1,
}

impl DomainId {
    pub fn label(self) -> usize {
        self as usize
    }
}

/// Identity of a physical image: its class and its index within the class
/// as generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageId {
    pub class_id: u32,
    pub index: u32,
}

/// A `3×S×S` image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub id: ImageId,
    pub domain: DomainId,
    pub pixels: Arc<[f64]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub class_id: u32,
    pub images: Vec<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub image_size: usize,
    pub classes: Vec<ClassRecord>,
}

impl DomainDataset {
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.classes.iter().flat_map(|c| c.images.iter())
    }

    /// Union of two class-disjoint datasets, keeping `self`'s domain tag.
    pub fn merged(&self, other: &[ClassRecord]) -> Result<DomainDataset> {
        let mut classes = self.classes.clone();
        for c in other {
            if classes.iter().any(|x| x.class_id == c.class_id) {
                return Err(Error::data(format!(
                    "merge: class {} present in both datasets",
                    c.class_id
                )));
            }
            classes.push(c.clone());
        }
        Ok(DomainDataset {
            domain: self.domain,
            image_size: self.image_size,
            classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expect = 3 * self.image_size * self.image_size;
        for c in &self.classes {
            for img in &c.images {
                if img.pixels.len() != expect {
                    return Err(Error::data(format!(
                        "image {:?} has {} values, expected {expect}",
                        img.id,
                        img.pixels.len()
                    )));
                }
                if img.pixels.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
                    return Err(Error::data(format!("image {:?} has pixels outside [0, 1]", img.id)));
                }
            }
        }
        Ok(())
    }
}

/// `num_target` labeled images per target-base class, available during
/// training only.
#[derive(Debug)]
pub struct AuxSet {
    pub num_target: usize,
    pub image_size: usize,
    pub classes: Vec<ClassRecord>,
    accesses: AtomicUsize,
}

impl Clone for AuxSet {
    fn clone(&self) -> Self {
        AuxSet {
            num_target: self.num_target,
            image_size: self.image_size,
            classes: self.classes.clone(),
            accesses: AtomicUsize::new(self.accesses()),
        }
    }
}

impl AuxSet {
    pub(crate) fn new(num_target: usize, image_size: usize, classes: Vec<ClassRecord>) -> Self {
        AuxSet {
            num_target,
            image_size,
            classes,
            accesses: AtomicUsize::new(0),
        }
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn image_ids(&self) -> std::collections::BTreeSet<ImageId> {
        self.classes
            .iter()
            .flat_map(|c| c.images.iter().map(|i| i.id))
            .collect()
    }

    /// Number of images handed out by episode sampling so far.
    pub fn accesses(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }

    pub(crate) fn record_access(&self, n: usize) {
        self.accesses.fetch_add(n, Ordering::Relaxed);
    }

    /// Fails if any auxiliary class or image also appears in `novel`.
    pub fn check_isolation(&self, novel: &DomainDataset) -> Result<()> {
        let ids = self.image_ids();
        for c in &novel.classes {
            if self.classes.iter().any(|a| a.class_id == c.class_id) {
                return Err(Error::data(format!(
                    "auxiliary class {} overlaps the novel split",
                    c.class_id
                )));
            }
            if let Some(img) = c.images.iter().find(|i| ids.contains(&i.id)) {
                return Err(Error::data(format!(
                    "auxiliary image {:?} overlaps the novel split",
                    img.id
                )));
            }
        }
        Ok(())
    }

    pub fn as_dataset(&self) -> DomainDataset {
        DomainDataset {
            domain: DomainId::Target,
            image_size: self.image_size,
            classes: self.classes.clone(),
        }
    }
}

/// Stacks images into an `N×3×S×S` tensor.
pub fn stack_images(images: &[Image], image_size: usize) -> Result<Tensor> {
    let per = 3 * image_size * image_size;
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        if img.pixels.len() != per {
            return Err(Error::data(format!(
                "image {:?} does not match size {image_size}",
                img.id
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![images.len(), 3, image_size, image_size], data)
}
