use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AuxSet, ClassRecord, DomainDataset};
use crate::error::{Error, Result};
use crate::rng;

const SPLIT_TAG: u64 = 0x5911;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub base: f64,
    pub eval: f64,
    pub novel: f64,
}

impl SplitFractions {
    pub const SOURCE: SplitFractions = SplitFractions {
        base: 0.64,
        eval: 0.16,
        novel: 0.20,
    };
    pub const TARGET: SplitFractions = SplitFractions {
        base: 0.55,
        eval: 0.15,
        novel: 0.30,
    };

    pub fn new(base: f64, eval: f64, novel: f64) -> Self {
        SplitFractions { base, eval, novel }
    }

    /// Class counts per shard by largest remainder.
    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let f = [self.base, self.eval, self.novel];
        if f.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::data(format!("split fractions must be positive, got {f:?}")));
        }
        let total: f64 = f.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::data(format!("split fractions sum to {total}, expected 1")));
        }
        let exact = f.map(|x| x * n as f64);
        let mut counts = exact.map(|x| x.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let short = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            let name = ["base", "eval", "novel"][i];
            return Err(Error::data(format!(
                "split of {n} classes leaves the {name} shard empty"
            )));
        }
        Ok(counts)
    }
}

/// Class-disjoint base / eval / novel shards of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitBundle {
    pub base: DomainDataset,
    pub eval: DomainDataset,
    pub novel: DomainDataset,
}

/// Shuffles classes under `seed` and partitions them by `fractions`.
pub fn split_dataset(ds: &DomainDataset, fractions: SplitFractions, seed: u64) -> Result<SplitBundle> {
    let counts = fractions.counts(ds.classes.len())?;
    let mut classes = ds.classes.clone();
    classes.shuffle(&mut rng::stream(seed, &[SPLIT_TAG]));
    let mut rest = classes.into_iter();
    let mut take = |k: usize| -> DomainDataset {
        let mut part: Vec<ClassRecord> = rest.by_ref().take(k).collect();
        part.sort_by_key(|c| c.class_id);
        DomainDataset {
            domain: ds.domain,
            image_size: ds.image_size,
            classes: part,
        }
    };
    let base = take(counts[0]);
    let eval = take(counts[1]);
    let novel = take(counts[2]);
    Ok(SplitBundle { base, eval, novel })
}

/// Samples `num_target` images per class of `target_base` without
/// replacement. Each class is drawn as a prefix of a seeded permutation, so
/// for a fixed seed a larger `num_target` yields a superset.
pub fn build_auxiliary(target_base: &DomainDataset, num_target: usize, seed: u64) -> Result<AuxSet> {
    if num_target == 0 {
        return Err(Error::data("num_target must be positive"));
    }
    let classes = target_base
        .classes
        .iter()
        .map(|c| {
            if c.images.len() < num_target {
                return Err(Error::data(format!(
                    "class {} has {} images, fewer than num_target = {num_target}",
                    c.class_id,
                    c.images.len()
                )));
            }
            let mut r = rng::stream(seed, &[rng::tag::AUX, c.class_id as u64]);
            let mut idx: Vec<usize> = (0..c.images.len()).collect();
            idx.shuffle(&mut r);
            idx.truncate(num_target);
            idx.sort_unstable();
            Ok(ClassRecord {
                class_id: c.class_id,
                images: idx.into_iter().map(|i| c.images[i].clone()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuxSet::new(num_target, target_base.image_size, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DomainSpec};
    use std::collections::BTreeSet;

    fn ids(ds: &DomainDataset) -> BTreeSet<u32> {
        ds.class_ids().into_iter().collect()
    }

    #[test]
    fn equal_quarters_split() {
        let ds = generate_dataset(&DomainSpec::source(), 40, 2, 1).unwrap();
        let b = split_dataset(&ds, SplitFractions::new(0.5, 0.25, 0.25), 3).unwrap();
        assert_eq!(
            (b.base.classes.len(), b.eval.classes.len(), b.novel.classes.len()),
            (20, 10, 10)
        );
        assert!(ids(&b.base).is_disjoint(&ids(&b.eval)));
        assert!(ids(&b.base).is_disjoint(&ids(&b.novel)));
        assert!(ids(&b.eval).is_disjoint(&ids(&b.novel)));
        assert_eq!(b, split_dataset(&ds, SplitFractions::new(0.5, 0.25, 0.25), 3).unwrap());
    }

    #[test]
    fn default_fractions_give_expected_counts() {
        assert_eq!(SplitFractions::SOURCE.counts(40).unwrap(), [26, 6, 8]);
        assert_eq!(SplitFractions::TARGET.counts(22).unwrap(), [12, 3, 7]);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let ds = generate_dataset(&DomainSpec::source(), 4, 2, 1).unwrap();
        assert!(split_dataset(&ds, SplitFractions::new(0.5, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&ds, SplitFractions::new(0.9, 0.05, 0.05), 0).is_err());
        assert!(split_dataset(&ds, SplitFractions::new(1.2, -0.1, -0.1), 0).is_err());
    }

    #[test]
    fn auxiliary_counts() {
        let ds = generate_dataset(&DomainSpec::target(), 22, 20, 1).unwrap();
        let aux = build_auxiliary(&ds, 5, 9).unwrap();
        assert_eq!(aux.num_images(), 110);
        assert!(aux.classes.iter().all(|c| c.images.len() == 5));
        let aux = build_auxiliary(&ds, 20, 9).unwrap();
        assert!(aux.classes.iter().all(|c| c.images.len() == 20));
        assert_eq!(aux.classes, ds.classes);
    }

    #[test]
    fn larger_auxiliary_sets_are_supersets() {
        let ds = generate_dataset(&DomainSpec::target(), 4, 20, 1).unwrap();
        let small = build_auxiliary(&ds, 5, 9).unwrap().image_ids();
        let large = build_auxiliary(&ds, 15, 9).unwrap().image_ids();
        assert!(small.is_subset(&large));
    }

    #[test]
    fn auxiliary_requires_enough_images() {
        let ds = generate_dataset(&DomainSpec::target(), 3, 4, 1).unwrap();
        let err = build_auxiliary(&ds, 5, 9).unwrap_err().to_string();
        assert!(err.contains("class 10000"), "{err}");
    }
}
