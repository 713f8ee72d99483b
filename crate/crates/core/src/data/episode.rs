use rand::seq::index::sample;
use rand::Rng;

use super::{stack_images, AuxSet, ClassRecord, DomainDataset, DomainId, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything episodes can be drawn from.
pub trait EpisodeSource {
    fn classes(&self) -> &[ClassRecord];
    fn domain(&self) -> DomainId;
    fn image_size(&self) -> usize;
    /// Whether classes with fewer than `K + M` images may still be used. Such
    /// a class splits its images into disjoint support and query pools and
    /// fills both by repetition.
    fn allows_starved(&self) -> bool {
        false
    }
    fn record_access(&self, _images: usize) {}
}

impl EpisodeSource for DomainDataset {
    fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }
    fn domain(&self) -> DomainId {
        self.domain
    }
    fn image_size(&self) -> usize {
        self.image_size
    }
}

impl EpisodeSource for AuxSet {
    fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }
    fn domain(&self) -> DomainId {
        DomainId::Target
    }
    fn image_size(&self) -> usize {
        self.image_size
    }
    fn allows_starved(&self) -> bool {
        true
    }
    fn record_access(&self, images: usize) {
        AuxSet::record_access(self, images)
    }
}

/// A pooled dataset whose small classes may be sampled in the starved regime.
pub(crate) struct Starved<'a>(pub &'a DomainDataset);

impl EpisodeSource for Starved<'_> {
    fn classes(&self) -> &[ClassRecord] {
        &self.0.classes
    }
    fn domain(&self) -> DomainId {
        self.0.domain
    }
    fn image_size(&self) -> usize {
        self.0.image_size
    }
    fn allows_starved(&self) -> bool {
        true
    }
}

/// One N-way K-shot task. Support and query images are grouped by episode
/// label in ascending order, so slot `i` of two episodes with equal shape
/// refers to the same label.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub support: Vec<Image>,
    pub support_labels: Vec<usize>,
    pub query: Vec<Image>,
    pub query_labels: Vec<usize>,
    /// Episode label to global class id.
    pub class_map: Vec<u32>,
    pub domain: DomainId,
    /// Set when some class had fewer than `K + M` images and its queries were
    /// drawn with replacement (possibly repeating support images).
    pub starved: bool,
}

impl Episode {
    pub fn support_tensor(&self) -> Result<Tensor> {
        stack_images(&self.support, image_size(&self.support)?)
    }

    pub fn query_tensor(&self) -> Result<Tensor> {
        stack_images(&self.query, image_size(&self.query)?)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = super::ImageId> + '_ {
        self.support.iter().chain(&self.query).map(|i| i.id)
    }
}

fn image_size(images: &[Image]) -> Result<usize> {
    let n = images
        .first()
        .ok_or_else(|| Error::data("empty image set"))?
        .pixels
        .len();
    let s = ((n / 3) as f64).sqrt().round() as usize;
    if 3 * s * s != n {
        return Err(Error::data(format!("image with {n} values is not 3×S×S")));
    }
    Ok(s)
}

/// Draws `n_way` distinct classes uniformly, then `k_shot` support and
/// `m_query` query images per class.
pub fn sample_episode<S: EpisodeSource + ?Sized>(
    src: &S,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way < 1 || k_shot < 1 || m_query < 1 {
        return Err(Error::data(format!(
            "invalid episode shape N={n_way} K={k_shot} M={m_query}"
        )));
    }
    let min_images = if src.allows_starved() { 2 } else { k_shot + m_query };
    let eligible: Vec<&ClassRecord> = src.classes().iter().filter(|c| c.images.len() >= min_images).collect();
    if eligible.len() < n_way {
        return Err(Error::data(format!(
            "{} eligible classes (≥ {min_images} images), fewer than N = {n_way}",
            eligible.len()
        )));
    }
    let picked = sample(rng, eligible.len(), n_way).into_vec();
    let mut ep = Episode {
        n_way,
        k_shot,
        m_query,
        support: Vec::with_capacity(n_way * k_shot),
        support_labels: Vec::with_capacity(n_way * k_shot),
        query: Vec::with_capacity(n_way * m_query),
        query_labels: Vec::with_capacity(n_way * m_query),
        class_map: Vec::with_capacity(n_way),
        domain: src.domain(),
        starved: false,
    };
    let mut queries: Vec<Vec<Image>> = Vec::with_capacity(n_way);
    for (label, &ci) in picked.iter().enumerate() {
        let class = eligible[ci];
        let pool = class.images.len();
        ep.class_map.push(class.class_id);
        if pool >= k_shot + m_query {
            let idx = sample(rng, pool, k_shot + m_query).into_vec();
            ep.support
                .extend(idx[..k_shot].iter().map(|&i| class.images[i].clone()));
            queries.push(idx[k_shot..].iter().map(|&i| class.images[i].clone()).collect());
        } else {
            ep.starved = true;
            // Up to half the images (at most K) form the support and are
            // cycled to K slots; queries are drawn with replacement from the rest.
            let idx = sample(rng, pool, pool).into_vec();
            let (sup, rest) = idx.split_at(k_shot.min(pool.div_ceil(2)));
            ep.support
                .extend(sup.iter().cycle().take(k_shot).map(|&i| class.images[i].clone()));
            queries.push(
                (0..m_query)
                    .map(|_| class.images[rest[rng.gen_range(0..rest.len())]].clone())
                    .collect(),
            );
        }
        ep.support_labels.extend(std::iter::repeat_n(label, k_shot));
    }
    for (label, q) in queries.into_iter().enumerate() {
        ep.query.extend(q);
        ep.query_labels.extend(std::iter::repeat_n(label, m_query));
    }
    src.record_access(ep.support.len() + ep.query.len());
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_auxiliary, generate_dataset, DomainSpec};
    use crate::rng::stream;
    use std::collections::HashSet;

    #[test]
    fn five_way_five_shot_counts() {
        let ds = generate_dataset(&DomainSpec::source(), 8, 21, 1).unwrap();
        let ep = sample_episode(&ds, 5, 5, 16, &mut stream(0, &[])).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 80);
        for l in 0..5 {
            assert_eq!(ep.support_labels.iter().filter(|&&x| x == l).count(), 5);
            assert_eq!(ep.query_labels.iter().filter(|&&x| x == l).count(), 16);
        }
        let distinct: HashSet<_> = ep.image_ids().collect();
        assert_eq!(distinct.len(), 105);
        let classes: HashSet<_> = ep.class_map.iter().collect();
        assert_eq!(classes.len(), 5);
        assert!(!ep.starved);
        assert_eq!(ep.support_tensor().unwrap().shape(), &[25, 3, 32, 32]);
    }

    #[test]
    fn one_shot_support() {
        let ds = generate_dataset(&DomainSpec::source(), 6, 10, 1).unwrap();
        let ep = sample_episode(&ds, 5, 1, 3, &mut stream(1, &[])).unwrap();
        assert_eq!(ep.support.len(), 5);
    }

    #[test]
    fn too_many_ways_is_an_error() {
        let ds = generate_dataset(&DomainSpec::source(), 4, 30, 1).unwrap();
        assert!(sample_episode(&ds, 5, 5, 16, &mut stream(1, &[])).is_err());
    }

    #[test]
    fn small_dataset_classes_are_not_eligible() {
        let ds = generate_dataset(&DomainSpec::source(), 6, 10, 1).unwrap();
        assert!(sample_episode(&ds, 5, 5, 16, &mut stream(1, &[])).is_err());
    }

    #[test]
    fn starved_classes_keep_support_and_query_disjoint() {
        let t = generate_dataset(&DomainSpec::target(), 6, 10, 1).unwrap();
        let aux = build_auxiliary(&t, 5, 2).unwrap();
        let ep = sample_episode(&aux, 5, 5, 16, &mut stream(3, &[])).unwrap();
        assert!(ep.starved);
        assert_eq!((ep.support.len(), ep.query.len()), (25, 80));
        assert_eq!(aux.accesses(), 105);
        let s: HashSet<_> = ep.support.iter().map(|i| i.id).collect();
        let q: HashSet<_> = ep.query.iter().map(|i| i.id).collect();
        // Five images per class: three go to the support, two to the queries.
        assert_eq!((s.len(), q.len()), (15, 10));
        assert!(s.is_disjoint(&q));
        let pool = aux.image_ids();
        assert!(ep.image_ids().all(|id| pool.contains(&id)));
    }

    #[test]
    fn starved_support_uses_k_distinct_images_when_available() {
        let t = generate_dataset(&DomainSpec::target(), 6, 20, 1).unwrap();
        let aux = build_auxiliary(&t, 12, 2).unwrap();
        let ep = sample_episode(&aux, 5, 5, 16, &mut stream(4, &[])).unwrap();
        let s: HashSet<_> = ep.support.iter().map(|i| i.id).collect();
        let q: HashSet<_> = ep.query.iter().map(|i| i.id).collect();
        assert_eq!(s.len(), 25);
        assert!(s.is_disjoint(&q));
    }
}
