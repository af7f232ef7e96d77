//! Mixed multi-domain batch sampling.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DomainDataset, MultiDomainBatch};
use crate::error::{Error, Result};

/// Samples uniformly with replacement from each domain's train split.
/// Domains are visited in ascending domain-id order, so a fixed rng state
/// yields a fixed batch.
pub fn build_batch(
    datasets: &[DomainDataset],
    composition: &BTreeMap<usize, usize>,
    rng: &mut ChaCha8Rng,
) -> Result<MultiDomainBatch> {
    let mut per_domain = BTreeMap::new();
    for (&domain_id, &count) in composition {
        let ds = datasets
            .iter()
            .find(|d| d.spec.domain_id == domain_id)
            .ok_or_else(|| Error::Config(format!("composition names unknown domain {domain_id}")))?;
        if ds.train.is_empty() {
            return Err(Error::Config(format!(
                "domain '{}' has an empty train split",
                ds.spec.name
            )));
        }
        let picks: Vec<_> = (0..count)
            .map(|_| ds.train[rng.gen_range(0..ds.train.len())].clone())
            .collect();
        per_domain.insert(domain_id, picks);
    }
    Ok(MultiDomainBatch {
        per_domain,
        composition: composition.clone(),
    })
}
