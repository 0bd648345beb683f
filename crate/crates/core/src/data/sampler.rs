//! Triplet sampling for stage-1 training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Indices into a split: anchor and positive share a label, the negative does not.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletIndexBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletIndexBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn anchors(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.anchor).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.positive).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.negative).collect()
    }
}

/// Per-epoch generator; epoch `e` of seed `s` always yields the same stream.
pub(crate) fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// One epoch of triplet batches over a split with the given class `labels`.
///
/// Every anchor whose class has at least two samples appears exactly once, in
/// shuffled order. A trailing batch with fewer than two triplets is dropped.
pub fn sample_triplets(labels: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<TripletIndexBatch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Config(format!(
            "triplet sampling needs at least 2 classes, found {}",
            by_class.len()
        )));
    }
    for (c, members) in &by_class {
        if members.len() < 2 {
            log::warn!("class {c} has a single sample; it is never used as an anchor");
        }
    }

    let mut anchors: Vec<usize> = (0..labels.len()).filter(|&i| by_class[&labels[i]].len() >= 2).collect();
    let mut rng = epoch_rng(seed, epoch);
    anchors.shuffle(&mut rng);

    let mut triplets = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let class = labels[anchor];
        let members = &by_class[&class];
        let slot = members.binary_search(&anchor).expect("anchor is in its class");
        let mut pick = rng.random_range(0..members.len() - 1);
        if pick >= slot {
            pick += 1;
        }
        let positive = members[pick];
        let negative = loop {
            let cand = rng.random_range(0..labels.len());
            if labels[cand] != class {
                break cand;
            }
        };
        triplets.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }

    Ok(triplets
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| TripletIndexBatch { triplets: c.to_vec() })
        .collect())
}
