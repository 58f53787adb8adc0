//! Mini-batch schedules for one epoch, as index lists into a dataset.

use rand::seq::SliceRandom;

use crate::rng::{rng_from_seed, LabRng};
use crate::synthdata::LabeledDataset;
use crate::{Error, Result};

/// Shuffled pass over `len` items; the final batch may be short.
pub fn shuffled_batches(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_from_seed(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Endless stream over a pool: shuffled passes, reshuffled when exhausted.
struct Cycle {
    pool: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(mut pool: Vec<usize>, rng: &mut LabRng) -> Self {
        pool.shuffle(rng);
        Self { pool, pos: 0 }
    }

    fn next(&mut self, rng: &mut LabRng) -> usize {
        if self.pos == self.pool.len() {
            self.pool.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.pool[self.pos - 1]
    }
}

/// Class-balanced batches for one epoch.
///
/// Every batch holds `ceil(b/2)` minority and `floor(b/2)` majority samples.
/// An epoch is the number of batches needed to cover the majority class once;
/// the minority class is cycled (reshuffled on exhaustion) as often as needed,
/// and the last batch tops up the majority class the same way.
pub fn balanced_batches(dataset: &LabeledDataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid(
            "batch size",
            "balanced batches need at least 2 samples per batch",
        ));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.label == 1 { &mut pos } else { &mut neg }.push(i);
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("dataset", "balanced batches need both classes present"));
    }
    let (majority, minority) = if pos.len() > neg.len() { (pos, neg) } else { (neg, pos) };

    let mut rng = rng_from_seed(seed);
    let major_per_batch = batch_size / 2;
    let minor_per_batch = batch_size - major_per_batch;
    let batches = majority.len().div_ceil(major_per_batch);
    let mut major = Cycle::new(majority, &mut rng);
    let mut minor = Cycle::new(minority, &mut rng);

    Ok((0..batches)
        .map(|_| {
            let mut batch = Vec::with_capacity(batch_size);
            batch.extend((0..minor_per_batch).map(|_| minor.next(&mut rng)));
            batch.extend((0..major_per_batch).map(|_| major.next(&mut rng)));
            batch
        })
        .collect())
}
