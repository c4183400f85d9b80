use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Corpus;

/// Epoch-shuffled sequence indices, one queue per object count.
pub(crate) struct Sampler {
    buckets: Vec<(usize, Vec<usize>, usize)>,
    total: usize,
}

impl Sampler {
    pub(crate) fn new(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Self {
        let mut by_count: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in corpus.sequences.iter().enumerate() {
            by_count.entry(s.n_objects).or_default().push(i);
        }
        let buckets: Vec<(usize, Vec<usize>, usize)> = by_count
            .into_iter()
            .map(|(n, mut idx)| {
                idx.shuffle(rng);
                (n, idx, 0)
            })
            .collect();
        let total = buckets.iter().map(|b| b.1.len()).sum();
        Self { buckets, total }
    }

    /// A batch of one object count, chosen with probability proportional to its size.
    pub(crate) fn next(&mut self, rng: &mut ChaCha8Rng, size: usize) -> (usize, Vec<usize>) {
        let mut pick = rng.gen_range(0..self.total);
        let mut b = 0;
        while pick >= self.buckets[b].1.len() {
            pick -= self.buckets[b].1.len();
            b += 1;
        }
        let (n, idx, cursor) = &mut self.buckets[b];
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if *cursor == idx.len() {
                idx.shuffle(rng);
                *cursor = 0;
            }
            out.push(idx[*cursor]);
            *cursor += 1;
        }
        (*n, out)
    }
}
