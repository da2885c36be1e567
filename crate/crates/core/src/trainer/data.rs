use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Draws batches from one or more sources. Slot `j` of every batch comes
/// from source `j mod k`, so each batch holds a near-equal count per source
/// whatever the source sizes. Each source is walked through in a fresh
/// shuffled order per pass.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    seed: u64,
    perms: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    pass: Vec<u64>,
}

impl BatchSampler {
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::invalid("every data source needs at least one sample"));
        }
        let mut s = BatchSampler {
            seed,
            perms: vec![Vec::new(); sizes.len()],
            cursor: vec![0; sizes.len()],
            pass: vec![0; sizes.len()],
        };
        for (src, &n) in sizes.iter().enumerate() {
            s.perms[src] = (0..n).collect();
            s.shuffle(src);
        }
        Ok(s)
    }

    fn shuffle(&mut self, src: usize) {
        let counter = ((src as u64) << 32) | self.pass[src];
        let mut r = rng::stream(self.seed, rng::STREAM_SHUFFLE, counter);
        self.perms[src].sort_unstable();
        self.perms[src].shuffle(&mut r);
    }

    /// `(source, index)` pairs.
    pub fn next_batch(&mut self, batch: usize) -> Vec<(usize, usize)> {
        let k = self.perms.len();
        (0..batch)
            .map(|j| {
                let src = j % k;
                if self.cursor[src] == self.perms[src].len() {
                    self.pass[src] += 1;
                    self.cursor[src] = 0;
                    self.shuffle(src);
                }
                let idx = self.perms[src][self.cursor[src]];
                self.cursor[src] += 1;
                (src, idx)
            })
            .collect()
    }
}
