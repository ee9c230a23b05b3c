use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CacheReader, DataError, Label, Result};
use crate::tensor::Tensor;

/// Stacked records `[B, T, H, C]` with their labels and record indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub stacks: Tensor<f32>,
    pub labels: Vec<Label>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded, optionally subsampled batch order over a cache.
///
/// The subset is a prefix of one seeded shuffle, so for a fixed seed smaller
/// fractions are subsets of larger ones. Each epoch reshuffles the subset
/// with `seed + epoch`.
#[derive(Debug, Clone)]
pub struct BatchIter {
    reader: Arc<CacheReader>,
    batch_size: usize,
    seed: u64,
    selected: Vec<usize>,
}

impl BatchIter {
    pub fn new(
        reader: Arc<CacheReader>,
        batch_size: usize,
        seed: u64,
        fraction: f64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(DataError::Config("batch size must be >= 1".into()));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(DataError::Config(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        let n = reader.len();
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let keep = (fraction * n as f64).round() as usize;
        all.truncate(keep);
        Ok(Self {
            reader,
            batch_size,
            seed,
            selected: all,
        })
    }

    /// Record indices in the subset, in selection order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Record indices in the order epoch `epoch` visits them.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.selected.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            self.seed.wrapping_add(epoch),
        ));
        order
    }

    fn load(reader: &CacheReader, idx: &[usize]) -> Result<Batch> {
        let m = reader.manifest();
        let per = m.tokens * m.hidden * m.channels;
        let mut data = Vec::with_capacity(per * idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let r = reader.read(i)?;
            data.extend_from_slice(r.stack.tensor().data());
            labels.push(r.label);
        }
        let stacks = Tensor::new(vec![idx.len(), m.tokens, m.hidden, m.channels], data)?;
        Ok(Batch {
            stacks,
            labels,
            indices: idx.to_vec(),
        })
    }

    /// Batches for one epoch, read on demand.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.epoch_order(epoch);
        let chunks: Vec<Vec<usize>> = order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        chunks
            .into_iter()
            .map(move |c| Self::load(&self.reader, &c))
    }

    /// Same sequence as [`BatchIter::epoch`], read up to `ahead` batches in
    /// advance on a background thread.
    pub fn epoch_prefetched(
        &self,
        epoch: u64,
        ahead: usize,
    ) -> impl Iterator<Item = Result<Batch>> {
        let order = self.epoch_order(epoch);
        let chunks: Vec<Vec<usize>> = order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        let (tx, rx) = sync_channel(ahead.max(1));
        let reader = Arc::clone(&self.reader);
        thread::spawn(move || {
            for c in chunks {
                if tx.send(Self::load(&reader, &c)).is_err() {
                    break;
                }
            }
        });
        rx.into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{write_cache, CacheManifest, LabelSchema, RecordKey};
    use crate::heads::LayerStack;

    fn cache(n: usize) -> (tempfile::TempDir, Arc<CacheReader>) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bve");
        let recs = (0..n).map(|i| {
            let s = LayerStack::from_data(1, 2, 2, vec![i as f32; 4]).unwrap();
            (
                s,
                Label::Class((i % 2) as u32),
                RecordKey::new(format!("e{i}"), 0),
            )
        });
        write_cache(recs, &p, CacheManifest::new(1, 2, 2, LabelSchema::Class)).unwrap();
        let r = Arc::new(CacheReader::open(&p).unwrap());
        (dir, r)
    }

    #[test]
    fn full_fraction_single_batch_covers_everything() {
        let (_d, r) = cache(10);
        let it = BatchIter::new(r, 10, 3, 1.0).unwrap();
        let batches: Vec<_> = it.epoch(0).collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 1);
        let mut idx = batches[0].indices.clone();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        for (k, &i) in batches[0].indices.iter().enumerate() {
            assert_eq!(batches[0].stacks.data()[k * 4], i as f32);
        }
    }

    #[test]
    fn fraction_selects_rounded_count_and_nests() {
        let (_d, r) = cache(100);
        let small = BatchIter::new(Arc::clone(&r), 16, 9, 0.1).unwrap();
        let mid = BatchIter::new(Arc::clone(&r), 16, 9, 0.3).unwrap();
        assert_eq!(mid.selected().len(), 30);
        assert_eq!(small.selected().len(), 10);
        assert!(small.selected().iter().all(|i| mid.selected().contains(i)));
        let seen: usize = mid.epoch(0).map(|b| b.unwrap().len()).sum();
        assert_eq!(seen, 30);
    }

    #[test]
    fn same_seed_same_order_and_epochs_reshuffle() {
        let (_d, r) = cache(50);
        let a = BatchIter::new(Arc::clone(&r), 7, 1, 1.0).unwrap();
        let b = BatchIter::new(Arc::clone(&r), 7, 1, 1.0).unwrap();
        assert_eq!(a.epoch_order(0), b.epoch_order(0));
        assert_ne!(a.epoch_order(0), a.epoch_order(1));
        let last = a.epoch(0).last().unwrap().unwrap();
        assert_eq!(last.len(), 1);
        let pre: Vec<Vec<usize>> = a
            .epoch_prefetched(2, 3)
            .map(|b| b.unwrap().indices)
            .collect();
        let plain: Vec<Vec<usize>> = a.epoch(2).map(|b| b.unwrap().indices).collect();
        assert_eq!(pre, plain);
    }

    #[test]
    fn bad_arguments() {
        let (_d, r) = cache(5);
        assert!(BatchIter::new(Arc::clone(&r), 0, 0, 1.0).is_err());
        assert!(BatchIter::new(Arc::clone(&r), 1, 0, 0.0).is_err());
        assert!(BatchIter::new(r, 1, 0, 1.5).is_err());
    }
}
