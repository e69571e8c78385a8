//! Deterministic mini-batching over a manifest split.

use super::manifest::{DatasetManifest, Split};
use crate::error::Result;
use crate::model::SpatialFeatures;
use crate::numerics::{Rng, Scalar};

/// Image order for one epoch: a shuffle drawn from its own stream of `seed`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, epoch).shuffle(&mut order);
    order
}

/// Index batches of one epoch; the final partial batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Positions within the split.
    pub indices: Vec<usize>,
    pub features: Vec<SpatialFeatures<T>>,
    pub labels: Vec<Vec<usize>>,
}

/// Reads feature files lazily, one batch at a time, over a single epoch.
pub struct BatchStream<'a, T> {
    manifest: &'a DatasetManifest,
    split: Split,
    batches: std::vec::IntoIter<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Iterator for BatchStream<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.batches.next()?;
        let entries = self.manifest.split(self.split);
        let load = || -> Result<Batch<T>> {
            let mut features = Vec::with_capacity(indices.len());
            let mut labels = Vec::with_capacity(indices.len());
            for &i in &indices {
                features.push(self.manifest.load_features(&entries[i])?);
                labels.push(entries[i].labels.clone());
            }
            Ok(Batch {
                indices: indices.clone(),
                features,
                labels,
            })
        };
        Some(load())
    }
}

/// Batches of `split` for epoch `epoch`, shuffled from `shuffle_seed`.
pub fn load_batches<T: Scalar>(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> BatchStream<'_, T> {
    let n = manifest.split(split).len();
    BatchStream {
        manifest,
        split,
        batches: epoch_batches(n, batch_size, shuffle_seed, epoch).into_iter(),
        _marker: std::marker::PhantomData,
    }
}

/// A whole split held in memory, in manifest order.
#[derive(Clone, Debug)]
pub struct InMemorySplit<T> {
    pub ids: Vec<String>,
    pub features: Vec<SpatialFeatures<T>>,
    pub labels: Vec<Vec<usize>>,
}

impl<T: Scalar> InMemorySplit<T> {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let entries = manifest.split(split);
        let features = entries
            .iter()
            .map(|e| manifest.load_features(e))
            .collect::<Result<_>>()?;
        Ok(Self {
            ids: entries.iter().map(|e| e.id.clone()).collect(),
            features,
            labels: entries.iter().map(|e| e.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}
