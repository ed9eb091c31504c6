//! Datasets of single-channel images: loading from class folders,
//! preprocessing recipes, a synthetic speckled generator, stratified
//! K-shot sampling and batching.

mod loader;
mod preprocess;
mod synthetic;

pub use loader::{load_image_folder, IMAGE_EXTENSIONS};
pub use preprocess::{center_crop, recipe_for, resize_bilinear, DatasetKind, GrayImage, PreprocessRecipe, Step};
pub use synthetic::{generate_synthetic, write_dataset, SyntheticSpec, MANIFEST_FILE};

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use reskan_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{data_err, Result};
use crate::seed::{derive_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One preprocessed image with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Relative path or generated identifier.
    pub id: String,
    pub label: usize,
    pub image: GrayImage,
    /// SHA-256 of the decoded 8-bit content, hex encoded.
    pub hash: String,
}

/// SHA-256 over the dimensions and 8-bit channel bytes of a decoded image.
pub fn content_hash(height: usize, width: usize, channels: usize, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    for v in [height, width, channels] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    /// Common image size, or a data error if sizes differ or the set is
    /// empty.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or_else(|| data_err!("{} split is empty", self.split.name()))?;
        let hw = (first.image.height, first.image.width);
        if let Some(s) = self.samples.iter().find(|s| (s.image.height, s.image.width) != hw) {
            return Err(data_err!(
                "image {} is {}x{} but {} is {}x{}; batching needs one size",
                s.id,
                s.image.height,
                s.image.width,
                first.id,
                hw.0,
                hw.1
            ));
        }
        Ok(hw)
    }

    /// Labels dense in `[0, num_classes)` and a common image size.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.samples.iter().find(|s| s.label >= self.num_classes()) {
            return Err(data_err!("sample {} has label {} but there are {} classes", s.id, s.label, self.num_classes()));
        }
        self.image_size()?;
        Ok(())
    }

    /// Stacks the images at `indices` into `[N, 1, H, W]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let (h, w) = self.image_size()?;
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image.pixels);
        }
        Ok(Tensor::new(vec![indices.len(), 1, h, w], data)?)
    }

    /// A copy holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            split: self.split,
        }
    }
}

/// Pairs of sample ids whose content hashes occur in both sets.
pub fn duplicate_hashes(a: &Dataset, b: &Dataset) -> Vec<(String, String)> {
    let by_hash: BTreeMap<&str, &str> = a.samples.iter().map(|s| (s.hash.as_str(), s.id.as_str())).collect();
    b.samples
        .iter()
        .filter_map(|s| by_hash.get(s.hash.as_str()).map(|id| (id.to_string(), s.id.clone())))
        .collect()
}

/// Exactly `k` samples per class, drawn without replacement. The result
/// keeps the original sample order.
pub fn kshot_subsample(train: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes()];
    for (i, s) in train.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut chosen = Vec::with_capacity(k * by_class.len());
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < k {
            return Err(data_err!(
                "class `{}` has {} training samples, fewer than K = {k}",
                train.class_names[c],
                idx.len()
            ));
        }
        let mut rng = derive_rng(seed, "kshot", c as u64);
        chosen.extend(idx.choose_multiple(&mut rng, k).copied());
    }
    chosen.sort_unstable();
    Ok(train.subset(&chosen))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Positions of the batch's samples in the dataset.
    pub indices: Vec<usize>,
}

/// Iterates over one epoch. With a shuffle seed the order is a seeded
/// permutation, otherwise dataset order.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

pub fn batch_iter(data: &Dataset, batch_size: usize, shuffle_seed: Option<u64>, drop_last: bool) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(data_err!("batch size must be at least 1"));
    }
    data.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng: Rng = derive_rng(seed, "batch.shuffle", 0);
        order.shuffle(&mut rng);
    }
    Ok(BatchIter { data, order, batch_size, drop_last, pos: 0 })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = self.pos + remaining.min(self.batch_size);
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self.data.images(&indices).expect("dataset validated when the iterator was created");
        let labels = indices.iter().map(|&i| self.data.samples[i].label).collect();
        Some(Batch { images, labels, indices })
    }
}
