//! Datasets: samples, folder ingestion, seeded subsampling and holdout
//! splitting, and a procedural generator for offline runs.

mod folder;
mod synth;

use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Trimap, NUM_SCENE_CLASSES};

pub use folder::{load_folder, LoadReport};
pub use synth::synth_generate;

/// Size of the evaluation holdout and the seed of its split.
pub const HOLDOUT_SIZE: usize = 1000;
pub const HOLDOUT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    None,
    Class(usize),
    Trimap(Trimap),
}

/// One `(3, size, size)` image with values in `[0, 1]` and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Array3<f32>,
    pub label: Label,
}

impl Sample {
    pub fn validate(&self, channels: usize, image_size: usize) -> Result<()> {
        if self.image.dim() != (channels, image_size, image_size) {
            return Err(Error::Data(format!(
                "image shape {:?}, expected ({channels}, {image_size}, {image_size})",
                self.image.dim()
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel value outside [0, 1]".into()));
        }
        match &self.label {
            Label::Class(c) if *c >= NUM_SCENE_CLASSES => Err(Error::Label(format!("class {c} out of range"))),
            Label::Trimap(t) if t.dim() != (image_size, image_size) => {
                Err(Error::Data(format!("tri-map shape {:?} does not match image", t.dim())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Unlabeled,
    Classification,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Folder(PathBuf),
    /// Procedural pool of the given size.
    Synthetic(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    pub kind: DatasetKind,
    #[serde(default)]
    pub size_limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    /// Loads (or generates) the samples, then applies `size_limit` by seeded
    /// subsampling.
    pub fn resolve(&self, image_size: usize) -> Result<Vec<Sample>> {
        let samples = match &self.source {
            Source::Folder(path) => load_folder(path, self.kind, image_size)?.samples,
            Source::Synthetic(n) => synth_generate(self.kind, *n, self.seed, image_size),
        };
        match self.size_limit {
            Some(n) if n < samples.len() => subsample(&samples, n, self.seed),
            Some(n) if n > samples.len() => Err(Error::Data(format!(
                "size limit {n} exceeds the {} available samples",
                samples.len()
            ))),
            _ => Ok(samples),
        }
    }
}

/// `n` items drawn uniformly without replacement by a generator seeded with
/// `seed`.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > items.len() {
        return Err(Error::Data(format!("cannot draw {n} of {} samples", items.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, items.len(), n)
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

/// Index sets `(train, test)` of a seeded holdout split; both keep input order.
pub fn holdout_indices(len: usize, n_test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if len <= n_test {
        return Err(Error::Data(format!(
            "{len} samples cannot hold out {n_test} and still train"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub fn split_holdout<T: Clone>(items: &[T], n_test: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, test) = holdout_indices(items.len(), n_test, seed)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| items[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

/// Stacks images into a `(B, C, H, W)` batch.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Array4<f32> {
    let views: Vec<_> = samples.into_iter().map(|s| s.image.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images share one shape")
}
