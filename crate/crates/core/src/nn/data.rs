use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A mini-batch: `B×C×H×W` inputs and one class id per example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 4 || inputs.shape()[0] != labels.len() {
            return Err(Error::dim("TrainBatch", ("B×C×H×W", labels.len()), inputs.shape()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> Result<Tensor<T>> {
        Tensor::from_vec(&self.inputs.shape()[1..], self.inputs.outer(i).to_vec())
    }

    pub(crate) fn check(&self, input: [usize; 3], classes: usize) -> Result<()> {
        if self.inputs.shape()[1..] != input {
            return Err(Error::dim("TrainBatch", input, &self.inputs.shape()[1..]));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {classes}")));
        }
        Ok(())
    }
}

/// In-memory labelled image set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Dataset<T> {
    /// `images` is `N×C×H×W`.
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim("Dataset", ("N×C×H×W", labels.len()), images.shape()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Result<Tensor<T>> {
        Tensor::from_vec(&self.images.shape()[1..], self.images.outer(i).to_vec())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainBatch<T>> {
        let per = self.images.inner_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("example {i} out of range")));
            }
            data.extend_from_slice(self.images.outer(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        TrainBatch::new(Tensor::from_vec(&shape, data)?, labels)
    }

    /// First `n` examples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let b = self.batch(&idx)?;
        Self::new(b.inputs, b.labels, self.classes)
    }
}

/// Deterministic mini-batch order: each epoch is a fresh permutation derived
/// from `(seed, epoch)`; the trailing partial batch is dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSchedule {
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSchedule {
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size.max(1)
    }

    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Example indices of global iteration `iter` (0-based).
    pub fn indices(&self, n: usize, iter: u64) -> Vec<usize> {
        let per = self.batches_per_epoch(n).max(1) as u64;
        let (epoch, k) = (iter / per, (iter % per) as usize);
        let order = self.epoch_order(n, epoch);
        let bs = self.batch_size.min(n);
        order[k * bs..(k + 1) * bs].to_vec()
    }
}
