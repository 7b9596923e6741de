use crate::rngkit::{RngStream, SeedDomain};
use crate::tensornet::Tensor;
use crate::{Error, Result};

/// Standard deviation of the per-pixel noise around each synthetic class mean.
pub const SYNTHETIC_NOISE_STD: f64 = 0.25;

/// Images `[N, C, H, W]` with values in `[0, 1]` and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        let d: usize = self.sample_shape().iter().product();
        &self.images.data()[index * d..(index + 1) * d]
    }

    /// Copies the listed samples, in the listed order, into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Dataset::new(images, labels, self.n_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.n_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

/// Class-conditional Gaussian blobs.
///
/// Class `k` has a per-pixel mean drawn uniformly from `[0, 1]` by the stream
/// `derive_seed(seed, ServerInit, k, 0)`; its samples add Gaussian noise from
/// `derive_seed(seed, ServerInit, k, 1)` and are clamped to `[0, 1]`. Samples
/// are ordered class-major.
pub fn generate_synthetic(n_classes: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 classes"));
    }
    if per_class < 1 {
        return Err(Error::invalid("synthetic data needs at least 1 sample per class"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid("sample shape dimensions must be positive"));
    }
    let d: usize = shape.iter().product();
    let n = n_classes * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        let mut mean_stream = RngStream::derived(seed, SeedDomain::ServerInit, class as u64, 0);
        let mean: Vec<f64> = (0..d).map(|_| mean_stream.next_uniform()).collect();
        let mut noise = RngStream::derived(seed, SeedDomain::ServerInit, class as u64, 1);
        for _ in 0..per_class {
            data.extend(
                mean.iter()
                    .map(|&m| (m + SYNTHETIC_NOISE_STD * noise.next_gaussian()).clamp(0.0, 1.0) as f32),
            );
            labels.push(class);
        }
    }
    let [c, h, w] = shape;
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, n_classes)
}

/// Draws `train_per_class + test_per_class` samples per class from one set of
/// class means and splits each class into a leading train part and a trailing
/// test part.
pub fn generate_synthetic_split(
    n_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if train_per_class < 1 || test_per_class < 1 {
        return Err(Error::invalid("train and test splits each need at least 1 sample per class"));
    }
    let per_class = train_per_class + test_per_class;
    let all = generate_synthetic(n_classes, per_class, shape, seed)?;
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for class in 0..n_classes {
        let base = class * per_class;
        train_idx.extend(base..base + train_per_class);
        test_idx.extend(base + train_per_class..base + per_class);
    }
    Ok((all.subset(&train_idx)?, all.subset(&test_idx)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(10, 500, [1, 4, 4], 5).unwrap();
        let b = generate_synthetic(10, 500, [1, 4, 4], 5).unwrap();
        assert_eq!(a.len(), 5000);
        assert_eq!(a.class_histogram(), vec![500; 10]);
        let bits = |d: &Dataset| d.images().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.labels()[499], 0);
        assert_eq!(a.labels()[500], 1);
    }

    #[test]
    fn split_shares_class_means() {
        let (train, test) = generate_synthetic_split(3, 4, 2, [1, 2, 2], 9).unwrap();
        let all = generate_synthetic(3, 6, [1, 2, 2], 9).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 6);
        assert_eq!(train.sample(4), all.sample(6));
        assert_eq!(test.sample(0), all.sample(4));
        assert_eq!(test.labels(), &[0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn gather_checks_range() {
        let d = generate_synthetic(2, 2, [1, 1, 1], 0).unwrap();
        let (t, l) = d.gather(&[3, 0]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 1, 1]);
        assert_eq!(l, vec![1, 0]);
        assert!(d.gather(&[4]).is_err());
    }
}
