use rand::Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// `n` images whose pixels all share one level drawn from `U(0, 1)`.
pub fn make_constant_gray<R: Rng + ?Sized>(n: usize, pixels: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(n * pixels);
    for _ in 0..n {
        let level: f64 = rng.random();
        data.extend(std::iter::repeat_n(level, pixels));
    }
    Tensor::new(vec![n, pixels], data).expect("sized")
}

/// `n` images with i.i.d. `U(0, 1)` pixels.
pub fn make_noise<R: Rng + ?Sized>(n: usize, pixels: usize, rng: &mut R) -> Tensor {
    let data = (0..n * pixels).map(|_| rng.random()).collect();
    Tensor::new(vec![n, pixels], data).expect("sized")
}

/// Flattened images with digit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 2 || images.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::invalid(format!("label {l} outside 0-9")));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn filter(&self, keep: impl Fn(u8) -> bool) -> LabeledImages {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        LabeledImages {
            images: self.images.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Hold-out-class protocol: the class never appears in training and is the
/// outlier set at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutSplit {
    pub train: LabeledImages,
    pub test_inliers: LabeledImages,
    /// Hold-out images from the training split followed by those from the test split.
    pub test_outliers: LabeledImages,
}

pub fn holdout_split(train: &LabeledImages, test: &LabeledImages, holdout_class: u8) -> Result<HoldoutSplit> {
    if !train.labels.contains(&holdout_class) && !test.labels.contains(&holdout_class) {
        return Err(Error::invalid(format!("hold-out class {holdout_class} does not occur")));
    }
    let from_train = train.filter(|l| l == holdout_class);
    let from_test = test.filter(|l| l == holdout_class);
    let mut labels = from_train.labels;
    labels.extend(&from_test.labels);
    Ok(HoldoutSplit {
        train: train.filter(|l| l != holdout_class),
        test_inliers: test.filter(|l| l != holdout_class),
        test_outliers: LabeledImages {
            images: Tensor::concat_rows(&[&from_train.images, &from_test.images])?,
            labels,
        },
    })
}
