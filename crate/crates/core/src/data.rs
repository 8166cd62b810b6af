//! In-memory dataset types consumed by the model and trainer. Loading,
//! generation, and the on-disk container format live in the companion crate.

use alloc::string::String;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unimodal::Modality;

/// One example: three feature-major modality matrices plus its binary label
/// vector.
pub struct Sample<S: Scalar> {
    pub visual: Tensor<S>,
    pub audio: Tensor<S>,
    pub text: Tensor<S>,
    pub labels: Vec<u8>,
}

impl<S: Scalar> Sample<S> {
    pub fn modality(&self, m: Modality) -> &Tensor<S> {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }

    /// Labels as a constant rank-1 tensor of 0/1 values.
    pub fn label_tensor(&self) -> Tensor<S> {
        Tensor::vector(
            self.labels
                .iter()
                .map(|y| if *y != 0 { S::ONE } else { S::ZERO })
                .collect(),
        )
    }

    pub fn label_bools(&self) -> Vec<bool> {
        self.labels.iter().map(|y| *y != 0).collect()
    }
}

/// A dataset split three ways, with its ordered label names.
pub struct Dataset<S: Scalar> {
    pub label_names: Vec<String>,
    pub train: Vec<Sample<S>>,
    pub valid: Vec<Sample<S>>,
    pub test: Vec<Sample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn label_count(&self) -> usize {
        self.label_names.len()
    }
}
