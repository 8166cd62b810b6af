//! Per-modality transformer encoders. Each modality's pre-extracted feature
//! matrix (`d_m×τ_m`, feature-major) is projected into the model dimension,
//! augmented with sinusoidal positions, and enriched by a stack of encoder
//! layers, yielding a context-aware embedding `d×τ_m`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use rand_chacha::ChaCha8Rng;

use crate::nn::{sinusoidal_positions, EncoderLayer, ForwardMode, Linear};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{contract, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];

    pub fn index(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture of one modality's encoder.
#[derive(Clone, Debug)]
pub struct ModalityConfig {
    pub modality: Modality,
    /// Raw feature dimension `d_m`.
    pub input_dim: usize,
    /// Maximum sequence length this modality can carry.
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub model_dim: usize,
}

impl ModalityConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.layers == 0 || self.max_len == 0 || self.input_dim == 0 {
            return Err(contract(format!(
                "{} encoder: layers, lengths, and dims must be positive",
                self.modality
            )));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(contract(format!(
                "{} encoder: model dim {} not divisible by {} heads",
                self.modality, self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Input projection + positional table + encoder stack for one modality.
pub struct UnimodalEncoder<S: Scalar> {
    pub config: ModalityConfig,
    pub proj: Linear<S>,
    pub layers: Vec<EncoderLayer<S>>,
}

impl<S: Scalar> UnimodalEncoder<S> {
    pub fn new(config: ModalityConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        config.validate()?;
        let proj = Linear::new(config.input_dim, config.model_dim, rng);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(config.model_dim, config.heads, config.ffn_dim, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(UnimodalEncoder {
            config,
            proj,
            layers,
        })
    }

    /// Encodes `features [d_m×τ]` into `[d×τ]` with the default positional
    /// table for the actual sequence length.
    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        mode: &mut ForwardMode,
    ) -> Result<Tensor<S>, TensorError> {
        let (_, cols) = features.dims2();
        let positions = sinusoidal_positions(cols, self.config.model_dim);
        self.encode_with_positions(tape, features, &positions, mode)
    }

    /// Same as [`encode`](Self::encode) but with a caller-supplied positional
    /// table (`τ×d`), which diagnostics use to probe permutation equivariance.
    pub fn encode_with_positions(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        positions: &Tensor<S>,
        mode: &mut ForwardMode,
    ) -> Result<Tensor<S>, TensorError> {
        let (rows, cols) = features.dims2();
        if features.rank() != 2 || rows != self.config.input_dim || cols > self.config.max_len {
            return Err(contract(format!(
                "{} encoder expected features {}×(1..={}), got {:?}",
                self.config.modality,
                self.config.input_dim,
                self.config.max_len,
                features.shape()
            )));
        }
        if positions.dims2() != (cols, self.config.model_dim) {
            return Err(contract(format!(
                "{} encoder: positional table {:?} does not match sequence {}×{}",
                self.config.modality,
                positions.shape(),
                cols,
                self.config.model_dim
            )));
        }
        let seq = tape.transpose(features)?; // τ×d_m
        let projected = self.proj.forward(tape, &seq)?;
        let mut h = tape.add(&projected, positions)?;
        for layer in &self.layers {
            h = layer.forward(tape, &h, mode)?;
        }
        tape.transpose(&h) // back to d×τ
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.proj.append_params(&format!("{prefix}.proj"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.append_params(&format!("{prefix}.layer{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::RngPool;
    use alloc::vec;
    use rand::Rng;

    fn cfg(modality: Modality, input_dim: usize, max_len: usize, d: usize) -> ModalityConfig {
        ModalityConfig {
            modality,
            input_dim,
            max_len,
            layers: 1,
            heads: 2,
            ffn_dim: 2 * d,
            model_dim: d,
        }
    }

    fn rand_features(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn aligned_visual_input_maps_to_model_dim() {
        let pool = RngPool::new(10);
        let mut rng = pool.stream("init");
        let mut config = cfg(Modality::Visual, 35, 60, 256);
        config.layers = 4;
        config.heads = 8;
        let enc = UnimodalEncoder::<f64>::new(config, &mut rng).unwrap();
        let mut data_rng = pool.stream("data");
        let features = rand_features(&mut data_rng, 35, 60);
        let mut tape = Tape::new();
        let out = enc
            .encode(&mut tape, &features, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(out.shape(), vec![256, 60]);
    }

    #[test]
    fn unaligned_text_input_keeps_native_length() {
        let pool = RngPool::new(11);
        let mut rng = pool.stream("init");
        let mut config = cfg(Modality::Text, 300, 50, 256);
        config.heads = 8;
        let enc = UnimodalEncoder::<f64>::new(config, &mut rng).unwrap();
        let mut data_rng = pool.stream("data");
        let features = rand_features(&mut data_rng, 300, 50);
        let mut tape = Tape::new();
        let out = enc
            .encode(&mut tape, &features, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(out.shape(), vec![256, 50]);
    }

    #[test]
    fn output_shape_is_independent_of_layer_count() {
        let pool = RngPool::new(12);
        for layers in [1usize, 3] {
            let mut rng = pool.stream("init");
            let mut config = cfg(Modality::Audio, 6, 9, 8);
            config.layers = layers;
            let enc = UnimodalEncoder::<f64>::new(config, &mut rng).unwrap();
            let mut data_rng = pool.stream("data");
            let features = rand_features(&mut data_rng, 6, 9);
            let mut tape = Tape::new();
            let out = enc
                .encode(&mut tape, &features, &mut ForwardMode::Eval)
                .unwrap();
            assert_eq!(out.shape(), vec![8, 9]);
        }
    }

    #[test]
    fn wrong_feature_dim_is_named_after_the_modality() {
        let pool = RngPool::new(13);
        let mut rng = pool.stream("init");
        let enc = UnimodalEncoder::<f64>::new(cfg(Modality::Audio, 6, 9, 8), &mut rng).unwrap();
        let features = Tensor::matrix(5, 9, alloc::vec![0.0; 45]).unwrap();
        let mut tape = Tape::new();
        let err = enc
            .encode(&mut tape, &features, &mut ForwardMode::Eval)
            .unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("audio"), "error should name the modality: {msg}");
    }

    #[test]
    fn zeroed_sublayers_with_affine_norms_pass_projected_input_through() {
        let pool = RngPool::new(14);
        let mut rng = pool.stream("init");
        let mut enc =
            UnimodalEncoder::<f64>::new(cfg(Modality::Visual, 3, 4, 8), &mut rng).unwrap();
        for layer in &mut enc.layers {
            layer.zero_sublayers();
            layer.set_norms_affine_only();
        }
        let mut data_rng = pool.stream("data");
        let features = rand_features(&mut data_rng, 3, 4);
        let mut tape = Tape::new();
        let out = enc
            .encode(&mut tape, &features, &mut ForwardMode::Eval)
            .unwrap();

        // expected: projection of the transposed input plus positions
        let mut t2 = Tape::new();
        let seq = t2.transpose(&features).unwrap();
        let projected = enc.proj.forward(&mut t2, &seq).unwrap();
        let pos = sinusoidal_positions::<f64>(4, 8);
        let expected = t2.add(&projected, &pos).unwrap();
        let expected = t2.transpose(&expected).unwrap();
        for (a, b) in out.to_vec().iter().zip(expected.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_sequence_and_positions_permutes_output_columns() {
        let pool = RngPool::new(15);
        let mut rng = pool.stream("init");
        let enc = UnimodalEncoder::<f64>::new(cfg(Modality::Text, 5, 6, 8), &mut rng).unwrap();
        let mut data_rng = pool.stream("data");
        let features = rand_features(&mut data_rng, 5, 6);
        let positions = sinusoidal_positions::<f64>(6, 8);

        let mut tape = Tape::new();
        let base = enc
            .encode_with_positions(&mut tape, &features, &positions, &mut ForwardMode::Eval)
            .unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted_features = {
            let src = features.to_vec();
            let mut dst = alloc::vec![0.0f64; 30];
            for (new_col, &old_col) in perm.iter().enumerate() {
                for r in 0..5 {
                    dst[r * 6 + new_col] = src[r * 6 + old_col];
                }
            }
            Tensor::matrix(5, 6, dst).unwrap()
        };
        let permuted_positions = {
            let src = positions.to_vec();
            let mut dst = alloc::vec![0.0f64; 48];
            for (new_row, &old_row) in perm.iter().enumerate() {
                dst[new_row * 8..(new_row + 1) * 8]
                    .copy_from_slice(&src[old_row * 8..(old_row + 1) * 8]);
            }
            Tensor::matrix(6, 8, dst).unwrap()
        };

        let mut tape2 = Tape::new();
        let permuted_out = enc
            .encode_with_positions(
                &mut tape2,
                &permuted_features,
                &permuted_positions,
                &mut ForwardMode::Eval,
            )
            .unwrap();

        let base_v = base.to_vec();
        let perm_v = permuted_out.to_vec();
        for (new_col, &old_col) in perm.iter().enumerate() {
            for r in 0..8 {
                let a = perm_v[r * 6 + new_col];
                let b = base_v[r * 6 + old_col];
                assert!((a - b).abs() < 1e-9, "({r},{new_col}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let pool = RngPool::new(16);
        let mut rng = pool.stream("init");
        let enc = UnimodalEncoder::<f64>::new(cfg(Modality::Visual, 3, 4, 4), &mut rng).unwrap();
        let mut data_rng = pool.stream("data");
        let features = rand_features(&mut data_rng, 3, 4);
        let results = gradcheck::check_leaves(
            "unimodal",
            &[("features", features.clone())],
            |t| {
                let out = enc.encode(t, &features, &mut ForwardMode::Eval)?;
                t.frobenius_sq(&out)
            },
            gradcheck::DEFAULT_STEP,
            gradcheck::COMPOSITE_TOL,
        )
        .unwrap();
        for r in results {
            assert!(r.passed(), "{}: {}", r.name, r.max_err);
        }
    }
}
