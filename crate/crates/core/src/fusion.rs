//! Cross-modal fusion. A Cross-Modal Encoder (CME) concatenates two streams
//! along time, marks each stream with a learned modality token embedding,
//! adds sinusoidal positions over the joint length, and runs a transformer
//! encoder stack. Three chained CMEs fuse the private streams and the summed
//! common representation in granularity-descent order, producing the joint
//! representation `M`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use rand_chacha::ChaCha8Rng;

use crate::nn::{sinusoidal_positions, EncoderLayer, ForwardMode};
use crate::rng::normal_vec;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{contract, Tensor, TensorError};

/// The four fusable streams: three private modality streams plus the summed
/// common representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Visual,
    Audio,
    Text,
    Common,
}

impl StreamKind {
    fn from_char(c: char) -> Option<Self> {
        match c {
            'v' => Some(StreamKind::Visual),
            'a' => Some(StreamKind::Audio),
            't' => Some(StreamKind::Text),
            'c' => Some(StreamKind::Common),
            _ => None,
        }
    }

    fn as_char(self) -> char {
        match self {
            StreamKind::Visual => 'v',
            StreamKind::Audio => 'a',
            StreamKind::Text => 't',
            StreamKind::Common => 'c',
        }
    }
}

/// Permutation of `[v, a, t, c]` controlling the fusion hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionOrder(pub [StreamKind; 4]);

impl FusionOrder {
    pub const DEFAULT: FusionOrder = FusionOrder([
        StreamKind::Visual,
        StreamKind::Audio,
        StreamKind::Text,
        StreamKind::Common,
    ]);

    /// Parses a four-letter order such as `"vatc"`; each of `v a t c` must
    /// appear exactly once.
    pub fn parse(s: &str) -> Result<Self, TensorError> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 4 {
            return Err(contract(format!(
                "fusion order must have exactly 4 symbols, got {s:?}"
            )));
        }
        let mut kinds = [StreamKind::Visual; 4];
        let mut seen = [false; 4];
        for (i, c) in chars.iter().enumerate() {
            let kind = StreamKind::from_char(*c)
                .ok_or_else(|| contract(format!("invalid fusion symbol {c:?} in {s:?}")))?;
            let idx = kind as usize;
            if seen[idx] {
                return Err(contract(format!("fusion order {s:?} repeats {c:?}")));
            }
            seen[idx] = true;
            kinds[i] = kind;
        }
        Ok(FusionOrder(kinds))
    }
}

impl fmt::Display for FusionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in self.0 {
            write!(f, "{}", k.as_char())?;
        }
        Ok(())
    }
}

/// Shape of the learned per-stream token embeddings. The feature-vector form
/// (one `d` vector per stream, broadcast along time) is the default; the
/// per-timestep scalar form (one scalar per position, broadcast over
/// features) requires fixed sequence lengths and exists for fidelity
/// comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    FeatureVector,
    PerTimestepScalar { len_a: usize, len_b: usize },
}

/// Encoder over the time-concatenation of two streams.
pub struct CrossModalEncoder<S: Scalar> {
    pub token_a: Tensor<S>,
    pub token_b: Tensor<S>,
    pub layers: Vec<EncoderLayer<S>>,
    pub token_mode: TokenMode,
}

impl<S: Scalar> CrossModalEncoder<S> {
    pub fn new(
        d: usize,
        heads: usize,
        ffn_dim: usize,
        layers: usize,
        token_mode: TokenMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        let (ta_len, tb_len) = match token_mode {
            TokenMode::FeatureVector => (d, d),
            TokenMode::PerTimestepScalar { len_a, len_b } => (len_a, len_b),
        };
        let token_a = Tensor::vector(normal_vec(rng, ta_len, 0.02)).as_param();
        let token_b = Tensor::vector(normal_vec(rng, tb_len, 0.02)).as_param();
        let layers = (0..layers)
            .map(|_| EncoderLayer::new(d, heads, ffn_dim, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CrossModalEncoder {
            token_a,
            token_b,
            layers,
            token_mode,
        })
    }

    /// `CME(A, B)`: `a [d×τ_a], b [d×τ_b] → [d×(τ_a+τ_b)]`.
    pub fn fuse(
        &self,
        tape: &mut Tape<S>,
        a: &Tensor<S>,
        b: &Tensor<S>,
        use_tokens: bool,
        mode: &mut ForwardMode,
    ) -> Result<Tensor<S>, TensorError> {
        let d = a.dims2().0;
        let joint = a.dims2().1 + b.dims2().1;
        let positions = sinusoidal_positions(joint, d);
        self.fuse_with_positions(tape, a, b, use_tokens, &positions, mode)
    }

    /// `fuse` with an explicit positional table (`(τ_a+τ_b)×d`); diagnostics
    /// pass zeros here to probe the residual path.
    pub fn fuse_with_positions(
        &self,
        tape: &mut Tape<S>,
        a: &Tensor<S>,
        b: &Tensor<S>,
        use_tokens: bool,
        positions: &Tensor<S>,
        mode: &mut ForwardMode,
    ) -> Result<Tensor<S>, TensorError> {
        let (da, ta) = a.dims2();
        let (db, tb) = b.dims2();
        if da != db {
            return Err(TensorError::ShapeMismatch {
                op: "cme",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut seq_a = tape.transpose(a)?; // τ_a×d
        let mut seq_b = tape.transpose(b)?;
        if use_tokens {
            match self.token_mode {
                TokenMode::FeatureVector => {
                    seq_a = tape.add_row_broadcast(&seq_a, &self.token_a)?;
                    seq_b = tape.add_row_broadcast(&seq_b, &self.token_b)?;
                }
                TokenMode::PerTimestepScalar { len_a, len_b } => {
                    if ta != len_a || tb != len_b {
                        return Err(contract(format!(
                            "per-timestep token embeddings sized for {len_a}+{len_b} \
                             cannot serve sequences of length {ta}+{tb}"
                        )));
                    }
                    seq_a = tape.add_col_broadcast(&seq_a, &self.token_a)?;
                    seq_b = tape.add_col_broadcast(&seq_b, &self.token_b)?;
                }
            }
        }
        let joint = tape.concat_rows(&[seq_a, seq_b])?;
        if positions.dims2() != joint.dims2() {
            return Err(TensorError::ShapeMismatch {
                op: "cme_positions",
                lhs: joint.shape(),
                rhs: positions.shape(),
            });
        }
        let mut h = tape.add(&joint, positions)?;
        for layer in &self.layers {
            h = layer.forward(tape, &h, mode)?;
        }
        tape.transpose(&h)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.token_a"), self.token_a.clone()));
        out.push((format!("{prefix}.token_b"), self.token_b.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.append_params(&format!("{prefix}.layer{i}"), out);
        }
    }
}

/// Three CME levels with disjoint parameters, folded over the fusion order.
pub struct HierarchicalFusion<S: Scalar> {
    pub levels: [CrossModalEncoder<S>; 3],
    pub order: FusionOrder,
    pub use_tokens: bool,
}

impl<S: Scalar> HierarchicalFusion<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        heads: usize,
        ffn_dim: usize,
        layers_per_level: usize,
        order: FusionOrder,
        token_mode: TokenMode,
        use_tokens: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        let mk = |rng: &mut ChaCha8Rng| {
            CrossModalEncoder::new(d, heads, ffn_dim, layers_per_level, token_mode, rng)
        };
        Ok(HierarchicalFusion {
            levels: [mk(rng)?, mk(rng)?, mk(rng)?],
            order,
            use_tokens,
        })
    }

    /// Fuses the three private streams and the summed common stream in the
    /// configured order: `Z₁ = CME(s₁, s₂); Z₂ = CME(Z₁, s₃); M = CME(Z₂, s₄)`.
    pub fn fuse(
        &self,
        tape: &mut Tape<S>,
        private: [&Tensor<S>; 3],
        common: &Tensor<S>,
        mode: &mut ForwardMode,
    ) -> Result<Tensor<S>, TensorError> {
        let stream = |kind: StreamKind| -> &Tensor<S> {
            match kind {
                StreamKind::Visual => private[0],
                StreamKind::Audio => private[1],
                StreamKind::Text => private[2],
                StreamKind::Common => common,
            }
        };
        let [s1, s2, s3, s4] = self.order.0;
        let z1 = self.levels[0].fuse(tape, stream(s1), stream(s2), self.use_tokens, mode)?;
        let z2 = self.levels[1].fuse(tape, &z1, stream(s3), self.use_tokens, mode)?;
        self.levels[2].fuse(tape, &z2, stream(s4), self.use_tokens, mode)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, level) in self.levels.iter().enumerate() {
            level.append_params(&format!("{prefix}.level{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngPool;
    use alloc::vec;
    use rand::Rng;

    fn rand_stream(rng: &mut ChaCha8Rng, d: usize, len: usize) -> Tensor<f64> {
        Tensor::matrix(
            d,
            len,
            (0..d * len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fusion_order_parses_permutations_only() {
        assert_eq!(FusionOrder::parse("vatc").unwrap(), FusionOrder::DEFAULT);
        assert!(FusionOrder::parse("atvc").is_ok());
        assert!(FusionOrder::parse("vvtc").is_err());
        assert!(FusionOrder::parse("vat").is_err());
        assert!(FusionOrder::parse("vatx").is_err());
        assert_eq!(format!("{}", FusionOrder::DEFAULT), "vatc");
    }

    #[test]
    fn cme_concatenates_time_axes() {
        let pool = RngPool::new(40);
        let mut rng = pool.stream("init");
        let cme =
            CrossModalEncoder::<f64>::new(256, 8, 512, 1, TokenMode::FeatureVector, &mut rng)
                .unwrap();
        let mut data_rng = pool.stream("data");
        let a = rand_stream(&mut data_rng, 256, 60);
        let b = rand_stream(&mut data_rng, 256, 60);
        let mut tape = Tape::new();
        let z = cme
            .fuse(&mut tape, &a, &b, true, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(z.shape(), vec![256, 120]);
    }

    #[test]
    fn zeroed_cme_reduces_to_concatenation() {
        let pool = RngPool::new(41);
        let mut rng = pool.stream("init");
        let mut cme =
            CrossModalEncoder::<f64>::new(6, 2, 12, 2, TokenMode::FeatureVector, &mut rng)
                .unwrap();
        for layer in &mut cme.layers {
            layer.zero_sublayers();
            layer.set_norms_affine_only();
        }
        cme.token_a.fill(0.0);
        cme.token_b.fill(0.0);
        let mut data_rng = pool.stream("data");
        let a = rand_stream(&mut data_rng, 6, 4);
        let b = rand_stream(&mut data_rng, 6, 3);
        let zero_positions = Tensor::zeros(vec![7, 6]);
        let mut tape = Tape::new();
        let z = cme
            .fuse_with_positions(
                &mut tape,
                &a,
                &b,
                true,
                &zero_positions,
                &mut ForwardMode::Eval,
            )
            .unwrap();
        let expected = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(z.shape(), expected.shape());
        for (x, y) in z.to_vec().iter().zip(expected.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_token_slots_changes_the_output() {
        let pool = RngPool::new(42);
        let mut rng = pool.stream("init");
        let cme = CrossModalEncoder::<f64>::new(4, 2, 8, 1, TokenMode::FeatureVector, &mut rng)
            .unwrap();
        let mut data_rng = pool.stream("data");
        let a = rand_stream(&mut data_rng, 4, 3);
        let b = rand_stream(&mut data_rng, 4, 3);

        let run = |cme: &CrossModalEncoder<f64>| {
            let mut tape = Tape::new();
            cme.fuse(&mut tape, &a, &b, true, &mut ForwardMode::Eval)
                .unwrap()
                .to_vec()
        };
        let base = run(&cme);
        let ta = cme.token_a.to_vec();
        let tb = cme.token_b.to_vec();
        cme.token_a.set_data(&tb);
        cme.token_b.set_data(&ta);
        let swapped = run(&cme);
        assert_ne!(base, swapped);
    }

    #[test]
    fn per_timestep_scalar_tokens_require_fixed_lengths() {
        let pool = RngPool::new(43);
        let mut rng = pool.stream("init");
        let cme = CrossModalEncoder::<f64>::new(
            4,
            2,
            8,
            1,
            TokenMode::PerTimestepScalar { len_a: 3, len_b: 2 },
            &mut rng,
        )
        .unwrap();
        let mut data_rng = pool.stream("data");
        let a = rand_stream(&mut data_rng, 4, 3);
        let b = rand_stream(&mut data_rng, 4, 2);
        let mut tape = Tape::new();
        assert!(cme
            .fuse(&mut tape, &a, &b, true, &mut ForwardMode::Eval)
            .is_ok());
        let b_wrong = rand_stream(&mut data_rng, 4, 4);
        assert!(cme
            .fuse(&mut tape, &a, &b_wrong, true, &mut ForwardMode::Eval)
            .is_err());
    }

    #[test]
    fn hierarchy_produces_four_tau_for_aligned_lengths() {
        let pool = RngPool::new(44);
        let mut rng = pool.stream("init");
        let fusion = HierarchicalFusion::<f64>::new(
            8,
            2,
            16,
            1,
            FusionOrder::DEFAULT,
            TokenMode::FeatureVector,
            true,
            &mut rng,
        )
        .unwrap();
        let mut data_rng = pool.stream("data");
        let p: Vec<Tensor<f64>> = (0..3).map(|_| rand_stream(&mut data_rng, 8, 5)).collect();
        let c = rand_stream(&mut data_rng, 8, 5);
        let mut tape = Tape::new();
        let m = fusion
            .fuse(
                &mut tape,
                [&p[0], &p[1], &p[2]],
                &c,
                &mut ForwardMode::Eval,
            )
            .unwrap();
        assert_eq!(m.shape(), vec![8, 20]);
    }


    #[test]
    fn full_scale_aligned_hierarchy_yields_four_tau() {
        let pool = RngPool::new(48);
        let mut rng = pool.stream("init");
        let fusion = HierarchicalFusion::<f64>::new(
            256,
            8,
            512,
            1,
            FusionOrder::DEFAULT,
            TokenMode::FeatureVector,
            true,
            &mut rng,
        )
        .unwrap();
        let mut data_rng = pool.stream("data");
        let p: Vec<Tensor<f64>> = (0..3).map(|_| rand_stream(&mut data_rng, 256, 60)).collect();
        let c = rand_stream(&mut data_rng, 256, 60);
        let mut tape = Tape::new();
        let m = fusion
            .fuse(&mut tape, [&p[0], &p[1], &p[2]], &c, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(m.shape(), vec![256, 240]);
    }

    #[test]
    fn unaligned_lengths_sum_after_reconciliation() {
        let pool = RngPool::new(45);
        let mut rng = pool.stream("init");
        let fusion = HierarchicalFusion::<f64>::new(
            4,
            2,
            8,
            1,
            FusionOrder::DEFAULT,
            TokenMode::FeatureVector,
            true,
            &mut rng,
        )
        .unwrap();
        let mut data_rng = pool.stream("data");
        let pv = rand_stream(&mut data_rng, 4, 12);
        let pa = rand_stream(&mut data_rng, 4, 9);
        let pt = rand_stream(&mut data_rng, 4, 5);
        let c = rand_stream(&mut data_rng, 4, 5); // already reconciled to τ_c = 5
        let mut tape = Tape::new();
        let m = fusion
            .fuse(&mut tape, [&pv, &pa, &pt], &c, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(m.shape(), vec![4, 12 + 9 + 5 + 5]);
    }

    #[test]
    fn different_orders_consume_different_operands() {
        let pool = RngPool::new(46);
        let mut rng = pool.stream("init");
        let mk = |order: &str, rng_seed: u64| {
            let mut r = RngPool::new(rng_seed).stream("init");
            HierarchicalFusion::<f64>::new(
                4,
                2,
                8,
                1,
                FusionOrder::parse(order).unwrap(),
                TokenMode::FeatureVector,
                true,
                &mut r,
            )
            .unwrap()
        };
        let _ = &mut rng;
        let f_default = mk("vatc", 77);
        let f_alt = mk("atvc", 77); // identical parameters, different wiring
        let mut data_rng = pool.stream("data");
        let pv = rand_stream(&mut data_rng, 4, 3);
        let pa = rand_stream(&mut data_rng, 4, 3);
        let pt = rand_stream(&mut data_rng, 4, 3);
        let c = rand_stream(&mut data_rng, 4, 3);
        let run = |f: &HierarchicalFusion<f64>| {
            let mut tape = Tape::new();
            f.fuse(&mut tape, [&pv, &pa, &pt], &c, &mut ForwardMode::Eval)
                .unwrap()
                .to_vec()
        };
        assert_ne!(run(&f_default), run(&f_alt));
    }

    #[test]
    fn levels_own_disjoint_parameters() {
        let pool = RngPool::new(47);
        let mut rng = pool.stream("init");
        let fusion = HierarchicalFusion::<f64>::new(
            4,
            2,
            8,
            1,
            FusionOrder::DEFAULT,
            TokenMode::FeatureVector,
            true,
            &mut rng,
        )
        .unwrap();
        let mut params = Vec::new();
        fusion.append_params("fusion", &mut params);
        let mut ids: Vec<usize> = params.iter().map(|(_, p)| p.id()).collect();
        let before = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(before, ids.len(), "levels must not share parameter storage");
    }
}
