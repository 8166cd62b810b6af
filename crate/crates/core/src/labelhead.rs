//! Label-guided decoding. Learned label embeddings attend over each other
//! (exposing the per-head label correlation matrices), then query the fused
//! multi-modal representation through cross-attention; a feed-forward block
//! produces one tailored representation per label, and per-label classifiers
//! emit independent probabilities.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;

use crate::nn::{bce_sum, FeedForward, LayerNorm, MultiHeadAttention};
use crate::rng::normal_vec;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{contract, Tensor, TensorError};

/// Learned label embedding table `L ∈ R^{l×d}`, one row per label index,
/// initialized from a zero-mean Gaussian (scale 0.02).
pub fn label_embedding<S: Scalar>(labels: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::matrix(labels, d, normal_vec(rng, labels * d, 0.02))
        .expect("label embedding shape")
        .as_param()
}

/// Self-attention over label embeddings. Returns the refreshed embeddings
/// `LN(L + S)` together with each head's raw correlation matrix `r = q·kᵀ`.
pub struct LabelSelfAttention<S: Scalar> {
    pub attn: MultiHeadAttention<S>,
    pub ln: LayerNorm<S>,
}

impl<S: Scalar> LabelSelfAttention<S> {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        Ok(LabelSelfAttention {
            attn: MultiHeadAttention::new(d, heads, rng)?,
            ln: LayerNorm::new(d),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        embedding: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>), TensorError> {
        let (mixed, correlations) = self.attn.forward_scored(tape, embedding, embedding)?;
        let residual = tape.add(embedding, &mixed)?;
        let out = self.ln.forward(tape, &residual)?;
        Ok((out, correlations))
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.attn.append_params(&format!("{prefix}.attn"), out);
        self.ln.append_params(&format!("{prefix}.ln"), out);
    }
}

/// Row-softmax of a raw correlation matrix under the same `1/√(d/h)` scaling
/// the attention itself uses; this is the exported "influence" view.
pub fn scaled_row_softmax<S: Scalar>(raw: &Tensor<S>, head_dim: usize) -> Vec<Vec<f64>> {
    let (rows, cols) = raw.dims2();
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let data = raw.to_vec();
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let row: Vec<f64> = data[i * cols..(i + 1) * cols]
            .iter()
            .map(|v| v.to_f64() * scale)
            .collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - mx)).collect();
        let sum: f64 = exps.iter().sum();
        out.push(exps.into_iter().map(|e| e / sum).collect());
    }
    out
}

/// Cross-attention from label space into the fused representation, followed
/// by a feed-forward refinement: `L̂ = LN(L + Dep); H = LN(L̂ + FFN(L̂))`.
pub struct LabelDecoder<S: Scalar> {
    pub cross: MultiHeadAttention<S>,
    pub ln1: LayerNorm<S>,
    pub ffn: FeedForward<S>,
    pub ln2: LayerNorm<S>,
}

impl<S: Scalar> LabelDecoder<S> {
    pub fn new(
        d: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        Ok(LabelDecoder {
            cross: MultiHeadAttention::new(d, heads, rng)?,
            ln1: LayerNorm::new(d),
            ffn: FeedForward::new(d, ffn_dim, rng),
            ln2: LayerNorm::new(d),
        })
    }

    /// `labels [l×d]`, `fused [d×L_M] → H [l×d]`.
    pub fn decode(
        &self,
        tape: &mut Tape<S>,
        labels: &Tensor<S>,
        fused: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        if labels.dims2().1 != fused.dims2().0 {
            return Err(TensorError::ShapeMismatch {
                op: "label_decode",
                lhs: labels.shape(),
                rhs: fused.shape(),
            });
        }
        let keys_values = tape.transpose(fused)?; // L_M×d
        let dep = self.cross.forward(tape, labels, &keys_values)?;
        let residual = tape.add(labels, &dep)?;
        let refined = self.ln1.forward(tape, &residual)?;
        let f = self.ffn.forward(tape, &refined)?;
        let residual2 = tape.add(&refined, &f)?;
        self.ln2.forward(tape, &residual2)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.cross.append_params(&format!("{prefix}.cross"), out);
        self.ln1.append_params(&format!("{prefix}.ln1"), out);
        self.ffn.append_params(&format!("{prefix}.ffn"), out);
        self.ln2.append_params(&format!("{prefix}.ln2"), out);
    }
}

/// Independent per-label affine scorers: `F_k = sigmoid(H_k·W_k + b_k)`.
pub struct LabelClassifier<S: Scalar> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LabelClassifier<S> {
    pub fn new(labels: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = libm::sqrt(2.0 / (feature_dim + 1) as f64);
        LabelClassifier {
            weights: Tensor::matrix(labels, feature_dim, normal_vec(rng, labels * feature_dim, std))
                .expect("classifier weights")
                .as_param(),
            bias: Tensor::vector(alloc::vec![S::ZERO; labels]).as_param(),
        }
    }

    /// `features [l×f] → [l]` probabilities, one per label, each from its own
    /// weight row.
    pub fn classify(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        if features.shape() != self.weights.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "classify",
                lhs: features.shape(),
                rhs: self.weights.shape(),
            });
        }
        let weighted = tape.mul(features, &self.weights)?;
        let dots = tape.sum_cols(&weighted)?; // [l]
        let logits = tape.add(&dots, &self.bias)?;
        tape.sigmoid(&logits)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weights"), self.weights.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Multi-label classification loss: raw-sum BCE over the batch.
pub fn multi_label_loss<S: Scalar>(
    tape: &mut Tape<S>,
    probs: &[Tensor<S>],
    labels: &[Tensor<S>],
) -> Result<Tensor<S>, TensorError> {
    if probs.len() != labels.len() {
        return Err(contract(format!(
            "multi-label loss: {} predictions vs {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let mut total: Option<Tensor<S>> = None;
    for (p, y) in probs.iter().zip(labels) {
        if p.numel() != y.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "multi_label_loss",
                lhs: p.shape(),
                rhs: y.shape(),
            });
        }
        let y_shaped = Tensor::new(p.shape(), y.to_vec())?;
        let term = bce_sum(tape, p, &y_shaped)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    total.ok_or_else(|| contract("multi-label loss over an empty batch".into()))
}
