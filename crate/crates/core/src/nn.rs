//! Layer building blocks: linear maps, layer norm, multi-head attention,
//! position-wise feed-forward, transformer encoder layers, and the sinusoidal
//! positional table. All sequence-shaped activations inside these blocks are
//! time-major (`τ×d`, one row per position).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;

use crate::rng::normal_vec;
use crate::scalar::Scalar;
use crate::tape::{NormMode, Tape};
use crate::tensor::{contract, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probabilities fed to a log are clamped into `[PROB_CLAMP, 1-PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Sum-form binary cross-entropy `−Σ y·ln(ŷ) + (1−y)·ln(1−ŷ)` with the
/// standard probability clamp. `targets` is treated as a constant.
pub fn bce_sum<S: Scalar>(
    tape: &mut Tape<S>,
    probs: &Tensor<S>,
    targets: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    if probs.shape() != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce",
            lhs: probs.shape(),
            rhs: targets.shape(),
        });
    }
    let lo = S::from_f64(PROB_CLAMP);
    let hi = S::from_f64(1.0 - PROB_CLAMP);
    let clamped = tape.clamp(probs, lo, hi)?;
    let complement_targets =
        Tensor::new(targets.shape(), targets.to_vec().iter().map(|y| S::ONE - *y).collect())?;
    let ones = Tensor::filled(probs.shape(), S::ONE);
    let log_p = tape.log(&clamped)?;
    let pos = tape.mul(targets, &log_p)?;
    let one_minus_p = tape.sub(&ones, &clamped)?;
    let log_q = tape.log(&one_minus_p)?;
    let neg = tape.mul(&complement_targets, &log_q)?;
    let total = tape.add(&pos, &neg)?;
    let summed = tape.sum_all(&total)?;
    tape.scale(&summed, -S::ONE)
}


/// Whether a forward pass is a training pass (dropout active) or not.
/// The rng lives here so one stream serves every dropout site in order.
pub enum ForwardMode {
    Eval,
    Train { dropout: f64, rng: ChaCha8Rng },
}

impl ForwardMode {
    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        ForwardMode::Train { dropout, rng }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, ForwardMode::Train { .. })
    }
}

pub(crate) fn apply_dropout<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    mode: &mut ForwardMode,
) -> Result<Tensor<S>, TensorError> {
    match mode {
        ForwardMode::Train { dropout, rng } if *dropout > 0.0 => tape.dropout(x, *dropout, rng),
        _ => Ok(x.clone()),
    }
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(2.0 / (fan_in + fan_out) as f64)
}

/// Affine map `x[m×in] → x·W + b  [m×out]`.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Tensor::matrix(
            input,
            output,
            normal_vec(rng, input * output, xavier_std(input, output)),
        )
        .expect("linear weight shape")
        .as_param();
        let bias = Tensor::vector(vec![S::ZERO; output]).as_param();
        Linear {
            weight,
            bias: Some(bias),
        }
    }

    pub fn new_no_bias(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = Linear::new(input, output, rng);
        lin.bias = None;
        lin
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let h = tape.matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => tape.add_row_broadcast(&h, b),
            None => Ok(h),
        }
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub struct LayerNorm<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
    pub eps: S,
    pub mode: NormMode,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::vector(vec![S::ONE; d]).as_param(),
            bias: Tensor::vector(vec![S::ZERO; d]).as_param(),
            eps: S::from_f64(LAYER_NORM_EPS),
            mode: NormMode::Standard,
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        tape.layer_norm_rows(x, &self.gain, &self.bias, self.eps, self.mode)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// One attention head with its own projection matrices, matching the
/// per-head parameter formulation (`W_i^q, W_i^k, W_i^v ∈ R^{d×d/h}`).
pub struct AttentionHead<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
}

impl<S: Scalar> AttentionHead<S> {
    fn new(d: usize, head_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = xavier_std(d, head_dim);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::matrix(d, head_dim, normal_vec(rng, d * head_dim, std))
                .expect("head weight shape")
                .as_param()
        };
        AttentionHead {
            wq: mk(rng),
            wk: mk(rng),
            wv: mk(rng),
        }
    }
}

/// Multi-head scaled dot-product attention with concatenated heads projected
/// by one output matrix. Queries may come from a different stream than
/// keys/values (cross-attention); self-attention passes the same tensor twice.
pub struct MultiHeadAttention<S: Scalar> {
    pub heads: Vec<AttentionHead<S>>,
    pub out_proj: Tensor<S>,
    pub head_dim: usize,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!(
                "attention: model dim {d} not divisible by {heads} heads"
            )));
        }
        let head_dim = d / heads;
        let heads_vec = (0..heads)
            .map(|_| AttentionHead::new(d, head_dim, rng))
            .collect();
        let out_proj = Tensor::matrix(d, d, normal_vec(rng, d * d, xavier_std(d, d)))
            .expect("out_proj shape")
            .as_param();
        Ok(MultiHeadAttention {
            heads: heads_vec,
            out_proj,
            head_dim,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        queries_from: &Tensor<S>,
        keys_values_from: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        self.forward_scored(tape, queries_from, keys_values_from)
            .map(|(out, _)| out)
    }

    /// Like `forward` but also returns each head's raw (pre-scaling,
    /// pre-softmax) score matrix `q·kᵀ`.
    pub fn forward_scored(
        &self,
        tape: &mut Tape<S>,
        queries_from: &Tensor<S>,
        keys_values_from: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>), TensorError> {
        let scale = S::from_f64(1.0 / libm::sqrt(self.head_dim as f64));
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        let mut raw_scores = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = tape.matmul(queries_from, &head.wq)?;
            let k = tape.matmul(keys_values_from, &head.wk)?;
            let v = tape.matmul(keys_values_from, &head.wv)?;
            let kt = tape.transpose(&k)?;
            let scores = tape.matmul(&q, &kt)?;
            let scaled = tape.scale(&scores, scale)?;
            let attn = tape.softmax_rows(&scaled)?;
            head_outputs.push(tape.matmul(&attn, &v)?);
            raw_scores.push(scores);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        let out = tape.matmul(&concat, &self.out_proj)?;
        Ok((out, raw_scores))
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.h{i}.wq"), h.wq.clone()));
            out.push((format!("{prefix}.h{i}.wk"), h.wk.clone()));
            out.push((format!("{prefix}.h{i}.wv"), h.wv.clone()));
        }
        out.push((format!("{prefix}.out_proj"), self.out_proj.clone()));
    }
}

/// Position-wise feed-forward block (two affine maps around a GELU).
pub struct FeedForward<S: Scalar> {
    pub lin1: Linear<S>,
    pub lin2: Linear<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn new(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            lin1: Linear::new(d, hidden, rng),
            lin2: Linear::new(hidden, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let h = self.lin1.forward(tape, x)?;
        let h = tape.gelu(&h)?;
        self.lin2.forward(tape, &h)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.lin1.append_params(&format!("{prefix}.lin1"), out);
        self.lin2.append_params(&format!("{prefix}.lin2"), out);
    }
}

/// Transformer encoder layer: self-attention and feed-forward sub-layers,
/// each with a residual connection followed by layer normalization (post-LN).
pub struct EncoderLayer<S: Scalar> {
    pub attn: MultiHeadAttention<S>,
    pub ln1: LayerNorm<S>,
    pub ffn: FeedForward<S>,
    pub ln2: LayerNorm<S>,
}

impl<S: Scalar> EncoderLayer<S> {
    pub fn new(
        d: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(d, heads, rng)?,
            ln1: LayerNorm::new(d),
            ffn: FeedForward::new(d, ffn_dim, rng),
            ln2: LayerNorm::new(d),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        mode: &mut ForwardMode,
    ) -> Result<Tensor<S>, TensorError> {
        let a = self.attn.forward(tape, x, x)?;
        let a = apply_dropout(tape, &a, mode)?;
        let res = tape.add(x, &a)?;
        let x1 = self.ln1.forward(tape, &res)?;
        let f = self.ffn.forward(tape, &x1)?;
        let f = apply_dropout(tape, &f, mode)?;
        let res2 = tape.add(&x1, &f)?;
        self.ln2.forward(tape, &res2)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.attn.append_params(&format!("{prefix}.attn"), out);
        self.ln1.append_params(&format!("{prefix}.ln1"), out);
        self.ffn.append_params(&format!("{prefix}.ffn"), out);
        self.ln2.append_params(&format!("{prefix}.ln2"), out);
    }

    /// Zeroes the attention and feed-forward weights, leaving only the
    /// residual path. Used by residual-identity diagnostics.
    pub fn zero_sublayers(&self) {
        for h in &self.attn.heads {
            h.wq.fill(S::ZERO);
            h.wk.fill(S::ZERO);
            h.wv.fill(S::ZERO);
        }
        self.attn.out_proj.fill(S::ZERO);
        self.ffn.lin1.weight.fill(S::ZERO);
        self.ffn.lin2.weight.fill(S::ZERO);
        if let Some(b) = &self.ffn.lin1.bias {
            b.fill(S::ZERO);
        }
        if let Some(b) = &self.ffn.lin2.bias {
            b.fill(S::ZERO);
        }
    }

    /// Switches both layer norms to the affine-only diagnostic mode.
    pub fn set_norms_affine_only(&mut self) {
        self.ln1.mode = NormMode::AffineOnly;
        self.ln2.mode = NormMode::AffineOnly;
    }
}

/// Fixed sinusoidal positional table, one row per position (`len×d`).
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / libm::pow(10_000.0, 2.0 * pair / d as f64);
            let v = if j % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
            data.push(S::from_f64(v));
        }
    }
    Tensor::matrix(len, d, data).expect("positional table shape")
}
