//! Adversarial refinement of modality embeddings into common and private
//! parts. A single shared generator `G` projects every modality into one
//! latent subspace; per-modality extractors `f_v, f_a, f_t` keep what is
//! specific. A shared discriminator guesses the source modality of a
//! representation: common representations are trained through a gradient
//! reversal layer until they confuse it, private ones until they feed it.
//! Orthogonality and common-semantic penalties complete the refinement.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;

use crate::nn::{bce_sum, Linear};
pub use crate::nn::PROB_CLAMP;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{contract, Tensor, TensorError};
use crate::unimodal::Modality;

/// Per-timestep MLP `d→d` (affine, nonlinearity, affine; extra hidden blocks
/// when configured deeper). Operates on time-major `τ×d` sequences.
pub struct PointwiseNet<S: Scalar> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> PointwiseNet<S> {
    pub fn new(d: usize, hidden_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        for _ in 0..hidden_layers {
            layers.push(Linear::new(d, d, rng));
        }
        layers.push(Linear::new(d, d, rng));
        PointwiseNet { layers }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, lin) in self.layers.iter().enumerate() {
            h = lin.forward(tape, &h)?;
            if i < last {
                h = tape.relu(&h)?;
            }
        }
        Ok(h)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, lin) in self.layers.iter().enumerate() {
            lin.append_params(&format!("{prefix}.lin{i}"), out);
        }
    }

    pub fn zero_all(&self) {
        for lin in &self.layers {
            lin.weight.fill(S::ZERO);
            if let Some(b) = &lin.bias {
                b.fill(S::ZERO);
            }
        }
    }
}

/// How the common sequence length `τ_c` is chosen before `C^v+C^a+C^t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommonLen {
    /// Minimum of the three native lengths (identity for aligned data).
    MinOfInputs,
    Fixed(usize),
}

/// The six refined matrices of one sample.
pub struct RefinedReps<S: Scalar> {
    /// `C^v, C^a, C^t`, each `d×τ_c`.
    pub common: [Tensor<S>; 3],
    /// `P^v, P^a, P^t`, each `d×τ_m` (native lengths).
    pub private: [Tensor<S>; 3],
}

/// Shared generator + per-modality private extractors.
pub struct Refiner<S: Scalar> {
    pub shared: PointwiseNet<S>,
    pub privates: [PointwiseNet<S>; 3],
    pub common_len: CommonLen,
}

impl<S: Scalar> Refiner<S> {
    pub fn new(
        d: usize,
        hidden_layers: usize,
        common_len: CommonLen,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Refiner {
            shared: PointwiseNet::new(d, hidden_layers, rng),
            privates: [
                PointwiseNet::new(d, hidden_layers, rng),
                PointwiseNet::new(d, hidden_layers, rng),
                PointwiseNet::new(d, hidden_layers, rng),
            ],
            common_len,
        }
    }

    /// Decomposes `(V, A, T)` (each `d×τ_m`) into common parts pooled to one
    /// shared length and private parts at native lengths.
    pub fn refine(
        &self,
        tape: &mut Tape<S>,
        embeddings: [&Tensor<S>; 3],
    ) -> Result<RefinedReps<S>, TensorError> {
        let lens = [
            embeddings[0].dims2().1,
            embeddings[1].dims2().1,
            embeddings[2].dims2().1,
        ];
        let target = match self.common_len {
            CommonLen::MinOfInputs => *lens.iter().min().expect("three lengths"),
            CommonLen::Fixed(n) => {
                if let Some(short) = lens.iter().find(|&&l| l < n) {
                    return Err(contract(format!(
                        "common length {n} exceeds a native sequence length {short}"
                    )));
                }
                n
            }
        };

        let mut common = Vec::with_capacity(3);
        let mut private = Vec::with_capacity(3);
        for (m, emb) in embeddings.iter().enumerate() {
            let seq = tape.transpose(emb)?; // τ×d
            let c_raw = self.shared.forward(tape, &seq)?;
            let c_seq = if lens[m] == target {
                c_raw
            } else {
                tape.avg_pool_rows(&c_raw, target)?
            };
            common.push(tape.transpose(&c_seq)?);
            let p_seq = self.privates[m].forward(tape, &seq)?;
            private.push(tape.transpose(&p_seq)?);
        }
        let mut c_it = common.into_iter();
        let mut p_it = private.into_iter();
        Ok(RefinedReps {
            common: [
                c_it.next().unwrap(),
                c_it.next().unwrap(),
                c_it.next().unwrap(),
            ],
            private: [
                p_it.next().unwrap(),
                p_it.next().unwrap(),
                p_it.next().unwrap(),
            ],
        })
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.shared.append_params(&format!("{prefix}.shared"), out);
        for (m, p) in self.privates.iter().enumerate() {
            p.append_params(&format!("{prefix}.private_{}", Modality::ALL[m].name()), out);
        }
    }
}

/// Discriminator bias: a broadcast 3-vector works at any sequence length;
/// the per-position `τ×3` form requires a fixed (aligned) length.
pub enum DiscriminatorBias<S: Scalar> {
    Broadcast(Tensor<S>),
    PerPosition(Tensor<S>),
}

/// Linear modality discriminator `D(I) = softmax(Iᵀ·W + b)`.
pub struct Discriminator<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: DiscriminatorBias<S>,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Tensor::matrix(
            d,
            3,
            crate::rng::normal_vec(rng, d * 3, libm::sqrt(2.0 / (d + 3) as f64)),
        )
        .expect("discriminator weight")
        .as_param();
        let bias = DiscriminatorBias::Broadcast(Tensor::vector(vec![S::ZERO; 3]).as_param());
        Discriminator { weight, bias }
    }

    pub fn new_per_position(d: usize, len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut disc = Discriminator::new(d, rng);
        disc.bias = DiscriminatorBias::PerPosition(Tensor::zeros(vec![len, 3]).as_param());
        disc
    }

    /// `I [d×τ] → τ×3` row-stochastic modality probabilities.
    pub fn discriminate(
        &self,
        tape: &mut Tape<S>,
        input: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let seq = tape.transpose(input)?; // τ×d
        let logits = tape.matmul(&seq, &self.weight)?;
        let biased = match &self.bias {
            DiscriminatorBias::Broadcast(b) => tape.add_row_broadcast(&logits, b)?,
            DiscriminatorBias::PerPosition(b) => {
                if b.dims2().0 != logits.dims2().0 {
                    return Err(contract(format!(
                        "per-position discriminator bias is {:?} but sequence length is {}",
                        b.shape(),
                        logits.dims2().0
                    )));
                }
                tape.add(&logits, b)?
            }
        };
        tape.softmax_rows(&biased)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        match &self.bias {
            DiscriminatorBias::Broadcast(b) => out.push((format!("{prefix}.bias"), b.clone())),
            DiscriminatorBias::PerPosition(b) => out.push((format!("{prefix}.bias"), b.clone())),
        }
    }
}

/// One-hot ground-truth modality label block `O^m ∈ {0,1}^{τ×3}`.
pub fn modality_label<S: Scalar>(len: usize, modality: Modality) -> Tensor<S> {
    let mut data = vec![S::ZERO; len * 3];
    for t in 0..len {
        data[t * 3 + modality.index()] = S::ONE;
    }
    Tensor::matrix(len, 3, data).expect("modality label shape")
}

fn one_rep_cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    disc: &Discriminator<S>,
    rep: &Tensor<S>,
    modality: Modality,
    reverse: bool,
) -> Result<Tensor<S>, TensorError> {
    let input = if reverse {
        tape.grad_reversal(rep)?
    } else {
        rep.clone()
    };
    let probs = disc.discriminate(tape, &input)?;
    let lo = S::from_f64(PROB_CLAMP);
    let hi = S::from_f64(1.0 - PROB_CLAMP);
    let clamped = tape.clamp(&probs, lo, hi)?;
    let log_p = tape.log(&clamped)?;
    let labels = modality_label::<S>(rep.dims2().1, modality);
    let picked = tape.mul(&log_p, &labels)?;
    tape.sum_all(&picked)
}

/// Modality cross-entropy over a batch of per-sample representation triples:
/// `−(1/n) Σ_m Σ_i O^m ⊙ log D(reps[i][m])`. With `reverse` the inputs pass
/// through the gradient reversal layer first (the common-representation
/// path); private representations train the discriminator directly.
pub fn adversarial_loss<S: Scalar>(
    tape: &mut Tape<S>,
    disc: &Discriminator<S>,
    reps: &[[Tensor<S>; 3]],
    reverse: bool,
) -> Result<Tensor<S>, TensorError> {
    if reps.is_empty() {
        return Err(contract("adversarial loss over an empty batch".into()));
    }
    let mut total: Option<Tensor<S>> = None;
    for sample in reps {
        for (m, rep) in sample.iter().enumerate() {
            let term = one_rep_cross_entropy(tape, disc, rep, Modality::ALL[m], reverse)?;
            total = Some(match total {
                Some(acc) => tape.add(&acc, &term)?,
                None => term,
            });
        }
    }
    let neg_inv_n = S::from_f64(-1.0 / reps.len() as f64);
    tape.scale(&total.expect("non-empty batch"), neg_inv_n)
}

/// Orthogonality penalty `Σ_m Σ_i ‖(C_i^m)ᵀ P_i^m‖²_F` (raw sum, no `1/n`).
/// `printed_sign` flips the result to the literal published sign, which
/// rewards redundancy; the positive penalty is the default.
pub fn orthogonality_loss<S: Scalar>(
    tape: &mut Tape<S>,
    reps: &[RefinedReps<S>],
    printed_sign: bool,
) -> Result<Tensor<S>, TensorError> {
    let mut total: Option<Tensor<S>> = None;
    for sample in reps {
        for m in 0..3 {
            let ct = tape.transpose(&sample.common[m])?;
            let cross = tape.matmul(&ct, &sample.private[m])?;
            let term = tape.frobenius_sq(&cross)?;
            total = Some(match total {
                Some(acc) => tape.add(&acc, &term)?,
                None => term,
            });
        }
    }
    let total = total.ok_or_else(|| contract("orthogonality loss over an empty batch".into()))?;
    if printed_sign {
        tape.scale(&total, -S::ONE)
    } else {
        Ok(total)
    }
}

/// Shared multi-label head over common representations: temporal mean pool,
/// affine `d→l`, sigmoid.
pub struct SemanticHead<S: Scalar> {
    pub lin: Linear<S>,
}

impl<S: Scalar> SemanticHead<S> {
    pub fn new(d: usize, labels: usize, rng: &mut ChaCha8Rng) -> Self {
        SemanticHead {
            lin: Linear::new(d, labels, rng),
        }
    }

    /// `C [d×τ] → [1×l]` label probabilities.
    pub fn predict(&self, tape: &mut Tape<S>, common: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let seq = tape.transpose(common)?;
        let pooled = tape.mean_rows(&seq)?; // [d]
        let logits = self.lin.forward(tape, &pooled)?;
        tape.sigmoid(&logits)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.lin.append_params(&format!("{prefix}.lin"), out);
    }
}

/// Common semantic loss: BCE of the shared head's predictions from each
/// modality's common representation against the sample labels (raw sum).
pub fn common_semantic_loss<S: Scalar>(
    tape: &mut Tape<S>,
    head: &SemanticHead<S>,
    reps: &[RefinedReps<S>],
    labels: &[Tensor<S>],
) -> Result<Tensor<S>, TensorError> {
    if reps.len() != labels.len() {
        return Err(contract(format!(
            "common semantic loss: {} representation sets but {} label rows",
            reps.len(),
            labels.len()
        )));
    }
    let expected_l = head.lin.weight.dims2().1;
    let mut total: Option<Tensor<S>> = None;
    for (sample, y) in reps.iter().zip(labels) {
        if y.numel() != expected_l {
            return Err(contract(format!(
                "label vector has {} entries, head expects {expected_l}",
                y.numel()
            )));
        }
        for m in 0..3 {
            let probs = head.predict(tape, &sample.common[m])?;
            let y_row = Tensor::matrix(1, expected_l, y.to_vec())?;
            let term = bce_sum(tape, &probs, &y_row)?;
            total = Some(match total {
                Some(acc) => tape.add(&acc, &term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| contract("common semantic loss over an empty batch".into()))
}
