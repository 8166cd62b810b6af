//! The assembled network and its composite objective: per-modality encoders,
//! adversarial refinement, hierarchical fusion, and the label-guided head,
//! with ablation switches wired through the configuration.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::amr::{
    adversarial_loss, common_semantic_loss, orthogonality_loss, CommonLen, Discriminator,
    RefinedReps, Refiner, SemanticHead,
};
use crate::data::Sample;
use crate::fusion::{FusionOrder, HierarchicalFusion, TokenMode};
use crate::labelhead::{
    label_embedding, multi_label_loss, scaled_row_softmax, LabelClassifier, LabelDecoder,
    LabelSelfAttention,
};
use crate::nn::{ForwardMode, Linear};
use crate::rng::RngPool;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{contract, Tensor, TensorError};
use crate::unimodal::{Modality, ModalityConfig, UnimodalEncoder};

/// Feature dimensions and maximum sequence lengths of the data, plus the
/// label count; read from the dataset manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataDims {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub visual_len: usize,
    pub audio_len: usize,
    pub text_len: usize,
    pub label_count: usize,
}

impl DataDims {
    pub fn modality_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual_dim,
            Modality::Audio => self.audio_dim,
            Modality::Text => self.text_dim,
        }
    }

    pub fn modality_len(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual_len,
            Modality::Audio => self.audio_len,
            Modality::Text => self.text_len,
        }
    }
}

/// Component switches mirroring the ablation axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationFlags {
    /// Drop every refinement loss; the objective collapses to the
    /// classification loss alone.
    pub disable_amr: bool,
    /// Drop only the orthogonality penalty.
    pub disable_diff: bool,
    /// Drop only the common semantic loss.
    pub disable_cml: bool,
    pub fusion_order: FusionOrder,
    /// Fuse without modality token embeddings.
    pub disable_token_embeddings: bool,
    /// Replace the label head with a dense layer on the pooled fusion
    /// (an identical representation for every label).
    pub identical_head: bool,
    /// Skip label self-attention; raw label embeddings drive the head.
    pub disable_label_correlation: bool,
    /// Replace cross-attention decoding with per-label classification over
    /// the label embedding concatenated with the pooled fusion.
    pub disable_label_modal_attention: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            disable_amr: false,
            disable_diff: false,
            disable_cml: false,
            fusion_order: FusionOrder::DEFAULT,
            disable_token_embeddings: false,
            identical_head: false,
            disable_label_correlation: false,
            disable_label_modal_attention: false,
        }
    }
}

/// Every architecture and training hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub label_attn_heads: usize,
    pub decoder_heads: usize,
    pub encoder_heads: usize,
    pub visual_layers: usize,
    pub audio_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub ffn_multiplier: usize,
    pub refine_hidden_layers: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Common sequence length before `C^v+C^a+C^t`; `None` pools to the
    /// minimum of the native lengths (identity for aligned data).
    pub common_len: Option<usize>,
    /// Use the literal per-timestep scalar token embeddings instead of the
    /// default per-stream feature vectors.
    pub scalar_token_embeddings: bool,
    /// Per-position discriminator bias (`τ×3`) instead of a broadcast
    /// 3-vector; aligned lengths only.
    pub per_position_discriminator_bias: bool,
    /// Keep the published sign of the orthogonality term (which rewards
    /// redundancy) instead of the corrected positive penalty.
    pub printed_diff_sign: bool,
    /// Report subset accuracy instead of Jaccard accuracy.
    pub subset_accuracy: bool,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 256,
            label_attn_heads: 8,
            decoder_heads: 8,
            encoder_heads: 8,
            visual_layers: 4,
            audio_layers: 4,
            text_layers: 6,
            fusion_layers: 3,
            ffn_multiplier: 4,
            refine_hidden_layers: 1,
            alpha: 0.01,
            beta: 5e-6,
            gamma: 0.5,
            batch_size: 64,
            base_lr: 1e-5,
            warmup_fraction: 0.1,
            epochs: 100,
            patience: 20,
            seed: 0,
            dropout: 0.1,
            common_len: None,
            scalar_token_embeddings: false,
            per_position_discriminator_bias: false,
            printed_diff_sign: false,
            subset_accuracy: false,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, dims: &DataDims) -> Result<(), TensorError> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(contract("alpha, beta, gamma must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(contract(format!(
                "warmup_fraction {} outside [0,1]",
                self.warmup_fraction
            )));
        }
        for (name, heads) in [
            ("encoder_heads", self.encoder_heads),
            ("label_attn_heads", self.label_attn_heads),
            ("decoder_heads", self.decoder_heads),
        ] {
            if heads == 0 || self.model_dim % heads != 0 {
                return Err(contract(format!(
                    "model_dim {} not divisible by {name} {heads}",
                    self.model_dim
                )));
            }
        }
        if dims.label_count == 0 {
            return Err(contract("label count must be positive".into()));
        }
        let aligned = dims.visual_len == dims.audio_len && dims.audio_len == dims.text_len;
        if (self.scalar_token_embeddings || self.per_position_discriminator_bias) && !aligned {
            return Err(contract(
                "per-timestep token embeddings and per-position discriminator bias \
                 require aligned sequence lengths"
                    .into(),
            ));
        }
        if let Some(n) = self.common_len {
            let min_len = dims.visual_len.min(dims.audio_len).min(dims.text_len);
            if n == 0 || n > min_len {
                return Err(contract(format!(
                    "common_len {n} outside 1..={min_len}"
                )));
            }
        }
        Ok(())
    }

    /// The common length this config produces for full-length sequences.
    pub fn effective_common_len(&self, dims: &DataDims) -> usize {
        self.common_len
            .unwrap_or_else(|| dims.visual_len.min(dims.audio_len).min(dims.text_len))
    }
}

/// The head variant selected by the ablation flags.
pub enum DecodeStage<S: Scalar> {
    /// Full label-guided decode: cross-attention into the fused sequence,
    /// feed-forward refinement, per-label classifiers.
    Attention {
        decoder: LabelDecoder<S>,
        classifier: LabelClassifier<S>,
    },
    /// Per-label classification over `[label embedding ; pooled fusion]`.
    PooledConcat { classifier: LabelClassifier<S> },
    /// One dense layer on the pooled fusion; no label-specific features.
    Identical { dense: Linear<S> },
}

pub struct LabelPipeline<S: Scalar> {
    pub embedding: Tensor<S>,
    pub self_attn: Option<LabelSelfAttention<S>>,
    pub stage: DecodeStage<S>,
}

/// Snapshot of the loss components of one batch, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub ml: f64,
    pub common: f64,
    pub private: f64,
    pub diff: f64,
    pub cml: f64,
    pub total: f64,
}

/// In-graph loss terms; absent terms are ablated.
pub struct LossTerms<S: Scalar> {
    pub ml: Tensor<S>,
    pub common: Option<Tensor<S>>,
    pub private: Option<Tensor<S>>,
    pub diff: Option<Tensor<S>>,
    pub cml: Option<Tensor<S>>,
}

/// `L_ml + α(L_C + L_P) + β·L_diff + γ·L_cml`, skipping ablated terms.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    terms: &LossTerms<S>,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<Tensor<S>, TensorError> {
    let mut acc = terms.ml.clone();
    for (term, weight) in [
        (&terms.common, alpha),
        (&terms.private, alpha),
        (&terms.diff, beta),
        (&terms.cml, gamma),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, S::from_f64(weight))?;
            acc = tape.add(&acc, &scaled)?;
        }
    }
    Ok(acc)
}

pub struct SampleOutput<S: Scalar> {
    /// Per-label probabilities (numel = label count).
    pub probs: Tensor<S>,
    pub reps: RefinedReps<S>,
    /// Joint representation `M [d × Στ]`.
    pub fused: Tensor<S>,
}

pub struct BatchOutput<S: Scalar> {
    pub probs: Vec<Tensor<S>>,
    pub total: Tensor<S>,
    pub values: LossValues,
}

/// Mean discriminator responses on a probe batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiscriminatorProbe {
    /// `common_mean[m]` = mean `D(C^m)` rows, per source modality `m`.
    pub common_mean: [[f64; 3]; 3],
    /// `private_mean[m]` = mean `D(P^m)` rows.
    pub private_mean: [[f64; 3]; 3],
    /// Fraction of (sample, modality) pairs whose private representation is
    /// rated highest for its true modality.
    pub private_top1: f64,
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub encoders: [UnimodalEncoder<S>; 3],
    pub refiner: Refiner<S>,
    pub discriminator: Discriminator<S>,
    pub semantic_head: SemanticHead<S>,
    pub fusion: HierarchicalFusion<S>,
    pub labels: LabelPipeline<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, dims: DataDims) -> Result<Self, TensorError> {
        config.validate(&dims)?;
        let pool = RngPool::new(config.seed);
        let mut rng = pool.stream("init");
        let d = config.model_dim;
        let ffn_dim = config.ffn_multiplier * d;
        let l = dims.label_count;

        let layer_counts = [
            config.visual_layers,
            config.audio_layers,
            config.text_layers,
        ];
        let mut encoders = Vec::with_capacity(3);
        for m in Modality::ALL {
            encoders.push(UnimodalEncoder::new(
                ModalityConfig {
                    modality: m,
                    input_dim: dims.modality_dim(m),
                    max_len: dims.modality_len(m),
                    layers: layer_counts[m.index()],
                    heads: config.encoder_heads,
                    ffn_dim,
                    model_dim: d,
                },
                &mut rng,
            )?);
        }
        let mut encoders = encoders.into_iter();
        let encoders = [
            encoders.next().unwrap(),
            encoders.next().unwrap(),
            encoders.next().unwrap(),
        ];

        let common_len = match config.common_len {
            Some(n) => CommonLen::Fixed(n),
            None => CommonLen::MinOfInputs,
        };
        let refiner = Refiner::new(d, config.refine_hidden_layers, common_len, &mut rng);

        let discriminator = if config.per_position_discriminator_bias {
            Discriminator::new_per_position(d, dims.visual_len, &mut rng)
        } else {
            Discriminator::new(d, &mut rng)
        };
        let semantic_head = SemanticHead::new(d, l, &mut rng);

        let token_mode = if config.scalar_token_embeddings {
            let order = config.ablation.fusion_order;
            let tau_c = config.effective_common_len(&dims);
            let stream_len = |k: crate::fusion::StreamKind| match k {
                crate::fusion::StreamKind::Visual => dims.visual_len,
                crate::fusion::StreamKind::Audio => dims.audio_len,
                crate::fusion::StreamKind::Text => dims.text_len,
                crate::fusion::StreamKind::Common => tau_c,
            };
            let lens = [
                stream_len(order.0[0]),
                stream_len(order.0[1]),
                stream_len(order.0[2]),
                stream_len(order.0[3]),
            ];
            // the three levels see (s1, s2), (s1+s2, s3), (s1+s2+s3, s4);
            // constructing per-level modes needs per-level lengths, so the
            // scalar variant builds its levels directly below
            Some(lens)
        } else {
            None
        };

        let fusion = match token_mode {
            None => HierarchicalFusion::new(
                d,
                config.encoder_heads,
                ffn_dim,
                config.fusion_layers,
                config.ablation.fusion_order,
                TokenMode::FeatureVector,
                !config.ablation.disable_token_embeddings,
                &mut rng,
            )?,
            Some(lens) => {
                let mk = |len_a: usize, len_b: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                    crate::fusion::CrossModalEncoder::new(
                        d,
                        config.encoder_heads,
                        ffn_dim,
                        config.fusion_layers,
                        TokenMode::PerTimestepScalar { len_a, len_b },
                        rng,
                    )
                };
                HierarchicalFusion {
                    levels: [
                        mk(lens[0], lens[1], &mut rng)?,
                        mk(lens[0] + lens[1], lens[2], &mut rng)?,
                        mk(lens[0] + lens[1] + lens[2], lens[3], &mut rng)?,
                    ],
                    order: config.ablation.fusion_order,
                    use_tokens: !config.ablation.disable_token_embeddings,
                }
            }
        };

        let embedding = label_embedding(l, d, &mut rng);
        let self_attn = if config.ablation.identical_head
            || config.ablation.disable_label_correlation
        {
            None
        } else {
            Some(LabelSelfAttention::new(d, config.label_attn_heads, &mut rng)?)
        };
        let stage = if config.ablation.identical_head {
            DecodeStage::Identical {
                dense: Linear::new(d, l, &mut rng),
            }
        } else if config.ablation.disable_label_modal_attention {
            DecodeStage::PooledConcat {
                classifier: LabelClassifier::new(l, 2 * d, &mut rng),
            }
        } else {
            DecodeStage::Attention {
                decoder: LabelDecoder::new(d, config.decoder_heads, ffn_dim, &mut rng)?,
                classifier: LabelClassifier::new(l, d, &mut rng),
            }
        };

        Ok(Model {
            config,
            dims,
            encoders,
            refiner,
            discriminator,
            semantic_head,
            fusion,
            labels: LabelPipeline {
                embedding,
                self_attn,
                stage,
            },
        })
    }

    /// All trainable tensors keyed by module path, in a stable order.
    pub fn params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (enc, m) in self.encoders.iter().zip(Modality::ALL) {
            enc.append_params(&format!("unimodal.{}", m.name()), &mut out);
        }
        self.refiner.append_params("refiner", &mut out);
        self.discriminator.append_params("discriminator", &mut out);
        self.semantic_head.append_params("semantic_head", &mut out);
        self.fusion.append_params("fusion", &mut out);
        out.push(("labels.embedding".into(), self.labels.embedding.clone()));
        if let Some(attn) = &self.labels.self_attn {
            attn.append_params("labels.self_attn", &mut out);
        }
        match &self.labels.stage {
            DecodeStage::Attention {
                decoder,
                classifier,
            } => {
                decoder.append_params("labels.decoder", &mut out);
                classifier.append_params("labels.classifier", &mut out);
            }
            DecodeStage::PooledConcat { classifier } => {
                classifier.append_params("labels.pooled_classifier", &mut out);
            }
            DecodeStage::Identical { dense } => {
                dense.append_params("labels.identical", &mut out);
            }
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    /// Full forward pass of one sample.
    pub fn forward_sample(
        &self,
        tape: &mut Tape<S>,
        sample: &Sample<S>,
        mode: &mut ForwardMode,
    ) -> Result<SampleOutput<S>, TensorError> {
        let v = self.encoders[0].encode(tape, &sample.visual, mode)?;
        let a = self.encoders[1].encode(tape, &sample.audio, mode)?;
        let t = self.encoders[2].encode(tape, &sample.text, mode)?;
        let reps = self.refiner.refine(tape, [&v, &a, &t])?;

        let c_va = tape.add(&reps.common[0], &reps.common[1])?;
        let common_sum = tape.add(&c_va, &reps.common[2])?;
        let fused = self.fusion.fuse(
            tape,
            [&reps.private[0], &reps.private[1], &reps.private[2]],
            &common_sum,
            mode,
        )?;
        let probs = self.decode_labels(tape, &fused)?;
        Ok(SampleOutput { probs, reps, fused })
    }

    fn pooled_fusion(
        &self,
        tape: &mut Tape<S>,
        fused: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let seq = tape.transpose(fused)?;
        tape.mean_rows(&seq)
    }

    fn label_queries(&self, tape: &mut Tape<S>) -> Result<Tensor<S>, TensorError> {
        match &self.labels.self_attn {
            Some(attn) => attn.forward(tape, &self.labels.embedding).map(|(out, _)| out),
            None => Ok(self.labels.embedding.clone()),
        }
    }

    fn decode_labels(
        &self,
        tape: &mut Tape<S>,
        fused: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        match &self.labels.stage {
            DecodeStage::Attention {
                decoder,
                classifier,
            } => {
                let queries = self.label_queries(tape)?;
                let tailored = decoder.decode(tape, &queries, fused)?;
                classifier.classify(tape, &tailored)
            }
            DecodeStage::PooledConcat { classifier } => {
                let queries = self.label_queries(tape)?;
                let pooled = self.pooled_fusion(tape, fused)?;
                let repeated = tape.broadcast_rows(&pooled, self.dims.label_count)?;
                let features = tape.concat_cols(&[queries, repeated])?;
                classifier.classify(tape, &features)
            }
            DecodeStage::Identical { dense } => {
                let pooled = self.pooled_fusion(tape, fused)?;
                let logits = dense.forward(tape, &pooled)?;
                tape.sigmoid(&logits)
            }
        }
    }

    /// Forward over a batch plus the weighted objective.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<S>,
        samples: &[Sample<S>],
        mode: &mut ForwardMode,
    ) -> Result<BatchOutput<S>, TensorError> {
        self.forward_batch_opts(tape, samples, mode, true)
    }

    /// `forward_batch` with the common-path gradient reversal switchable.
    /// Finite-difference verification runs with `reverse_common = false`,
    /// since a reversal makes analytic gradients differ from the true
    /// derivative on purpose; training always reverses.
    pub fn forward_batch_opts(
        &self,
        tape: &mut Tape<S>,
        samples: &[Sample<S>],
        mode: &mut ForwardMode,
        reverse_common: bool,
    ) -> Result<BatchOutput<S>, TensorError> {
        if samples.is_empty() {
            return Err(contract("forward over an empty batch".into()));
        }
        let mut probs = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        let mut reps = Vec::with_capacity(samples.len());
        for sample in samples {
            let out = self.forward_sample(tape, sample, mode)?;
            probs.push(out.probs);
            labels.push(sample.label_tensor());
            reps.push(out.reps);
        }

        let ml = multi_label_loss(tape, &probs, &labels)?;
        let flags = &self.config.ablation;
        let (common, private, diff, cml) = if flags.disable_amr {
            (None, None, None, None)
        } else {
            let commons: Vec<[Tensor<S>; 3]> = reps.iter().map(|r| r.common.clone()).collect();
            let privates: Vec<[Tensor<S>; 3]> = reps.iter().map(|r| r.private.clone()).collect();
            let c = adversarial_loss(tape, &self.discriminator, &commons, reverse_common)?;
            let p = adversarial_loss(tape, &self.discriminator, &privates, false)?;
            let diff = if flags.disable_diff {
                None
            } else {
                Some(orthogonality_loss(
                    tape,
                    &reps,
                    self.config.printed_diff_sign,
                )?)
            };
            let cml = if flags.disable_cml {
                None
            } else {
                Some(common_semantic_loss(
                    tape,
                    &self.semantic_head,
                    &reps,
                    &labels,
                )?)
            };
            (Some(c), Some(p), diff, cml)
        };

        let terms = LossTerms {
            ml,
            common,
            private,
            diff,
            cml,
        };
        let total = total_loss(
            tape,
            &terms,
            self.config.alpha,
            self.config.beta,
            self.config.gamma,
        )?;
        let value_of = |t: &Option<Tensor<S>>| t.as_ref().map(|t| t.item().to_f64()).unwrap_or(0.0);
        let values = LossValues {
            ml: terms.ml.item().to_f64(),
            common: value_of(&terms.common),
            private: value_of(&terms.private),
            diff: value_of(&terms.diff),
            cml: value_of(&terms.cml),
            total: total.item().to_f64(),
        };
        Ok(BatchOutput {
            probs,
            total,
            values,
        })
    }

    /// Mean discriminator probabilities over a probe batch (evaluation mode).
    pub fn discriminator_probe(
        &self,
        samples: &[Sample<S>],
    ) -> Result<DiscriminatorProbe, TensorError> {
        if samples.is_empty() {
            return Err(contract("discriminator probe over an empty batch".into()));
        }
        let mut probe = DiscriminatorProbe::default();
        let mut top1_hits = 0usize;
        let mut mode = ForwardMode::Eval;
        for sample in samples {
            let mut tape = Tape::new();
            let v = self.encoders[0].encode(&mut tape, &sample.visual, &mut mode)?;
            let a = self.encoders[1].encode(&mut tape, &sample.audio, &mut mode)?;
            let t = self.encoders[2].encode(&mut tape, &sample.text, &mut mode)?;
            let reps = self.refiner.refine(&mut tape, [&v, &a, &t])?;
            for m in 0..3 {
                let mean_of = |tape: &mut Tape<S>, rep: &Tensor<S>| -> Result<[f64; 3], TensorError> {
                    let p = self.discriminator.discriminate(tape, rep)?;
                    let rows = p.dims2().0 as f64;
                    let data = p.to_vec();
                    let mut mean = [0.0f64; 3];
                    for row in data.chunks(3) {
                        for (acc, v) in mean.iter_mut().zip(row) {
                            *acc += v.to_f64();
                        }
                    }
                    for v in mean.iter_mut() {
                        *v /= rows;
                    }
                    Ok(mean)
                };
                let c_mean = mean_of(&mut tape, &reps.common[m])?;
                let p_mean = mean_of(&mut tape, &reps.private[m])?;
                for k in 0..3 {
                    probe.common_mean[m][k] += c_mean[k];
                    probe.private_mean[m][k] += p_mean[k];
                }
                let argmax = p_mean
                    .iter()
                    .enumerate()
                    .max_by(|(_, x), (_, y)| x.partial_cmp(y).expect("finite probs"))
                    .map(|(i, _)| i)
                    .expect("three entries");
                if argmax == m {
                    top1_hits += 1;
                }
            }
        }
        let n = samples.len() as f64;
        for m in 0..3 {
            for k in 0..3 {
                probe.common_mean[m][k] /= n;
                probe.private_mean[m][k] /= n;
            }
        }
        probe.private_top1 = top1_hits as f64 / (samples.len() * 3) as f64;
        Ok(probe)
    }

    /// `Σ_m Σ_i ‖(C_i^m)ᵀ P_i^m‖²_F` on a probe batch (positive sign,
    /// evaluation mode).
    pub fn orthogonality_probe(&self, samples: &[Sample<S>]) -> Result<f64, TensorError> {
        let mut total = 0.0;
        let mut mode = ForwardMode::Eval;
        for sample in samples {
            let mut tape = Tape::new();
            let v = self.encoders[0].encode(&mut tape, &sample.visual, &mut mode)?;
            let a = self.encoders[1].encode(&mut tape, &sample.audio, &mut mode)?;
            let t = self.encoders[2].encode(&mut tape, &sample.text, &mut mode)?;
            let reps = self.refiner.refine(&mut tape, [&v, &a, &t])?;
            let loss = orthogonality_loss(&mut tape, &[reps], false)?;
            total += loss.item().to_f64();
        }
        Ok(total)
    }

    /// Per-head label correlation matrices from the current embeddings:
    /// `(raw scores, scaled row-softmax)` per head. Fails when label
    /// self-attention is ablated away.
    pub fn label_correlations(&self) -> Result<Vec<(Vec<f64>, Vec<Vec<f64>>)>, TensorError> {
        let attn = self.labels.self_attn.as_ref().ok_or_else(|| {
            contract("label correlations unavailable: label self-attention is disabled".into())
        })?;
        let mut tape = Tape::new();
        let (_, raw) = attn.forward(&mut tape, &self.labels.embedding)?;
        let head_dim = self.config.model_dim / self.config.label_attn_heads;
        Ok(raw
            .iter()
            .map(|r| {
                (
                    r.to_vec().iter().map(|v| v.to_f64()).collect(),
                    scaled_row_softmax(r, head_dim),
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;

    pub(crate) fn toy_dims() -> DataDims {
        DataDims {
            visual_dim: 3,
            audio_dim: 4,
            text_dim: 5,
            visual_len: 4,
            audio_len: 4,
            text_len: 4,
            label_count: 3,
        }
    }

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            label_attn_heads: 2,
            decoder_heads: 2,
            encoder_heads: 2,
            visual_layers: 1,
            audio_layers: 1,
            text_layers: 1,
            fusion_layers: 1,
            ffn_multiplier: 2,
            refine_hidden_layers: 1,
            batch_size: 2,
            epochs: 5,
            patience: 5,
            dropout: 0.0,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn toy_sample(seed: u64, dims: &DataDims) -> Sample<f64> {
        let mut rng = crate::rng::RngPool::new(seed).stream("sample");
        let mut mat = |d: usize, t: usize| {
            Tensor::matrix(d, t, (0..d * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let visual = mat(dims.visual_dim, dims.visual_len);
        let audio = mat(dims.audio_dim, dims.audio_len);
        let text = mat(dims.text_dim, dims.text_len);
        let labels = (0..dims.label_count)
            .map(|_| u8::from(rng.gen::<bool>()))
            .collect();
        Sample {
            visual,
            audio,
            text,
            labels,
        }
    }

    #[test]
    fn parameter_set_is_a_pure_function_of_config() {
        let dims = toy_dims();
        let config = toy_config();
        let m1 = Model::<f64>::new(config, dims).unwrap();
        let m2 = Model::<f64>::new(config, dims).unwrap();
        let names1: Vec<_> = m1.params().iter().map(|(n, p)| (n.clone(), p.shape())).collect();
        let names2: Vec<_> = m2.params().iter().map(|(n, p)| (n.clone(), p.shape())).collect();
        assert_eq!(names1, names2);
        // identical seed → identical values
        for ((_, a), (_, b)) in m1.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn head_flags_change_the_parameter_set() {
        let dims = toy_dims();
        let mut config = toy_config();
        let full: Vec<String> = Model::<f64>::new(config, dims)
            .unwrap()
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        config.ablation.identical_head = true;
        let identical: Vec<String> = Model::<f64>::new(config, dims)
            .unwrap()
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert!(full.iter().any(|n| n.starts_with("labels.decoder")));
        assert!(!identical.iter().any(|n| n.starts_with("labels.decoder")));
        assert!(identical.iter().any(|n| n.starts_with("labels.identical")));
    }

    #[test]
    fn forward_batch_produces_probabilities_and_finite_losses() {
        let dims = toy_dims();
        let model = Model::<f64>::new(toy_config(), dims).unwrap();
        let samples = vec![toy_sample(1, &dims), toy_sample(2, &dims)];
        let mut tape = Tape::new();
        let out = model
            .forward_batch(&mut tape, &samples, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(out.probs.len(), 2);
        for p in &out.probs {
            assert_eq!(p.numel(), 3);
            for v in p.to_vec() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(out.values.total.is_finite());
        assert!(out.values.ml > 0.0);
        assert!(out.values.common > 0.0);
        assert!(out.values.private > 0.0);
        assert!(out.values.diff >= 0.0);
        assert!(out.values.cml > 0.0);
    }

    #[test]
    fn total_loss_reference_arithmetic() {
        let mut tape = Tape::new();
        let terms = LossTerms {
            ml: Tensor::scalar(1.0f64),
            common: Some(Tensor::scalar(2.0)),
            private: Some(Tensor::scalar(2.0)),
            diff: Some(Tensor::scalar(10.0)),
            cml: Some(Tensor::scalar(4.0)),
        };
        let total = total_loss(&mut tape, &terms, 0.01, 5e-6, 0.5).unwrap();
        assert!((total.item() - 3.04005).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_exactly_the_classification_loss() {
        let mut tape = Tape::new();
        let terms = LossTerms {
            ml: Tensor::scalar(1.375f64),
            common: Some(Tensor::scalar(7.0)),
            private: Some(Tensor::scalar(3.0)),
            diff: Some(Tensor::scalar(11.0)),
            cml: Some(Tensor::scalar(5.0)),
        };
        let total = total_loss(&mut tape, &terms, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(total.item(), 1.375);
    }

    #[test]
    fn total_loss_is_linear_in_each_component() {
        let base = LossValues {
            ml: 1.0,
            common: 2.0,
            private: 3.0,
            diff: 4.0,
            cml: 5.0,
            total: 0.0,
        };
        let weights = (0.01, 5e-6, 0.5);
        let eval = |ml: f64, c: f64, p: f64, d: f64, s: f64| {
            let mut tape = Tape::new();
            let terms = LossTerms {
                ml: Tensor::scalar(ml),
                common: Some(Tensor::scalar(c)),
                private: Some(Tensor::scalar(p)),
                diff: Some(Tensor::scalar(d)),
                cml: Some(Tensor::scalar(s)),
            };
            total_loss(&mut tape, &terms, weights.0, weights.1, weights.2)
                .unwrap()
                .item()
        };
        let base_total = eval(base.ml, base.common, base.private, base.diff, base.cml);
        let delta = 0.75;
        let expect = [1.0, weights.0, weights.0, weights.1, weights.2];
        for (i, coeff) in expect.iter().enumerate() {
            let mut args = [base.ml, base.common, base.private, base.diff, base.cml];
            args[i] += delta;
            let bumped = eval(args[0], args[1], args[2], args[3], args[4]);
            assert!(
                (bumped - base_total - coeff * delta).abs() < 1e-12,
                "component {i}"
            );
        }
    }

    #[test]
    fn disable_amr_reduces_the_objective_to_classification() {
        let dims = toy_dims();
        let mut config = toy_config();
        config.ablation.disable_amr = true;
        let model = Model::<f64>::new(config, dims).unwrap();
        let samples = vec![toy_sample(3, &dims)];
        let mut tape = Tape::new();
        let out = model
            .forward_batch(&mut tape, &samples, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(out.values.total, out.values.ml);
        assert_eq!(out.values.common, 0.0);
        assert_eq!(out.values.private, 0.0);
        assert_eq!(out.values.diff, 0.0);
        assert_eq!(out.values.cml, 0.0);
    }

    #[test]
    fn fused_length_is_the_sum_of_stream_lengths() {
        let dims = toy_dims();
        let model = Model::<f64>::new(toy_config(), dims).unwrap();
        let sample = toy_sample(4, &dims);
        let mut tape = Tape::new();
        let out = model
            .forward_sample(&mut tape, &sample, &mut ForwardMode::Eval)
            .unwrap();
        // aligned toy: 4 streams of length 4
        assert_eq!(out.fused.shape(), vec![8, 16]);
    }

    #[test]
    fn probes_are_well_formed() {
        let dims = toy_dims();
        let model = Model::<f64>::new(toy_config(), dims).unwrap();
        let samples = vec![toy_sample(5, &dims), toy_sample(6, &dims)];
        let probe = model.discriminator_probe(&samples).unwrap();
        for m in 0..3 {
            let sum_c: f64 = probe.common_mean[m].iter().sum();
            let sum_p: f64 = probe.private_mean[m].iter().sum();
            assert!((sum_c - 1.0).abs() < 1e-9);
            assert!((sum_p - 1.0).abs() < 1e-9);
        }
        assert!((0.0..=1.0).contains(&probe.private_top1));
        assert!(model.orthogonality_probe(&samples).unwrap() >= 0.0);
        let correlations = model.label_correlations().unwrap();
        assert_eq!(correlations.len(), 2);
        for (raw, softmaxed) in correlations {
            assert_eq!(raw.len(), 9);
            for row in softmaxed {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn correlations_unavailable_when_ablated() {
        let dims = toy_dims();
        let mut config = toy_config();
        config.ablation.disable_label_correlation = true;
        let model = Model::<f64>::new(config, dims).unwrap();
        assert!(model.label_correlations().is_err());
    }

    #[test]
    fn pooled_concat_head_still_classifies() {
        let dims = toy_dims();
        let mut config = toy_config();
        config.ablation.disable_label_modal_attention = true;
        let model = Model::<f64>::new(config, dims).unwrap();
        let samples = vec![toy_sample(7, &dims)];
        let mut tape = Tape::new();
        let out = model
            .forward_batch(&mut tape, &samples, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(out.probs[0].numel(), 3);
    }

    #[test]
    fn scalar_tokens_demand_aligned_lengths() {
        let mut dims = toy_dims();
        dims.text_len = 7; // unaligned
        let mut config = toy_config();
        config.scalar_token_embeddings = true;
        assert!(Model::<f64>::new(config, dims).is_err());
    }
}
