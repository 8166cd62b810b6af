//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side re-evaluates the forward closure at `x ± h` per element
//! and never touches the reverse pass, so it stays an independent oracle for
//! the tape. Checks run in double precision; dropout must be disabled in any
//! closure handed to this module.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

use crate::rng::RngPool;
use crate::scalar::Scalar;
use crate::tape::{NormMode, Tape};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

/// Outcome of one named gradient comparison.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tolerance
    }
}

/// Elementwise discrepancy with a floor so near-zero gradients are compared
/// absolutely (against `tol * 1e-3`) instead of blowing up a ratio.
pub fn elementwise_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Central differences of `f` w.r.t. every element of `leaf`.
pub fn central_difference<S, F>(leaf: &Tensor<S>, f: &mut F, step: f64) -> Vec<f64>
where
    S: Scalar,
    F: FnMut() -> f64,
{
    let n = leaf.numel();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = leaf.get(i);
        leaf.set(i, orig + S::from_f64(step));
        let plus = f();
        leaf.set(i, orig - S::from_f64(step));
        let minus = f();
        leaf.set(i, orig);
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Compares tape gradients against finite differences for every named leaf.
///
/// `build` must construct a scalar loss from the leaves on a fresh tape and
/// be deterministic across calls.
pub fn check_leaves<S, F>(
    name: &str,
    leaves: &[(&str, Tensor<S>)],
    mut build: F,
    step: f64,
    tolerance: f64,
) -> Result<Vec<CheckResult>, TensorError>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>) -> Result<Tensor<S>, TensorError>,
{
    for (_, leaf) in leaves {
        leaf.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(&loss)?;

    let mut eval = || -> f64 {
        let mut t = Tape::new();
        let l = build(&mut t).expect("forward closure failed during finite differences");
        l.item().to_f64()
    };

    let mut results = Vec::with_capacity(leaves.len());
    for (leaf_name, leaf) in leaves {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| alloc::vec![S::ZERO; leaf.numel()]);
        let numeric = central_difference(leaf, &mut eval, step);
        let max_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| elementwise_error(a.to_f64(), *n))
            .fold(0.0f64, f64::max);
        results.push(CheckResult {
            name: format!("{name}/{leaf_name}"),
            max_err,
            tolerance,
        });
    }
    Ok(results)
}

fn rand_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("random matrix")
}

fn rand_vector(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Values bounded away from a kink at 0, for relu/clamp checks.
fn rand_matrix_off_kink(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let mag = rng.gen_range(0.1..0.7);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("random matrix")
}

/// Dots the op output with a fixed random weighting so every output element
/// carries a distinct gradient path, then reduces to a scalar.
fn weighted_readout(
    tape: &mut Tape<f64>,
    out: &Tensor<f64>,
    weights: &Tensor<f64>,
) -> Result<Tensor<f64>, TensorError> {
    let prod = tape.mul(out, weights)?;
    tape.sum_all(&prod)
}

/// Finite-difference checks for every differentiable primitive, random
/// shapes up to 6×6, inputs in [−1, 1].
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let pool = RngPool::new(seed);
    let mut rng = pool.stream("gradcheck.primitives");
    let mut results = Vec::new();
    let push_all = |rs: Vec<CheckResult>, acc: &mut Vec<CheckResult>| acc.extend(rs);

    let m = rng.gen_range(2..=6);
    let k = rng.gen_range(2..=6);
    let n = rng.gen_range(2..=6);

    // matmul
    {
        let a = rand_matrix(&mut rng, m, k);
        let b = rand_matrix(&mut rng, k, n);
        let w = rand_matrix(&mut rng, m, n);
        let rs = check_leaves(
            "matmul",
            &[("a", a.clone()), ("b", b.clone())],
            |t| {
                let o = t.matmul(&a, &b)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
    }

    // transpose
    {
        let x = rand_matrix(&mut rng, m, n);
        let w = rand_matrix(&mut rng, n, m);
        let rs = check_leaves(
            "transpose",
            &[("x", x.clone())],
            |t| {
                let o = t.transpose(&x)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
    }

    // add / sub / mul / scale
    {
        let a = rand_matrix(&mut rng, m, n);
        let b = rand_matrix(&mut rng, m, n);
        let w = rand_matrix(&mut rng, m, n);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("scale", 3),
        ] {
            let rs = check_leaves(
                name,
                &[("a", a.clone()), ("b", b.clone())],
                |t| {
                    let o = match f {
                        0 => t.add(&a, &b)?,
                        1 => t.sub(&a, &b)?,
                        2 => t.mul(&a, &b)?,
                        _ => t.scale(&a, -1.7)?,
                    };
                    weighted_readout(t, &o, &w)
                },
                DEFAULT_STEP,
                PRIMITIVE_TOL,
            )?;
            push_all(rs, &mut results);
        }
    }

    // broadcasts
    {
        let x = rand_matrix(&mut rng, m, n);
        let row = rand_vector(&mut rng, n);
        let col = rand_vector(&mut rng, m);
        let w = rand_matrix(&mut rng, m, n);
        let rs = check_leaves(
            "add_row_broadcast",
            &[("x", x.clone()), ("row", row.clone())],
            |t| {
                let o = t.add_row_broadcast(&x, &row)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
        let rs = check_leaves(
            "add_col_broadcast",
            &[("x", x.clone()), ("col", col.clone())],
            |t| {
                let o = t.add_col_broadcast(&x, &col)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
        let v = rand_vector(&mut rng, n);
        let rs = check_leaves(
            "broadcast_rows",
            &[("v", v.clone())],
            |t| {
                let o = t.broadcast_rows(&v, m)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
    }

    // pointwise nonlinearities
    {
        let x = rand_matrix_off_kink(&mut rng, m, n);
        let w = rand_matrix(&mut rng, m, n);
        for name in ["relu", "gelu", "sigmoid", "clamp"] {
            let rs = check_leaves(
                name,
                &[("x", x.clone())],
                |t| {
                    let o = match name {
                        "relu" => t.relu(&x)?,
                        "gelu" => t.gelu(&x)?,
                        "sigmoid" => t.sigmoid(&x)?,
                        _ => t.clamp(&x, -0.9, 0.9)?,
                    };
                    weighted_readout(t, &o, &w)
                },
                DEFAULT_STEP,
                PRIMITIVE_TOL,
            )?;
            push_all(rs, &mut results);
        }
        // log needs positive input
        let pos = Tensor::matrix(
            m,
            n,
            (0..m * n).map(|_| rng.gen_range(0.2..2.0)).collect(),
        )?;
        let rs = check_leaves(
            "log",
            &[("x", pos.clone())],
            |t| {
                let o = t.log(&pos)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
    }

    // softmax + layer norm
    {
        let x = rand_matrix(&mut rng, m, n);
        let w = rand_matrix(&mut rng, m, n);
        let rs = check_leaves(
            "softmax_rows",
            &[("x", x.clone())],
            |t| {
                let o = t.softmax_rows(&x)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);

        let gain = rand_vector(&mut rng, n);
        let bias = rand_vector(&mut rng, n);
        let rs = check_leaves(
            "layer_norm",
            &[("x", x.clone()), ("gain", gain.clone()), ("bias", bias.clone())],
            |t| {
                let o = t.layer_norm_rows(&x, &gain, &bias, 1e-5, NormMode::Standard)?;
                weighted_readout(t, &o, &w)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
    }

    // reversal, concat, reductions, pooling
    {
        let x = rand_matrix(&mut rng, m, n);
        let y = rand_matrix(&mut rng, 2, n);
        let w_rows = rand_matrix(&mut rng, m + 2, n);
        // A single reversal would negate the analytic gradient on purpose, so
        // the differences oracle checks the double composition ((−1)² = 1);
        // the single-reversal sign contract has its own direct tests.
        let rs = check_leaves(
            "grad_reversal_twice",
            &[("x", x.clone())],
            |t| {
                let r = t.grad_reversal(&x)?;
                let r = t.grad_reversal(&r)?;
                t.frobenius_sq(&r)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);

        let rs = check_leaves(
            "concat_rows",
            &[("x", x.clone()), ("y", y.clone())],
            |t| {
                let o = t.concat_rows(&[x.clone(), y.clone()])?;
                weighted_readout(t, &o, &w_rows)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);

        let z = rand_matrix(&mut rng, m, 3);
        let w_cols = rand_matrix(&mut rng, m, n + 3);
        let rs = check_leaves(
            "concat_cols",
            &[("x", x.clone()), ("z", z.clone())],
            |t| {
                let o = t.concat_cols(&[x.clone(), z.clone()])?;
                weighted_readout(t, &o, &w_cols)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);

        let w_vec_n = rand_vector(&mut rng, n);
        let w_vec_m = rand_vector(&mut rng, m);
        let rs = check_leaves(
            "mean_rows",
            &[("x", x.clone())],
            |t| {
                let o = t.mean_rows(&x)?;
                weighted_readout(t, &o, &w_vec_n)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
        let rs = check_leaves(
            "sum_cols",
            &[("x", x.clone())],
            |t| {
                let o = t.sum_cols(&x)?;
                weighted_readout(t, &o, &w_vec_m)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
        let rs = check_leaves(
            "sum_all",
            &[("x", x.clone())],
            |t| t.sum_all(&x),
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
        let rs = check_leaves(
            "frobenius_sq",
            &[("x", x.clone())],
            |t| t.frobenius_sq(&x),
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);

        let pooled_rows = (m / 2).max(1);
        let w_pool = rand_matrix(&mut rng, pooled_rows, n);
        let rs = check_leaves(
            "avg_pool_rows",
            &[("x", x.clone())],
            |t| {
                let o = t.avg_pool_rows(&x, pooled_rows)?;
                weighted_readout(t, &o, &w_pool)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOL,
        )?;
        push_all(rs, &mut results);
    }

    Ok(results)
}

/// A deliberately tangled multi-layer graph: two linear layers with layer
/// norm, gelu, softmax attention-style mixing, and a value reused on two
/// paths. Checked at the composite tolerance.
pub fn composite_check(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let pool = RngPool::new(seed);
    let mut rng = pool.stream("gradcheck.composite");
    let x = rand_matrix(&mut rng, 4, 5);
    let w1 = rand_matrix(&mut rng, 5, 6);
    let b1 = rand_vector(&mut rng, 6);
    let w2 = rand_matrix(&mut rng, 6, 6);
    let gain = rand_vector(&mut rng, 6);
    let bias = rand_vector(&mut rng, 6);

    check_leaves(
        "composite",
        &[
            ("x", x.clone()),
            ("w1", w1.clone()),
            ("b1", b1.clone()),
            ("w2", w2.clone()),
            ("gain", gain.clone()),
            ("bias", bias.clone()),
        ],
        |t| {
            let h = t.matmul(&x, &w1)?;
            let h = t.add_row_broadcast(&h, &b1)?;
            let h = t.gelu(&h)?;
            let h = t.layer_norm_rows(&h, &gain, &bias, 1e-5, NormMode::Standard)?;
            // attention-style mixing with h reused as queries and keys
            let ht = t.transpose(&h)?;
            let scores = t.matmul(&h, &ht)?;
            let attn = t.softmax_rows(&scores)?;
            let mixed = t.matmul(&attn, &h)?;
            let out = t.matmul(&mixed, &w2)?;
            let residual = t.add(&out, &mixed)?;
            t.frobenius_sq(&residual)
        },
        DEFAULT_STEP,
        COMPOSITE_TOL,
    )
}


/// End-to-end oracle: the composed objective of a tiny, randomly initialized
/// model over a two-sample batch, checked against finite differences for
/// every parameter tensor and one input feature matrix.
pub fn full_model_check(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    use crate::data::Sample;
    use crate::model::{DataDims, Model, ModelConfig};
    use crate::nn::ForwardMode;

    let dims = DataDims {
        visual_dim: 2,
        audio_dim: 3,
        text_dim: 3,
        visual_len: 3,
        audio_len: 3,
        text_len: 3,
        label_count: 2,
    };
    let config = ModelConfig {
        model_dim: 4,
        label_attn_heads: 2,
        decoder_heads: 2,
        encoder_heads: 2,
        visual_layers: 1,
        audio_layers: 1,
        text_layers: 1,
        fusion_layers: 1,
        ffn_multiplier: 1,
        refine_hidden_layers: 1,
        batch_size: 2,
        dropout: 0.0,
        seed,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(config, dims)?;

    let pool = RngPool::new(seed ^ 0x5eed);
    let mut rng = pool.stream("gradcheck.model-data");
    let mut sample = || {
        let mut mat = |d: usize, t: usize| {
            Tensor::matrix(d, t, (0..d * t).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .expect("sample matrix")
        };
        let visual = mat(dims.visual_dim, dims.visual_len);
        let audio = mat(dims.audio_dim, dims.audio_len);
        let text = mat(dims.text_dim, dims.text_len);
        let labels = alloc::vec![1u8, 0];
        Sample {
            visual,
            audio,
            text,
            labels,
        }
    };
    let samples = alloc::vec![sample(), sample()];

    // Pass 1: the full composed objective with the reversal replaced by
    // identity. Every parameter (and an input) must match the differences
    // oracle; this validates the engine across all five loss terms.
    let mut leaves: Vec<(String, Tensor<f64>)> = model.params();
    leaves.push(("input.visual0".into(), samples[0].visual.clone()));
    let leaf_refs: Vec<(&str, Tensor<f64>)> = leaves
        .iter()
        .map(|(n, p)| (n.as_str(), p.clone()))
        .collect();
    let mut results = check_leaves(
        "model",
        &leaf_refs,
        |t| {
            let out = model.forward_batch_opts(t, &samples, &mut ForwardMode::Eval, false)?;
            Ok(out.total)
        },
        DEFAULT_STEP,
        COMPOSITE_TOL,
    )?;

    // Pass 2: the adversarial objective as trained. Parameters upstream of
    // the reversal (encoders, shared generator, inputs) intentionally carry
    // reversed contributions, so only the downstream set is compared; the
    // reversal's sign contract has its own dedicated checks.
    let downstream: Vec<(&str, Tensor<f64>)> = leaves
        .iter()
        .filter(|(n, _)| {
            !n.starts_with("unimodal.")
                && !n.starts_with("refiner.shared")
                && !n.starts_with("input.")
        })
        .map(|(n, p)| (n.as_str(), p.clone()))
        .collect();
    results.extend(check_leaves(
        "model_adversarial",
        &downstream,
        |t| {
            let out = model.forward_batch_opts(t, &samples, &mut ForwardMode::Eval, true)?;
            Ok(out.total)
        },
        DEFAULT_STEP,
        COMPOSITE_TOL,
    )?);
    Ok(results)
}
