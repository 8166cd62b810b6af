//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every primitive appends one node holding handles to its input and output
//! tensors. `backward` walks the nodes in reverse recording order (a valid
//! reverse topological order, since an output tensor exists only after its
//! producing op ran) and accumulates vector-Jacobian products into each
//! input's gradient buffer. A value consumed by several ops receives the sum
//! of all contributions.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{require_same_shape, Tensor, TensorError};

/// Layer-norm behavior. `AffineOnly` skips the normalization and applies only
/// the learned affine map; it exists for residual-path diagnostics where the
/// identity behavior of a freshly initialized network must be exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Standard,
    AffineOnly,
}

enum Op<S: Scalar> {
    MatMul {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Transpose {
        x: Tensor<S>,
    },
    Add {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Sub {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Mul {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Scale {
        x: Tensor<S>,
        c: S,
    },
    AddRowBroadcast {
        x: Tensor<S>,
        row: Tensor<S>,
    },
    AddColBroadcast {
        x: Tensor<S>,
        col: Tensor<S>,
    },
    Relu {
        x: Tensor<S>,
    },
    Gelu {
        x: Tensor<S>,
    },
    Sigmoid {
        x: Tensor<S>,
    },
    Log {
        x: Tensor<S>,
    },
    Clamp {
        x: Tensor<S>,
        lo: S,
        hi: S,
    },
    SoftmaxRows {
        x: Tensor<S>,
    },
    LayerNormRows {
        x: Tensor<S>,
        gain: Tensor<S>,
        bias: Tensor<S>,
        eps: S,
        mode: NormMode,
    },
    GradReversal {
        x: Tensor<S>,
    },
    Dropout {
        x: Tensor<S>,
        mask: Vec<S>,
    },
    ConcatRows {
        parts: Vec<Tensor<S>>,
    },
    ConcatCols {
        parts: Vec<Tensor<S>>,
    },
    MeanRows {
        x: Tensor<S>,
    },
    SumCols {
        x: Tensor<S>,
    },
    SumAll {
        x: Tensor<S>,
    },
    FrobeniusSq {
        x: Tensor<S>,
    },
    AvgPoolRows {
        x: Tensor<S>,
        segments: Vec<(usize, usize)>,
    },
    BroadcastRows {
        x: Tensor<S>,
        rows: usize,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    out: Tensor<S>,
}

/// Ordered record of executed primitives, replayable in reverse.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node (and with them the interned tensor handles).
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, op: Op<S>, out: Tensor<S>) -> Tensor<S> {
        self.nodes.push(Node {
            op,
            out: out.clone(),
        });
        out
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `a [m×k] · b [k×n] → [m×n]`. A rank-1 left operand counts as one row.
    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if a.rank() > 2 || b.rank() != 2 || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = a.with_data(|av| {
            b.with_data(|bv| {
                let mut o = vec![S::ZERO; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let brow = &bv[p * n..(p + 1) * n];
                        let orow = &mut o[i * n..(i + 1) * n];
                        for (oj, bj) in orow.iter_mut().zip(brow) {
                            *oj += aip * *bj;
                        }
                    }
                }
                o
            })
        });
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            Op::MatMul {
                a: a.clone(),
                b: b.clone(),
            },
            out,
        ))
    }

    pub fn transpose(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        let out = x.with_data(|xv| {
            let mut o = vec![S::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    o[j * m + i] = xv[i * n + j];
                }
            }
            o
        });
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push(Op::Transpose { x: x.clone() }, out))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        require_same_shape("add", a, b)?;
        let out = a.with_data(|av| {
            b.with_data(|bv| av.iter().zip(bv).map(|(x, y)| *x + *y).collect::<Vec<_>>())
        });
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.push(
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
            out,
        ))
    }

    pub fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        require_same_shape("sub", a, b)?;
        let out = a.with_data(|av| {
            b.with_data(|bv| av.iter().zip(bv).map(|(x, y)| *x - *y).collect::<Vec<_>>())
        });
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.push(
            Op::Sub {
                a: a.clone(),
                b: b.clone(),
            },
            out,
        ))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        require_same_shape("mul", a, b)?;
        let out = a.with_data(|av| {
            b.with_data(|bv| av.iter().zip(bv).map(|(x, y)| *x * *y).collect::<Vec<_>>())
        });
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.push(
            Op::Mul {
                a: a.clone(),
                b: b.clone(),
            },
            out,
        ))
    }

    pub fn scale(&mut self, x: &Tensor<S>, c: S) -> Result<Tensor<S>, TensorError> {
        let out = x.with_data(|xv| xv.iter().map(|v| *v * c).collect::<Vec<_>>());
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Scale { x: x.clone(), c }, out))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_broadcast(
        &mut self,
        x: &Tensor<S>,
        row: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        if row.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: x.shape(),
                rhs: row.shape(),
            });
        }
        let out = x.with_data(|xv| {
            row.with_data(|rv| {
                let mut o = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        o.push(xv[i * n + j] + rv[j]);
                    }
                }
                o
            })
        });
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(
            Op::AddRowBroadcast {
                x: x.clone(),
                row: row.clone(),
            },
            out,
        ))
    }

    /// Adds a length-`m` vector down the rows: `out[i][j] = x[i][j] + col[i]`.
    pub fn add_col_broadcast(
        &mut self,
        x: &Tensor<S>,
        col: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        if col.numel() != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_col_broadcast",
                lhs: x.shape(),
                rhs: col.shape(),
            });
        }
        let out = x.with_data(|xv| {
            col.with_data(|cv| {
                let mut o = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        o.push(xv[i * n + j] + cv[i]);
                    }
                }
                o
            })
        });
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(
            Op::AddColBroadcast {
                x: x.clone(),
                col: col.clone(),
            },
            out,
        ))
    }

    /// Subgradient at 0 is 0 by convention.
    pub fn relu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let out = x.with_data(|xv| xv.iter().map(|v| v.maxv(S::ZERO)).collect::<Vec<_>>());
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Relu { x: x.clone() }, out))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let out = x.with_data(|xv| xv.iter().map(|v| gelu_fwd(*v)).collect::<Vec<_>>());
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Gelu { x: x.clone() }, out))
    }

    pub fn sigmoid(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let out = x.with_data(|xv| xv.iter().map(|v| sigmoid_fwd(*v)).collect::<Vec<_>>());
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Sigmoid { x: x.clone() }, out))
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let bad = x.with_data(|xv| xv.iter().find(|v| **v <= S::ZERO).copied());
        if let Some(v) = bad {
            return Err(TensorError::LogDomain { value: v.to_f64() });
        }
        let out = x.with_data(|xv| xv.iter().map(|v| v.ln()).collect::<Vec<_>>());
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Log { x: x.clone() }, out))
    }

    /// Elementwise clamp; gradient passes through inside `[lo, hi]`.
    pub fn clamp(&mut self, x: &Tensor<S>, lo: S, hi: S) -> Result<Tensor<S>, TensorError> {
        let out = x.with_data(|xv| xv.iter().map(|v| v.clamp(lo, hi)).collect::<Vec<_>>());
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(
            Op::Clamp {
                x: x.clone(),
                lo,
                hi,
            },
            out,
        ))
    }

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        let out = x.with_data(|xv| {
            let mut o = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mut mx = row[0];
                for v in row {
                    mx = mx.maxv(*v);
                }
                let mut sum = S::ZERO;
                let start = o.len();
                for v in row {
                    let e = (*v - mx).exp();
                    o.push(e);
                    sum += e;
                }
                for v in o[start..].iter_mut() {
                    *v /= sum;
                }
            }
            o
        });
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::SoftmaxRows { x: x.clone() }, out))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain⊙x̂ + bias`.
    pub fn layer_norm_rows(
        &mut self,
        x: &Tensor<S>,
        gain: &Tensor<S>,
        bias: &Tensor<S>,
        eps: S,
        mode: NormMode,
    ) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        if gain.numel() != n || bias.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape(),
                rhs: gain.shape(),
            });
        }
        let out = x.with_data(|xv| {
            gain.with_data(|gv| {
                bias.with_data(|bv| {
                    let mut o = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        match mode {
                            NormMode::Standard => {
                                let (mean, inv_std) = row_moments(row, eps);
                                for j in 0..n {
                                    o.push(gv[j] * ((row[j] - mean) * inv_std) + bv[j]);
                                }
                            }
                            NormMode::AffineOnly => {
                                for j in 0..n {
                                    o.push(gv[j] * row[j] + bv[j]);
                                }
                            }
                        }
                    }
                    o
                })
            })
        });
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(
            Op::LayerNormRows {
                x: x.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
                mode,
            },
            out,
        ))
    }

    /// Identity forward; multiplies the upstream gradient by exactly −1.
    pub fn grad_reversal(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let out = Tensor::new(x.shape(), x.to_vec())?;
        Ok(self.push(Op::GradReversal { x: x.clone() }, out))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
    pub fn dropout(
        &mut self,
        x: &Tensor<S>,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>, TensorError> {
        debug_assert!((0.0..1.0).contains(&rate));
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = x.with_data(|xv| {
            xv.iter()
                .zip(&mask)
                .map(|(v, m)| *v * *m)
                .collect::<Vec<_>>()
        });
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Dropout { x: x.clone(), mask }, out))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let n = parts
            .first()
            .ok_or_else(|| crate::tensor::contract("concat_rows of zero parts".into()))?
            .dims2()
            .1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2();
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            rows += pm;
            p.with_data(|pv| data.extend_from_slice(pv));
        }
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let m = parts
            .first()
            .ok_or_else(|| crate::tensor::contract("concat_cols of zero parts".into()))?
            .dims2()
            .0;
        let mut total_cols = 0;
        for p in parts {
            let (pm, pn) = p.dims2();
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            total_cols += pn;
        }
        let mut data = vec![S::ZERO; m * total_cols];
        let mut col_off = 0;
        for p in parts {
            let (_, pn) = p.dims2();
            p.with_data(|pv| {
                for i in 0..m {
                    data[i * total_cols + col_off..i * total_cols + col_off + pn]
                        .copy_from_slice(&pv[i * pn..(i + 1) * pn]);
                }
            });
            col_off += pn;
        }
        let out = Tensor::matrix(m, total_cols, data)?;
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Column means over rows: `m×n → [n]`.
    pub fn mean_rows(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        let inv_m = S::from_f64(1.0 / m as f64);
        let out = x.with_data(|xv| {
            let mut o = vec![S::ZERO; n];
            for i in 0..m {
                for j in 0..n {
                    o[j] += xv[i * n + j];
                }
            }
            for v in o.iter_mut() {
                *v *= inv_m;
            }
            o
        });
        let out = Tensor::vector(out);
        Ok(self.push(Op::MeanRows { x: x.clone() }, out))
    }

    /// Row sums over columns: `m×n → [m]`.
    pub fn sum_cols(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        let out = x.with_data(|xv| {
            (0..m)
                .map(|i| {
                    let mut s = S::ZERO;
                    for j in 0..n {
                        s += xv[i * n + j];
                    }
                    s
                })
                .collect::<Vec<_>>()
        });
        let out = Tensor::vector(out);
        Ok(self.push(Op::SumCols { x: x.clone() }, out))
    }

    /// Sum of every element → scalar.
    pub fn sum_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let s = x.with_data(|xv| {
            let mut acc = S::ZERO;
            for v in xv {
                acc += *v;
            }
            acc
        });
        let out = Tensor::scalar(s);
        Ok(self.push(Op::SumAll { x: x.clone() }, out))
    }

    /// Squared Frobenius norm → scalar.
    pub fn frobenius_sq(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let s = x.with_data(|xv| {
            let mut acc = S::ZERO;
            for v in xv {
                acc += *v * *v;
            }
            acc
        });
        let out = Tensor::scalar(s);
        Ok(self.push(Op::FrobeniusSq { x: x.clone() }, out))
    }

    /// Average-pools `m` rows down to `out_rows` contiguous, order-preserving
    /// segments of near-equal length.
    pub fn avg_pool_rows(
        &mut self,
        x: &Tensor<S>,
        out_rows: usize,
    ) -> Result<Tensor<S>, TensorError> {
        let (m, n) = x.dims2();
        if out_rows == 0 || out_rows > m {
            return Err(crate::tensor::contract(alloc::format!(
                "avg_pool_rows: cannot pool {m} rows to {out_rows}"
            )));
        }
        let segments = pool_segments(m, out_rows);
        let out = x.with_data(|xv| {
            let mut o = Vec::with_capacity(out_rows * n);
            for &(start, len) in &segments {
                let inv = S::from_f64(1.0 / len as f64);
                for j in 0..n {
                    let mut s = S::ZERO;
                    for i in start..start + len {
                        s += xv[i * n + j];
                    }
                    o.push(s * inv);
                }
            }
            o
        });
        let out = Tensor::matrix(out_rows, n, out)?;
        Ok(self.push(
            Op::AvgPoolRows {
                x: x.clone(),
                segments,
            },
            out,
        ))
    }

    /// Repeats a length-`n` vector as `rows` identical rows.
    pub fn broadcast_rows(
        &mut self,
        x: &Tensor<S>,
        rows: usize,
    ) -> Result<Tensor<S>, TensorError> {
        let n = x.numel();
        let out = x.with_data(|xv| {
            let mut o = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                o.extend_from_slice(xv);
            }
            o
        });
        let out = Tensor::matrix(rows, n, out)?;
        Ok(self.push(Op::BroadcastRows { x: x.clone(), rows }, out))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Accumulates gradients of `loss` into every tensor that fed it.
    /// `loss` must be scalar; its seed gradient is 1.
    ///
    /// Gradients on op outputs (intermediates) are reset before the replay,
    /// so running backward twice over one tape is deterministic; leaf tensors
    /// keep accumulating until their owner calls `zero_grad`.
    pub fn backward(&mut self, loss: &Tensor<S>) -> Result<(), TensorError> {
        if !loss.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss.shape(),
            });
        }
        for node in &self.nodes {
            node.out.zero_grad();
        }
        loss.accumulate_grad(&[S::ONE]);
        for node in self.nodes.iter().rev() {
            let Some(g) = node.out.grad() else { continue };
            backward_node(&node.op, &node.out, &g);
        }
        Ok(())
    }
}

fn sigmoid_fwd<S: Scalar>(v: S) -> S {
    // Stable in both tails.
    if v >= S::ZERO {
        S::ONE / (S::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::ONE + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<S: Scalar>(v: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let u = c * (v + a * v * v * v);
    half * v * (S::ONE + u.tanh())
}

fn gelu_grad<S: Scalar>(v: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(GELU_C);
    let a3 = S::from_f64(3.0 * GELU_A);
    let u = c * (v + S::from_f64(GELU_A) * v * v * v);
    let t = u.tanh();
    let du = c * (S::ONE + a3 * v * v);
    half * (S::ONE + t) + half * v * (S::ONE - t * t) * du
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mut mean = S::ZERO;
    for v in row {
        mean += *v;
    }
    mean /= n;
    let mut var = S::ZERO;
    for v in row {
        let d = *v - mean;
        var += d * d;
    }
    var /= n;
    (mean, S::ONE / (var + eps).sqrt())
}

/// Splits `m` rows into `k` contiguous segments differing in length by at
/// most one, longer segments first.
fn pool_segments(m: usize, k: usize) -> Vec<(usize, usize)> {
    let base = m / k;
    let rem = m % k;
    let mut segments = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < rem);
        segments.push((start, len));
        start += len;
    }
    segments
}

fn backward_node<S: Scalar>(op: &Op<S>, out: &Tensor<S>, g: &[S]) {
    match op {
        Op::MatMul { a, b } => {
            let (m, k) = a.dims2();
            let (_, n) = b.dims2();
            // d_a = g · bᵀ
            let da = b.with_data(|bv| {
                let mut da = vec![S::ZERO; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * bv[p * n + j];
                        }
                    }
                }
                da
            });
            a.accumulate_grad(&da);
            // d_b = aᵀ · g
            let db = a.with_data(|av| {
                let mut db = vec![S::ZERO; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                db
            });
            b.accumulate_grad(&db);
        }
        Op::Transpose { x } => {
            let (m, n) = x.dims2();
            let mut dx = vec![S::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::Add { a, b } => {
            a.accumulate_grad(g);
            b.accumulate_grad(g);
        }
        Op::Sub { a, b } => {
            a.accumulate_grad(g);
            let neg: Vec<S> = g.iter().map(|v| -*v).collect();
            b.accumulate_grad(&neg);
        }
        Op::Mul { a, b } => {
            let da = b.with_data(|bv| g.iter().zip(bv).map(|(gi, bi)| *gi * *bi).collect::<Vec<_>>());
            let db = a.with_data(|av| g.iter().zip(av).map(|(gi, ai)| *gi * *ai).collect::<Vec<_>>());
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Scale { x, c } => {
            let dx: Vec<S> = g.iter().map(|v| *v * *c).collect();
            x.accumulate_grad(&dx);
        }
        Op::AddRowBroadcast { x, row } => {
            x.accumulate_grad(g);
            let (m, n) = x.dims2();
            let mut dr = vec![S::ZERO; n];
            for i in 0..m {
                for j in 0..n {
                    dr[j] += g[i * n + j];
                }
            }
            row.accumulate_grad(&dr);
        }
        Op::AddColBroadcast { x, col } => {
            x.accumulate_grad(g);
            let (m, n) = x.dims2();
            let mut dc = vec![S::ZERO; m];
            for i in 0..m {
                for j in 0..n {
                    dc[i] += g[i * n + j];
                }
            }
            col.accumulate_grad(&dc);
        }
        Op::Relu { x } => {
            let dx = x.with_data(|xv| {
                g.iter()
                    .zip(xv)
                    .map(|(gi, xi)| if *xi > S::ZERO { *gi } else { S::ZERO })
                    .collect::<Vec<_>>()
            });
            x.accumulate_grad(&dx);
        }
        Op::Gelu { x } => {
            let dx = x.with_data(|xv| {
                g.iter()
                    .zip(xv)
                    .map(|(gi, xi)| *gi * gelu_grad(*xi))
                    .collect::<Vec<_>>()
            });
            x.accumulate_grad(&dx);
        }
        Op::Sigmoid { x } => {
            let dx = out.with_data(|ov| {
                g.iter()
                    .zip(ov)
                    .map(|(gi, oi)| *gi * *oi * (S::ONE - *oi))
                    .collect::<Vec<_>>()
            });
            x.accumulate_grad(&dx);
        }
        Op::Log { x } => {
            let dx = x.with_data(|xv| {
                g.iter()
                    .zip(xv)
                    .map(|(gi, xi)| *gi / *xi)
                    .collect::<Vec<_>>()
            });
            x.accumulate_grad(&dx);
        }
        Op::Clamp { x, lo, hi } => {
            let dx = x.with_data(|xv| {
                g.iter()
                    .zip(xv)
                    .map(|(gi, xi)| {
                        if *xi >= *lo && *xi <= *hi {
                            *gi
                        } else {
                            S::ZERO
                        }
                    })
                    .collect::<Vec<_>>()
            });
            x.accumulate_grad(&dx);
        }
        Op::SoftmaxRows { x } => {
            let (m, n) = x.dims2();
            let dx = out.with_data(|s| {
                let mut dx = vec![S::ZERO; m * n];
                for i in 0..m {
                    let srow = &s[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mut dot = S::ZERO;
                    for (gi, si) in grow.iter().zip(srow) {
                        dot += *gi * *si;
                    }
                    for j in 0..n {
                        dx[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                dx
            });
            x.accumulate_grad(&dx);
        }
        Op::LayerNormRows {
            x,
            gain,
            bias,
            eps,
            mode,
        } => {
            let (m, n) = x.dims2();
            let (dx, dgain, dbias) = x.with_data(|xv| {
                gain.with_data(|gv| {
                    let mut dx = vec![S::ZERO; m * n];
                    let mut dgain = vec![S::ZERO; n];
                    let mut dbias = vec![S::ZERO; n];
                    let inv_n = S::from_f64(1.0 / n as f64);
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        match mode {
                            NormMode::Standard => {
                                let (mean, inv_std) = row_moments(row, *eps);
                                let mut mean_gh = S::ZERO;
                                let mut mean_ghx = S::ZERO;
                                let mut xhat = vec![S::ZERO; n];
                                for j in 0..n {
                                    xhat[j] = (row[j] - mean) * inv_std;
                                    let gh = grow[j] * gv[j];
                                    mean_gh += gh;
                                    mean_ghx += gh * xhat[j];
                                }
                                mean_gh *= inv_n;
                                mean_ghx *= inv_n;
                                for j in 0..n {
                                    let gh = grow[j] * gv[j];
                                    dx[i * n + j] =
                                        inv_std * (gh - mean_gh - xhat[j] * mean_ghx);
                                    dgain[j] += grow[j] * xhat[j];
                                    dbias[j] += grow[j];
                                }
                            }
                            NormMode::AffineOnly => {
                                for j in 0..n {
                                    dx[i * n + j] = grow[j] * gv[j];
                                    dgain[j] += grow[j] * row[j];
                                    dbias[j] += grow[j];
                                }
                            }
                        }
                    }
                    (dx, dgain, dbias)
                })
            });
            x.accumulate_grad(&dx);
            gain.accumulate_grad(&dgain);
            bias.accumulate_grad(&dbias);
        }
        Op::GradReversal { x } => {
            let dx: Vec<S> = g.iter().map(|v| -*v).collect();
            x.accumulate_grad(&dx);
        }
        Op::Dropout { x, mask } => {
            let dx: Vec<S> = g.iter().zip(mask).map(|(gi, mi)| *gi * *mi).collect();
            x.accumulate_grad(&dx);
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                p.accumulate_grad(&g[offset..offset + len]);
                offset += len;
            }
        }
        Op::ConcatCols { parts } => {
            let (m, total_cols) = out.dims2();
            let mut col_off = 0;
            for p in parts {
                let (_, pn) = p.dims2();
                let mut dp = vec![S::ZERO; m * pn];
                for i in 0..m {
                    dp[i * pn..(i + 1) * pn].copy_from_slice(
                        &g[i * total_cols + col_off..i * total_cols + col_off + pn],
                    );
                }
                p.accumulate_grad(&dp);
                col_off += pn;
            }
        }
        Op::MeanRows { x } => {
            let (m, n) = x.dims2();
            let inv_m = S::from_f64(1.0 / m as f64);
            let mut dx = vec![S::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j] * inv_m;
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::SumCols { x } => {
            let (m, n) = x.dims2();
            let mut dx = vec![S::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[i];
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::SumAll { x } => {
            let dx = vec![g[0]; x.numel()];
            x.accumulate_grad(&dx);
        }
        Op::FrobeniusSq { x } => {
            let two_g = S::from_f64(2.0) * g[0];
            let dx = x.with_data(|xv| xv.iter().map(|v| *v * two_g).collect::<Vec<_>>());
            x.accumulate_grad(&dx);
        }
        Op::AvgPoolRows { x, segments } => {
            let (m, n) = x.dims2();
            let mut dx = vec![S::ZERO; m * n];
            for (s, &(start, len)) in segments.iter().enumerate() {
                let inv = S::from_f64(1.0 / len as f64);
                for i in start..start + len {
                    for j in 0..n {
                        dx[i * n + j] = g[s * n + j] * inv;
                    }
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::BroadcastRows { x, rows } => {
            let n = x.numel();
            let mut dx = vec![S::ZERO; n];
            for i in 0..*rows {
                for j in 0..n {
                    dx[j] += g[i * n + j];
                }
            }
            x.accumulate_grad(&dx);
        }
    }
}
