//! Shared test oracles. Everything here recomputes results through routes
//! that are independent of the library's own numeric paths: f64 scalar
//! loops, Jacobi rotations, and Cholesky normal equations.

#![allow(dead_code)]
// Index-explicit loops are the point of these oracles.
#![allow(clippy::needless_range_loop)]

use fgpt::model::{ArchSpec, ModelConfig, TransformerModel};
use fgpt::model_io::{generate_toy_model, tokenize_bytes, TokenStream};
use fgpt::numerics::Matrix;

/// The default toy configuration used by the acceptance runs.
pub fn default_toy_config(layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        vocab: 256,
        rope_base: 10000.0,
        norm_eps: 1e-6,
        layers: vec![
            ArchSpec {
                n_heads: 4,
                n_kv_groups: 4,
                head_dim: 16,
                intermediate: 256,
            };
            layers
        ],
    }
}

pub fn default_toy_model(seed: u64) -> TransformerModel {
    generate_toy_model(&default_toy_config(16), seed, 0.02).unwrap()
}

/// Deterministic pseudo-text calibration stream.
pub fn synthetic_stream(sequences: usize, seq_len: usize, seed: u64) -> TokenStream {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let bytes: Vec<u8> = (0..sequences * seq_len)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 56) as u8
        })
        .collect();
    tokenize_bytes(&bytes, seq_len).unwrap().take(sequences).unwrap()
}

/// Zero every block weight, leaving embeddings intact: a pure-residual model.
pub fn zero_blocks(model: &mut TransformerModel) {
    for layer in &mut model.layers {
        layer.w_q = Matrix::zeros(layer.w_q.rows(), layer.w_q.cols());
        layer.w_k = Matrix::zeros(layer.w_k.rows(), layer.w_k.cols());
        layer.w_v = Matrix::zeros(layer.w_v.rows(), layer.w_v.cols());
        layer.w_o = Matrix::zeros(layer.w_o.rows(), layer.w_o.cols());
        layer.w_u = Matrix::zeros(layer.w_u.rows(), layer.w_u.cols());
        layer.w_g = Matrix::zeros(layer.w_g.rows(), layer.w_g.cols());
        layer.w_d = Matrix::zeros(layer.w_d.rows(), layer.w_d.cols());
    }
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm().max(1e-30)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f32 {
    a.sub(b).max_abs()
}

// ---------------------------------------------------------------------------
// Jacobi eigensolver (f64, symmetric input)

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols());
    let mut a: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    let scale = a.iter().fold(0.0f64, |s, &v| s.max(v.abs())).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q].abs();
            }
        }
        if off < 1e-13 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

// ---------------------------------------------------------------------------
// Scalar-loop transformer reference (f64 end to end)

fn oracle_rms(x: &[Vec<f64>], alpha: &[f32], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter()
                .zip(alpha)
                .map(|(v, &a)| v * inv * a as f64)
                .collect()
        })
        .collect()
}

fn oracle_rope(row: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = row.len();
    let mut out = vec![0.0; d];
    for j in 0..d / 2 {
        let theta = pos as f64 * base.powf(-2.0 * j as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        out[2 * j] = row[2 * j] * c - row[2 * j + 1] * s;
        out[2 * j + 1] = row[2 * j] * s + row[2 * j + 1] * c;
    }
    out
}

fn oracle_matvec(x: &[f64], w: &Matrix, col_start: usize, cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|c| {
            (0..x.len())
                .map(|r| x[r] * w.get(r, col_start + c) as f64)
                .sum()
        })
        .collect()
}

/// Brute-force causal grouped-query attention in f64 scalar loops.
pub fn oracle_mha(
    x: &[Vec<f64>],
    layer: &fgpt::model::LayerWeights,
    spec: &ArchSpec,
    rope_base: f64,
) -> Vec<Vec<f64>> {
    let t = x.len();
    let d = layer.w_o.cols();
    let d_h = spec.head_dim;
    let mut out = vec![vec![0.0f64; d]; t];
    for head in 0..spec.n_heads {
        let group = head / spec.heads_per_group();
        let q: Vec<Vec<f64>> = (0..t)
            .map(|r| oracle_rope(&oracle_matvec(&x[r], &layer.w_q, head * d_h, d_h), r, rope_base))
            .collect();
        let k: Vec<Vec<f64>> = (0..t)
            .map(|r| oracle_rope(&oracle_matvec(&x[r], &layer.w_k, group * d_h, d_h), r, rope_base))
            .collect();
        let v: Vec<Vec<f64>> = (0..t)
            .map(|r| oracle_matvec(&x[r], &layer.w_v, group * d_h, d_h))
            .collect();
        let scale = 1.0 / (d_h as f64).sqrt();
        for row in 0..t {
            let logits: Vec<f64> = (0..=row)
                .map(|col| q[row].iter().zip(&k[col]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut head_out = vec![0.0f64; d_h];
            for col in 0..=row {
                let p = exps[col] / z;
                for c in 0..d_h {
                    head_out[c] += p * v[col][c];
                }
            }
            for c in 0..d {
                for hc in 0..d_h {
                    out[row][c] += head_out[hc] * layer.w_o.get(head * d_h + hc, c) as f64;
                }
            }
        }
    }
    out
}

/// Gated MLP in f64 scalar loops.
pub fn oracle_mlp(x: &[Vec<f64>], layer: &fgpt::model::LayerWeights) -> Vec<Vec<f64>> {
    let d_int = layer.w_u.cols();
    let d = layer.w_d.cols();
    x.iter()
        .map(|row| {
            let hidden: Vec<f64> = (0..d_int)
                .map(|c| {
                    let up: f64 = (0..row.len()).map(|r| row[r] * layer.w_u.get(r, c) as f64).sum();
                    let gate: f64 =
                        (0..row.len()).map(|r| row[r] * layer.w_g.get(r, c) as f64).sum();
                    up * (gate / (1.0 + (-gate).exp()))
                })
                .collect();
            (0..d)
                .map(|c| (0..d_int).map(|h| hidden[h] * layer.w_d.get(h, c) as f64).sum())
                .collect()
        })
        .collect()
}

/// Full from-scratch forward pass to logits (f64 everywhere).
pub fn oracle_forward(model: &TransformerModel, tokens: &[u32]) -> Vec<Vec<f64>> {
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&id| {
            model
                .embedding
                .row(id as usize)
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let eps = model.config.norm_eps as f64;
    let base = model.config.rope_base as f64;
    for (layer, spec) in model.layers.iter().zip(&model.config.layers) {
        let attn = oracle_mha(&oracle_rms(&h, &layer.alpha_attn, eps), layer, spec, base);
        for (hr, ar) in h.iter_mut().zip(&attn) {
            for (hv, av) in hr.iter_mut().zip(ar) {
                *hv += av;
            }
        }
        let mlp = oracle_mlp(&oracle_rms(&h, &layer.alpha_mlp, eps), layer);
        for (hr, mr) in h.iter_mut().zip(&mlp) {
            for (hv, mv) in hr.iter_mut().zip(mr) {
                *hv += mv;
            }
        }
    }
    let normed = oracle_rms(&h, &model.final_norm_alpha, eps);
    normed
        .iter()
        .map(|row| {
            (0..model.config.vocab)
                .map(|c| {
                    (0..row.len())
                        .map(|r| row[r] * model.unembedding.get(r, c) as f64)
                        .sum()
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ridge-regression oracle for the down-projection compensation

/// Solve the regularized least-squares objective
///   min_D || A_kept D - (A W_D - A_kept W_D[kept]) ||_F^2 + lambda ||D||_F^2
/// by Cholesky normal equations assembled column by column from the raw
/// activations `a` (tokens x d_int, f64).
pub fn oracle_ridge_update(
    a: &[Vec<f64>],
    w_d: &Matrix,
    kept: &[usize],
    lambda: f64,
) -> Vec<Vec<f64>> {
    let n = a.len();
    let k = kept.len();
    let d = w_d.cols();
    let d_int = w_d.rows();
    let dropped: Vec<usize> = (0..d_int).filter(|i| !kept.contains(i)).collect();

    // Gram matrix of the kept design columns plus ridge.
    let mut gram = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = (0..n).map(|t| a[t][kept[i]] * a[t][kept[j]]).sum();
        }
        gram[i * k + i] += lambda;
    }
    let chol = cholesky(&gram, k);

    // Right-hand sides: X^T y per output column.
    let mut delta = vec![vec![0.0f64; d]; k];
    for c in 0..d {
        let y: Vec<f64> = (0..n)
            .map(|t| {
                dropped
                    .iter()
                    .map(|&ch| a[t][ch] * w_d.get(ch, c) as f64)
                    .sum()
            })
            .collect();
        let rhs: Vec<f64> = (0..k).map(|i| (0..n).map(|t| a[t][kept[i]] * y[t]).sum()).collect();
        let x = chol_solve(&chol, k, &rhs);
        for i in 0..k {
            delta[i][c] = x[i];
        }
    }
    delta
}

fn cholesky(m: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                assert!(s > 0.0, "oracle Cholesky needs positive definiteness");
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    l
}

fn chol_solve(l: &[f64], n: usize, rhs: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = rhs[i];
        for j in 0..i {
            s -= l[i * n + j] * y[j];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in (i + 1)..n {
            s -= l[j * n + i] * x[j];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Gated activation computed independently in f64 scalar loops, for
/// assembling oracle inputs: rows of `(x w_u) .* silu(x w_g)`.
pub fn oracle_gated_activation(x: &Matrix, layer: &fgpt::model::LayerWeights) -> Vec<Vec<f64>> {
    let d_int = layer.w_u.cols();
    (0..x.rows())
        .map(|t| {
            let row: Vec<f64> = x.row(t).iter().map(|&v| v as f64).collect();
            (0..d_int)
                .map(|c| {
                    let up: f64 =
                        (0..row.len()).map(|r| row[r] * layer.w_u.get(r, c) as f64).sum();
                    let gate: f64 =
                        (0..row.len()).map(|r| row[r] * layer.w_g.get(r, c) as f64).sum();
                    up * (gate / (1.0 + (-gate).exp()))
                })
                .collect()
        })
        .collect()
}

/// MLP output MSE of `layer` against reference outputs, on given inputs.
pub fn mlp_mse(
    inputs: &[Matrix],
    layer: &fgpt::model::LayerWeights,
    reference: &[Matrix],
) -> f64 {
    let mut sq = 0.0f64;
    let mut count = 0usize;
    for (x, want) in inputs.iter().zip(reference) {
        let got = fgpt::model::mlp_forward(x, layer).unwrap();
        for (&g, &w) in got.data().iter().zip(want.data()) {
            let diff = g as f64 - w as f64;
            sq += diff * diff;
        }
        count += want.data().len();
    }
    sq / count as f64
}
