//! MLP channel pruning: activation correlation, ridge leverage scores,
//! top-k channel selection, and the closed-form down-projection update that
//! compensates the removed channels.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{gated_hidden, ArchSpec, LayerWeights};
use crate::numerics::{mean_eigenvalue, spd_solve, Matrix, SpdMatrix};

/// Ordered kept-channel indices; stands for the 0/1 column-selection matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionIndex {
    indices: Vec<usize>,
}

impl SelectionIndex {
    pub fn new(mut indices: Vec<usize>, d_int: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate channel index".into()));
        }
        if indices.last().is_some_and(|&i| i >= d_int) {
            return Err(Error::OutOfRange {
                context: "SelectionIndex",
                value: *indices.last().unwrap(),
                min: 0,
                max: d_int - 1,
            });
        }
        Ok(SelectionIndex { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gram matrix of the gated hidden activations over the calibration set,
/// plus the token count that went into it.
#[derive(Debug, Clone)]
pub struct ActivationCorrelation {
    matrix: SpdMatrix,
    tokens: usize,
}

impl ActivationCorrelation {
    /// Wrap a correlation assembled elsewhere (e.g. streamed in chunks).
    pub fn from_matrix(matrix: SpdMatrix, tokens: usize) -> Self {
        ActivationCorrelation { matrix, tokens }
    }

    pub fn matrix(&self) -> &SpdMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

/// Summary statistics for the compression report.
#[derive(Debug, Clone, Serialize)]
pub struct LeverageSummary {
    pub min: f32,
    pub median: f32,
    pub max: f32,
    /// Fraction of the total leverage mass kept by the selection.
    pub kept_mass: f32,
    pub lambda: f64,
    pub degenerate: bool,
}

/// Accumulate `sum_i A_i^T A_i` over calibration sequences, where `A_i` is
/// the gated hidden activation of this layer on the already LN-normalized
/// input `X_i`. Accumulation is in f64 and the result is symmetrized.
pub fn activation_correlation(
    layer: &LayerWeights,
    normed_inputs: &[Matrix],
) -> Result<ActivationCorrelation> {
    if normed_inputs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let d_int = layer.w_u.cols();
    let mut acc = vec![0.0f64; d_int * d_int];
    let mut tokens = 0usize;
    for x in normed_inputs {
        let a = gated_hidden(x, layer);
        tokens += a.rows();
        for r in 0..a.rows() {
            let row = a.row(r);
            // Upper triangle only; mirrored below.
            for i in 0..d_int {
                let ai = row[i] as f64;
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut acc[i * d_int..(i + 1) * d_int];
                for (j, &aj) in row.iter().enumerate().skip(i) {
                    dst[j] += ai * aj as f64;
                }
            }
        }
    }
    let mut m = Matrix::zeros(d_int, d_int);
    for i in 0..d_int {
        for j in i..d_int {
            let v = acc[i * d_int + j] as f32;
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    Ok(ActivationCorrelation {
        matrix: SpdMatrix::new(m)?,
        tokens,
    })
}

/// Ridge intensity: `scale` times the mean singular value of the
/// correlation matrix (trace over dimension, exact for SPD).
pub fn lambda_policy(c: &ActivationCorrelation, scale: f64) -> f64 {
    scale * mean_eigenvalue(c.matrix())
}

/// Ridge leverage scores `s_i = [C (C + lambda I)^-1]_ii`, clamped into
/// `[0, 1]` against rounding.
pub fn ridge_leverage_scores(c: &ActivationCorrelation, lambda: f64) -> Result<Vec<f32>> {
    let solved = spd_solve(c.matrix(), lambda, c.matrix().as_matrix())?;
    Ok((0..c.dim())
        .map(|i| solved.get(i, i).clamp(0.0, 1.0))
        .collect())
}

/// Indices of the `k` largest scores, ties toward the smaller index,
/// returned in increasing channel order.
pub fn select_channels(scores: &[f32], k: usize) -> Result<SelectionIndex> {
    if k == 0 || k > scores.len() {
        return Err(Error::OutOfRange {
            context: "select_channels k",
            value: k,
            min: 1,
            max: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    SelectionIndex::new(order[..k].to_vec(), scores.len())
}

/// Closed-form compensation for the surviving down-projection rows:
/// `(S^T C S + lambda I)^-1 S^T C (I - S S^T) W_D`, a k x d matrix added to
/// the selected rows of `W_D`.
pub fn nystrom_update(
    w_d: &Matrix,
    c: &ActivationCorrelation,
    sel: &SelectionIndex,
    lambda: f64,
) -> Result<Matrix> {
    let d_int = c.dim();
    if w_d.rows() != d_int {
        return Err(Error::shape("nystrom_update", d_int, w_d.rows()));
    }
    let kept = sel.indices();
    let dropped: Vec<usize> = (0..d_int).filter(|i| !kept.contains(i)).collect();
    if dropped.is_empty() {
        return Ok(Matrix::zeros(kept.len(), w_d.cols()));
    }

    let c_full = c.matrix().as_matrix();
    // S^T C (I - S S^T) W_D = C[kept, dropped] * W_D[dropped, :]
    let rhs = c_full
        .select_rows(kept)
        .select_cols(&dropped)
        .matmul(&w_d.select_rows(&dropped));
    let c_kk = SpdMatrix::new(c_full.select_rows(kept).select_cols(kept))?;
    spd_solve(&c_kk, lambda, &rhs).map_err(|e| match e {
        Error::SingularSystem {
            pivot, threshold, ..
        } => Error::SingularSystem {
            context: format!(
                "nystrom_update (kept {} of {} channels, lambda {lambda:.3e})",
                kept.len(),
                d_int
            ),
            pivot,
            threshold,
        },
        other => other,
    })
}

/// Prune one MLP to `k` channels: select by ridge leverage score, slice the
/// up/gate columns, and compensate the surviving down rows. A layer whose
/// calibration activations are identically zero falls back to keeping the
/// first `k` channels without compensation.
pub fn prune_mlp(
    layer: &LayerWeights,
    spec: &ArchSpec,
    k: usize,
    normed_inputs: &[Matrix],
    lambda_scale: f64,
) -> Result<(LayerWeights, ArchSpec, LeverageSummary)> {
    let d_int = spec.intermediate;
    if k == 0 || k > d_int {
        return Err(Error::OutOfRange {
            context: "prune_mlp k",
            value: k,
            min: 1,
            max: d_int,
        });
    }
    let c = activation_correlation(layer, normed_inputs)?;
    let lambda = lambda_policy(&c, lambda_scale);

    let degenerate = c.matrix().trace() == 0.0;
    let (sel, summary) = if degenerate {
        log::warn!("MLP activations are identically zero; keeping the first {k} channels");
        let sel = SelectionIndex::new((0..k).collect(), d_int)?;
        let summary = LeverageSummary {
            min: 0.0,
            median: 0.0,
            max: 0.0,
            kept_mass: 0.0,
            lambda,
            degenerate: true,
        };
        (sel, summary)
    } else {
        let scores = ridge_leverage_scores(&c, lambda)?;
        let sel = select_channels(&scores, k)?;
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let total: f64 = scores.iter().map(|&s| s as f64).sum();
        let kept: f64 = sel.indices().iter().map(|&i| scores[i] as f64).sum();
        let summary = LeverageSummary {
            min: sorted[0],
            median: sorted[sorted.len() / 2],
            max: sorted[sorted.len() - 1],
            kept_mass: if total > 0.0 { (kept / total) as f32 } else { 0.0 },
            lambda,
            degenerate: false,
        };
        (sel, summary)
    };

    let delta = if degenerate {
        Matrix::zeros(k, layer.w_d.cols())
    } else {
        nystrom_update(&layer.w_d, &c, &sel, lambda)?
    };

    let pruned = LayerWeights {
        w_q: layer.w_q.clone(),
        w_k: layer.w_k.clone(),
        w_v: layer.w_v.clone(),
        w_o: layer.w_o.clone(),
        w_u: layer.w_u.select_cols(sel.indices()),
        w_g: layer.w_g.select_cols(sel.indices()),
        w_d: layer.w_d.select_rows(sel.indices()).add(&delta),
        alpha_attn: layer.alpha_attn.clone(),
        alpha_mlp: layer.alpha_mlp.clone(),
    };
    let new_spec = ArchSpec {
        intermediate: k,
        ..*spec
    };
    Ok((pruned, new_spec, summary))
}
