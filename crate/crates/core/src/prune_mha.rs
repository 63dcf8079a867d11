//! Attention head pruning: calibration-driven head importance, head removal
//! for full multi-head layers, and whole-KV-group removal for GQA layers.

use crate::error::{Error, Result};
use crate::model::{head_attention, rope_apply, ArchSpec, LayerWeights};
use crate::numerics::Matrix;

/// Per-head importance scores. Higher keeps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadImportance {
    pub scores: Vec<f32>,
}

/// Importance of each head: the mean over calibration tokens of the L2 norm
/// of the head's attention activation row, scaled columnwise by the L2
/// norms of the head's output-projection rows. Inputs must already be
/// LN-normalized with the layer's attention affine.
pub fn head_importance(
    layer: &LayerWeights,
    spec: &ArchSpec,
    rope_base: f32,
    normed_inputs: &[Matrix],
) -> Result<HeadImportance> {
    if normed_inputs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let d_h = spec.head_dim;
    // diag(W_O,i W_O,i^T)^{1/2}: per-row L2 norms of each head's output slab.
    let out_row_norms: Vec<Vec<f64>> = (0..spec.n_heads)
        .map(|head| {
            (0..d_h)
                .map(|r| {
                    layer
                        .w_o
                        .row(head * d_h + r)
                        .iter()
                        .map(|&v| (v as f64) * (v as f64))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();

    let mut sums = vec![0.0f64; spec.n_heads];
    let mut tokens = 0usize;
    for x in normed_inputs {
        let positions: Vec<usize> = (0..x.rows()).collect();
        tokens += x.rows();
        for g in 0..spec.n_kv_groups {
            let k = rope_apply(
                &x.matmul(&layer.w_k.col_range(g * d_h, (g + 1) * d_h)),
                &positions,
                rope_base,
            )?;
            let v = x.matmul(&layer.w_v.col_range(g * d_h, (g + 1) * d_h));
            for local in 0..spec.heads_per_group() {
                let head = g * spec.heads_per_group() + local;
                let attn = head_attention(x, layer, head, &k, &v, &positions, rope_base)?;
                let norms = &out_row_norms[head];
                for r in 0..attn.rows() {
                    let row = attn.row(r);
                    let sq: f64 = row
                        .iter()
                        .zip(norms)
                        .map(|(&a, &w)| {
                            let s = a as f64 * w;
                            s * s
                        })
                        .sum();
                    sums[head] += sq.sqrt();
                }
            }
        }
    }
    Ok(HeadImportance {
        scores: sums.iter().map(|&s| (s / tokens as f64) as f32).collect(),
    })
}

/// Keep the `count` highest-scoring entries of `scores` (ties toward the
/// smaller index), returned in their original order.
fn top_k_stable(scores: &[f32], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept = order[..count].to_vec();
    kept.sort_unstable();
    kept
}

fn slab_indices(slabs: &[usize], width: usize) -> Vec<usize> {
    slabs
        .iter()
        .flat_map(|&s| (s * width..(s + 1) * width).collect::<Vec<_>>())
        .collect()
}

/// Remove whole heads from a non-GQA layer, keeping the `k` with the
/// largest importance. GQA layers must go through `prune_kv_groups` so the
/// query/KV pairing stays intact.
pub fn prune_heads(
    layer: &LayerWeights,
    spec: &ArchSpec,
    k: usize,
    importance: &HeadImportance,
) -> Result<(LayerWeights, ArchSpec)> {
    if spec.n_kv_groups != spec.n_heads {
        return Err(Error::InvalidConfig(format!(
            "prune_heads requires one KV group per head ({} heads, {} groups); use prune_kv_groups",
            spec.n_heads, spec.n_kv_groups
        )));
    }
    if k == 0 || k > spec.n_heads {
        return Err(Error::OutOfRange {
            context: "prune_heads k",
            value: k,
            min: 1,
            max: spec.n_heads,
        });
    }
    if importance.scores.len() != spec.n_heads {
        return Err(Error::shape(
            "prune_heads importance",
            spec.n_heads,
            importance.scores.len(),
        ));
    }
    let kept = top_k_stable(&importance.scores, k);
    Ok(keep_groups(layer, spec, &kept))
}

/// GQA pruning: rank whole KV groups by the summed importance of their
/// member heads and remove the least important groups together with their
/// attached queries, preserving the heads-per-group ratio.
pub fn prune_kv_groups(
    layer: &LayerWeights,
    spec: &ArchSpec,
    k_groups: usize,
    importance: &HeadImportance,
) -> Result<(LayerWeights, ArchSpec)> {
    if k_groups == 0 || k_groups > spec.n_kv_groups {
        return Err(Error::OutOfRange {
            context: "prune_kv_groups k_groups",
            value: k_groups,
            min: 1,
            max: spec.n_kv_groups,
        });
    }
    if importance.scores.len() != spec.n_heads {
        return Err(Error::shape(
            "prune_kv_groups importance",
            spec.n_heads,
            importance.scores.len(),
        ));
    }
    let ratio = spec.heads_per_group();
    let group_scores: Vec<f32> = (0..spec.n_kv_groups)
        .map(|g| importance.scores[g * ratio..(g + 1) * ratio].iter().sum())
        .collect();
    let kept = top_k_stable(&group_scores, k_groups);
    Ok(keep_groups(layer, spec, &kept))
}

/// Slice out the given KV groups (and their heads), preserving order.
fn keep_groups(layer: &LayerWeights, spec: &ArchSpec, kept_groups: &[usize]) -> (LayerWeights, ArchSpec) {
    let ratio = spec.heads_per_group();
    let d_h = spec.head_dim;
    let kept_heads: Vec<usize> = kept_groups
        .iter()
        .flat_map(|&g| (g * ratio..(g + 1) * ratio).collect::<Vec<_>>())
        .collect();
    let head_cols = slab_indices(&kept_heads, d_h);
    let group_cols = slab_indices(kept_groups, d_h);

    let pruned = LayerWeights {
        w_q: layer.w_q.select_cols(&head_cols),
        w_k: layer.w_k.select_cols(&group_cols),
        w_v: layer.w_v.select_cols(&group_cols),
        w_o: layer.w_o.select_rows(&head_cols),
        w_u: layer.w_u.clone(),
        w_g: layer.w_g.clone(),
        w_d: layer.w_d.clone(),
        alpha_attn: layer.alpha_attn.clone(),
        alpha_mlp: layer.alpha_mlp.clone(),
    };
    let new_spec = ArchSpec {
        n_heads: kept_heads.len(),
        n_kv_groups: kept_groups.len(),
        ..*spec
    };
    (pruned, new_spec)
}
