//! Iterative layer flattening: affine fusion, pairwise block merging by
//! concatenation, greedy merge selection, and similarity bookkeeping.

use std::ops::Range;

use serde::Serialize;

use crate::calibration::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, LayerWeights, TransformerModel};

/// One merge step: which adjacent groups were joined and what they became.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeEvent {
    pub step: usize,
    pub left: Range<usize>,
    pub right: Range<usize>,
    pub merged: Range<usize>,
}

/// Record of an entire flattening run. Final groups partition the original
/// layer range; groups of size one were never touched.
#[derive(Debug, Clone, Default)]
pub struct MergePlan {
    pub events: Vec<MergeEvent>,
    pub final_groups: Vec<Range<usize>>,
}

/// Report form of a merge event.
#[derive(Debug, Clone, Serialize)]
pub struct MergeReportEntry {
    pub step: usize,
    pub merged_original_layers: Vec<usize>,
}

impl MergePlan {
    pub fn report_entries(&self) -> Vec<MergeReportEntry> {
        self.events
            .iter()
            .map(|e| MergeReportEntry {
                step: e.step,
                merged_original_layers: e.merged.clone().collect(),
            })
            .collect()
    }

    /// Groups that actually merged layers (size > 1).
    pub fn merged_groups(&self) -> Vec<Range<usize>> {
        self.final_groups
            .iter()
            .filter(|g| g.len() > 1)
            .cloned()
            .collect()
    }
}

fn is_ones(v: &[f32]) -> bool {
    v.iter().all(|&x| x == 1.0)
}

/// Absorb the RMSNorm affine vectors into the downstream projections:
/// `w_q/w_k/w_v` pick up `diag(alpha_attn)`, `w_u/w_g` pick up
/// `diag(alpha_mlp)`, and both alphas become ones. A no-op on layers whose
/// alphas are already ones, so repeated fusion is safe.
pub fn fuse_norm_affine(layer: &LayerWeights) -> LayerWeights {
    if is_ones(&layer.alpha_attn) && is_ones(&layer.alpha_mlp) {
        return layer.clone();
    }
    LayerWeights {
        w_q: layer.w_q.scale_rows(&layer.alpha_attn),
        w_k: layer.w_k.scale_rows(&layer.alpha_attn),
        w_v: layer.w_v.scale_rows(&layer.alpha_attn),
        w_o: layer.w_o.clone(),
        w_u: layer.w_u.scale_rows(&layer.alpha_mlp),
        w_g: layer.w_g.scale_rows(&layer.alpha_mlp),
        w_d: layer.w_d.clone(),
        alpha_attn: vec![1.0; layer.alpha_attn.len()],
        alpha_mlp: vec![1.0; layer.alpha_mlp.len()],
    }
}

/// Merge two affine-fused blocks into one wide block: attention heads and KV
/// groups concatenate (`a` first), MLP channels concatenate, and the output
/// projections stack so the merged block computes the sum of both branches
/// on a shared input.
pub fn flatten_pair(
    a: &LayerWeights,
    a_spec: &ArchSpec,
    b: &LayerWeights,
    b_spec: &ArchSpec,
) -> Result<(LayerWeights, ArchSpec)> {
    if a.w_q.rows() != b.w_q.rows() {
        return Err(Error::shape("flatten_pair d_model", a.w_q.rows(), b.w_q.rows()));
    }
    if a_spec.head_dim != b_spec.head_dim {
        return Err(Error::shape(
            "flatten_pair head_dim",
            a_spec.head_dim,
            b_spec.head_dim,
        ));
    }
    if a_spec.heads_per_group() != b_spec.heads_per_group() {
        // The head -> KV-group mapping is uniform; mixed ratios have no
        // defined concatenation.
        return Err(Error::InvalidConfig(format!(
            "flatten_pair: GQA ratios differ ({} vs {})",
            a_spec.heads_per_group(),
            b_spec.heads_per_group()
        )));
    }
    for (name, alpha) in [
        ("a.alpha_attn", &a.alpha_attn),
        ("a.alpha_mlp", &a.alpha_mlp),
        ("b.alpha_attn", &b.alpha_attn),
        ("b.alpha_mlp", &b.alpha_mlp),
    ] {
        if !is_ones(alpha) {
            return Err(Error::InvalidConfig(format!(
                "flatten_pair: {name} not fused (call fuse_norm_affine first)"
            )));
        }
    }

    let merged = LayerWeights {
        w_q: a.w_q.concat_cols(&b.w_q),
        w_k: a.w_k.concat_cols(&b.w_k),
        w_v: a.w_v.concat_cols(&b.w_v),
        w_o: a.w_o.concat_rows(&b.w_o),
        w_u: a.w_u.concat_cols(&b.w_u),
        w_g: a.w_g.concat_cols(&b.w_g),
        w_d: a.w_d.concat_rows(&b.w_d),
        alpha_attn: a.alpha_attn.clone(),
        alpha_mlp: a.alpha_mlp.clone(),
    };
    let spec = ArchSpec {
        n_heads: a_spec.n_heads + b_spec.n_heads,
        n_kv_groups: a_spec.n_kv_groups + b_spec.n_kv_groups,
        head_dim: a_spec.head_dim,
        intermediate: a_spec.intermediate + b_spec.intermediate,
    };
    Ok((merged, spec))
}

/// Index of the adjacent group pair `(g, g+1)` with the largest similarity
/// entry, ties broken toward the smaller index.
pub fn select_merge(s: &SimilarityMatrix) -> Result<usize> {
    let n = s.group_count();
    if n < 2 {
        return Err(Error::OutOfRange {
            context: "select_merge group count",
            value: n,
            min: 2,
            max: usize::MAX,
        });
    }
    let mut best = 0usize;
    let mut best_sim = f32::NEG_INFINITY;
    for g in 0..n - 1 {
        let sim = s.get(g, g + 1);
        if sim > best_sim {
            best_sim = sim;
            best = g;
        }
    }
    Ok(best)
}

/// Shrink the similarity matrix after merging the adjacent pair at `left`.
pub fn update_similarity(s: &mut SimilarityMatrix, left: usize) -> Result<()> {
    s.merge_adjacent(left)
}

/// Algorithm: greedily merge the most similar adjacent pair `n_merges`
/// times, fusing norm affines lazily as layers first participate. The
/// similarity matrix is consumed by deletion, never recomputed.
pub fn iterative_flatten(
    mut model: TransformerModel,
    s: &mut SimilarityMatrix,
    n_merges: usize,
) -> Result<(TransformerModel, MergePlan)> {
    let n_layers = model.layers.len();
    if s.group_count() != n_layers {
        return Err(Error::shape(
            "iterative_flatten groups",
            n_layers,
            s.group_count(),
        ));
    }
    if n_merges + 1 > n_layers {
        return Err(Error::OutOfRange {
            context: "iterative_flatten n_merges",
            value: n_merges,
            min: 0,
            max: n_layers.saturating_sub(1),
        });
    }

    let mut events = Vec::with_capacity(n_merges);
    for step in 0..n_merges {
        let g = select_merge(s)?;
        let left = fuse_norm_affine(&model.layers[g]);
        let right = fuse_norm_affine(&model.layers[g + 1]);
        let (merged, merged_spec) =
            flatten_pair(&left, &model.config.layers[g], &right, &model.config.layers[g + 1])?;
        model.layers[g] = merged;
        model.layers.remove(g + 1);
        model.config.layers[g] = merged_spec;
        model.config.layers.remove(g + 1);

        events.push(MergeEvent {
            step,
            left: s.groups()[g].clone(),
            right: s.groups()[g + 1].clone(),
            merged: s.groups()[g].start..s.groups()[g + 1].end,
        });
        update_similarity(s, g)?;
    }
    let plan = MergePlan {
        events,
        final_groups: s.groups().to_vec(),
    };
    Ok((model, plan))
}
