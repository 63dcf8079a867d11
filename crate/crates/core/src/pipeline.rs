//! End-to-end compression: flatten, recalibrate, prune every merged MLP,
//! recalibrate, prune every merged MHA, and account for the result.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::calibration::{record_traces_with_logits, similarity_matrix, TraceSet};
use crate::error::{Error, Result};
use crate::flatten::{iterative_flatten, MergePlan, MergeReportEntry};
use crate::model::{rms_norm, ArchSpec, TransformerModel};
use crate::model_io::TokenStream;
use crate::numerics::Matrix;
use crate::prune_mha::{head_importance, prune_heads, prune_kv_groups};
use crate::prune_mlp::{prune_mlp, LeverageSummary};

/// Everything a compression run needs decided up front. The per-layer
/// targets equal the original architecture, so each merged group is pruned
/// back to a single ordinary layer.
#[derive(Debug, Clone, Serialize)]
pub struct CompressionPlan {
    pub target_sparsity: f64,
    pub n_merges: usize,
    pub head_target: usize,
    pub kv_group_target: usize,
    pub intermediate_target: usize,
    pub lambda_scale: f64,
    pub calib_sequences: usize,
    pub calib_seq_len: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub name: &'static str,
    pub params: usize,
    pub logit_mse_vs_dense: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerLayerReport {
    /// Head importance per compressed layer index, recorded before MHA pruning.
    pub head_importance: BTreeMap<usize, Vec<f32>>,
    /// Leverage-score summary per compressed layer index.
    pub leverage_summary: BTreeMap<usize, LeverageSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub merges: Vec<MergeReportEntry>,
    /// Fraction of all parameters removed, embeddings included.
    pub achieved_sparsity: f64,
    /// Fraction of block weight parameters removed.
    pub achieved_block_sparsity: f64,
    pub stages: Vec<StageReport>,
    pub per_layer: PerLayerReport,
}

fn uniform_arch(model: &TransformerModel) -> Result<ArchSpec> {
    let first = *model
        .config
        .layers
        .first()
        .ok_or_else(|| Error::InvalidConfig("model has no layers".into()))?;
    if model.config.layers.iter().any(|s| *s != first) {
        return Err(Error::InvalidConfig(
            "compression expects a uniform architecture; layer widths differ".into(),
        ));
    }
    Ok(first)
}

impl CompressionPlan {
    /// Plan with an explicit merge count; targets come from the model's
    /// (uniform) architecture.
    pub fn with_merges(
        model: &TransformerModel,
        n_merges: usize,
        lambda_scale: f64,
        calib_sequences: usize,
        calib_seq_len: usize,
    ) -> Result<Self> {
        let arch = uniform_arch(model)?;
        let layers = model.config.n_layers();
        if n_merges + 1 > layers {
            return Err(Error::OutOfRange {
                context: "CompressionPlan n_merges",
                value: n_merges,
                min: 0,
                max: layers - 1,
            });
        }
        let per_layer_block = model.block_param_count() as f64 / layers as f64;
        Ok(CompressionPlan {
            target_sparsity: n_merges as f64 * per_layer_block / model.param_count() as f64,
            n_merges,
            head_target: arch.n_heads,
            kv_group_target: arch.n_kv_groups,
            intermediate_target: arch.intermediate,
            lambda_scale,
            calib_sequences,
            calib_seq_len,
        })
    }
}

/// Derive the merge count from a whole-model sparsity target: each merge
/// later collapses to one original layer, removing one layer's block
/// parameters.
pub fn plan_compression(
    model: &TransformerModel,
    target_sparsity: f64,
    lambda_scale: f64,
    calib_sequences: usize,
    calib_seq_len: usize,
) -> Result<CompressionPlan> {
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target sparsity {target_sparsity} must lie in (0, 1)"
        )));
    }
    let layers = model.config.n_layers();
    let total = model.param_count() as f64;
    let per_layer_block = model.block_param_count() as f64 / layers as f64;
    let n_merges = (target_sparsity * total / per_layer_block).round() as usize;
    if n_merges < 1 {
        return Err(Error::InvalidConfig(format!(
            "target sparsity {target_sparsity} rounds to zero merges; minimum achievable is {:.4}",
            per_layer_block / (2.0 * total) // half a layer rounds up to one merge
        )));
    }
    if n_merges > layers - 1 {
        return Err(Error::InvalidConfig(format!(
            "target sparsity {target_sparsity} needs {n_merges} merges, model allows {}",
            layers - 1
        )));
    }
    let mut plan =
        CompressionPlan::with_merges(model, n_merges, lambda_scale, calib_sequences, calib_seq_len)?;
    plan.target_sparsity = target_sparsity;
    Ok(plan)
}

/// Mean squared difference between two stacks of per-sequence logits.
fn logit_mse(a: &[Matrix], b: &[Matrix]) -> f64 {
    let mut sq = 0.0f64;
    let mut count = 0usize;
    for (ma, mb) in a.iter().zip(b) {
        for (&x, &y) in ma.data().iter().zip(mb.data()) {
            let d = x as f64 - y as f64;
            sq += d * d;
        }
        count += ma.data().len();
    }
    sq / count as f64
}

/// Layer indices (in the flattened model) that came from merging, i.e. the
/// groups that still need pruning back to the original architecture.
fn merged_layer_indices(plan: &MergePlan) -> Vec<usize> {
    plan.final_groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() > 1)
        .map(|(i, _)| i)
        .collect()
}

/// Run the full pipeline. Stage order: calibrate the dense model, flatten,
/// recalibrate, prune every merged MLP, recalibrate, prune every merged
/// MHA. Untouched layers pass through unmodified; the result is a uniform
/// model with the original per-layer architecture at reduced depth.
pub fn compress(
    model: &TransformerModel,
    plan: &CompressionPlan,
    calib: &TokenStream,
) -> Result<(TransformerModel, CompressionReport)> {
    model.validate()?;
    uniform_arch(model)?;
    let dense_params = model.param_count();
    let dense_block_params = model.block_param_count();
    let mut stages = Vec::new();

    // Stage 1: dense calibration and the similarity matrix.
    let t0 = Instant::now();
    let (dense_logits, dense_traces) =
        record_traces_with_logits(model, calib).map_err(Error::in_stage("dense"))?;
    let mut sim = similarity_matrix(&dense_traces).map_err(Error::in_stage("dense"))?;
    drop(dense_traces);
    stages.push(StageReport {
        name: "dense",
        params: dense_params,
        logit_mse_vs_dense: 0.0,
        seconds: t0.elapsed().as_secs_f64(),
    });

    // Stage 2: iterative flattening.
    let t0 = Instant::now();
    let (flat, merge_plan) = iterative_flatten(model.clone(), &mut sim, plan.n_merges)
        .map_err(Error::in_stage("flatten"))?;
    let (flat_logits, flat_traces) =
        record_traces_with_logits(&flat, calib).map_err(Error::in_stage("flatten"))?;
    stages.push(StageReport {
        name: "flatten",
        params: flat.param_count(),
        logit_mse_vs_dense: logit_mse(&dense_logits, &flat_logits),
        seconds: t0.elapsed().as_secs_f64(),
    });
    drop(flat_logits);

    // Stage 3: MLP pruning on every merged layer.
    let t0 = Instant::now();
    let merged_layers = merged_layer_indices(&merge_plan);
    let mut pruned = flat;
    let mut leverage_summaries = BTreeMap::new();
    for &idx in &merged_layers {
        let inputs = normed_inputs(&flat_traces, idx, &pruned, NormKind::Mlp)
            .map_err(Error::in_stage("prune_mlp"))?;
        let (layer, spec, summary) = prune_mlp(
            &pruned.layers[idx],
            &pruned.config.layers[idx],
            plan.intermediate_target,
            &inputs,
            plan.lambda_scale,
        )
        .map_err(Error::in_stage("prune_mlp"))?;
        pruned.layers[idx] = layer;
        pruned.config.layers[idx] = spec;
        leverage_summaries.insert(idx, summary);
    }
    drop(flat_traces);
    let (mlp_logits, mlp_traces) =
        record_traces_with_logits(&pruned, calib).map_err(Error::in_stage("prune_mlp"))?;
    stages.push(StageReport {
        name: "prune_mlp",
        params: pruned.param_count(),
        logit_mse_vs_dense: logit_mse(&dense_logits, &mlp_logits),
        seconds: t0.elapsed().as_secs_f64(),
    });
    drop(mlp_logits);

    // Stage 4: MHA pruning on every merged layer, from post-MLP traces.
    let t0 = Instant::now();
    let mut head_scores = BTreeMap::new();
    for &idx in &merged_layers {
        let inputs = normed_inputs(&mlp_traces, idx, &pruned, NormKind::Attn)
            .map_err(Error::in_stage("prune_mha"))?;
        let spec = pruned.config.layers[idx];
        let importance = head_importance(&pruned.layers[idx], &spec, pruned.config.rope_base, &inputs)
            .map_err(Error::in_stage("prune_mha"))?;
        let (layer, new_spec) = if spec.n_kv_groups == spec.n_heads {
            prune_heads(&pruned.layers[idx], &spec, plan.head_target, &importance)
        } else {
            prune_kv_groups(&pruned.layers[idx], &spec, plan.kv_group_target, &importance)
        }
        .map_err(Error::in_stage("prune_mha"))?;
        pruned.layers[idx] = layer;
        pruned.config.layers[idx] = new_spec;
        head_scores.insert(idx, importance.scores);
    }
    drop(mlp_traces);
    let mut final_logits = Vec::with_capacity(calib.len());
    for seq in calib.sequences() {
        final_logits.push(pruned.forward(seq).map_err(Error::in_stage("prune_mha"))?);
    }
    stages.push(StageReport {
        name: "prune_mha",
        params: pruned.param_count(),
        logit_mse_vs_dense: logit_mse(&dense_logits, &final_logits),
        seconds: t0.elapsed().as_secs_f64(),
    });

    pruned.validate()?;
    let report = CompressionReport {
        merges: merge_plan.report_entries(),
        achieved_sparsity: 1.0 - pruned.param_count() as f64 / dense_params as f64,
        achieved_block_sparsity: 1.0
            - pruned.block_param_count() as f64 / dense_block_params as f64,
        stages,
        per_layer: PerLayerReport {
            head_importance: head_scores,
            leverage_summary: leverage_summaries,
        },
    };
    Ok((pruned, report))
}

enum NormKind {
    Attn,
    Mlp,
}

/// LN-normalized inputs of one layer across all traced sequences: the layer
/// input under the attention affine, or the post-attention state under the
/// MLP affine.
fn normed_inputs(
    traces: &TraceSet,
    layer_idx: usize,
    model: &TransformerModel,
    kind: NormKind,
) -> Result<Vec<Matrix>> {
    let layer = &model.layers[layer_idx];
    let eps = model.config.norm_eps;
    traces
        .iter()
        .map(|seq| {
            let t = &seq[layer_idx];
            match kind {
                NormKind::Attn => rms_norm(&t.input, &layer.alpha_attn, eps),
                NormKind::Mlp => rms_norm(&t.post_attn, &layer.alpha_mlp, eps),
            }
        })
        .collect()
}
