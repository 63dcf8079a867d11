//! Evaluation: next-token perplexity, logit divergence against a reference
//! model, the layer-drop baseline, and forward-latency benchmarking.

use std::ops::Range;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::model_io::TokenStream;
use crate::numerics::Matrix;

/// Divergence of a compressed model from its dense reference.
#[derive(Debug, Clone, Serialize)]
pub struct DivergenceMetrics {
    /// Mean squared difference over every logit.
    pub logit_mse: f64,
    /// Mean per-token KL divergence, reference distribution first.
    pub mean_kl: f64,
    pub ppl_reference: f64,
    pub ppl_model: f64,
}

/// Wall-clock statistics of repeated forward passes.
#[derive(Debug, Clone, Serialize)]
pub struct BenchStats {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub tokens_per_s: f64,
    pub threads: usize,
}

/// Log-probabilities of each row of `logits` via a stabilized log-sum-exp.
fn log_softmax_row(row: &[f32], out: &mut [f64]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let d = v as f64 - max;
        *o = d;
        sum += d.exp();
    }
    let log_z = sum.ln();
    for o in out.iter_mut() {
        *o -= log_z;
    }
}

/// Total negative log likelihood and position count of next-token
/// prediction for one sequence's logits.
pub fn sequence_nll(logits: &Matrix, tokens: &[u32]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::OutOfRange {
            context: "sequence_nll tokens",
            value: tokens.len(),
            min: 2,
            max: usize::MAX,
        });
    }
    assert_eq!(logits.rows(), tokens.len(), "one logit row per token");
    let mut log_probs = vec![0.0f64; logits.cols()];
    let mut nll = 0.0f64;
    for pos in 0..tokens.len() - 1 {
        let target = tokens[pos + 1] as usize;
        log_softmax_row(logits.row(pos), &mut log_probs);
        nll -= log_probs[target];
    }
    Ok((nll, tokens.len() - 1))
}

/// Perplexity: the exponentiated mean next-token cross-entropy over every
/// prediction position in the stream.
pub fn perplexity(model: &TransformerModel, tokens: &TokenStream) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for seq in tokens.sequences() {
        let logits = model.forward(seq)?;
        let (n, c) = sequence_nll(&logits, seq)?;
        nll += n;
        count += c;
    }
    Ok((nll / count as f64).exp())
}

/// Logit MSE, mean KL (reference first), and both perplexities in a single
/// pass over the stream.
pub fn logit_divergence(
    reference: &TransformerModel,
    model: &TransformerModel,
    tokens: &TokenStream,
) -> Result<DivergenceMetrics> {
    if reference.config.vocab != model.config.vocab {
        return Err(Error::shape(
            "logit_divergence vocab",
            reference.config.vocab,
            model.config.vocab,
        ));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let vocab = reference.config.vocab;
    let mut sq = 0.0f64;
    let mut kl = 0.0f64;
    let mut cells = 0usize;
    let mut positions = 0usize;
    let mut nll_ref = 0.0f64;
    let mut nll_model = 0.0f64;
    let mut pred_count = 0usize;
    let mut lp_ref = vec![0.0f64; vocab];
    let mut lp_model = vec![0.0f64; vocab];
    for seq in tokens.sequences() {
        let ref_logits = reference.forward(seq)?;
        let model_logits = model.forward(seq)?;
        for (&a, &b) in ref_logits.data().iter().zip(model_logits.data()) {
            let d = a as f64 - b as f64;
            sq += d * d;
        }
        cells += ref_logits.data().len();
        for pos in 0..seq.len() {
            log_softmax_row(ref_logits.row(pos), &mut lp_ref);
            log_softmax_row(model_logits.row(pos), &mut lp_model);
            let mut row_kl = 0.0f64;
            for (lr, lm) in lp_ref.iter().zip(&lp_model) {
                row_kl += lr.exp() * (lr - lm);
            }
            kl += row_kl.max(0.0);
            positions += 1;
            if pos + 1 < seq.len() {
                let target = seq[pos + 1] as usize;
                nll_ref -= lp_ref[target];
                nll_model -= lp_model[target];
                pred_count += 1;
            }
        }
    }
    Ok(DivergenceMetrics {
        logit_mse: sq / cells as f64,
        mean_kl: kl / positions as f64,
        ppl_reference: (nll_ref / pred_count as f64).exp(),
        ppl_model: (nll_model / pred_count as f64).exp(),
    })
}

/// ShortGPT-style comparator at equal depth: for every merged group keep its
/// first layer and delete the rest, with no flattening or pruning. Layer
/// widths never change.
pub fn layer_drop_baseline(
    model: &TransformerModel,
    groups: &[Range<usize>],
) -> Result<TransformerModel> {
    let n = model.layers.len();
    let mut covered = vec![false; n];
    for g in groups {
        if g.start >= g.end || g.end > n {
            return Err(Error::InvalidConfig(format!(
                "bad layer group {}..{} for {n} layers",
                g.start, g.end
            )));
        }
        for i in g.clone() {
            if covered[i] {
                return Err(Error::InvalidConfig(format!("layer {i} in two groups")));
            }
            covered[i] = true;
        }
    }
    let drop: Vec<bool> = (0..n)
        .map(|i| {
            groups
                .iter()
                .any(|g| g.contains(&i) && i != g.start)
        })
        .collect();
    let mut out = model.clone();
    out.layers = model
        .layers
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(l, _)| l.clone())
        .collect();
    out.config.layers = model
        .config
        .layers
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(s, _)| *s)
        .collect();
    Ok(out)
}

/// Time `reps` forward passes of `batch` deterministic sequences after one
/// warm-up rep. Single-threaded; `threads` records the execution width.
pub fn bench_forward(
    model: &TransformerModel,
    batch: usize,
    seq_len: usize,
    reps: usize,
) -> Result<BenchStats> {
    if reps < 3 {
        return Err(Error::OutOfRange {
            context: "bench_forward reps",
            value: reps,
            min: 3,
            max: usize::MAX,
        });
    }
    if batch == 0 || seq_len == 0 {
        return Err(Error::InvalidConfig("batch and seq_len must be positive".into()));
    }
    let vocab = model.config.vocab as u64;
    let sequences: Vec<Vec<u32>> = (0..batch)
        .map(|b| {
            (0..seq_len)
                .map(|t| (((b as u64 * 2654435761).wrapping_add(t as u64 * 40503)) % vocab) as u32)
                .collect()
        })
        .collect();

    // Warm-up.
    for seq in &sequences {
        model.forward(seq)?;
    }
    let mut times_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for seq in &sequences {
            model.forward(seq)?;
        }
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times_ms.iter().sum::<f64>() / reps as f64;
    let min = times_ms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times_ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(BenchStats {
        mean_ms: mean,
        min_ms: min,
        max_ms: max,
        tokens_per_s: (batch * seq_len) as f64 / (mean / 1e3),
        threads: 1,
    })
}
