//! Calibration passes: trace recording, the cross-layer similarity matrix,
//! and residual-stream redundancy statistics.

use std::io::Write;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{LayerTrace, TransformerModel};
use crate::model_io::TokenStream;
use crate::numerics::{mean_token_cosine, Matrix};

/// Full traces for every calibration sequence: `traces[s][l]` is layer `l`
/// of sequence `s`. Desk-scale calibration sets fit in memory whole.
pub type TraceSet = Vec<Vec<LayerTrace>>;

/// Upper-triangular cross-layer similarity with merge-group bookkeeping.
///
/// Entry `(i, j)` for `i < j` is the mean cosine between the input feature
/// of group `i` and the output feature of group `j`. Groups start as
/// singletons; merging deletes one row and one column so that surviving
/// entries keep exactly that meaning for the merged ranges.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    size: usize,
    /// Dense size x size storage; only entries strictly above the diagonal
    /// are meaningful.
    entries: Vec<f32>,
    groups: Vec<Range<usize>>,
}

impl SimilarityMatrix {
    pub fn from_upper(n_layers: usize, mut entry: impl FnMut(usize, usize) -> f32) -> Self {
        let mut entries = vec![0.0f32; n_layers * n_layers];
        for i in 0..n_layers {
            for j in (i + 1)..n_layers {
                entries[i * n_layers + j] = entry(i, j);
            }
        }
        SimilarityMatrix {
            size: n_layers,
            entries,
            groups: (0..n_layers).map(|l| l..l + 1).collect(),
        }
    }

    pub fn group_count(&self) -> usize {
        self.size
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    /// Similarity between group `i`'s input and group `j`'s output (`i < j`).
    pub fn get(&self, i: usize, j: usize) -> f32 {
        assert!(i < j && j < self.size, "upper-triangular access ({i},{j})");
        self.entries[i * self.size + j]
    }

    /// Merge adjacent groups `(left, left + 1)` by deleting row `left + 1`
    /// and column `left`. Afterwards index `left` denotes the merged group.
    pub fn merge_adjacent(&mut self, left: usize) -> Result<()> {
        if left + 1 >= self.size {
            return Err(Error::OutOfRange {
                context: "merge_adjacent",
                value: left,
                min: 0,
                max: self.size.saturating_sub(2),
            });
        }
        let old = self.size;
        let new = old - 1;
        let row_of = |i: usize| if i <= left { i } else { i + 1 }; // skip deleted row left+1
        let col_of = |j: usize| if j < left { j } else { j + 1 }; // skip deleted column left
        let mut entries = vec![0.0f32; new * new];
        for i in 0..new {
            for j in (i + 1)..new {
                entries[i * new + j] = self.entries[row_of(i) * old + col_of(j)];
            }
        }
        let merged = self.groups[left].start..self.groups[left + 1].end;
        self.groups.splice(left..left + 2, [merged]);
        self.entries = entries;
        self.size = new;
        Ok(())
    }
}

/// Per-layer redundancy statistics over the calibration set.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub rows: Vec<LayerStatRow>,
}

#[derive(Debug, Clone)]
pub struct LayerStatRow {
    pub layer: usize,
    /// Standard deviation of the layer output, pooled over every entry of
    /// every token of every sequence.
    pub sigma: f64,
    /// Mean per-token L2 norm of the layer input (the residual stream).
    pub residual_norm: f64,
    /// Mean per-token L2 norm of the attention branch output.
    pub attn_norm: f64,
    /// Mean per-token L2 norm of the MLP branch output.
    pub mlp_norm: f64,
}

/// Run the model over every calibration sequence and keep the full traces.
pub fn record_traces(model: &TransformerModel, calib: &TokenStream) -> Result<TraceSet> {
    Ok(record_traces_with_logits(model, calib)?.1)
}

/// Trace recording that also returns per-sequence logits; the pipeline uses
/// the logits for stage divergence without an extra pass.
pub fn record_traces_with_logits(
    model: &TransformerModel,
    calib: &TokenStream,
) -> Result<(Vec<Matrix>, TraceSet)> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut logits = Vec::with_capacity(calib.len());
    let mut traces = Vec::with_capacity(calib.len());
    for seq in calib.sequences() {
        let (l, t) = model.traced_forward(seq)?;
        logits.push(l);
        traces.push(t);
    }
    Ok((logits, traces))
}

/// Cross-layer similarity: `S[i][j]` is the mean over sequences of the mean
/// per-token cosine between layer `i`'s input and layer `j`'s output.
pub fn similarity_matrix(traces: &TraceSet) -> Result<SimilarityMatrix> {
    if traces.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let n_layers = traces[0].len();
    let mut sums = vec![0.0f64; n_layers * n_layers];
    for seq in traces {
        if seq.len() != n_layers {
            return Err(Error::shape("similarity_matrix", n_layers, seq.len()));
        }
        for i in 0..n_layers {
            for j in (i + 1)..n_layers {
                sums[i * n_layers + j] += mean_token_cosine(&seq[i].input, &seq[j].output)?;
            }
        }
    }
    let count = traces.len() as f64;
    Ok(SimilarityMatrix::from_upper(n_layers, |i, j| {
        (sums[i * n_layers + j] / count) as f32
    }))
}

/// Pooled standard deviation and mean branch norms per layer.
pub fn layer_stats(traces: &TraceSet) -> Result<LayerStats> {
    if traces.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let n_layers = traces[0].len();
    let mut rows = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut entries = 0usize;
        let mut residual = 0.0f64;
        let mut attn = 0.0f64;
        let mut mlp = 0.0f64;
        let mut tokens = 0usize;
        for seq in traces {
            let t = &seq[layer];
            for &v in t.output.data() {
                let v = v as f64;
                sum += v;
                sum_sq += v * v;
            }
            entries += t.output.data().len();
            for row in 0..t.input.rows() {
                residual += row_norm(t.input.row(row));
                attn += row_norm_diff(t.post_attn.row(row), t.input.row(row));
                mlp += row_norm_diff(t.output.row(row), t.post_attn.row(row));
            }
            tokens += t.input.rows();
        }
        let mean = sum / entries as f64;
        let var = (sum_sq / entries as f64 - mean * mean).max(0.0);
        rows.push(LayerStatRow {
            layer,
            sigma: var.sqrt(),
            residual_norm: residual / tokens as f64,
            attn_norm: attn / tokens as f64,
            mlp_norm: mlp / tokens as f64,
        });
    }
    Ok(LayerStats { rows })
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn row_norm_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// CSV of the upper-triangular similarity matrix: header row and column are
/// layer indices; cells on or below the diagonal stay blank.
pub fn write_similarity_csv(s: &SimilarityMatrix, mut out: impl Write) -> Result<()> {
    let n = s.group_count();
    let header: Vec<String> = (0..n).map(|j| j.to_string()).collect();
    writeln!(out, ",{}", header.join(","))?;
    for i in 0..n {
        let mut cells = vec![i.to_string()];
        for j in 0..n {
            if j > i {
                cells.push(format!("{:.6}", s.get(i, j)));
            } else {
                cells.push(String::new());
            }
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// CSV of per-layer statistics: layer, sigma, residual_norm, attn_norm, mlp_norm.
pub fn write_stats_csv(stats: &LayerStats, mut out: impl Write) -> Result<()> {
    writeln!(out, "layer,sigma,residual_norm,attn_norm,mlp_norm")?;
    for row in &stats.rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.layer, row.sigma, row.residual_norm, row.attn_norm, row.mlp_norm
        )?;
    }
    Ok(())
}
