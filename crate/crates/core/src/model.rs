//! Minimal Pre-LN causal decoder transformer.
//!
//! Each block computes
//!   `h_tilde = h + mha(rms_norm(h) * diag(alpha_attn))`
//!   `h_next  = h_tilde + mlp(rms_norm(h_tilde) * diag(alpha_mlp))`
//! with rotary position embedding on queries/keys, causal masking with
//! `1/sqrt(head_dim)` logit scaling, grouped-query attention, and a gated
//! (SiLU) MLP. Layers may be heterogeneous in width, which is what makes
//! flattened models representable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_into, Matrix};

/// Architecture of a single layer. Flattening merges layers, so these can
/// differ layer to layer within one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub head_dim: usize,
    pub intermediate: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_groups == 0 || self.head_dim == 0 || self.intermediate == 0
        {
            return Err(Error::InvalidConfig(format!(
                "arch fields must be positive: {self:?}"
            )));
        }
        if self.n_kv_groups > self.n_heads || !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} must be a multiple of n_kv_groups {}",
                self.n_heads, self.n_kv_groups
            )));
        }
        Ok(())
    }

    pub fn q_cols(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_cols(&self) -> usize {
        self.n_kv_groups * self.head_dim
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_kv_groups
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
    /// One entry per layer; the list length is the layer count.
    pub layers: Vec<ArchSpec>,
}

impl ModelConfig {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vocab == 0 {
            return Err(Error::InvalidConfig(
                "d_model and vocab must be positive".into(),
            ));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("model must have at least 1 layer".into()));
        }
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if !positive(self.rope_base) || !positive(self.norm_eps) {
            return Err(Error::InvalidConfig(
                "rope_base and norm_eps must be positive".into(),
            ));
        }
        for spec in &self.layers {
            spec.validate()?;
        }
        Ok(())
    }
}

/// One block's weights. Projection matrices store heads/groups as contiguous
/// `head_dim`-wide column slabs (row slabs for `w_o`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_u: Matrix,
    pub w_g: Matrix,
    pub w_d: Matrix,
    pub alpha_attn: Vec<f32>,
    pub alpha_mlp: Vec<f32>,
}

impl LayerWeights {
    pub fn validate(&self, spec: &ArchSpec, d_model: usize) -> Result<()> {
        spec.validate()?;
        let checks = [
            ("w_q", self.w_q.shape(), (d_model, spec.q_cols())),
            ("w_k", self.w_k.shape(), (d_model, spec.kv_cols())),
            ("w_v", self.w_v.shape(), (d_model, spec.kv_cols())),
            ("w_o", self.w_o.shape(), (spec.q_cols(), d_model)),
            ("w_u", self.w_u.shape(), (d_model, spec.intermediate)),
            ("w_g", self.w_g.shape(), (d_model, spec.intermediate)),
            ("w_d", self.w_d.shape(), (spec.intermediate, d_model)),
        ];
        for (name, got, expected) in checks {
            if got != expected {
                return Err(Error::InvalidConfig(format!(
                    "{name}: expected {expected:?}, got {got:?}"
                )));
            }
        }
        if self.alpha_attn.len() != d_model || self.alpha_mlp.len() != d_model {
            return Err(Error::InvalidConfig("norm affine length != d_model".into()));
        }
        Ok(())
    }

    /// Parameters in the block's weight matrices (norm affine vectors are
    /// tracked separately; see `TransformerModel::param_count`).
    pub fn weight_param_count(&self) -> usize {
        self.w_q.param_count()
            + self.w_k.param_count()
            + self.w_v.param_count()
            + self.w_o.param_count()
            + self.w_u.param_count()
            + self.w_g.param_count()
            + self.w_d.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    /// vocab x d_model
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm_alpha: Vec<f32>,
    /// d_model x vocab
    pub unembedding: Matrix,
    /// Records whether the unembedding was constructed as the transpose of
    /// the embedding. Both tensors are always stored.
    pub tied_embedding: bool,
}

/// Recorded hidden states of one layer for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Layer input `H^{l-1}` (tokens x d).
    pub input: Matrix,
    /// Post-attention residual state `H~^{l-1}` (tokens x d).
    pub post_attn: Matrix,
    /// Layer output `H^l` (tokens x d).
    pub output: Matrix,
}

impl TransformerModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        let v = self.config.vocab;
        if self.layers.len() != self.config.n_layers() {
            return Err(Error::InvalidConfig(format!(
                "config declares {} layers, model has {}",
                self.config.n_layers(),
                self.layers.len()
            )));
        }
        if self.embedding.shape() != (v, d) {
            return Err(Error::InvalidConfig("embedding shape".into()));
        }
        if self.unembedding.shape() != (d, v) {
            return Err(Error::InvalidConfig("unembedding shape".into()));
        }
        if self.final_norm_alpha.len() != d {
            return Err(Error::InvalidConfig("final norm length".into()));
        }
        for (layer, spec) in self.layers.iter().zip(&self.config.layers) {
            layer.validate(spec, d)?;
        }
        Ok(())
    }

    /// Every stored parameter: embeddings, block weights, and norm vectors.
    pub fn param_count(&self) -> usize {
        let norms: usize = self
            .layers
            .iter()
            .map(|l| l.alpha_attn.len() + l.alpha_mlp.len())
            .sum();
        self.embedding.param_count()
            + self.unembedding.param_count()
            + self.final_norm_alpha.len()
            + norms
            + self.block_param_count()
    }

    /// Parameters in block weight matrices only. This is the quantity layer
    /// flattening conserves exactly: a merge concatenates every projection
    /// while the two all-ones norm vectors collapse into one.
    pub fn block_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_param_count()).sum()
    }

    /// Forward pass to logits (tokens x vocab).
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward_impl(tokens, None)
    }

    /// Forward pass that records every layer's input, post-attention state,
    /// and output. Logits are bit-identical to `forward`.
    pub fn traced_forward(&self, tokens: &[u32]) -> Result<(Matrix, Vec<LayerTrace>)> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let logits = self.forward_impl(tokens, Some(&mut traces))?;
        Ok((logits, traces))
    }

    fn forward_impl(
        &self,
        tokens: &[u32],
        mut trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Matrix> {
        let d = self.config.d_model;
        let v = self.config.vocab;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (t, &id) in tokens.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            h.row_mut(t).copy_from_slice(self.embedding.row(id as usize));
        }

        for (layer, spec) in self.layers.iter().zip(&self.config.layers) {
            let (post_attn, next) = block_forward(
                &h,
                layer,
                spec,
                self.config.rope_base,
                self.config.norm_eps,
            )?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerTrace {
                    input: h.clone(),
                    post_attn: post_attn.clone(),
                    output: next.clone(),
                });
            }
            h = next;
        }

        let normed = rms_norm(&h, &self.final_norm_alpha, self.config.norm_eps)?;
        Ok(normed.matmul(&self.unembedding))
    }
}

/// Root-mean-square normalization with elementwise affine: each row is
/// scaled to unit RMS (with `eps` inside the square root), then multiplied
/// by `alpha`.
pub fn rms_norm(x: &Matrix, alpha: &[f32], eps: f32) -> Result<Matrix> {
    if alpha.len() != x.cols() {
        return Err(Error::shape("rms_norm", x.cols(), alpha.len()));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean_sq = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (mean_sq + eps as f64).sqrt();
        for (c, (&v, &a)) in row.iter().zip(alpha).enumerate() {
            out.set(r, c, (v as f64 * inv) as f32 * a);
        }
    }
    Ok(out)
}

/// Rotary position embedding: coordinate pair `(2j, 2j+1)` of the row at
/// position `p` is rotated by angle `p * base^(-2j / d_h)`.
pub fn rope_apply(x: &Matrix, positions: &[usize], base: f32) -> Result<Matrix> {
    let d_h = x.cols();
    if !d_h.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "rotary embedding needs an even head dim, got {d_h}"
        )));
    }
    assert_eq!(positions.len(), x.rows(), "one position per row");
    let mut out = Matrix::zeros(x.rows(), d_h);
    for (r, &p) in positions.iter().enumerate() {
        let row = x.row(r);
        let out_row = out.row_mut(r);
        for j in 0..d_h / 2 {
            let theta = p as f64 * (base as f64).powf(-2.0 * j as f64 / d_h as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (row[2 * j] as f64, row[2 * j + 1] as f64);
            out_row[2 * j] = (a * cos - b * sin) as f32;
            out_row[2 * j + 1] = (a * sin + b * cos) as f32;
        }
    }
    Ok(out)
}

/// Causal multi-head attention over an already-normalized input.
///
/// Head `i` reads its KV slab from group `i / heads_per_group`; logits are
/// scaled by `1/sqrt(head_dim)` and restricted to positions `<= query`.
/// Per-head contributions accumulate in f64.
pub fn mha_forward(
    x: &Matrix,
    layer: &LayerWeights,
    spec: &ArchSpec,
    rope_base: f32,
) -> Result<Matrix> {
    let d = x.cols();
    if layer.w_q.rows() != d {
        return Err(Error::shape("mha_forward", layer.w_q.rows(), d));
    }
    layer.validate(spec, d)?;
    let t = x.rows();
    let d_h = spec.head_dim;
    let positions: Vec<usize> = (0..t).collect();
    let mut acc = vec![0.0f64; t * d];
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
            // Project through this head's output slab, accumulating in f64.
            let w_o = layer.w_o.row_range(head * d_h, (head + 1) * d_h);
            for r in 0..t {
                let arow = attn.row(r);
                let out = &mut acc[r * d..(r + 1) * d];
                for (c, &a) in arow.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let a = a as f64;
                    for (o, &w) in out.iter_mut().zip(w_o.row(c)) {
                        *o += a * w as f64;
                    }
                }
            }
        }
    }
    Ok(Matrix::from_vec(
        t,
        d,
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Attention activation of one head (tokens x head_dim), before the output
/// projection. Shared between the forward pass and head importance scoring.
pub(crate) fn head_attention(
    x: &Matrix,
    layer: &LayerWeights,
    head: usize,
    k: &Matrix,
    v: &Matrix,
    positions: &[usize],
    rope_base: f32,
) -> Result<Matrix> {
    let t = x.rows();
    let d_h = k.cols();
    let q = rope_apply(
        &x.matmul(&layer.w_q.col_range(head * d_h, (head + 1) * d_h)),
        positions,
        rope_base,
    )?;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = Matrix::zeros(t, d_h);
    let mut logits = vec![0.0f32; t];
    let mut probs = vec![0.0f64; t];
    for row in 0..t {
        let q_row = q.row(row);
        for (col, logit) in logits[..=row].iter_mut().enumerate() {
            let dot: f64 = q_row
                .iter()
                .zip(k.row(col))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            *logit = (dot * scale) as f32;
        }
        softmax_into(&logits[..=row], &mut probs[..=row]);
        let out_row = out.row_mut(row);
        for (col, &p) in probs[..=row].iter().enumerate() {
            for (o, &vv) in out_row.iter_mut().zip(v.row(col)) {
                *o += (p * vv as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Gated hidden activation `(x w_u) .* silu(x w_g)` (tokens x intermediate).
/// Shared between the MLP forward and the activation-correlation pass.
pub(crate) fn gated_hidden(x: &Matrix, layer: &LayerWeights) -> Matrix {
    let up = x.matmul(&layer.w_u);
    let gate = x.matmul(&layer.w_g);
    let mut h = Matrix::zeros(up.rows(), up.cols());
    for r in 0..up.rows() {
        let (u, g) = (up.row(r), gate.row(r));
        let out = h.row_mut(r);
        for c in 0..u.len() {
            let gv = g[c] as f64;
            let silu = gv / (1.0 + (-gv).exp());
            out[c] = (u[c] as f64 * silu) as f32;
        }
    }
    h
}

/// Gated MLP over an already-normalized input.
pub fn mlp_forward(x: &Matrix, layer: &LayerWeights) -> Result<Matrix> {
    if layer.w_u.rows() != x.cols() {
        return Err(Error::shape("mlp_forward", layer.w_u.rows(), x.cols()));
    }
    Ok(gated_hidden(x, layer).matmul(&layer.w_d))
}

/// One Pre-LN block. Returns `(post_attention_state, output)`.
pub fn block_forward(
    h: &Matrix,
    layer: &LayerWeights,
    spec: &ArchSpec,
    rope_base: f32,
    eps: f32,
) -> Result<(Matrix, Matrix)> {
    let attn_in = rms_norm(h, &layer.alpha_attn, eps)?;
    let h_tilde = h.add(&mha_forward(&attn_in, layer, spec, rope_base)?);
    let mlp_in = rms_norm(&h_tilde, &layer.alpha_mlp, eps)?;
    let h_next = h_tilde.add(&mlp_forward(&mlp_in, layer)?);
    Ok((h_tilde, h_next))
}
