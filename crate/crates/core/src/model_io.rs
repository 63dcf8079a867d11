//! Model container format, toy-model generation, and calibration ingestion.
//!
//! Container layout (all integers little-endian):
//!   bytes 0..4    magic "FGPT"
//!   bytes 4..8    version (u32, currently 1)
//!   bytes 8..16   manifest byte length (u64)
//!   manifest      UTF-8 JSON: config + tied flag + tensor directory
//!   blob          row-major little-endian f32 tensor data
//!
//! Tensor names are `embedding`, `unembedding`, `final_norm`, and
//! `layers.{i}.{wq|wk|wv|wo|wu|wg|wd|alpha_attn|alpha_mlp}`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, TransformerModel};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"FGPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tied_embedding: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// Calibration token ids in fixed-length sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    seq_len: usize,
    sequences: Vec<Vec<u32>>,
}

impl TokenStream {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Keep only the first `n` sequences; errors if fewer are available.
    pub fn take(mut self, n: usize) -> Result<TokenStream> {
        if self.sequences.len() < n {
            return Err(Error::InvalidConfig(format!(
                "requested {n} calibration sequences, stream has {}",
                self.sequences.len()
            )));
        }
        self.sequences.truncate(n);
        Ok(self)
    }
}

/// Byte-level tokenization: UTF-8 bytes become ids 0-255, split into
/// `len / seq_len` full chunks with the remainder dropped.
pub fn tokenize_bytes(text: &[u8], seq_len: usize) -> Result<TokenStream> {
    if seq_len < 2 {
        return Err(Error::OutOfRange {
            context: "tokenize_bytes seq_len",
            value: seq_len,
            min: 2,
            max: usize::MAX,
        });
    }
    let sequences: Vec<Vec<u32>> = text
        .chunks_exact(seq_len)
        .map(|chunk| chunk.iter().map(|&b| b as u32).collect())
        .collect();
    if sequences.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "input of {} bytes yields no full sequence of length {seq_len}",
            text.len()
        )));
    }
    Ok(TokenStream { seq_len, sequences })
}

/// Read a raw token file of little-endian u32 ids and chunk it.
pub fn tokens_from_raw_u32(bytes: &[u8], seq_len: usize) -> Result<TokenStream> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::InvalidConfig(format!(
            "raw token file length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    if seq_len < 2 {
        return Err(Error::OutOfRange {
            context: "tokens_from_raw_u32 seq_len",
            value: seq_len,
            min: 2,
            max: usize::MAX,
        });
    }
    let ids: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let sequences: Vec<Vec<u32>> = ids.chunks_exact(seq_len).map(|c| c.to_vec()).collect();
    if sequences.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "token file of {} ids yields no full sequence of length {seq_len}",
            ids.len()
        )));
    }
    Ok(TokenStream { seq_len, sequences })
}

/// Deterministic toy model: every weight entry i.i.d. normal with mean 0 and
/// standard deviation `init_scale`; norm affine vectors are ones.
pub fn generate_toy_model(config: &ModelConfig, seed: u64, init_scale: f32) -> Result<TransformerModel> {
    config.validate()?;
    if !init_scale.is_finite() || init_scale < 0.0 {
        return Err(Error::InvalidConfig(format!("bad init_scale {init_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample: Box<dyn FnMut() -> f32> = if init_scale == 0.0 {
        Box::new(|| 0.0)
    } else {
        let normal = Normal::new(0.0f32, init_scale)
            .map_err(|e| Error::InvalidConfig(format!("normal distribution: {e}")))?;
        Box::new(move || normal.sample(&mut rng))
    };
    let mut matrix = |rows: usize, cols: usize| {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| sample()).collect())
    };

    let d = config.d_model;
    let embedding = matrix(config.vocab, d);
    let unembedding = matrix(d, config.vocab);
    let layers = config
        .layers
        .iter()
        .map(|spec| LayerWeights {
            w_q: matrix(d, spec.q_cols()),
            w_k: matrix(d, spec.kv_cols()),
            w_v: matrix(d, spec.kv_cols()),
            w_o: matrix(spec.q_cols(), d),
            w_u: matrix(d, spec.intermediate),
            w_g: matrix(d, spec.intermediate),
            w_d: matrix(spec.intermediate, d),
            alpha_attn: vec![1.0; d],
            alpha_mlp: vec![1.0; d],
        })
        .collect();

    let model = TransformerModel {
        config: config.clone(),
        embedding,
        layers,
        final_norm_alpha: vec![1.0; d],
        unembedding,
        tied_embedding: false,
    };
    model.validate()?;
    Ok(model)
}

fn tensor_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn vec_bytes(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for &x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Canonical (name, shape, payload) list for a model, in save order.
fn tensor_list(model: &TransformerModel) -> Vec<(String, Vec<usize>, Vec<u8>)> {
    let mut out = Vec::new();
    out.push((
        "embedding".to_string(),
        vec![model.embedding.rows(), model.embedding.cols()],
        tensor_bytes(&model.embedding),
    ));
    out.push((
        "unembedding".to_string(),
        vec![model.unembedding.rows(), model.unembedding.cols()],
        tensor_bytes(&model.unembedding),
    ));
    out.push((
        "final_norm".to_string(),
        vec![model.final_norm_alpha.len()],
        vec_bytes(&model.final_norm_alpha),
    ));
    for (i, layer) in model.layers.iter().enumerate() {
        let mats = [
            ("wq", &layer.w_q),
            ("wk", &layer.w_k),
            ("wv", &layer.w_v),
            ("wo", &layer.w_o),
            ("wu", &layer.w_u),
            ("wg", &layer.w_g),
            ("wd", &layer.w_d),
        ];
        for (name, m) in mats {
            out.push((
                format!("layers.{i}.{name}"),
                vec![m.rows(), m.cols()],
                tensor_bytes(m),
            ));
        }
        out.push((
            format!("layers.{i}.alpha_attn"),
            vec![layer.alpha_attn.len()],
            vec_bytes(&layer.alpha_attn),
        ));
        out.push((
            format!("layers.{i}.alpha_mlp"),
            vec![layer.alpha_mlp.len()],
            vec_bytes(&layer.alpha_mlp),
        ));
    }
    out
}

pub fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    model.validate()?;
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, shape, bytes) in tensor_list(model) {
        entries.push(TensorEntry {
            name,
            shape,
            offset: blob.len() as u64,
            length: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        config: model.config.clone(),
        tied_embedding: model.tied_embedding,
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut file = Vec::with_capacity(16 + manifest_json.len() + blob.len());
    file.extend_from_slice(&MAGIC);
    file.extend_from_slice(&VERSION.to_le_bytes());
    file.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_json);
    file.extend_from_slice(&blob);
    fs::write(path, file)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    let bytes = fs::read(path)?;
    load_model_bytes(&bytes)
}

pub fn load_model_bytes(bytes: &[u8]) -> Result<TransformerModel> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            what: "container header",
            needed: 16,
            available: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Truncated {
            what: "manifest",
            needed: (16 + manifest_len) as u64,
            available: bytes.len() as u64,
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let blob = &bytes[16 + manifest_len..];

    let mut reader = TensorReader {
        manifest: &manifest,
        blob,
    };
    let d = manifest.config.d_model;
    let v = manifest.config.vocab;

    let embedding = reader.matrix("embedding", v, d)?;
    let unembedding = reader.matrix("unembedding", d, v)?;
    let final_norm_alpha = reader.vector("final_norm", d)?;
    let mut layers = Vec::with_capacity(manifest.config.layers.len());
    for (i, spec) in manifest.config.layers.iter().enumerate() {
        layers.push(LayerWeights {
            w_q: reader.matrix(&format!("layers.{i}.wq"), d, spec.q_cols())?,
            w_k: reader.matrix(&format!("layers.{i}.wk"), d, spec.kv_cols())?,
            w_v: reader.matrix(&format!("layers.{i}.wv"), d, spec.kv_cols())?,
            w_o: reader.matrix(&format!("layers.{i}.wo"), spec.q_cols(), d)?,
            w_u: reader.matrix(&format!("layers.{i}.wu"), d, spec.intermediate)?,
            w_g: reader.matrix(&format!("layers.{i}.wg"), d, spec.intermediate)?,
            w_d: reader.matrix(&format!("layers.{i}.wd"), spec.intermediate, d)?,
            alpha_attn: reader.vector(&format!("layers.{i}.alpha_attn"), d)?,
            alpha_mlp: reader.vector(&format!("layers.{i}.alpha_mlp"), d)?,
        });
    }

    let model = TransformerModel {
        config: manifest.config,
        embedding,
        layers,
        final_norm_alpha,
        unembedding,
        tied_embedding: manifest.tied_embedding,
    };
    model.validate()?;
    Ok(model)
}

struct TensorReader<'a> {
    manifest: &'a Manifest,
    blob: &'a [u8],
}

impl<'a> TensorReader<'a> {
    fn raw(&mut self, name: &str, expected_shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let elem_count: usize = entry.shape.iter().product();
        if elem_count as u64 * 4 != entry.length {
            return Err(Error::ShapeLengthMismatch {
                name: name.to_string(),
                shape: entry.shape.clone(),
                bytes: entry.length,
            });
        }
        if entry.shape != expected_shape {
            return Err(Error::Manifest(format!(
                "tensor \"{name}\": manifest shape {:?} does not match config shape {expected_shape:?}",
                entry.shape
            )));
        }
        let end = entry.offset.checked_add(entry.length).ok_or(Error::Manifest(
            format!("tensor \"{name}\": offset overflow"),
        ))?;
        if end > self.blob.len() as u64 {
            return Err(Error::Truncated {
                what: "tensor data",
                needed: end,
                available: self.blob.len() as u64,
            });
        }
        let data = &self.blob[entry.offset as usize..end as usize];
        Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix::from_vec(rows, cols, self.raw(name, &[rows, cols])?))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        self.raw(name, &[len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use tempfile::tempdir;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            vocab: 16,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            layers: vec![
                ArchSpec {
                    n_heads: 2,
                    n_kv_groups: 1,
                    head_dim: 4,
                    intermediate: 12,
                },
                ArchSpec {
                    n_heads: 2,
                    n_kv_groups: 2,
                    head_dim: 4,
                    intermediate: 10,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = generate_toy_model(&config(), 42, 0.05).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("toy.fgpt");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_model(&config(), 7, 0.03).unwrap();
        let b = generate_toy_model(&config(), 7, 0.03).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_model(&config(), 8, 0.03).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_scale_yields_pure_residual_blocks() {
        let model = generate_toy_model(&config(), 1, 0.0).unwrap();
        assert!(model.layers.iter().all(|l| l.w_q.max_abs() == 0.0
            && l.w_o.max_abs() == 0.0
            && l.w_d.max_abs() == 0.0));
        assert_eq!(model.layers[0].alpha_attn, vec![1.0; 8]);
    }

    #[test]
    fn generated_variance_tracks_init_scale() {
        let cfg = ModelConfig {
            d_model: 64,
            vocab: 64,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            layers: vec![ArchSpec {
                n_heads: 4,
                n_kv_groups: 4,
                head_dim: 16,
                intermediate: 128,
            }],
        };
        let scale = 0.02f64;
        let model = generate_toy_model(&cfg, 42, scale as f32).unwrap();
        let data = model.layers[0].w_u.data();
        let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / data.len() as f64;
        assert!(
            (var - scale * scale).abs() < 0.1 * scale * scale,
            "sample variance {var} vs {}",
            scale * scale
        );
    }

    #[test]
    fn tokenize_examples() {
        let s = tokenize_bytes(b"abcd", 2).unwrap();
        assert_eq!(s.sequences(), &[vec![97, 98], vec![99, 100]]);

        let s = tokenize_bytes(b"abc", 2).unwrap();
        assert_eq!(s.sequences(), &[vec![97, 98]]);

        let big = vec![b'x'; 4096];
        let s = tokenize_bytes(&big, 128).unwrap();
        assert_eq!(s.len(), 32);

        assert!(tokenize_bytes(b"a", 2).is_err());
        assert!(tokenize_bytes(b"abcd", 1).is_err());
    }

    #[test]
    fn raw_token_ingestion() {
        let ids = [3u32, 1, 4, 1, 5, 9];
        let mut bytes = Vec::new();
        for id in ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        let s = tokens_from_raw_u32(&bytes, 3).unwrap();
        assert_eq!(s.sequences(), &[vec![3, 1, 4], vec![1, 5, 9]]);
        assert!(tokens_from_raw_u32(&bytes[..5], 2).is_err());
    }

    #[test]
    fn corruption_diagnostics_are_distinct() {
        let model = generate_toy_model(&config(), 3, 0.05).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("toy.fgpt");
        save_model(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            load_model_bytes(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            load_model_bytes(&bad_version),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            load_model_bytes(truncated),
            Err(Error::Truncated {
                what: "tensor data",
                ..
            })
        ));
    }

    #[test]
    fn shape_length_mismatch_is_detected() {
        let model = generate_toy_model(&config(), 3, 0.05).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("toy.fgpt");
        save_model(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Rewrite the manifest so "embedding" declares shape 3x4 over a
        // 40-byte payload.
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + manifest_len]).unwrap();
        let tensors = manifest["tensors"].as_array_mut().unwrap();
        tensors[0]["shape"] = serde_json::json!([3, 4]);
        tensors[0]["length"] = serde_json::json!(40);
        let new_manifest = serde_json::to_vec(&manifest).unwrap();

        let mut rebuilt = Vec::new();
        rebuilt.extend_from_slice(&bytes[0..8]);
        rebuilt.extend_from_slice(&(new_manifest.len() as u64).to_le_bytes());
        rebuilt.extend_from_slice(&new_manifest);
        rebuilt.extend_from_slice(&bytes[16 + manifest_len..]);

        assert!(matches!(
            load_model_bytes(&rebuilt),
            Err(Error::ShapeLengthMismatch { .. })
        ));
    }
}
