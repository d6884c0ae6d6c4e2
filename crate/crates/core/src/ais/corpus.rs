use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::teacher::TeacherProvider;
use crate::error::{Error, Result};
use crate::tensor::from_f32;

/// Built-in eight-entry corpus: one description matching the synthetic
/// bird-like objects and seven unrelated ones.
pub const DEFAULT_CORPUS: &str = include_str!("../../assets/default_corpus.txt");

/// One description per line; blank lines and `#` comments are skipped.
pub fn parse_descriptions(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn load_descriptions(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_descriptions(&text))
}

/// N descriptions and their unit-norm teacher text embeddings, frozen for a
/// run. Row i of `embeddings` belongs to `descriptions[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub descriptions: Vec<String>,
    pub dim: usize,
    pub embeddings: Vec<f32>,
}

impl TextCorpus {
    pub fn build(descriptions: Vec<String>, provider: &dyn TeacherProvider) -> Result<Self> {
        if descriptions.len() < 2 {
            return Err(Error::Format(format!(
                "text corpus needs at least 2 descriptions, got {}",
                descriptions.len()
            )));
        }
        let dim = provider.embed_dim();
        let mut embeddings = Vec::with_capacity(descriptions.len() * dim);
        for d in &descriptions {
            let e = provider.text_embedding(d)?;
            if e.len() != dim {
                return Err(Error::Structure(format!(
                    "teacher returned a {}-dim text embedding, expected {dim}",
                    e.len()
                )));
            }
            let norm = e.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Contract(format!("zero text embedding for `{d}`")));
            }
            embeddings.extend(e.iter().map(|v| (*v as f64 / norm) as f32));
        }
        Ok(Self {
            descriptions,
            dim,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// T as an `(N, d)` tensor.
    pub fn tensor(&self, dtype: DType) -> Result<Tensor> {
        from_f32(self.embeddings.clone(), (self.len(), self.dim), dtype)
    }
}
