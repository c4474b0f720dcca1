use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{FragmentKind, FragmentSet};
use crate::jsonfmt::to_json_line;
use crate::numkit::Tensor;
use crate::synthworld::PairSample;

use super::TrainError;

/// Token embedding table plus a linear map applied to raw region features.
/// Both outputs are L2-normalized row-wise before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    /// `vocab × d`.
    pub token_embeddings: Tensor,
    /// `d_in × d`.
    pub region_projection: Tensor,
}

/// Rectangular identity: ones on the leading diagonal.
fn identity(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] = 1.0;
    }
    t
}

impl Model {
    /// Token rows drawn from `N(0, 1/d)`, identity projection.
    pub fn init<R: Rng + ?Sized>(vocab: usize, region_dim: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive deviation");
        let data: Vec<f64> = (0..vocab * dim).map(|_| normal.sample(rng)).collect();
        Self {
            token_embeddings: Tensor::new(vec![vocab, dim], data).expect("finite samples"),
            region_projection: identity(region_dim, dim),
        }
    }

    /// Model whose token embeddings are given rows and whose projection is
    /// the identity.
    pub fn from_embeddings(token_embeddings: Tensor) -> Self {
        let d = token_embeddings.cols();
        Self {
            token_embeddings,
            region_projection: identity(d, d),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn region_dim(&self) -> usize {
        self.region_projection.rows()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let t = &self.token_embeddings;
        let p = &self.region_projection;
        if t.shape().len() != 2 || p.shape().len() != 2 || t.cols() != p.cols() {
            return Err(TrainError::Config(format!(
                "model shapes disagree: token_embeddings {:?}, region_projection {:?}",
                t.shape(),
                p.shape()
            )));
        }
        if !t.is_finite() || !p.is_finite() {
            return Err(TrainError::Config("model parameters must be finite".into()));
        }
        Ok(())
    }

    /// Normalized caption fragments.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<FragmentSet, TrainError> {
        let rows = self.token_embeddings.gather_rows(tokens)?;
        let (rows, _) = rows.normalize_rows()?;
        Ok(FragmentSet::new(rows, FragmentKind::Text)?.with_tokens(tokens.to_vec())?)
    }

    /// Normalized, projected image fragments with their boxes.
    pub fn encode_image(&self, pair: &PairSample) -> Result<FragmentSet, TrainError> {
        let raw = pair.image_fragments();
        let projected = raw.features().matmul(&self.region_projection)?;
        let (projected, _) = projected.normalize_rows()?;
        Ok(FragmentSet::new(projected, FragmentKind::Image)?.with_boxes(pair.boxes())?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut text = to_json_line(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let model: Model = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}
