//! Cross-modal fragment attention: relevance scores, attention weights,
//! attended information and the aggregated image-sentence similarity.
//!
//! Every operation exists in two forms that share the same [`Tensor`]
//! kernels: a plain form over [`FragmentSet`]s used for inference and
//! evaluation, and a recorded form over graph [`Var`]s used in training.
//! Relevance is cosine similarity; weights are a row softmax of the
//! relevance scaled by an inverse temperature.

use serde::{Deserialize, Serialize};

use crate::metrics::BBox;
use crate::numkit::{cosine, Graph, NumError, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentKind {
    Image,
    Text,
}

/// Encoded fragments of one modality: one feature row per fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentSet {
    features: Tensor,
    kind: FragmentKind,
    boxes: Option<Vec<BBox>>,
    tokens: Option<Vec<usize>>,
}

impl FragmentSet {
    pub fn new(features: Tensor, kind: FragmentKind) -> Result<Self, AttentionError> {
        if features.shape().len() != 2 || features.rows() == 0 || features.cols() == 0 {
            return Err(AttentionError::EmptyFragments);
        }
        Ok(Self {
            features,
            kind,
            boxes: None,
            tokens: None,
        })
    }

    pub fn with_boxes(mut self, boxes: Vec<BBox>) -> Result<Self, AttentionError> {
        if self.kind != FragmentKind::Image {
            return Err(AttentionError::WrongKind("boxes belong to image fragments"));
        }
        if boxes.len() != self.len() {
            return Err(AttentionError::Annotation(format!(
                "{} boxes for {} fragments",
                boxes.len(),
                self.len()
            )));
        }
        if let Some(b) = boxes.iter().find(|b| !(b.w > 0.0 && b.h > 0.0)) {
            return Err(AttentionError::Annotation(format!(
                "box {b:?} has non-positive extent"
            )));
        }
        self.boxes = Some(boxes);
        Ok(self)
    }

    pub fn with_tokens(mut self, tokens: Vec<usize>) -> Result<Self, AttentionError> {
        if self.kind != FragmentKind::Text {
            return Err(AttentionError::WrongKind("tokens belong to text fragments"));
        }
        if tokens.len() != self.len() {
            return Err(AttentionError::Annotation(format!(
                "{} tokens for {} fragments",
                tokens.len(),
                self.len()
            )));
        }
        self.tokens = Some(tokens);
        Ok(self)
    }

    /// Copy with every feature row scaled to unit norm.
    pub fn normalized(&self) -> Self {
        let (features, _) = self
            .features
            .normalize_rows()
            .expect("fragment features are rank 2");
        Self {
            features,
            ..self.clone()
        }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn kind(&self) -> FragmentKind {
        self.kind
    }

    pub fn boxes(&self) -> Option<&[BBox]> {
        self.boxes.as_deref()
    }

    pub fn tokens(&self) -> Option<&[usize]> {
        self.tokens.as_deref()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Which modality supplies the query fragments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryModality {
    /// Words attend over image regions.
    Text,
    /// Regions attend over words.
    Image,
}

/// Attention directions used when scoring an image-sentence pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    TextToImage,
    ImageToText,
    /// Average of both directions.
    Both,
}

/// Aggregation of per-query-fragment similarities into a pair score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    #[default]
    Mean,
    /// `log Σ exp(s_i)`.
    LogSumExp,
}

impl Agg {
    pub fn apply(self, sims: &[f64]) -> f64 {
        match self {
            Agg::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
            Agg::LogSumExp => {
                let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
            }
        }
    }

    pub fn apply_var(self, g: &mut Graph, sims: Var) -> Result<Var, NumError> {
        match self {
            Agg::Mean => g.mean(sims),
            Agg::LogSumExp => g.logsumexp(sims),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    /// Inverse softmax temperature applied to cosine relevance scores.
    pub temperature_inv: f64,
    pub agg: Agg,
    pub direction: Direction,
    /// Clamp negative relevance scores to zero before the softmax.
    pub clip_negative: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            temperature_inv: 9.0,
            agg: Agg::Mean,
            direction: Direction::TextToImage,
            clip_negative: false,
        }
    }
}

/// Per-query-fragment attention distribution over key fragments.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `|Q|×|K|` softmax weights; each row sums to one.
    pub weights: Tensor,
    /// `|Q|×|K|` relevance scores before the softmax.
    pub scores: Tensor,
    pub query: QueryModality,
    /// Inverse temperature the weights were computed with.
    pub temperature_inv: f64,
}

impl AttentionMap {
    pub fn num_queries(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_keys(&self) -> usize {
        self.weights.cols()
    }
}

/// Weighted sums of key rows, one per query fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendedInfo {
    pub vectors: Tensor,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("fragment set must contain at least one non-empty fragment")]
    EmptyFragments,
    #[error("embedding dimensions differ: query {query}, key {key}")]
    DimMismatch { query: usize, key: usize },
    #[error("query has {query} fragments but attended info has {attended}")]
    RowMismatch { query: usize, attended: usize },
    #[error("{0}")]
    WrongKind(&'static str),
    #[error("invalid fragment annotation: {0}")]
    Annotation(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

fn query_modality(kind: FragmentKind) -> QueryModality {
    match kind {
        FragmentKind::Text => QueryModality::Text,
        FragmentKind::Image => QueryModality::Image,
    }
}

fn relevance_scores(query: &Tensor, key: &Tensor, clip: bool) -> Result<Tensor, NumError> {
    let (qn, _) = query.normalize_rows()?;
    let (kn, _) = key.normalize_rows()?;
    let e = qn.matmul(&kn.transpose()?)?;
    Ok(if clip { e.map(|v| v.max(0.0)) } else { e })
}

/// Attention of every query fragment over all key fragments.
pub fn attend(
    query: &FragmentSet,
    key: &FragmentSet,
    temperature_inv: f64,
) -> Result<(AttentionMap, AttendedInfo), AttentionError> {
    let cfg = AttentionConfig {
        temperature_inv,
        ..AttentionConfig::default()
    };
    attend_with(query, key, &cfg)
}

/// [`attend`] honoring the clipping switch of `cfg`.
pub fn attend_with(
    query: &FragmentSet,
    key: &FragmentSet,
    cfg: &AttentionConfig,
) -> Result<(AttentionMap, AttendedInfo), AttentionError> {
    if query.dim() != key.dim() {
        return Err(AttentionError::DimMismatch {
            query: query.dim(),
            key: key.dim(),
        });
    }
    let scores = relevance_scores(query.features(), key.features(), cfg.clip_negative)?;
    let weights = scores.softmax_rows(cfg.temperature_inv)?;
    let vectors = weights.matmul(key.features())?;
    Ok((
        AttentionMap {
            weights,
            scores,
            query: query_modality(query.kind()),
            temperature_inv: cfg.temperature_inv,
        },
        AttendedInfo { vectors },
    ))
}

/// `AGG_i cos(q_i, a_i)`.
pub fn pair_similarity(
    query: &FragmentSet,
    attended: &AttendedInfo,
    agg: Agg,
) -> Result<f64, AttentionError> {
    if query.len() != attended.vectors.rows() {
        return Err(AttentionError::RowMismatch {
            query: query.len(),
            attended: attended.vectors.rows(),
        });
    }
    let sims: Vec<f64> = (0..query.len())
        .map(|i| cosine(query.features().row(i), attended.vectors.row(i)))
        .collect();
    Ok(agg.apply(&sims))
}

/// Similarity of one image and one sentence under the configured
/// direction(s).
pub fn image_text_similarity(
    image: &FragmentSet,
    text: &FragmentSet,
    cfg: &AttentionConfig,
) -> Result<f64, AttentionError> {
    let one_way = |q: &FragmentSet, k: &FragmentSet| -> Result<f64, AttentionError> {
        let (_, attended) = attend_with(q, k, cfg)?;
        pair_similarity(q, &attended, cfg.agg)
    };
    match cfg.direction {
        Direction::TextToImage => one_way(text, image),
        Direction::ImageToText => one_way(image, text),
        Direction::Both => Ok(0.5 * (one_way(text, image)? + one_way(image, text)?)),
    }
}

/// Matrix of pair similarities, entry `(a, b)` = `S(images[a], texts[b])`.
pub fn score_matrix(
    images: &[FragmentSet],
    texts: &[FragmentSet],
    cfg: &AttentionConfig,
) -> Result<Tensor, AttentionError> {
    let mut data = Vec::with_capacity(images.len() * texts.len());
    for image in images {
        for text in texts {
            data.push(image_text_similarity(image, text, cfg)?);
        }
    }
    Ok(Tensor::new(vec![images.len(), texts.len()], data)?)
}

/// Recorded attention nodes for one query/key pairing.
#[derive(Debug, Clone, Copy)]
pub struct AttendVars {
    pub scores: Var,
    pub weights: Var,
    pub attended: Var,
}

/// Recorded form of [`attend_with`]; `query` and `key` are `n×d` feature
/// nodes.
pub fn attend_var(
    g: &mut Graph,
    query: Var,
    key: Var,
    cfg: &AttentionConfig,
) -> Result<AttendVars, AttentionError> {
    let (qd, kd) = (g.value(query).cols(), g.value(key).cols());
    if qd != kd {
        return Err(AttentionError::DimMismatch { query: qd, key: kd });
    }
    let qn = g.normalize_rows(query)?;
    let kn = g.normalize_rows(key)?;
    let kt = g.transpose(kn)?;
    let mut scores = g.matmul(qn, kt)?;
    if cfg.clip_negative {
        scores = g.relu(scores)?;
    }
    let weights = g.softmax_rows(scores, cfg.temperature_inv)?;
    let attended = g.matmul(weights, key)?;
    Ok(AttendVars {
        scores,
        weights,
        attended,
    })
}

/// Recorded form of [`pair_similarity`].
pub fn pair_similarity_var(
    g: &mut Graph,
    query: Var,
    attended: Var,
    agg: Agg,
) -> Result<Var, AttentionError> {
    let sims = g.cosine_rows(query, attended)?;
    Ok(agg.apply_var(g, sims)?)
}

/// Recorded form of [`image_text_similarity`]. Returns the score and the
/// text-query attention when that direction is active.
pub fn image_text_similarity_var(
    g: &mut Graph,
    image: Var,
    text: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Option<AttendVars>), AttentionError> {
    let one_way = |g: &mut Graph, q: Var, k: Var| -> Result<(Var, AttendVars), AttentionError> {
        let att = attend_var(g, q, k, cfg)?;
        Ok((pair_similarity_var(g, q, att.attended, cfg.agg)?, att))
    };
    match cfg.direction {
        Direction::TextToImage => {
            let (s, att) = one_way(g, text, image)?;
            Ok((s, Some(att)))
        }
        Direction::ImageToText => Ok((one_way(g, image, text)?.0, None)),
        Direction::Both => {
            let (s1, att) = one_way(g, text, image)?;
            let (s2, _) = one_way(g, image, text)?;
            let s = g.weighted_sum(&[(s1, 0.5), (s2, 0.5)])?;
            Ok((s, Some(att)))
        }
    }
}
