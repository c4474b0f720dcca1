//! Training objectives: hardest-negative triplet ranking, content
//! re-sourcing (CCR), content swapping (CCS) and their weighted sum.
//!
//! As in [`crate::attention`], each loss has a plain form for evaluation and
//! testing and a recorded form for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Agg, AttendVars, AttendedInfo, AttentionError, AttentionMap, FragmentSet};
use crate::numkit::{cosine, Graph, NumError, Tensor, Var};

/// Threshold for the attended/ignored split of key fragments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `1 / |K|`, the weight every key would get under uniform attention.
    #[default]
    Uniform,
    Fixed(f64),
}

impl ThresholdMode {
    pub fn value(self, num_keys: usize) -> f64 {
        match self {
            ThresholdMode::Uniform => 1.0 / num_keys as f64,
            ThresholdMode::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Ranking margin.
    pub gamma1: f64,
    /// CCR margin.
    pub gamma2: f64,
    /// CCS margin.
    pub gamma3: f64,
    pub lambda_ccr: f64,
    pub lambda_ccs: f64,
    pub h_threshold: ThresholdMode,
    pub agg: Agg,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.2,
            gamma2: 0.2,
            gamma3: 0.2,
            lambda_ccr: 1.0,
            lambda_ccs: 1.0,
            h_threshold: ThresholdMode::Uniform,
            agg: Agg::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("lambda_ccr", self.lambda_ccr),
            ("lambda_ccs", self.lambda_ccs),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let ThresholdMode::Fixed(t) = self.h_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(LossError::Config(format!("fixed threshold must be >= 0, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("ranking loss needs a square score matrix with at least 2 pairs, got {0:?}")]
    BatchTooSmall(Vec<usize>),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("swap index {index} out of range for {len} query fragments")]
    SwapIndex { index: usize, len: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Attended (`G_att`) and ignored (`G_ign`) key indices for one query
/// fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub attended: Vec<usize>,
    pub ignored: Vec<usize>,
}

/// Loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rank: f64,
    pub ccr: f64,
    pub ccs: f64,
    pub total: f64,
}

/// Recorded loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rank: Var,
    pub ccr: Var,
    pub ccs: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBundle {
        LossBundle {
            rank: g.item(self.rank),
            ccr: g.item(self.ccr),
            ccs: g.item(self.ccs),
            total: g.item(self.total),
        }
    }
}

/// Hardest in-batch negatives for each anchor. `groups[a] == groups[b]`
/// marks `b` as a duplicate of `a` that may not serve as its negative.
fn hardest_negatives(scores: &Tensor, groups: &[usize]) -> Vec<(usize, Option<usize>, Option<usize>)> {
    let b = scores.rows();
    (0..b)
        .map(|a| {
            let mut best_text: Option<usize> = None;
            let mut best_image: Option<usize> = None;
            for c in 0..b {
                if groups[c] == groups[a] {
                    continue;
                }
                if best_text.is_none_or(|t| scores.get(a, c) > scores.get(a, t)) {
                    best_text = Some(c);
                }
                if best_image.is_none_or(|i| scores.get(c, a) > scores.get(i, a)) {
                    best_image = Some(c);
                }
            }
            (a, best_text, best_image)
        })
        .collect()
}

fn check_square(scores: &Tensor) -> Result<usize, LossError> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
        return Err(LossError::BatchTooSmall(shape.to_vec()));
    }
    Ok(shape[0])
}

/// Triplet ranking loss with the hardest in-batch negative in each
/// direction, averaged over anchors. Row `a` holds image `a` against every
/// sentence; the diagonal holds the matched pairs.
pub fn ranking_loss(scores: &Tensor, gamma1: f64) -> Result<f64, LossError> {
    let b = check_square(scores)?;
    let groups: Vec<usize> = (0..b).collect();
    ranking_loss_grouped(scores, gamma1, &groups)
}

/// [`ranking_loss`] where anchors sharing a group id are not negatives of
/// each other.
pub fn ranking_loss_grouped(scores: &Tensor, gamma1: f64, groups: &[usize]) -> Result<f64, LossError> {
    let b = check_square(scores)?;
    debug_assert_eq!(groups.len(), b);
    let mut total = 0.0;
    for (a, text_neg, image_neg) in hardest_negatives(scores, groups) {
        let pos = scores.get(a, a);
        if let Some(t) = text_neg {
            total += (scores.get(a, t) - pos + gamma1).max(0.0);
        }
        if let Some(i) = image_neg {
            total += (scores.get(i, a) - pos + gamma1).max(0.0);
        }
    }
    Ok(total / b as f64)
}

/// Recorded form of [`ranking_loss_grouped`].
pub fn ranking_loss_var(
    g: &mut Graph,
    scores: Var,
    gamma1: f64,
    groups: &[usize],
) -> Result<Var, LossError> {
    let b = check_square(g.value(scores))?;
    debug_assert_eq!(groups.len(), b);
    let picks = hardest_negatives(g.value(scores), groups);
    let mut terms = Vec::new();
    for (a, text_neg, image_neg) in picks {
        let pos = g.pick(scores, a * b + a)?;
        for neg_index in [text_neg.map(|t| a * b + t), image_neg.map(|i| i * b + a)]
            .into_iter()
            .flatten()
        {
            let neg = g.pick(scores, neg_index)?;
            let diff = g.sub(neg, pos)?;
            terms.push(g.hinge(diff, gamma1)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = terms.len();
    let stacked = g.stack(&terms, &[n])?;
    let sum = g.sum(stacked)?;
    Ok(g.scale(sum, 1.0 / b as f64)?)
}

/// Splits the keys of every query fragment by `w > threshold`.
pub fn partition_keys(map: &AttentionMap, mode: ThresholdMode) -> Vec<Partition> {
    partition_weights(&map.weights, mode)
}

pub(crate) fn partition_weights(weights: &Tensor, mode: ThresholdMode) -> Vec<Partition> {
    let threshold = mode.value(weights.cols());
    (0..weights.rows())
        .map(|i| {
            let (attended, ignored) = (0..weights.cols()).partition(|&j| weights.get(i, j) > threshold);
            Partition { attended, ignored }
        })
        .collect()
}

/// Attended feature of a key group: the relevance scores of `group` are
/// re-normalized with a softmax over the group only, then used to weight
/// the group's key rows. Returns `None` for an empty group.
pub fn group_feature(
    scores_row: &[f64],
    keys: &Tensor,
    group: &[usize],
    temperature_inv: f64,
) -> Option<Vec<f64>> {
    if group.is_empty() {
        return None;
    }
    let sub: Vec<f64> = group.iter().map(|&j| scores_row[j]).collect();
    let weights = Tensor::from_rows(&[sub])
        .and_then(|t| t.softmax_rows(temperature_inv))
        .ok()?;
    let rows = keys.gather_rows(group).ok()?;
    weights.matmul(&rows).ok().map(Tensor::into_data)
}

fn group_feature_var(
    g: &mut Graph,
    scores_row: Var,
    keys: Var,
    group: &[usize],
    temperature_inv: f64,
) -> Result<Var, NumError> {
    let sub = g.select_cols(scores_row, group)?;
    let w = g.softmax_rows(sub, temperature_inv)?;
    let rows = g.gather_rows(keys, group)?;
    g.matmul(w, rows)
}

/// `[AGG_i cos(q_i, s_i) − AGG_i cos(q_i, l_i) + γ2]_+` over the query
/// fragments whose attended and ignored groups are both non-empty.
pub fn ccr_loss(
    query: &FragmentSet,
    map: &AttentionMap,
    keys: &FragmentSet,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let partitions = partition_keys(map, cfg.h_threshold);
    let mut attended_sims = Vec::new();
    let mut ignored_sims = Vec::new();
    for (i, part) in partitions.iter().enumerate() {
        let row = map.scores.row(i);
        let l = group_feature(row, keys.features(), &part.attended, map.temperature_inv);
        let s = group_feature(row, keys.features(), &part.ignored, map.temperature_inv);
        if let (Some(l), Some(s)) = (l, s) {
            let q = query.features().row(i);
            attended_sims.push(cosine(q, &l));
            ignored_sims.push(cosine(q, &s));
        }
    }
    if attended_sims.is_empty() {
        return Ok(0.0);
    }
    Ok((cfg.agg.apply(&ignored_sims) - cfg.agg.apply(&attended_sims) + cfg.gamma2).max(0.0))
}

/// Recorded form of [`ccr_loss`]. The partition is read off the current
/// weights and is not differentiated through.
pub fn ccr_loss_var(
    g: &mut Graph,
    query: Var,
    att: &AttendVars,
    keys: Var,
    temperature_inv: f64,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let partitions = partition_weights(g.value(att.weights), cfg.h_threshold);
    let mut attended_sims = Vec::new();
    let mut ignored_sims = Vec::new();
    for (i, part) in partitions.iter().enumerate() {
        if part.attended.is_empty() || part.ignored.is_empty() {
            continue;
        }
        let row = g.gather_rows(att.scores, &[i])?;
        let q = g.gather_rows(query, &[i])?;
        let l = group_feature_var(g, row, keys, &part.attended, temperature_inv)?;
        let s = group_feature_var(g, row, keys, &part.ignored, temperature_inv)?;
        attended_sims.push(g.cosine_rows(q, l)?);
        ignored_sims.push(g.cosine_rows(q, s)?);
    }
    if attended_sims.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = attended_sims.len();
    let att_stack = g.stack(&attended_sims, &[n, 1])?;
    let ign_stack = g.stack(&ignored_sims, &[n, 1])?;
    let att_agg = cfg.agg.apply_var(g, att_stack)?;
    let ign_agg = cfg.agg.apply_var(g, ign_stack)?;
    let diff = g.sub(ign_agg, att_agg)?;
    Ok(g.hinge(diff, cfg.gamma2)?)
}

/// One swapped query fragment: position `index` of the caption has its
/// token replaced by `token`, whose embedding is `embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapSample {
    pub index: usize,
    pub token: usize,
    pub embedding: Vec<f64>,
}

/// `[cos(q̄, a_i) − cos(q_i, a_i) + γ3]_+` for the sampled position `i`.
pub fn ccs_loss(
    query: &FragmentSet,
    attended: &AttendedInfo,
    swap: &SwapSample,
    gamma3: f64,
) -> Result<f64, LossError> {
    if swap.index >= query.len() || swap.index >= attended.vectors.rows() {
        return Err(LossError::SwapIndex {
            index: swap.index,
            len: query.len(),
        });
    }
    let a = attended.vectors.row(swap.index);
    let q = query.features().row(swap.index);
    Ok((cosine(&swap.embedding, a) - cosine(q, a) + gamma3).max(0.0))
}

/// Recorded form of [`ccs_loss`]; `swapped` is a `1×d` node.
pub fn ccs_loss_var(
    g: &mut Graph,
    query: Var,
    attended: Var,
    index: usize,
    swapped: Var,
    gamma3: f64,
) -> Result<Var, LossError> {
    let len = g.value(query).rows();
    if index >= len {
        return Err(LossError::SwapIndex { index, len });
    }
    let q = g.gather_rows(query, &[index])?;
    let a = g.gather_rows(attended, &[index])?;
    let swapped_sim = g.cosine_rows(swapped, a)?;
    let true_sim = g.cosine_rows(q, a)?;
    let diff = g.sub(swapped_sim, true_sim)?;
    let h = g.hinge(diff, gamma3)?;
    Ok(g.sum(h)?)
}

/// `rank + λ_CCR·ccr + λ_CCS·ccs`.
pub fn combined_loss(rank: f64, ccr: f64, ccs: f64, cfg: &LossConfig) -> LossBundle {
    LossBundle {
        rank,
        ccr,
        ccs,
        total: rank + cfg.lambda_ccr * ccr + cfg.lambda_ccs * ccs,
    }
}

/// Recorded form of [`combined_loss`]; the total is evaluated in the same
/// order as the plain form, so both agree bit for bit.
pub fn combined_loss_var(
    g: &mut Graph,
    rank: Var,
    ccr: Var,
    ccs: Var,
    cfg: &LossConfig,
) -> Result<LossVars, LossError> {
    let ccr_w = g.scale(ccr, cfg.lambda_ccr)?;
    let ccs_w = g.scale(ccs, cfg.lambda_ccs)?;
    let partial = g.add(rank, ccr_w)?;
    let total = g.add(partial, ccs_w)?;
    Ok(LossVars { rank, ccr, ccs, total })
}

/// Token vocabulary with a category per token. Swap candidates must come
/// from a different category than the swapped token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    categories: Vec<usize>,
}

impl Vocabulary {
    /// Every token is its own category.
    pub fn distinct(size: usize) -> Self {
        Self {
            categories: (0..size).collect(),
        }
    }

    pub fn with_categories(categories: Vec<usize>) -> Self {
        Self { categories }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn category(&self, token: usize) -> usize {
        self.categories[token]
    }

    /// Tokens that may replace position `index` of `caption`: not in the
    /// caption and not sharing a category with the replaced token.
    pub fn swap_candidates(&self, caption: &[usize], index: usize) -> Vec<usize> {
        let own = self.category(caption[index]);
        (0..self.len())
            .filter(|t| !caption.contains(t) && self.category(*t) != own)
            .collect()
    }
}

/// Picks a caption position uniformly, then a replacement token uniformly
/// among [`Vocabulary::swap_candidates`]. `None` when there is no
/// candidate; the CCS term for that pair is then zero.
pub fn choose_swap<R: Rng + ?Sized>(
    caption: &[usize],
    vocab: &Vocabulary,
    rng: &mut R,
) -> Option<(usize, usize)> {
    if caption.is_empty() {
        return None;
    }
    let index = rng.random_range(0..caption.len());
    let candidates = vocab.swap_candidates(caption, index);
    if candidates.is_empty() {
        return None;
    }
    Some((index, candidates[rng.random_range(0..candidates.len())]))
}

/// [`choose_swap`] on a text fragment set, resolving the replacement's
/// embedding from `embeddings` (one row per token, normalized on use).
pub fn sample_swap<R: Rng + ?Sized>(
    query: &FragmentSet,
    vocab: &Vocabulary,
    embeddings: &Tensor,
    rng: &mut R,
) -> Option<SwapSample> {
    let tokens = query.tokens()?;
    let (index, token) = choose_swap(tokens, vocab, rng)?;
    let row = embeddings.gather_rows(&[token]).ok()?;
    let (row, _) = row.normalize_rows().ok()?;
    Some(SwapSample {
        index,
        token,
        embedding: row.into_data(),
    })
}
