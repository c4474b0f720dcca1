//! Attention correctness (precision, recall, F1 against box-level
//! ground truth) and retrieval Recall@K / rsum.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::numkit::{exact_sum, Tensor};

/// Axis-aligned box `(x, y, w, h)` in pixels. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("box {0:?} has non-positive area")]
    DegenerateBox(BBox),
    #[error("invalid annotation: {0}")]
    Annotation(String),
    #[error("no annotated phrase has a relevant region")]
    NoAnnotatedPhrases,
    #[error("retrieval query {query} has no ground-truth match")]
    MissingGroundTruth { query: String },
    #[error("score matrix is {rows}×{cols} but ground truth lists {gt} images")]
    GroundTruthShape { rows: usize, cols: usize, gt: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Intersection over union of two positive-area boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, MetricError> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(MetricError::DegenerateBox(*bx));
        }
    }
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    // Areas from the same edge arithmetic as the overlap, so a box has IoU
    // exactly 1 with itself.
    let area = |bx: &BBox| ((bx.x + bx.w) - bx.x) * ((bx.y + bx.h) - bx.y);
    Ok(inter / (area(a) + area(b) - inter))
}

/// A noun phrase: caption words `span.0..span.1` linked to image regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    /// Half-open word range `[start, end)`.
    pub span: [usize; 2],
    pub regions: Vec<usize>,
}

impl Phrase {
    pub fn words(&self) -> std::ops::Range<usize> {
        self.span[0]..self.span[1]
    }
}

/// Phrase-to-region links for one image-caption pair.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlignmentAnnotation {
    pub phrases: Vec<Phrase>,
}

impl AlignmentAnnotation {
    pub fn validate(&self, caption_len: usize, region_count: usize) -> Result<(), MetricError> {
        let mut owner = vec![None; caption_len];
        for (p, phrase) in self.phrases.iter().enumerate() {
            let [start, end] = phrase.span;
            if start >= end || end > caption_len {
                return Err(MetricError::Annotation(format!(
                    "phrase {p} span [{start}, {end}) outside caption of {caption_len} words"
                )));
            }
            if let Some(&r) = phrase.regions.iter().find(|&&r| r >= region_count) {
                return Err(MetricError::Annotation(format!(
                    "phrase {p} links region {r} but image has {region_count}"
                )));
            }
            for w in start..end {
                if let Some(prev) = owner[w].replace(p) {
                    return Err(MetricError::Annotation(format!(
                        "word {w} belongs to phrases {prev} and {p}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn phrase_of(&self, word: usize) -> Option<&Phrase> {
        self.phrases.iter().find(|p| p.words().contains(&word))
    }
}

/// Attendedness threshold on attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttThreshold {
    /// `1 / |K|`.
    Uniform,
    Value(f64),
}

impl AttThreshold {
    pub fn value(self, num_keys: usize) -> f64 {
        match self {
            AttThreshold::Uniform => 1.0 / num_keys as f64,
            AttThreshold::Value(v) => v,
        }
    }
}

impl std::str::FromStr for AttThreshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "uniform" {
            return Ok(AttThreshold::Uniform);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| format!("expected 'uniform' or a number, got '{s}'"))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(format!("attention threshold must be >= 0, got {v}"));
        }
        Ok(AttThreshold::Value(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricThresholds {
    pub t_iou: f64,
    pub t_att: AttThreshold,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            t_iou: 0.5,
            t_att: AttThreshold::Uniform,
        }
    }
}

/// Which F1 formula a single-number report uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// `AP·AR / (AP + AR)`, half the harmonic mean.
    #[default]
    Paper,
    /// `2·AP·AR / (AP + AR)`.
    Standard,
}

impl std::str::FromStr for F1Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(F1Mode::Paper),
            "standard" => Ok(F1Mode::Standard),
            _ => Err(format!("expected 'paper' or 'standard', got '{s}'")),
        }
    }
}

/// Regions whose box overlaps one of the word's linked ground-truth boxes
/// with IoU strictly above `t_iou`. Empty for words outside any phrase.
pub fn relevant_set(
    regions: &[BBox],
    annotation: &AlignmentAnnotation,
    word_index: usize,
    t_iou: f64,
) -> Result<Vec<usize>, MetricError> {
    let Some(phrase) = annotation.phrase_of(word_index) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (i, b) in regions.iter().enumerate() {
        let mut best = 0.0f64;
        for &r in &phrase.regions {
            let gt = regions.get(r).ok_or_else(|| {
                MetricError::Annotation(format!("region {r} out of range"))
            })?;
            best = best.max(iou(b, gt)?);
        }
        if best > t_iou {
            out.push(i);
        }
    }
    Ok(out)
}

/// Keys whose weight for query `word_index` is strictly above `t_att`.
pub fn attended_set(map: &AttentionMap, word_index: usize, t_att: f64) -> Vec<usize> {
    map.weights
        .row(word_index)
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > t_att)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordMetrics {
    pub ap: f64,
    pub ar: f64,
    pub af_paper: f64,
    pub af_standard: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall and both F1 variants for one word. `relevant` must be
/// non-empty; an empty `attended` set has precision 0.
pub fn word_metrics(attended: &[usize], relevant: &[usize]) -> WordMetrics {
    debug_assert!(!relevant.is_empty());
    let hits = attended.iter().filter(|a| relevant.contains(a)).count() as f64;
    let ap = ratio(hits, attended.len() as f64);
    let ar = ratio(hits, relevant.len() as f64);
    WordMetrics {
        ap,
        ar,
        af_paper: ratio(ap * ar, ap + ar),
        af_standard: ratio(2.0 * ap * ar, ap + ar),
    }
}

/// Phrase-level metrics: the maximum of each word-level metric over the
/// phrase's words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseMetrics {
    pub phrase_id: String,
    pub ap: f64,
    pub ar: f64,
    pub af_paper: f64,
    pub af_standard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub precision: f64,
    pub recall: f64,
    pub f1_paper: f64,
    pub f1_standard: f64,
    pub phrases: Vec<PhraseMetrics>,
}

impl AttentionReport {
    pub fn f1(&self, mode: F1Mode) -> f64 {
        match mode {
            F1Mode::Paper => self.f1_paper,
            F1Mode::Standard => self.f1_standard,
        }
    }

    /// CSV with columns `phrase_id, ap, ar, af`, `af` in the given mode.
    pub fn write_csv(&self, path: &Path, mode: F1Mode) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["phrase_id", "ap", "ar", "af"])?;
        for p in &self.phrases {
            let af = match mode {
                F1Mode::Paper => p.af_paper,
                F1Mode::Standard => p.af_standard,
            };
            w.write_record([
                p.phrase_id.clone(),
                p.ap.to_string(),
                p.ar.to_string(),
                af.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One attention map with everything needed to score it.
#[derive(Debug, Clone)]
pub struct AttentionInstance<'a> {
    pub pair_id: &'a str,
    /// Text-query map: row `j` is word `j` over image regions.
    pub map: &'a AttentionMap,
    pub regions: &'a [BBox],
    pub annotation: &'a AlignmentAnnotation,
}

/// Metrics for every scorable phrase of one instance.
pub fn instance_phrase_metrics(
    inst: &AttentionInstance<'_>,
    thresholds: &MetricThresholds,
) -> Result<Vec<PhraseMetrics>, MetricError> {
    let t_att = thresholds.t_att.value(inst.map.num_keys());
    let mut out = Vec::new();
    for (p, phrase) in inst.annotation.phrases.iter().enumerate() {
        let mut best: Option<WordMetrics> = None;
        for word in phrase.words() {
            let relevant = relevant_set(inst.regions, inst.annotation, word, thresholds.t_iou)?;
            if relevant.is_empty() {
                continue;
            }
            let attended = attended_set(inst.map, word, t_att);
            let m = word_metrics(&attended, &relevant);
            best = Some(match best {
                None => m,
                Some(b) => WordMetrics {
                    ap: b.ap.max(m.ap),
                    ar: b.ar.max(m.ar),
                    af_paper: b.af_paper.max(m.af_paper),
                    af_standard: b.af_standard.max(m.af_standard),
                },
            });
        }
        if let Some(b) = best {
            out.push(PhraseMetrics {
                phrase_id: format!("{}:{}", inst.pair_id, p),
                ap: b.ap,
                ar: b.ar,
                af_paper: b.af_paper,
                af_standard: b.af_standard,
            });
        }
    }
    Ok(out)
}

fn exact_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    exact_sum(&v) / v.len() as f64
}

/// Corpus attention metrics: phrase-level maxima averaged over all phrases
/// of all pairs. The averages use exact summation, so the report does not
/// depend on the order of pairs or phrases.
pub fn corpus_attention_report(
    instances: &[AttentionInstance<'_>],
    thresholds: &MetricThresholds,
) -> Result<AttentionReport, MetricError> {
    let mut phrases = Vec::new();
    for inst in instances {
        phrases.extend(instance_phrase_metrics(inst, thresholds)?);
    }
    if phrases.is_empty() {
        return Err(MetricError::NoAnnotatedPhrases);
    }
    Ok(AttentionReport {
        precision: exact_mean(phrases.iter().map(|p| p.ap)),
        recall: exact_mean(phrases.iter().map(|p| p.ar)),
        f1_paper: exact_mean(phrases.iter().map(|p| p.af_paper)),
        f1_standard: exact_mean(phrases.iter().map(|p| p.af_standard)),
        phrases,
    })
}

/// Recall@K in both retrieval directions, as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    /// Image queries ranking sentences.
    pub sentence_retrieval: Vec<f64>,
    /// Sentence queries ranking images.
    pub image_retrieval: Vec<f64>,
    pub rsum: f64,
}

/// Sum of Recall@K values, rounded once from the exact total.
pub fn rsum(values: &[f64]) -> f64 {
    exact_sum(values)
}

/// Position of the best-ranked ground-truth item for one query, ranking by
/// descending score with ties resolved toward the lower index.
fn first_hit_rank(scores: &[f64], truth: &[usize]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort; equal scores (including 0.0 and -0.0) keep index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores are finite"));
    order
        .iter()
        .position(|i| truth.contains(i))
        .expect("ground truth checked non-empty")
}

fn recall_percentages(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Recall@K for an `N×M` image-by-sentence score matrix.
/// `ground_truth[a]` lists the sentences matching image `a`.
pub fn recall_at_k(
    scores: &Tensor,
    ground_truth: &[Vec<usize>],
    ks: &[usize],
) -> Result<RetrievalReport, MetricError> {
    let (n, m) = (scores.rows(), scores.cols());
    if ground_truth.len() != n {
        return Err(MetricError::GroundTruthShape {
            rows: n,
            cols: m,
            gt: ground_truth.len(),
        });
    }
    let mut text_truth: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (img, texts) in ground_truth.iter().enumerate() {
        if texts.is_empty() {
            return Err(MetricError::MissingGroundTruth {
                query: format!("image {img}"),
            });
        }
        for &t in texts {
            if t >= m {
                return Err(MetricError::GroundTruthShape { rows: n, cols: m, gt: n });
            }
            text_truth[t].push(img);
        }
    }
    if let Some(t) = text_truth.iter().position(Vec::is_empty) {
        return Err(MetricError::MissingGroundTruth {
            query: format!("sentence {t}"),
        });
    }

    let sentence_ranks: Vec<usize> = (0..n)
        .map(|a| first_hit_rank(scores.row(a), &ground_truth[a]))
        .collect();
    let columns = scores.transpose().expect("score matrix is rank 2");
    let image_ranks: Vec<usize> = (0..m)
        .map(|t| first_hit_rank(columns.row(t), &text_truth[t]))
        .collect();

    let sentence_retrieval = recall_percentages(&sentence_ranks, ks);
    let image_retrieval = recall_percentages(&image_ranks, ks);
    let all: Vec<f64> = sentence_retrieval.iter().chain(&image_retrieval).copied().collect();
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        sentence_retrieval,
        image_retrieval,
        rsum: rsum(&all),
    })
}

/// One-to-one ground truth: image `i` matches sentence `i`.
pub fn diagonal_ground_truth(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_paper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_standard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rsum: Option<f64>,
}

impl SummaryJson {
    pub fn new(attention: Option<&AttentionReport>, retrieval: Option<&RetrievalReport>) -> Self {
        let recall_at = retrieval.map(|r| {
            let by_k = |vals: &[f64]| {
                r.ks.iter()
                    .zip(vals)
                    .map(|(k, v)| (k.to_string(), *v))
                    .collect::<BTreeMap<_, _>>()
            };
            BTreeMap::from([
                ("sentence_retrieval".to_string(), by_k(&r.sentence_retrieval)),
                ("image_retrieval".to_string(), by_k(&r.image_retrieval)),
            ])
        });
        Self {
            precision: attention.map(|a| a.precision),
            recall: attention.map(|a| a.recall),
            f1_paper: attention.map(|a| a.f1_paper),
            f1_standard: attention.map(|a| a.f1_standard),
            recall_at,
            rsum: retrieval.map(|r| r.rsum),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}
