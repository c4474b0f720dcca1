//! Training loop, experiment configuration, evaluation and attention dumps.

mod eval;
mod model;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_var, image_text_similarity_var, AttentionConfig, AttentionError};
use crate::jsonfmt::to_json_line;
use crate::losses::{
    ccr_loss_var, ccs_loss_var, choose_swap, combined_loss_var, ranking_loss_var, LossBundle, LossConfig,
    LossError, LossVars, Vocabulary,
};
use crate::metrics::{MetricError, MetricThresholds};
use crate::numkit::{adam_step, AdamConfig, AdamState, Graph, NumError, Tensor, Var};
use crate::synthworld::{Dataset, DatasetError, PairSample};

pub use eval::{attention_maps, dump_attention, evaluate, EvalReport, RECALL_KS};
pub use model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub attention: AttentionConfig,
    /// Pairs per batch; at least 2 so every anchor has a negative.
    pub batch_size: usize,
    pub epochs: usize,
    /// Toy-scale default learning rate 0.01; the optimizer's own default is
    /// 2e-3.
    pub adam: AdamConfig,
    /// Model width; `None` keeps the region feature width.
    pub embed_dim: Option<usize>,
    pub seed: u64,
    /// Validation every this many epochs (the final epoch is always
    /// evaluated). 0 disables intermediate evaluation.
    pub eval_every: usize,
    /// Where the best-by-validation-rsum model is written, if anywhere.
    pub checkpoint: Option<PathBuf>,
    /// Directory for the diagnostic dump written when a loss goes
    /// non-finite; defaults to the checkpoint directory, else the system
    /// temp directory.
    pub diagnostics_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            attention: AttentionConfig::default(),
            batch_size: 16,
            epochs: 15,
            adam: AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
            embed_dim: None,
            seed: 1,
            eval_every: 1,
            checkpoint: None,
            diagnostics_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size must be >= 2 so the ranking loss has negatives, got {}",
                self.batch_size
            )));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", a.learning_rate)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(TrainError::Config("adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if !(self.attention.temperature_inv.is_finite() && self.attention.temperature_inv > 0.0) {
            return Err(TrainError::Config("temperature_inv must be positive".into()));
        }
        if self.embed_dim == Some(0) {
            return Err(TrainError::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set has {0} pairs; at least 2 are needed")]
    TooFewPairs(usize),
    #[error("non-finite value at epoch {epoch}, step {step} ({source}); batch dumped to {}", dump.display())]
    NonFinite {
        epoch: usize,
        step: usize,
        dump: PathBuf,
        source: NumError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Validation snapshot taken during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub rsum: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_standard: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// One entry per optimizer step.
    pub steps: Vec<LossBundle>,
    pub evals: Vec<EvalRecord>,
    /// Epoch of the returned model (1-based; 0 is the initial model).
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Mean total loss over the steps of epoch `e` (0-based).
    pub fn epoch_mean_total(&self, e: usize, steps_per_epoch: usize) -> f64 {
        let s = &self.steps[e * steps_per_epoch..(e + 1) * steps_per_epoch];
        s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best model by validation rsum (final model without a validation set).
    pub model: Model,
    pub final_model: Model,
    pub history: TrainHistory,
    pub steps_per_epoch: usize,
}

/// Whether batch steps build the CCR/CCS terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Full,
    RankOnly,
}

/// Trains with `rank + λ_ccr·ccr + λ_ccs·ccs`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    run(dataset, cfg, Objective::Full)
}

/// Ranking-loss-only training that never builds the constraint terms.
/// With `λ_ccr = λ_ccs = 0`, [`train`] follows the same parameter
/// trajectory bit for bit.
pub fn train_baseline(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    run(dataset, cfg, Objective::RankOnly)
}

/// Seeds for the independent random streams of one run.
struct Streams {
    init: ChaCha8Rng,
    shuffle: ChaCha8Rng,
    swap: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(0),
            shuffle: stream(1),
            swap: stream(2),
        }
    }
}

fn run(dataset: &Dataset, cfg: &TrainConfig, objective: Objective) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_set = &dataset.train;
    if train_set.len() < 2 {
        return Err(TrainError::TooFewPairs(train_set.len()));
    }
    let mut streams = Streams::new(cfg.seed);
    let region_dim = dataset.meta.embed_dim();
    let dim = cfg.embed_dim.unwrap_or(region_dim);
    let mut model = Model::init(dataset.meta.vocab_size(), region_dim, dim, &mut streams.init);
    let vocab = Vocabulary::distinct(dataset.meta.vocab_size());
    let mut adam = AdamState::new(&[&model.token_embeddings, &model.region_projection]);
    let thresholds = MetricThresholds::default();

    let groups = group_ids(train_set);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    // Trailing batches smaller than 2 are dropped.
    let steps_per_epoch = train_set.len() / cfg.batch_size
        + usize::from(train_set.len() % cfg.batch_size >= 2);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.shuffle);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PairSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch_groups: Vec<usize> = chunk.iter().map(|&i| groups[i]).collect();
            let step = (epoch - 1) * steps_per_epoch + b;
            let result = batch_step(&model, &batch, &batch_groups, cfg, &vocab, &mut streams.swap, objective);
            let (bundle, grads) = match result {
                Ok(v) => v,
                Err(TrainError::Num(source)) => {
                    let dump = write_diagnostic(cfg, epoch, step, &batch, &model, &source)?;
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        dump,
                        source,
                    });
                }
                Err(e) => return Err(e),
            };
            history.steps.push(bundle);
            let Model {
                token_embeddings,
                region_projection,
            } = &mut model;
            adam_step(
                &mut [token_embeddings, region_projection],
                &[&grads[0], &grads[1]],
                &mut adam,
                &cfg.adam,
            )?;
        }

        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if due && !dataset.val.is_empty() {
            let report = evaluate(&model, &dataset.val, &cfg.attention, &thresholds)?;
            let rsum = report.retrieval.rsum;
            history.evals.push(EvalRecord {
                epoch,
                rsum,
                precision: report.attention.precision,
                recall: report.attention.recall,
                f1_standard: report.attention.f1_standard,
            });
            if best.as_ref().is_none_or(|(r, _)| rsum > *r) {
                history.best_epoch = epoch;
                if let Some(path) = &cfg.checkpoint {
                    model.save(path)?;
                }
                best = Some((rsum, model.clone()));
            }
        }
    }

    let best_model = match best {
        Some((_, m)) => m,
        None => {
            history.best_epoch = cfg.epochs;
            if let Some(path) = &cfg.checkpoint {
                model.save(path)?;
            }
            model.clone()
        }
    };
    Ok(TrainOutcome {
        model: best_model,
        final_model: model,
        history,
        steps_per_epoch,
    })
}

/// Pairs with identical content share a group id so they never serve as
/// each other's negatives.
pub fn group_ids(pairs: &[PairSample]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let same = pairs[..i]
            .iter()
            .position(|q| q.tokens == p.tokens && q.regions == p.regions);
        ids.push(same.map_or(i, |j| ids[j]));
    }
    ids
}

/// Loss components and parameter gradients for one batch.
fn batch_step(
    model: &Model,
    batch: &[&PairSample],
    groups: &[usize],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    swap_rng: &mut ChaCha8Rng,
    objective: Objective,
) -> Result<(LossBundle, [Tensor; 2]), TrainError> {
    let swaps: Option<Vec<Option<(usize, usize)>>> = match objective {
        Objective::Full => Some(batch.iter().map(|p| choose_swap(&p.tokens, vocab, swap_rng)).collect()),
        Objective::RankOnly => None,
    };
    let mut g = Graph::new();
    let emb = g.param(model.token_embeddings.clone());
    let proj = g.param(model.region_projection.clone());
    let vars = record_batch_loss(&mut g, emb, proj, batch, groups, swaps.as_deref(), cfg)?;
    let grads = g.backward(vars.total)?;
    Ok((vars.values(&g), collect_grads(&grads, emb, proj, model)))
}

/// Records the training objective of one batch on `g`, with `emb` and
/// `proj` standing for the model's token embeddings and region projection.
///
/// `swaps[i]` is the `(caption index, replacement token)` of pair `i`, or
/// `None` when that pair has no swap candidate. Passing `swaps = None`
/// records the ranking loss alone; the CCR/CCS entries are then constant
/// zeros and `total` is the ranking node itself.
pub fn record_batch_loss(
    g: &mut Graph,
    emb: Var,
    proj: Var,
    batch: &[&PairSample],
    groups: &[usize],
    swaps: Option<&[Option<(usize, usize)>]>,
    cfg: &TrainConfig,
) -> Result<LossVars, TrainError> {
    let mut texts = Vec::with_capacity(batch.len());
    let mut images = Vec::with_capacity(batch.len());
    for pair in batch {
        let rows = g.gather_rows(emb, &pair.tokens)?;
        texts.push(g.normalize_rows(rows)?);
        let raw = g.constant(pair.image_fragments().features().clone());
        let projected = g.matmul(raw, proj)?;
        images.push(g.normalize_rows(projected)?);
    }

    let n = batch.len();
    let mut scores = Vec::with_capacity(n * n);
    let mut matched = Vec::with_capacity(n);
    for a in 0..n {
        for b in 0..n {
            let (s, att) = image_text_similarity_var(g, images[a], texts[b], &cfg.attention)?;
            scores.push(s);
            if a == b {
                matched.push(att);
            }
        }
    }
    let score_matrix = g.stack(&scores, &[n, n])?;
    let rank = ranking_loss_var(g, score_matrix, cfg.loss.gamma1, groups)?;

    let Some(swaps) = swaps else {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(LossVars {
            rank,
            ccr: zero,
            ccs: zero,
            total: rank,
        });
    };
    let mut ccr_terms = Vec::with_capacity(n);
    let mut ccs_terms = Vec::with_capacity(n);
    for i in 0..n {
        let att = match matched[i] {
            Some(att) => att,
            None => attend_var(g, texts[i], images[i], &cfg.attention)?,
        };
        ccr_terms.push(ccr_loss_var(
            g,
            texts[i],
            &att,
            images[i],
            cfg.attention.temperature_inv,
            &cfg.loss,
        )?);
        let ccs = match swaps[i] {
            Some((index, token)) => {
                let row = g.gather_rows(emb, &[token])?;
                let swapped = g.normalize_rows(row)?;
                ccs_loss_var(g, texts[i], att.attended, index, swapped, cfg.loss.gamma3)?
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        ccs_terms.push(ccs);
    }
    let ccr = mean_of(g, &ccr_terms)?;
    let ccs = mean_of(g, &ccs_terms)?;
    Ok(combined_loss_var(g, rank, ccr, ccs, &cfg.loss)?)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var, NumError> {
    let stacked = g.stack(terms, &[terms.len()])?;
    g.mean(stacked)
}

fn collect_grads(grads: &crate::numkit::Gradients, emb: Var, proj: Var, model: &Model) -> [Tensor; 2] {
    let get = |v: Var, like: &Tensor| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()));
    [
        get(emb, &model.token_embeddings),
        get(proj, &model.region_projection),
    ]
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    epoch: usize,
    step: usize,
    error: String,
    pair_ids: Vec<&'a str>,
    batch: &'a [&'a PairSample],
    model: &'a Model,
}

fn write_diagnostic(
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    batch: &[&PairSample],
    model: &Model,
    error: &NumError,
) -> Result<PathBuf, TrainError> {
    let dir = cfg
        .diagnostics_dir
        .clone()
        .or_else(|| cfg.checkpoint.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)))
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(std::env::temp_dir);
    fs::create_dir_all(&dir).map_err(|source| TrainError::Io {
        path: dir.clone(),
        source,
    })?;
    let path = dir.join(format!("nonfinite-epoch{epoch}-step{step}.json"));
    // Non-finite parameters cannot be written as JSON numbers; record them
    // as null by way of serde_json's float handling.
    let record = Diagnostic {
        epoch,
        step,
        error: error.to_string(),
        pair_ids: batch.iter().map(|p| p.id.as_str()).collect(),
        batch,
        model,
    };
    let text = match to_json_line(&record) {
        Ok(t) => t,
        Err(_) => serde_json::to_string(&record)?,
    };
    fs::write(&path, text).map_err(|source| TrainError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
