//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use attnsup::attention::{
    attend_var, attend_with, image_text_similarity_var, score_matrix, Agg, AttentionConfig, Direction,
    FragmentKind, FragmentSet,
};
use attnsup::losses::{
    ccr_loss, ccr_loss_var, ccs_loss, ccs_loss_var, partition_keys, ranking_loss_grouped, ranking_loss_var,
    LossConfig, SwapSample, ThresholdMode,
};
use attnsup::numkit::{Graph, Tensor, Var};
use attnsup::synthworld::{generate, PairSample, WorldConfig};
use attnsup::trainer::{record_batch_loss, Model, TrainConfig};
use rand::Rng;

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn fragments(t: &Tensor, kind: FragmentKind) -> FragmentSet {
    FragmentSet::new(t.clone(), kind).unwrap()
}

/// Loss value plus a signature of the discrete choices behind it.
pub type PlainFn = Box<dyn Fn(&[Tensor]) -> (f64, Vec<i64>)>;
pub type RecordedFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// A differentiable loss given twice: as a plain function of its inputs and
/// as a recorded graph. The plain form also reports the discrete choices
/// it made (hardest negatives, active hinges, key partitions) so that a
/// finite difference straddling one of them can be recognized.
pub struct GradCase {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub plain: PlainFn,
    pub recorded: RecordedFn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Check {
    /// Norm-wise relative error `‖g_a − g_n‖ / (‖g_a‖ + ‖g_n‖)`, and
    /// whether the gradient was nonzero.
    Done { rel_err: f64, nonzero: bool },
    /// A perturbation changed a discrete choice; the setting is unusable.
    Kink,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central finite differences against the recorded gradient.
pub fn check_gradient(case: &GradCase, h: f64) -> Check {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.params.iter().map(|p| g.param(p.clone())).collect();
    let loss = (case.recorded)(&mut g, &vars);
    let recorded_value = g.item(loss);
    let grads = g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (v, p) in vars.iter().zip(&case.params) {
        match grads.get(*v) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }

    let (value, signature) = (case.plain)(&case.params);
    assert!(
        (value - recorded_value).abs() <= 1e-12 * value.abs().max(1.0),
        "{}: plain {value} vs recorded {recorded_value}",
        case.name
    );
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut params = case.params.clone();
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let x = params[t].data()[i];
            params[t].data_mut()[i] = x + h;
            let (fp, sp) = (case.plain)(&params);
            params[t].data_mut()[i] = x - h;
            let (fm, sm) = (case.plain)(&params);
            params[t].data_mut()[i] = x;
            if sp != signature || sm != signature {
                return Check::Kink;
            }
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic) + norm(&numeric);
    let rel_err = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
    Check::Done {
        rel_err,
        nonzero: scale >= 1e-12,
    }
}

/// Hardest negatives and active hinges of a score matrix, found by brute
/// force.
pub fn rank_signature(scores: &Tensor, gamma1: f64, groups: &[usize]) -> Vec<i64> {
    let b = scores.rows();
    let mut sig = Vec::new();
    for a in 0..b {
        let pos = scores.get(a, a);
        let negatives: Vec<usize> = (0..b).filter(|&c| groups[c] != groups[a]).collect();
        for by_row in [true, false] {
            let val = |c: usize| if by_row { scores.get(a, c) } else { scores.get(c, a) };
            let Some(&best) = negatives
                .iter()
                .max_by(|&&x, &&y| val(x).total_cmp(&val(y)).then(y.cmp(&x)))
            else {
                continue;
            };
            sig.push(best as i64);
            sig.push(i64::from(val(best) - pos + gamma1 > 0.0));
        }
    }
    sig
}

fn random_attention_config<R: Rng>(rng: &mut R) -> AttentionConfig {
    AttentionConfig {
        temperature_inv: rng.random_range(1.0..10.0),
        agg: if rng.random_bool(0.5) { Agg::Mean } else { Agg::LogSumExp },
        direction: [Direction::TextToImage, Direction::ImageToText, Direction::Both][rng.random_range(0..3)],
        clip_negative: false,
    }
}

pub fn rank_case<R: Rng>(rng: &mut R) -> GradCase {
    let b = rng.random_range(2..=4);
    let d = 4;
    let cfg = random_attention_config(rng);
    let gamma1 = rng.random_range(0.2..1.0);
    let mut params = Vec::new();
    for _ in 0..b {
        let regions = rng.random_range(2..=4);
        params.push(random_tensor(rng, regions, d));
    }
    for _ in 0..b {
        let words = rng.random_range(1..=3);
        params.push(random_tensor(rng, words, d));
    }
    let groups: Vec<usize> = (0..b).collect();
    let groups2 = groups.clone();
    GradCase {
        name: "rank",
        params,
        plain: Box::new(move |p: &[Tensor]| {
            let images: Vec<FragmentSet> = p[..b].iter().map(|t| fragments(t, FragmentKind::Image)).collect();
            let texts: Vec<FragmentSet> = p[b..].iter().map(|t| fragments(t, FragmentKind::Text)).collect();
            let s = score_matrix(&images, &texts, &cfg).unwrap();
            (ranking_loss_grouped(&s, gamma1, &groups).unwrap(), rank_signature(&s, gamma1, &groups))
        }),
        recorded: Box::new(move |g: &mut Graph, v: &[Var]| {
            let mut scores = Vec::new();
            for a in 0..b {
                for t in 0..b {
                    scores.push(image_text_similarity_var(g, v[a], v[b + t], &cfg).unwrap().0);
                }
            }
            let s = g.stack(&scores, &[b, b]).unwrap();
            ranking_loss_var(g, s, gamma1, &groups2).unwrap()
        }),
    }
}

fn partition_signature(map: &attnsup::attention::AttentionMap, mode: ThresholdMode) -> Vec<i64> {
    partition_keys(map, mode)
        .iter()
        .flat_map(|p| p.attended.iter().map(|&j| j as i64).chain([-1]))
        .collect()
}

pub fn ccr_case<R: Rng>(rng: &mut R) -> GradCase {
    let (nq, nk, d) = (rng.random_range(1..=4), rng.random_range(3..=6), 4);
    let att = AttentionConfig {
        temperature_inv: rng.random_range(1.0..10.0),
        ..AttentionConfig::default()
    };
    let cfg = LossConfig {
        gamma2: rng.random_range(0.2..1.0),
        agg: if rng.random_bool(0.5) { Agg::Mean } else { Agg::LogSumExp },
        ..LossConfig::default()
    };
    GradCase {
        name: "ccr",
        params: vec![random_tensor(rng, nq, d), random_tensor(rng, nk, d)],
        plain: Box::new(move |p: &[Tensor]| {
            let q = fragments(&p[0], FragmentKind::Text);
            let k = fragments(&p[1], FragmentKind::Image);
            let (map, _) = attend_with(&q, &k, &att).unwrap();
            let loss = ccr_loss(&q, &map, &k, &cfg).unwrap();
            let mut sig = partition_signature(&map, cfg.h_threshold);
            sig.push(i64::from(loss > 0.0));
            (loss, sig)
        }),
        recorded: Box::new(move |g: &mut Graph, v: &[Var]| {
            let a = attend_var(g, v[0], v[1], &att).unwrap();
            ccr_loss_var(g, v[0], &a, v[1], att.temperature_inv, &cfg).unwrap()
        }),
    }
}

pub fn ccs_case<R: Rng>(rng: &mut R) -> GradCase {
    let (nq, nk, d) = (rng.random_range(1..=4), rng.random_range(2..=6), 4);
    let att = AttentionConfig {
        temperature_inv: rng.random_range(1.0..10.0),
        ..AttentionConfig::default()
    };
    let gamma3 = rng.random_range(0.2..1.0);
    let index = rng.random_range(0..nq);
    GradCase {
        name: "ccs",
        params: vec![random_tensor(rng, nq, d), random_tensor(rng, nk, d), random_tensor(rng, 1, d)],
        plain: Box::new(move |p: &[Tensor]| {
            let q = fragments(&p[0], FragmentKind::Text);
            let k = fragments(&p[1], FragmentKind::Image);
            let (_, attended) = attend_with(&q, &k, &att).unwrap();
            let swap = SwapSample {
                index,
                token: 0,
                embedding: p[2].data().to_vec(),
            };
            let loss = ccs_loss(&q, &attended, &swap, gamma3).unwrap();
            (loss, vec![i64::from(loss > 0.0)])
        }),
        recorded: Box::new(move |g: &mut Graph, v: &[Var]| {
            let a = attend_var(g, v[0], v[1], &att).unwrap();
            ccs_loss_var(g, v[0], a.attended, index, v[2], gamma3).unwrap()
        }),
    }
}

/// Small world for gradient checks on the full training objective.
pub fn tiny_world(seed: u64) -> Vec<PairSample> {
    generate(&WorldConfig {
        num_pairs: 12,
        train_fraction: 1.0,
        val_fraction: 0.0,
        regions_per_image: 4,
        objects_per_image: [1, 2],
        vocab_size: 6,
        embed_dim: 4,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
    .train
}

/// The complete training objective `rank + λ_ccr·ccr + λ_ccs·ccs` of one
/// batch as a function of the model parameters, evaluated through the
/// plain (unrecorded) library functions.
pub fn plain_total(
    model: &Model,
    batch: &[&PairSample],
    groups: &[usize],
    swaps: &[Option<(usize, usize)>],
    cfg: &TrainConfig,
) -> (f64, Vec<i64>) {
    let images: Vec<FragmentSet> = batch.iter().map(|p| model.encode_image(p).unwrap()).collect();
    let texts: Vec<FragmentSet> = batch.iter().map(|p| model.encode_text(&p.tokens).unwrap()).collect();
    let s = score_matrix(&images, &texts, &cfg.attention).unwrap();
    let rank = ranking_loss_grouped(&s, cfg.loss.gamma1, groups).unwrap();
    let mut sig = rank_signature(&s, cfg.loss.gamma1, groups);
    let (mut ccr, mut ccs) = (Vec::new(), Vec::new());
    for i in 0..batch.len() {
        let (map, attended) = attend_with(&texts[i], &images[i], &cfg.attention).unwrap();
        let c = ccr_loss(&texts[i], &map, &images[i], &cfg.loss).unwrap();
        sig.extend(partition_signature(&map, cfg.loss.h_threshold));
        sig.push(i64::from(c > 0.0));
        ccr.push(c);
        let v = match swaps[i] {
            Some((index, token)) => {
                let row = model.token_embeddings.row(token).to_vec();
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let swap = SwapSample {
                    index,
                    token,
                    embedding: row.iter().map(|x| x / n).collect(),
                };
                ccs_loss(&texts[i], &attended, &swap, cfg.loss.gamma3).unwrap()
            }
            None => 0.0,
        };
        sig.push(i64::from(v > 0.0));
        ccs.push(v);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let total = (rank + cfg.loss.lambda_ccr * mean(&ccr)) + cfg.loss.lambda_ccs * mean(&ccs);
    (total, sig)
}

pub fn total_case<R: Rng>(rng: &mut R, world: &[PairSample]) -> GradCase {
    let b = rng.random_range(2..=3);
    let mut idx: Vec<usize> = (0..world.len()).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(rng);
    let batch: Vec<PairSample> = idx[..b].iter().map(|&i| world[i].clone()).collect();
    let groups: Vec<usize> = (0..b).collect();
    let vocab = attnsup::losses::Vocabulary::distinct(6);
    let swaps: Vec<Option<(usize, usize)>> = batch
        .iter()
        .map(|p| attnsup::losses::choose_swap(&p.tokens, &vocab, rng))
        .collect();
    let mut cfg = TrainConfig::default();
    cfg.attention = random_attention_config(rng);
    cfg.loss.gamma1 = rng.random_range(0.2..1.0);
    cfg.loss.gamma2 = rng.random_range(0.2..1.0);
    cfg.loss.gamma3 = rng.random_range(0.2..1.0);
    cfg.loss.lambda_ccr = rng.random_range(0.1..2.0);
    cfg.loss.lambda_ccs = rng.random_range(0.1..2.0);
    let params = vec![random_tensor(rng, 6, 4), random_tensor(rng, 4, 4)];
    let (batch2, groups2, swaps2, cfg2) = (batch.clone(), groups.clone(), swaps.clone(), cfg.clone());
    GradCase {
        name: "total",
        params,
        plain: Box::new(move |p: &[Tensor]| {
            let model = Model {
                token_embeddings: p[0].clone(),
                region_projection: p[1].clone(),
            };
            let refs: Vec<&PairSample> = batch.iter().collect();
            plain_total(&model, &refs, &groups, &swaps, &cfg)
        }),
        recorded: Box::new(move |g: &mut Graph, v: &[Var]| {
            let refs: Vec<&PairSample> = batch2.iter().collect();
            record_batch_loss(g, v[0], v[1], &refs, &groups2, Some(&swaps2), &cfg2)
                .unwrap()
                .total
        }),
    }
}

/// Set-based recomputation of the attention metrics of one word.
pub fn naive_word_sets(
    weights: &[f64],
    t_att: f64,
    boxes: &[[f64; 4]],
    linked: &[usize],
    t_iou: f64,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let attended: BTreeSet<usize> = (0..weights.len()).filter(|&j| weights[j] > t_att).collect();
    let relevant: BTreeSet<usize> = (0..boxes.len())
        .filter(|&r| linked.iter().any(|&l| naive_iou(boxes[r], boxes[l]) > t_iou))
        .collect();
    (attended, relevant)
}

pub fn naive_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax2, ay2, bx2, by2) = (a[0] + a[2], a[1] + a[3], b[0] + b[2], b[1] + b[3]);
    let w = (ax2.min(bx2) - a[0].max(b[0])).max(0.0);
    let h = (ay2.min(by2) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area_a = (ax2 - a[0]) * (ay2 - a[1]);
    let area_b = (bx2 - b[0]) * (by2 - b[1]);
    inter / (area_a + area_b - inter)
}

/// `(AP, AR, AF_paper, AF_standard)` of one word from its two sets.
pub fn naive_ratios(attended: &BTreeSet<usize>, relevant: &BTreeSet<usize>) -> [f64; 4] {
    let hit = attended.intersection(relevant).count() as f64;
    let ap = if attended.is_empty() { 0.0 } else { hit / attended.len() as f64 };
    let ar = hit / relevant.len() as f64;
    if ap + ar == 0.0 {
        [ap, ar, 0.0, 0.0]
    } else {
        [ap, ar, ap * ar / (ap + ar), 2.0 * ap * ar / (ap + ar)]
    }
}

/// Brute-force Recall@K: sort every row by descending score, earlier
/// column first on ties, and report the best rank of a match.
pub fn brute_recall(scores: &[Vec<f64>], truth: &[Vec<usize>], ks: &[usize]) -> Vec<f64> {
    let ranks: Vec<usize> = scores
        .iter()
        .zip(truth)
        .map(|(row, gt)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap().then(x.cmp(&y)));
            order.iter().position(|c| gt.contains(c)).unwrap()
        })
        .collect();
    ks.iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// A random attention map with boxes and phrase annotation.
pub struct RandomInstance {
    pub id: String,
    pub map: attnsup::attention::AttentionMap,
    pub boxes: Vec<attnsup::metrics::BBox>,
    pub annotation: attnsup::metrics::AlignmentAnnotation,
}

pub fn random_instance<R: Rng>(rng: &mut R, id: usize) -> RandomInstance {
    use attnsup::attention::QueryModality;
    use attnsup::metrics::{AlignmentAnnotation, BBox, Phrase};
    let k = rng.random_range(1..=8);
    let words = rng.random_range(1..=5);
    // Boxes on a coarse lattice so that overlaps and exact IoU ties occur.
    let boxes: Vec<BBox> = (0..k)
        .map(|_| {
            BBox::new(
                f64::from(rng.random_range(0..6u8)) * 10.0,
                f64::from(rng.random_range(0..6u8)) * 10.0,
                f64::from(rng.random_range(1..5u8)) * 10.0,
                f64::from(rng.random_range(1..5u8)) * 10.0,
            )
        })
        .collect();
    let temperature_inv = rng.random_range(0.5..12.0);
    let rows: Vec<Vec<f64>> = (0..words)
        .map(|_| {
            if rng.random_bool(0.1) {
                vec![0.3; k]
            } else {
                (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()
            }
        })
        .collect();
    let scores = Tensor::from_rows(&rows).unwrap();
    let weights = scores.softmax_rows(temperature_inv).unwrap();
    let mut phrases = Vec::new();
    let mut w = 0;
    while w < words {
        let len = rng.random_range(1..=(words - w).min(3));
        if rng.random_bool(0.8) {
            let mut regions: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.35)).collect();
            if regions.is_empty() && rng.random_bool(0.7) {
                regions.push(rng.random_range(0..k));
            }
            phrases.push(Phrase {
                span: [w, w + len],
                regions,
            });
        }
        w += len;
    }
    RandomInstance {
        id: format!("inst-{id}"),
        map: attnsup::attention::AttentionMap {
            weights,
            scores,
            query: QueryModality::Text,
            temperature_inv,
        },
        boxes,
        annotation: AlignmentAnnotation { phrases },
    }
}

/// Naive phrase metrics of one instance, keyed as the library keys them.
pub fn naive_phrase_metrics(inst: &RandomInstance, t_att: f64, t_iou: f64) -> Vec<(String, [f64; 4])> {
    let boxes: Vec<[f64; 4]> = inst.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect();
    let mut out = Vec::new();
    for (p, phrase) in inst.annotation.phrases.iter().enumerate() {
        let mut best: Option<[f64; 4]> = None;
        for word in phrase.span[0]..phrase.span[1] {
            let (a, r) = naive_word_sets(inst.map.weights.row(word), t_att, &boxes, &phrase.regions, t_iou);
            if r.is_empty() {
                continue;
            }
            let m = naive_ratios(&a, &r);
            best = Some(match best {
                None => m,
                Some(b) => [b[0].max(m[0]), b[1].max(m[1]), b[2].max(m[2]), b[3].max(m[3])],
            });
        }
        if let Some(b) = best {
            out.push((format!("{}:{}", inst.id, p), b));
        }
    }
    out
}

/// Compares the library corpus report with the naive recomputation.
/// Returns a description of the first disagreement.
pub fn compare_attention_report(
    instances: &[RandomInstance],
    t_att: attnsup::metrics::AttThreshold,
    t_iou: f64,
) -> Result<usize, String> {
    use attnsup::metrics::{attended_set, corpus_attention_report, relevant_set, AttentionInstance, MetricThresholds};
    let thresholds = MetricThresholds { t_iou, t_att };
    let boxes4 = |inst: &RandomInstance| -> Vec<[f64; 4]> { inst.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect() };
    // Set level.
    for inst in instances {
        let t = t_att.value(inst.map.num_keys());
        for phrase in &inst.annotation.phrases {
            for word in phrase.span[0]..phrase.span[1] {
                let (a, r) = naive_word_sets(inst.map.weights.row(word), t, &boxes4(inst), &phrase.regions, t_iou);
                let lib_a: BTreeSet<usize> = attended_set(&inst.map, word, t).into_iter().collect();
                let lib_r: BTreeSet<usize> = relevant_set(&inst.boxes, &inst.annotation, word, t_iou)
                    .unwrap()
                    .into_iter()
                    .collect();
                if a != lib_a || r != lib_r {
                    return Err(format!("{} word {word}: sets differ", inst.id));
                }
            }
        }
    }
    // Ratio level.
    let views: Vec<AttentionInstance<'_>> = instances
        .iter()
        .map(|i| AttentionInstance {
            pair_id: &i.id,
            map: &i.map,
            regions: &i.boxes,
            annotation: &i.annotation,
        })
        .collect();
    let naive: Vec<(String, [f64; 4])> = instances
        .iter()
        .flat_map(|i| naive_phrase_metrics(i, t_att.value(i.map.num_keys()), t_iou))
        .collect();
    let report = match corpus_attention_report(&views, &thresholds) {
        Ok(r) => r,
        Err(attnsup::metrics::MetricError::NoAnnotatedPhrases) if naive.is_empty() => return Ok(0),
        Err(e) => return Err(e.to_string()),
    };
    if report.phrases.len() != naive.len() {
        return Err(format!("{} phrases vs {} naive", report.phrases.len(), naive.len()));
    }
    for (lib, (id, m)) in report.phrases.iter().zip(&naive) {
        let got = [lib.ap, lib.ar, lib.af_paper, lib.af_standard];
        if &lib.phrase_id != id || got.iter().zip(m).any(|(x, y)| (x - y).abs() > 1e-12) {
            return Err(format!("{id}: {got:?} vs {m:?}"));
        }
    }
    let n = naive.len() as f64;
    let mean = |c: usize| naive.iter().map(|(_, m)| m[c]).sum::<f64>() / n;
    let corpus = [report.precision, report.recall, report.f1_paper, report.f1_standard];
    for (c, v) in corpus.iter().enumerate() {
        if (v - mean(c)).abs() > 1e-12 {
            return Err(format!("corpus column {c}: {v} vs {}", mean(c)));
        }
    }
    Ok(naive.len())
}

/// Random score matrix with deliberate ties and a random many-to-one
/// ground truth (every sentence belongs to exactly one image).
pub fn random_retrieval<R: Rng>(rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let n = rng.random_range(1..=12);
    let per = rng.random_range(1..=3);
    let m = n * per;
    let quantized = rng.random_bool(0.5);
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if quantized { (v * 4.0).round() / 4.0 } else { v }
                })
                .collect()
        })
        .collect();
    let mut owner: Vec<usize> = (0..m).map(|t| t % n).collect();
    use rand::seq::SliceRandom;
    owner.shuffle(rng);
    let truth = (0..n).map(|i| (0..m).filter(|&t| owner[t] == i).collect()).collect();
    (scores, truth)
}
