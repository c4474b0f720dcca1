use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{attend_with, score_matrix, AttentionConfig, AttentionMap, FragmentSet};
use crate::metrics::{
    corpus_attention_report, diagonal_ground_truth, recall_at_k, AttentionInstance, AttentionReport,
    MetricThresholds, RetrievalReport,
};
use crate::synthworld::PairSample;

use super::{Model, TrainError};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalReport,
    pub attention: AttentionReport,
}

struct Encoded {
    images: Vec<FragmentSet>,
    texts: Vec<FragmentSet>,
}

fn encode(model: &Model, pairs: &[PairSample]) -> Result<Encoded, TrainError> {
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for p in pairs {
        images.push(model.encode_image(p)?);
        texts.push(model.encode_text(&p.tokens)?);
    }
    Ok(Encoded { images, texts })
}

/// Word-over-region attention maps, one per pair.
pub fn attention_maps(
    model: &Model,
    pairs: &[PairSample],
    cfg: &AttentionConfig,
) -> Result<Vec<AttentionMap>, TrainError> {
    let enc = encode(model, pairs)?;
    enc.texts
        .iter()
        .zip(&enc.images)
        .map(|(t, i)| Ok(attend_with(t, i, cfg)?.0))
        .collect()
}

/// Recall@{1,5,10} over the `N×N` score matrix of `pairs` (pair `i` is the
/// only match of image `i`) and attention correctness of the word-over-
/// region maps.
pub fn evaluate(
    model: &Model,
    pairs: &[PairSample],
    cfg: &AttentionConfig,
    thresholds: &MetricThresholds,
) -> Result<EvalReport, TrainError> {
    let enc = encode(model, pairs)?;
    let scores = score_matrix(&enc.images, &enc.texts, cfg)?;
    let retrieval = recall_at_k(&scores, &diagonal_ground_truth(pairs.len()), &RECALL_KS)?;

    let mut maps = Vec::with_capacity(pairs.len());
    for (t, i) in enc.texts.iter().zip(&enc.images) {
        maps.push(attend_with(t, i, cfg)?.0);
    }
    let boxes: Vec<_> = pairs.iter().map(PairSample::boxes).collect();
    let instances: Vec<AttentionInstance<'_>> = pairs
        .iter()
        .zip(&maps)
        .zip(&boxes)
        .map(|((p, map), regions)| AttentionInstance {
            pair_id: &p.id,
            map,
            regions,
            annotation: &p.annotation,
        })
        .collect();
    let attention = corpus_attention_report(&instances, thresholds)?;
    Ok(EvalReport { retrieval, attention })
}

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes, per pair, `<id>.csv` with one row per caption word (its token
/// and attention weight over every region) and `<id>.boxes.csv` with one
/// row per region box. Returns the weight file paths.
pub fn dump_attention(
    model: &Model,
    pairs: &[PairSample],
    cfg: &AttentionConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>, TrainError> {
    fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let maps = attention_maps(model, pairs, cfg)?;
    let mut written = Vec::with_capacity(pairs.len());
    for (pair, map) in pairs.iter().zip(&maps) {
        let path = dir.join(format!("{}.csv", pair.id));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec!["word".to_string(), "token".to_string()];
        header.extend((0..map.num_keys()).map(|k| format!("region_{k}")));
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for (j, token) in pair.tokens.iter().enumerate() {
            let mut row = vec![j.to_string(), token.to_string()];
            row.extend(map.weights.row(j).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|source| TrainError::Io {
            path: path.clone(),
            source,
        })?;

        let box_path = dir.join(format!("{}.boxes.csv", pair.id));
        let mut w = csv::Writer::from_path(&box_path).map_err(|e| csv_err(&box_path, e))?;
        w.write_record(["region", "x", "y", "w", "h"]).map_err(|e| csv_err(&box_path, e))?;
        for (k, b) in pair.boxes().iter().enumerate() {
            w.write_record([k.to_string(), b.x.to_string(), b.y.to_string(), b.w.to_string(), b.h.to_string()])
                .map_err(|e| csv_err(&box_path, e))?;
        }
        w.flush().map_err(|source| TrainError::Io {
            path: box_path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
