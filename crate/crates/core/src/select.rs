//! Scoring synthetic candidates against real references and picking
//! subsets of them.

use std::io::{Read, Write};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{rgb_to_luma, Image};
use crate::rng::Rng;
use crate::ssim::{ssim, SsimParams};

/// How per-reference scores are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimScore {
    pub candidate_id: PathBuf,
    pub class_name: String,
    pub score: f64,
}

/// Aggregate SSIM between `candidate` and every reference, on luma. All
/// images must share one size.
pub fn score_against_references(
    candidate: &Image,
    refs: &[Image],
    aggregator: Aggregator,
    p: &SsimParams,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::EmptyReference);
    }
    let cand = rgb_to_luma(candidate);
    let mut scores = Vec::with_capacity(refs.len());
    for r in refs {
        scores.push(ssim(&cand, &rgb_to_luma(r), p)?);
    }
    Ok(aggregate(&scores, aggregator))
}

fn aggregate(scores: &[f64], aggregator: Aggregator) -> f64 {
    match aggregator {
        Aggregator::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregator::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Score every candidate in parallel; results keep the candidates' order.
pub fn score_pool(
    candidates: &[(PathBuf, Image)],
    refs: &[Image],
    class_name: &str,
    aggregator: Aggregator,
    p: &SsimParams,
) -> Result<Vec<SsimScore>> {
    if refs.is_empty() {
        return Err(Error::EmptyReference);
    }
    let luma_refs: Vec<Image> = refs.iter().map(rgb_to_luma).collect();
    candidates
        .par_iter()
        .map(|(id, img)| {
            let score = score_against_references(img, &luma_refs, aggregator, p)
                .map_err(|e| e.context(format!("scoring {}", id.display())))?;
            Ok(SsimScore {
                candidate_id: id.clone(),
                class_name: class_name.to_string(),
                score,
            })
        })
        .collect()
}

/// The `min(k, n)` highest scores in descending order; ties keep their
/// input order.
pub fn rank_and_select(pool: &[SsimScore], k: usize) -> Vec<SsimScore> {
    let mut ranked = pool.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(k);
    ranked
}

/// `min(k, n)` items drawn uniformly without replacement.
pub fn random_select<T: Clone>(pool: &[T], k: usize, rng: &mut Rng) -> Vec<T> {
    rng.sample_indices(pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    candidate_path: String,
    class: String,
    score: f64,
}

/// CSV with header `candidate_path,class,score`.
pub fn write_scores_csv<W: Write>(out: W, scores: &[SsimScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in scores {
        w.serialize(ScoreRow {
            candidate_path: s.candidate_id.to_string_lossy().into_owned(),
            class: s.class_name.clone(),
            score: s.score,
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<SsimScore>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ScoreRow = row?;
        out.push(SsimScore {
            candidate_id: PathBuf::from(row.candidate_path),
            class_name: row.class,
            score: row.score,
        });
    }
    Ok(out)
}
