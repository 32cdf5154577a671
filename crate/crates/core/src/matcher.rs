//! Exhaustive template retrieval.
//!
//! Scores are computed with the same kernels as
//! [`crate::similarity::token_cosine`] + [`crate::similarity::thresholded_masked_sum`],
//! so a match is bit-identical to composing those functions per template.
//! Templates are scored in parallel shards; each score is independent and the
//! ranking is done afterwards, which makes results independent of thread
//! count.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec3, Viewpoint};
use crate::similarity::{cosine_from_parts, dot, thresholded_masked_mean, thresholded_masked_sum, token_cosine, token_norm};
use crate::store::{Focal, ManifestRecord, PixelBox, TemplateDb, TemplateRecord, TemplateView, TokenGrid};

/// Default occlusion threshold on per-token similarity.
pub const DEFAULT_DELTA: f64 = 0.2;

const SHARD: usize = 256;

/// Observed crop geometry used for pose lifting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub box_obs: PixelBox,
    /// Principal point in pixels.
    pub c_obs: (f64, f64),
    pub f_obs: Focal,
}

/// A query crop with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub grid: TokenGrid,
    pub class_id: Option<String>,
    pub gt_viewpoint: Option<Viewpoint>,
    pub gt_translation: Option<Vec3>,
    pub observation: Option<Observation>,
}

impl QueryRecord {
    pub fn new(grid: TokenGrid) -> Self {
        Self {
            grid,
            class_id: None,
            gt_viewpoint: None,
            gt_translation: None,
            observation: None,
        }
    }

    /// Attaches the ground truth and observation of manifest record `index`.
    /// The observation needs all of `box`, `c` and `f`, or none of them.
    pub fn from_manifest(grid: TokenGrid, r: &ManifestRecord, index: usize) -> Result<Self> {
        let ctx = |e: Error| Error::invalid(format!("record {index}: {e}"));
        let observation = match (r.pixel_box().map_err(ctx)?, r.c, r.f) {
            (None, None, None) => None,
            (Some(box_obs), Some([cx, cy]), Some(f_obs)) => {
                f_obs.validate().map_err(ctx)?;
                Some(Observation {
                    box_obs,
                    c_obs: (cx, cy),
                    f_obs,
                })
            }
            (b, c, _) => {
                let missing = if b.is_none() {
                    "box"
                } else if c.is_none() {
                    "c"
                } else {
                    "f"
                };
                return Err(Error::invalid(format!("record {index}: missing field `{missing}`")));
            }
        };
        Ok(Self {
            grid,
            class_id: r.class_id.clone(),
            gt_viewpoint: r.viewpoint().map_err(ctx)?,
            gt_translation: r.translation.map(|[x, y, z]| Vec3::new(x, y, z)),
            observation,
        })
    }

    pub fn to_manifest(&self) -> ManifestRecord {
        let v = self.gt_viewpoint;
        ManifestRecord {
            class_id: self.class_id.clone(),
            azimuth: v.map(|v| v.azimuth()),
            elevation: v.map(|v| v.elevation()),
            in_plane: v.map(|v| v.in_plane()),
            bbox: self.observation.map(|o| o.box_obs.to_array()),
            c: self.observation.map(|o| [o.c_obs.0, o.c_obs.1]),
            f: self.observation.map(|o| o.f_obs),
            translation: self.gt_translation.map(|t| [t.x, t.y, t.z]),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchParams {
    pub top_k: usize,
    pub delta: f64,
    pub class_filter: Option<String>,
    /// Divide each score by the template's mask cardinality (diagnostic).
    pub normalize_by_mask: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            top_k: 1,
            delta: DEFAULT_DELTA,
            class_filter: None,
            normalize_by_mask: false,
        }
    }
}

impl MatchParams {
    pub fn top_k(k: usize) -> Self {
        Self {
            top_k: k,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub template: usize,
    pub class_id: String,
    pub viewpoint: Viewpoint,
    pub score: f64,
}

/// Ranked hits, best first. Holds `min(k, candidates)` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub hits: Vec<Hit>,
    pub delta: f64,
}

impl MatchResult {
    pub fn best(&self) -> Option<&Hit> {
        self.hits.first()
    }
}

/// Score of one query/template pair.
pub fn score_one(q: &QueryRecord, t: &TemplateRecord, delta: f64) -> Result<f64> {
    let map = token_cosine(&q.grid, &t.grid)?;
    thresholded_masked_sum(&map, &t.mask, delta)
}

/// Like [`score_one`] but divided by the template's mask cardinality.
pub fn score_one_normalized(q: &QueryRecord, t: &TemplateRecord, delta: f64) -> Result<f64> {
    let map = token_cosine(&q.grid, &t.grid)?;
    thresholded_masked_mean(&map, &t.mask, delta)
}

/// Query tokens with their norms computed once.
struct PreparedQuery<'a> {
    data: &'a [f32],
    norms: Vec<f64>,
    dim: usize,
}

impl<'a> PreparedQuery<'a> {
    fn new(grid: &'a TokenGrid) -> Self {
        Self {
            data: grid.data(),
            norms: grid.tokens().map(token_norm).collect(),
            dim: grid.dim(),
        }
    }

    fn score(&self, t: &TemplateView<'_>, delta: f64, normalize: bool) -> f64 {
        let d = self.dim;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (i, &m) in t.mask.iter().enumerate() {
            if !m {
                continue;
            }
            count += 1;
            let qt = &self.data[i * d..(i + 1) * d];
            let tt = &t.descriptors[i * d..(i + 1) * d];
            if let Some(c) = cosine_from_parts(dot(qt, tt), self.norms[i], t.token_norms[i]) {
                if c > delta {
                    sum += c;
                }
            }
        }
        if normalize {
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        } else {
            sum
        }
    }
}

fn check_query(q: &QueryRecord, db: &TemplateDb) -> Result<()> {
    if q.grid.shape() != db.grid_shape() {
        return Err(Error::invalid(format!(
            "query grid {:?} does not match database grid {:?}",
            q.grid.shape(),
            db.grid_shape()
        )));
    }
    Ok(())
}

fn check_params(p: &MatchParams) -> Result<()> {
    if p.top_k == 0 {
        return Err(Error::invalid("top_k must be >= 1"));
    }
    if p.delta.is_nan() {
        return Err(Error::invalid("delta is NaN"));
    }
    Ok(())
}

/// Scores of the query against each candidate, in candidate order.
pub fn score_all(q: &QueryRecord, db: &TemplateDb, candidates: &[usize], params: &MatchParams) -> Result<Vec<f64>> {
    check_query(q, db)?;
    let prep = PreparedQuery::new(&q.grid);
    let mut scores = vec![0.0f64; candidates.len()];
    scores
        .par_chunks_mut(SHARD)
        .zip(candidates.par_chunks(SHARD))
        .for_each(|(out, idx)| {
            for (s, &i) in out.iter_mut().zip(idx) {
                *s = prep.score(&db.template(i), params.delta, params.normalize_by_mask);
            }
        });
    Ok(scores)
}

fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Top-k (index, score) pairs, score descending then index ascending.
fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

fn candidates(db: &TemplateDb, params: &MatchParams) -> Result<Vec<usize>> {
    if db.is_empty() {
        return Err(Error::invalid("template database is empty"));
    }
    match &params.class_filter {
        None => Ok((0..db.len()).collect()),
        Some(c) => match db.class_indices(c) {
            Some(idx) if !idx.is_empty() => Ok(idx.to_vec()),
            _ => Err(Error::invalid(format!("no templates of class `{c}`"))),
        },
    }
}

/// Top-k templates for one query. Ties are broken by lowest template index.
pub fn match_query(q: &QueryRecord, db: &TemplateDb, params: &MatchParams) -> Result<MatchResult> {
    check_params(params)?;
    let cand = candidates(db, params)?;
    let scores = score_all(q, db, &cand, params)?;
    let best = top_k(cand.into_iter().zip(scores).collect(), params.top_k);
    Ok(MatchResult {
        hits: best
            .into_iter()
            .map(|(i, score)| {
                let m = db.meta(i);
                Hit {
                    template: i,
                    class_id: m.class_id.clone(),
                    viewpoint: m.viewpoint,
                    score,
                }
            })
            .collect(),
        delta: params.delta,
    })
}

/// [`match_query`] for every query, in order.
pub fn batch_match(queries: &[QueryRecord], db: &TemplateDb, params: &MatchParams) -> Result<Vec<MatchResult>> {
    check_params(params)?;
    queries
        .par_iter()
        .map(|q| match_query(q, db, params))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ResultRow {
    query: usize,
    rank: usize,
    template: usize,
    class_id: String,
    azimuth: f64,
    elevation: f64,
    in_plane: f64,
    score: f64,
}

/// One CSV row per hit: `query,rank,template,class_id,azimuth,elevation,in_plane,score`
/// (rank starts at 1).
pub fn encode_results_csv(results: &[MatchResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (q, r) in results.iter().enumerate() {
        for (k, h) in r.hits.iter().enumerate() {
            w.serialize(ResultRow {
                query: q,
                rank: k + 1,
                template: h.template,
                class_id: h.class_id.clone(),
                azimuth: h.viewpoint.azimuth(),
                elevation: h.viewpoint.elevation(),
                in_plane: h.viewpoint.in_plane(),
                score: h.score,
            })
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Inverse of [`encode_results_csv`] for `queries` queries; rows must be
/// grouped by query with consecutive ranks.
pub fn parse_results_csv(text: &str, queries: usize, delta: f64) -> Result<Vec<MatchResult>> {
    let mut out: Vec<MatchResult> = (0..queries)
        .map(|_| MatchResult {
            hits: Vec::new(),
            delta,
        })
        .collect();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    for (i, row) in r.deserialize::<ResultRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(line, e.to_string()))?;
        let slot = out
            .get_mut(row.query)
            .ok_or_else(|| Error::parse(line, format!("query {} out of range", row.query)))?;
        if row.rank != slot.hits.len() + 1 {
            return Err(Error::parse(line, format!("rank {} out of sequence", row.rank)));
        }
        slot.hits.push(Hit {
            template: row.template,
            class_id: row.class_id,
            viewpoint: Viewpoint::new(row.azimuth, row.elevation, row.in_plane).map_err(|e| Error::parse(line, e.to_string()))?,
            score: row.score,
        });
    }
    Ok(out)
}

/// Runs `f` inside a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}
