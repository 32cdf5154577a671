//! Retrieval accuracy (Acc15, threshold curves) and the visible surface
//! discrepancy (VSD) pose error.

mod pgm;
mod ply;
mod render;
pub mod report;

pub use pgm::{decode_pgm16, encode_pgm16};
pub use ply::{parse_ply, write_ply};
pub use render::{render_depth, DepthMap, Intrinsics, TriMesh};

use crate::error::{Error, Result};
use crate::geometry::{angle_between, Viewpoint};
use crate::matcher::MatchResult;
use crate::pose::Pose6D;

pub const ACC_THRESHOLD_DEG: f64 = 15.0;
pub const VSD_TAU: f64 = 0.020;
pub const VSD_THETA: f64 = 0.3;

/// Ground truth for one query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub class_id: Option<String>,
    pub viewpoint: Option<Viewpoint>,
}

/// Outcome of one query: whether the rank-1 class is right and the angle
/// between ground-truth and retrieved viewing directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryOutcome {
    pub class_ok: bool,
    pub angle_deg: f64,
}

impl QueryOutcome {
    /// True positive under `threshold_deg` (strict).
    pub fn hit(&self, threshold_deg: f64) -> bool {
        self.class_ok && self.angle_deg < threshold_deg
    }
}

/// Evaluates one query. A result without hits counts as a miss.
pub fn query_outcome(result: &MatchResult, gt: &GroundTruth) -> Result<QueryOutcome> {
    let class = gt
        .class_id
        .as_deref()
        .ok_or_else(|| Error::invalid("ground truth is missing `class_id`"))?;
    let view = gt
        .viewpoint
        .ok_or_else(|| Error::invalid("ground truth is missing the viewpoint"))?;
    Ok(match result.best() {
        Some(hit) => QueryOutcome {
            class_ok: hit.class_id == class,
            angle_deg: angle_between(&view.direction(), &hit.viewpoint.direction())?,
        },
        None => QueryOutcome {
            class_ok: false,
            angle_deg: 180.0,
        },
    })
}

fn outcomes(cases: &[(MatchResult, GroundTruth)]) -> Result<Vec<QueryOutcome>> {
    if cases.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    cases.iter().map(|(r, gt)| query_outcome(r, gt)).collect()
}

/// Fraction of queries with the correct class and an angular error strictly
/// below `threshold_deg`.
pub fn acc15(cases: &[(MatchResult, GroundTruth)], threshold_deg: f64) -> Result<f64> {
    let o = outcomes(cases)?;
    Ok(fraction(&o, threshold_deg))
}

pub(crate) fn fraction(o: &[QueryOutcome], threshold_deg: f64) -> f64 {
    o.iter().filter(|q| q.hit(threshold_deg)).count() as f64 / o.len() as f64
}

/// Acc-style fraction at each threshold, as `(threshold, fraction)`.
pub fn error_curve(cases: &[(MatchResult, GroundTruth)], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    let o = outcomes(cases)?;
    Ok(thresholds.iter().map(|&t| (t, fraction(&o, t))).collect())
}

/// Parameters of the VSD error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VsdParams {
    /// Misalignment tolerance in meters.
    pub tau: f64,
    /// Tolerance for deciding a rendered pixel is not occluded in the test
    /// depth, in meters.
    pub occlusion_tol: f64,
}

impl Default for VsdParams {
    fn default() -> Self {
        Self {
            tau: VSD_TAU,
            occlusion_tol: VSD_TAU,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VsdOutcome {
    /// Error in `[0, 1]`.
    pub error: f64,
    /// Set when neither pose has a visible pixel (error is then 1).
    pub empty_union: bool,
    pub union_pixels: usize,
}

/// Visibility: rendered, measured in the test depth, and not behind it by
/// more than the occlusion tolerance.
fn visible(render: f64, test: f64, tol: f64) -> bool {
    render > 0.0 && test > 0.0 && render <= test + tol
}

/// VSD error from pre-rendered distance maps.
pub fn vsd_from_maps(est: &DepthMap, gt: &DepthMap, test: &DepthMap, params: &VsdParams) -> Result<VsdOutcome> {
    let shape = (test.width, test.height);
    if (est.width, est.height) != shape || (gt.width, gt.height) != shape {
        return Err(Error::invalid("distance maps must share the test depth resolution"));
    }
    let mut union = 0usize;
    let mut wrong = 0usize;
    for ((&e, &g), &t) in est.data.iter().zip(&gt.data).zip(&test.data) {
        let ve = visible(e, t, params.occlusion_tol);
        let vg = visible(g, t, params.occlusion_tol);
        if !(ve || vg) {
            continue;
        }
        union += 1;
        if !(ve && vg && (e - g).abs() < params.tau) {
            wrong += 1;
        }
    }
    Ok(if union == 0 {
        VsdOutcome {
            error: 1.0,
            empty_union: true,
            union_pixels: 0,
        }
    } else {
        VsdOutcome {
            error: wrong as f64 / union as f64,
            empty_union: false,
            union_pixels: union,
        }
    })
}

/// VSD error of estimate `est` against ground truth `gt`.
pub fn e_vsd(
    est: &Pose6D,
    gt: &Pose6D,
    mesh: &TriMesh,
    test_depth: &DepthMap,
    intr: &Intrinsics,
    params: &VsdParams,
) -> Result<VsdOutcome> {
    let (w, h) = (test_depth.width, test_depth.height);
    let d_est = render_depth(mesh, est, intr, w, h)?;
    let d_gt = render_depth(mesh, gt, intr, w, h)?;
    vsd_from_maps(&d_est, &d_gt, test_depth, params)
}

/// Fraction of errors strictly below `theta`.
pub fn vsd_score(errors: &[f64], theta: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("no VSD errors to score"));
    }
    Ok(errors.iter().filter(|e| **e < theta).count() as f64 / errors.len() as f64)
}
