//! Evaluation reports: per-query CSV, aggregate JSON and SVG curve plots.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_rotation, viewpoint_to_rotation};
use crate::matcher::{MatchResult, QueryRecord};
use crate::pose::{lift_to_6d, Pose6D};
use crate::store::TemplateDb;

use super::{e_vsd, query_outcome, render_depth, vsd_score, DepthMap, GroundTruth, Intrinsics, QueryOutcome, TriMesh, VsdParams, ACC_THRESHOLD_DEG, VSD_THETA};

/// One evaluated query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query: usize,
    pub gt_class: String,
    pub matched_class: String,
    pub matched_template: usize,
    pub class_ok: bool,
    pub angle_error_deg: f64,
    /// Missing when the query lacks a ground-truth translation or mesh.
    pub e_vsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub queries: usize,
    pub acc15: f64,
    pub vsd: Option<f64>,
    pub vsd_queries: usize,
    pub angle_histogram: Vec<HistogramBin>,
    /// Acc15 restricted to each ground-truth class.
    pub per_class_acc15: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Aggregates,
}

const HIST_BIN_DEG: f64 = 5.0;

fn outcome(r: &EvalRow) -> QueryOutcome {
    QueryOutcome {
        class_ok: r.class_ok,
        angle_deg: r.angle_error_deg,
    }
}

impl EvalReport {
    /// Builds aggregates from per-query rows.
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("report needs at least one query"));
        }
        let outcomes: Vec<QueryOutcome> = rows.iter().map(outcome).collect();
        let acc15 = super::fraction(&outcomes, ACC_THRESHOLD_DEG);
        let errors: Vec<f64> = rows.iter().filter_map(|r| r.e_vsd).collect();
        let vsd = if errors.is_empty() {
            None
        } else {
            Some(vsd_score(&errors, VSD_THETA)?)
        };
        let bins = (180.0 / HIST_BIN_DEG) as usize;
        let mut angle_histogram: Vec<HistogramBin> = (0..bins)
            .map(|i| HistogramBin {
                lo_deg: i as f64 * HIST_BIN_DEG,
                hi_deg: (i + 1) as f64 * HIST_BIN_DEG,
                count: 0,
            })
            .collect();
        for r in &rows {
            let b = ((r.angle_error_deg / HIST_BIN_DEG) as usize).min(bins - 1);
            angle_histogram[b].count += 1;
        }
        let mut per_class: BTreeMap<String, Vec<QueryOutcome>> = BTreeMap::new();
        for r in &rows {
            per_class.entry(r.gt_class.clone()).or_default().push(outcome(r));
        }
        let per_class_acc15 = per_class
            .into_iter()
            .map(|(k, o)| (k, super::fraction(&o, ACC_THRESHOLD_DEG)))
            .collect();
        Ok(Self {
            aggregates: Aggregates {
                queries: rows.len(),
                acc15,
                vsd,
                vsd_queries: errors.len(),
                angle_histogram,
                per_class_acc15,
            },
            rows,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<EvalRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::parse(i + 2, e.to_string())))
            .collect()
    }

    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(&self.aggregates).expect("aggregates serialize")
    }

    /// `(threshold, fraction)` curve over the given rows.
    pub fn curve(rows: &[EvalRow], thresholds: &[f64]) -> Vec<(f64, f64)> {
        let o: Vec<QueryOutcome> = rows.iter().map(outcome).collect();
        thresholds.iter().map(|&t| (t, super::fraction(&o, t))).collect()
    }

    /// One curve per ground-truth class plus an `all` curve.
    pub fn curves_by_class(&self, thresholds: &[f64]) -> Vec<(String, Vec<(f64, f64)>)> {
        let mut by: BTreeMap<&str, Vec<EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            by.entry(&r.gt_class).or_default().push(r.clone());
        }
        let mut out: Vec<_> = by
            .into_iter()
            .map(|(k, rows)| (k.to_string(), Self::curve(&rows, thresholds)))
            .collect();
        out.push(("all".to_string(), Self::curve(&self.rows, thresholds)));
        out
    }
}

/// Thresholds 0°, 1°, ..., 180°.
pub fn default_thresholds() -> Vec<f64> {
    (0..=180).map(|t| t as f64).collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Standalone SVG line plot of `(threshold°, fraction)` series.
pub fn curve_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let x_max = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    let px = |x: f64| m + (w - 2.0 * m) * x / x_max;
    let py = |y: f64| h - m - (h - 2.0 * m) * y;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{:.0}%</text>"#, m - 6.0, py(y) + 4.0, y * 100.0);
    }
    for i in 0..=6 {
        let x = x_max * i as f64 / 6.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{:.0}°</text>"#, px(x), h - m + 16.0, x);
    }
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#, points.join(" "), xml_escape(label));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#, w - m - 90.0, m + 14.0 * (k as f64 + 1.0), xml_escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Inputs for pose-level evaluation.
pub struct PoseEvalContext<'a> {
    pub db: &'a TemplateDb,
    /// Mesh per class id; queries of classes without a mesh skip VSD.
    pub meshes: &'a HashMap<String, TriMesh>,
    /// Test depth per query; rendered from the ground-truth pose when absent.
    pub test_depths: Option<&'a [DepthMap]>,
    pub width: usize,
    pub height: usize,
    pub vsd: VsdParams,
}

/// Evaluates matched queries: class/angle for every query, and VSD where
/// ground-truth translation, observation geometry and a mesh are available.
pub fn evaluate(queries: &[QueryRecord], results: &[MatchResult], ctx: &PoseEvalContext<'_>) -> Result<EvalReport> {
    if queries.len() != results.len() {
        return Err(Error::invalid("queries and results differ in length"));
    }
    let mut rows = Vec::with_capacity(queries.len());
    for (i, (q, r)) in queries.iter().zip(results).enumerate() {
        let gt = GroundTruth {
            class_id: q.class_id.clone(),
            viewpoint: q.gt_viewpoint,
        };
        let o = query_outcome(r, &gt).map_err(|e| Error::invalid(format!("query {i}: {e}")))?;
        let best = r.best();
        let mut e = None;
        if let (Some(t), Some(obs), Some(view), Some(mesh)) = (
            q.gt_translation,
            q.observation.as_ref(),
            q.gt_viewpoint,
            q.class_id.as_ref().and_then(|c| ctx.meshes.get(c)),
        ) {
            if best.is_some() {
                let est = lift_to_6d(r, q, ctx.db)?;
                let gt_pose = Pose6D::new(camera_rotation(&viewpoint_to_rotation(&view)), t)?;
                let intr = Intrinsics::new(obs.f_obs, obs.c_obs);
                let rendered;
                let test = match ctx.test_depths {
                    Some(d) => d.get(i).ok_or_else(|| Error::invalid(format!("no test depth for query {i}")))?,
                    None => {
                        rendered = render_depth(mesh, &gt_pose, &intr, ctx.width, ctx.height)?;
                        &rendered
                    }
                };
                e = Some(e_vsd(&est, &gt_pose, mesh, test, &intr, &ctx.vsd)?.error);
            } else {
                e = Some(1.0);
            }
        }
        rows.push(EvalRow {
            query: i,
            gt_class: gt.class_id.unwrap_or_default(),
            matched_class: best.map(|h| h.class_id.clone()).unwrap_or_default(),
            matched_template: best.map(|h| h.template).unwrap_or(usize::MAX),
            class_ok: o.class_ok,
            angle_error_deg: o.angle_deg,
            e_vsd: e,
        });
    }
    EvalReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, class: &str, ok: bool, angle: f64, e: Option<f64>) -> EvalRow {
        EvalRow {
            query: i,
            gt_class: class.into(),
            matched_class: if ok { class.into() } else { "other".into() },
            matched_template: i,
            class_ok: ok,
            angle_error_deg: angle,
            e_vsd: e,
        }
    }

    #[test]
    fn aggregates_recompute_from_csv() {
        let rows = vec![
            row(0, "ape", true, 3.0, Some(0.1)),
            row(1, "ape", true, 20.0, Some(0.5)),
            row(2, "cat", false, 1.0, None),
            row(3, "cat", true, 14.0, Some(0.29)),
        ];
        let report = EvalReport::from_rows(rows).unwrap();
        assert_eq!(report.aggregates.acc15, 0.5);
        assert_eq!(report.aggregates.vsd, Some(2.0 / 3.0));
        assert_eq!(report.aggregates.per_class_acc15["ape"], 0.5);
        let csv = report.to_csv().unwrap();
        let again = EvalReport::from_rows(EvalReport::rows_from_csv(&csv).unwrap()).unwrap();
        assert_eq!(again, report);
        let hist: usize = report.aggregates.angle_histogram.iter().map(|b| b.count).sum();
        assert_eq!(hist, 4);
    }

    #[test]
    fn svg_has_polyline_per_series() {
        let rows = vec![row(0, "ape", true, 3.0, None), row(1, "cat", true, 30.0, None)];
        let report = EvalReport::from_rows(rows).unwrap();
        let curves = report.curves_by_class(&default_thresholds());
        assert_eq!(curves.len(), 3);
        let svg = curve_svg("Acc vs threshold", &curves);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.starts_with("<svg"));
    }
}
