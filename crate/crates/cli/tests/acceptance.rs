//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting so the remaining workspace tests still run; set
//! `ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tokenmatch::contrastive::{
    batch_loss, batch_similarities, encode_head, info_nce_loss, loss_gradient, trace_csv, train_head, HeadMode,
    LabeledQuery, LabeledTemplate, LossVariant, OptimizerConfig, ProjectionHead, TrainingBatch, TrainingTuple,
    TupleDataset, DEFAULT_TAU,
};
use tokenmatch::geometry::{angle_between, sample_hemisphere, write_viewpoints, Rotation, Vec3, Viewpoint};
use tokenmatch::matcher::{batch_match, encode_results_csv, match_query, with_threads, Hit, MatchParams, MatchResult, QueryRecord};
use tokenmatch::metrics::report::{evaluate, EvalReport, PoseEvalContext};
use tokenmatch::metrics::{
    acc15, e_vsd, render_depth, vsd_score, write_ply, DepthMap, GroundTruth, Intrinsics, TriMesh, VsdParams,
};
use tokenmatch::pose::{estimate_depth, estimate_translation, lift_to_6d, Pose6D};
use tokenmatch::similarity::{cosine_from_parts, dot, token_norm};
use tokenmatch::store::{
    build_db, decode_tmpd, encode_manifest, encode_tmpd, parse_manifest, read_grids, write_grids, Focal, GridEntry,
    PixelBox, TemplateDb, TemplateDbBuilder, TemplateRecord, TokenGrid, TokenMask,
};
use tokenmatch::synthetic::{
    hemisphere_queries, hemisphere_templates, synthetic_meta, DescriptorModel, MaskShape, SyntheticSpec, SYNTH_CLASS,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
    let t0 = Instant::now();
    let v = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    };
    let took = t0.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = v.pass && in_time;
    let budget = match limit {
        Some(l) => format!("{:.1}s of {:.0}s", took.as_secs_f64(), l.as_secs_f64()),
        None => format!("{:.1}s", took.as_secs_f64()),
    };
    println!(
        "{} {id}. {name}: {}; runtime {budget}",
        if pass { "PASS" } else { "FAIL" },
        v.detail
    );
    pass
}

fn gaussian_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> TokenGrid {
    let data = (0..h * w * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    TokenGrid::new(h, w, d, data).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> TokenMask {
    TokenMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn random_view(rng: &mut ChaCha8Rng) -> Viewpoint {
    Viewpoint::new(
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(-1.5..1.5),
        0.0,
    )
    .unwrap()
}

fn cases(results: Vec<MatchResult>, queries: &[QueryRecord]) -> Vec<(MatchResult, GroundTruth)> {
    results
        .into_iter()
        .zip(queries)
        .map(|(r, q)| {
            (
                r,
                GroundTruth {
                    class_id: q.class_id.clone(),
                    viewpoint: q.gt_viewpoint,
                },
            )
        })
        .collect()
}

// ---------------------------------------------------------------- 1

/// Plain double loop over templates and tokens, then repeated selection of
/// the highest remaining score (first index wins ties).
fn naive_match(q: &TokenGrid, records: &[TemplateRecord], p: &MatchParams) -> Vec<(usize, f64)> {
    let mut scored = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if p.class_filter.as_ref().is_some_and(|c| *c != r.meta.class_id) {
            continue;
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for t in 0..q.len() {
            if !r.mask.bits()[t] {
                continue;
            }
            count += 1;
            let (a, b) = (q.token(t), r.grid.token(t));
            if let Some(c) = cosine_from_parts(dot(a, b), token_norm(a), token_norm(b)) {
                if c > p.delta {
                    sum += c;
                }
            }
        }
        if p.normalize_by_mask {
            sum = if count == 0 { 0.0 } else { sum / count as f64 };
        }
        scored.push((i, sum));
    }
    let mut taken = vec![false; scored.len()];
    let mut out = Vec::new();
    for _ in 0..p.top_k.min(scored.len()) {
        let mut best: Option<usize> = None;
        for j in 0..scored.len() {
            if !taken[j] && best.is_none_or(|b| scored[j].1 > scored[b].1) {
                best = Some(j);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(scored[b]);
    }
    out
}

fn criterion_1() -> Verdict {
    let (h, w, d) = (14, 14, 32);
    let classes = ["ape", "can", "cat"];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut queries_run = 0;
    let mut hits_compared = 0;
    let mut ties = 0;
    for inst in 0..50 {
        let n = rng.random_range(1..=1000usize);
        let mut records: Vec<TemplateRecord> = Vec::with_capacity(n);
        for i in 0..n {
            let mut grid = if i > 0 && rng.random_bool(0.05) {
                records[rng.random_range(0..i)].grid.clone()
            } else {
                gaussian_grid(&mut rng, h, w, d)
            };
            if rng.random_bool(0.02) {
                let mut data = grid.into_data();
                let t = rng.random_range(0..h * w);
                data[t * d..(t + 1) * d].fill(0.0);
                grid = TokenGrid::new(h, w, d, data).unwrap();
            }
            let p = rng.random_range(0.3..1.0);
            records.push(TemplateRecord {
                meta: synthetic_meta(classes[rng.random_range(0..classes.len())], random_view(&mut rng)),
                grid,
                mask: random_mask(&mut rng, h, w, p),
            });
        }
        let db = build_db(records.clone()).unwrap();
        let source = rng.random_range(0..n);
        let near = {
            let base = records[source].grid.data();
            let data = base.iter().map(|x| x + 0.3 * rng.sample::<f32, _>(StandardNormal)).collect();
            TokenGrid::new(h, w, d, data).unwrap()
        };
        let query_grids = [gaussian_grid(&mut rng, h, w, d), records[source].grid.clone(), near];
        for qg in query_grids {
            let class_filter = if rng.random_bool(0.3) {
                let c = records[rng.random_range(0..n)].meta.class_id.clone();
                Some(c)
            } else {
                None
            };
            let params = MatchParams {
                top_k: rng.random_range(1..=25),
                delta: [0.2, 0.2, 0.0, -0.1, 0.5][rng.random_range(0..5usize)],
                class_filter,
                normalize_by_mask: rng.random_bool(0.2),
            };
            let fast = match_query(&QueryRecord::new(qg.clone()), &db, &params).unwrap();
            let slow = naive_match(&qg, &records, &params);
            if fast.hits.len() != slow.len() {
                return verdict(false, format!("instance {inst}: {} hits vs {} in reference", fast.hits.len(), slow.len()));
            }
            for (rank, (hit, &(i, s))) in fast.hits.iter().zip(&slow).enumerate() {
                let m = &records[i].meta;
                let same = hit.template == i
                    && hit.score.to_bits() == s.to_bits()
                    && hit.class_id == m.class_id
                    && hit.viewpoint == m.viewpoint;
                if !same {
                    return verdict(
                        false,
                        format!("instance {inst} rank {rank}: got ({}, {}) want ({i}, {s})", hit.template, hit.score),
                    );
                }
            }
            ties += slow.windows(2).filter(|p| p[0].1 == p[1].1).count();
            hits_compared += slow.len();
            queries_run += 1;
        }
    }
    verdict(
        true,
        format!("{queries_run} queries over 50 databases, {hits_compared} ranked hits bit-identical ({ties} ties broken by index)"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let model = DescriptorModel::new(SyntheticSpec {
        dim: 32,
        ..Default::default()
    })
    .unwrap();
    let templates = hemisphere_templates(&model, 301, 0).unwrap();
    let dirs: Vec<Vec3> = templates.iter().map(|t| t.meta.viewpoint.direction()).collect();
    let db = build_db(templates).unwrap();
    let params = MatchParams::default();

    let noisy = hemisphere_queries(&model, 500, 0.05, 0.0, 21);
    let acc_noisy = acc15(&cases(batch_match(&noisy, &db, &params).unwrap(), &noisy), 15.0).unwrap();

    let clean = hemisphere_queries(&model, 500, 0.0, 0.0, 22);
    let results = batch_match(&clean, &db, &params).unwrap();
    let mut worst_gap = 0.0f64;
    let (mut got_sum, mut want_sum, mut got_max, mut want_max) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (r, q) in results.iter().zip(&clean) {
        let gt = q.gt_viewpoint.unwrap().direction();
        let got = angle_between(&gt, &r.best().unwrap().viewpoint.direction()).unwrap();
        let want = dirs
            .iter()
            .map(|t| angle_between(&gt, t).unwrap())
            .fold(f64::INFINITY, f64::min);
        worst_gap = worst_gap.max((got - want).abs());
        got_sum += got;
        want_sum += want;
        got_max = got_max.max(got);
        want_max = want_max.max(want);
    }
    let acc_clean = acc15(&cases(results, &clean), 15.0).unwrap();
    let n = clean.len() as f64;
    let pass = acc_noisy >= 0.95 && acc_clean == 1.0 && worst_gap < 1e-9;
    verdict(
        pass,
        format!(
            "Acc15 {acc_noisy:.3} at sigma 0.05 (need >= 0.95); Acc15 {acc_clean:.3} at sigma 0 (need 1.0); \
             angular error mean {:.3} / max {:.3} deg vs nearest-template oracle {:.3} / {:.3} (worst gap {worst_gap:.1e})",
            got_sum / n,
            got_max,
            want_sum / n,
            want_max
        ),
    )
}

// ---------------------------------------------------------------- 3

fn training_batch(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, d: usize) -> TrainingBatch {
    let tuples = (0..b)
        .map(|_| TrainingTuple {
            query: gaussian_grid(rng, h, w, d),
            positive: gaussian_grid(rng, h, w, d),
            positive_mask: TokenMask::full(h, w),
            negative: gaussian_grid(rng, h, w, d),
            negative_mask: {
                let mut m = random_mask(rng, h, w, 0.6);
                if m.count_set() == 0 {
                    m = TokenMask::full(h, w);
                }
                m
            },
        })
        .collect();
    TrainingBatch::new(tuples, DEFAULT_TAU).unwrap()
}

/// Largest `|a − n| / max(|a|, |n|, 1e-3 · max|a|)` over all parameters,
/// with central differences of step `h`.
fn fd_max_rel_error(batch: &TrainingBatch, head: &ProjectionHead, h: f64) -> f64 {
    let variant = LossVariant::StandardInfoNce;
    let analytic = loss_gradient(batch, head, variant).unwrap().1.flatten();
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut hp = head.clone();
        *hp.param_mut(i) += h;
        let mut hm = head.clone();
        *hm.param_mut(i) -= h;
        let numeric = (batch_loss(batch, &hp, variant).unwrap() - batch_loss(batch, &hm, variant).unwrap()) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3 * scale);
        worst = worst.max(rel);
    }
    worst
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut per_b = Vec::new();
    for b in [2usize, 4, 8] {
        let mut worst_b = 0.0f64;
        for k in 0..4 {
            let batch = training_batch(&mut rng, b, 3, 3, 10);
            let mut head = ProjectionHead::random(10, 6, 1000 + 10 * b as u64 + k).unwrap();
            let grids: Vec<&TokenGrid> = batch
                .tuples()
                .iter()
                .flat_map(|t| [&t.query, &t.positive, &t.negative])
                .collect();
            head.calibrate(&grids).unwrap();
            let head = head.with_mode(HeadMode::Training);
            worst_b = worst_b.max(fd_max_rel_error(&batch, &head, 1e-4));
        }
        per_b.push(format!("b={b}: {worst_b:.2e}"));
        worst = worst.max(worst_b);
    }
    verdict(
        worst < 1e-4,
        format!("12 batches, tau 0.1, max relative error {worst:.2e} (need < 1e-4; {})", per_b.join(", ")),
    )
}

// ---------------------------------------------------------------- 4

fn accuracy_with(head: &ProjectionHead, templates: &[TemplateRecord], queries: &[QueryRecord]) -> f64 {
    let projected: Vec<TemplateRecord> = templates
        .iter()
        .map(|t| TemplateRecord {
            meta: t.meta.clone(),
            grid: head.project(&t.grid).unwrap(),
            mask: t.mask.clone(),
        })
        .collect();
    let db = build_db(projected).unwrap();
    let qs: Vec<QueryRecord> = queries
        .iter()
        .map(|q| QueryRecord {
            grid: head.project(&q.grid).unwrap(),
            ..q.clone()
        })
        .collect();
    acc15(&cases(batch_match(&qs, &db, &MatchParams::default()).unwrap(), &qs), 15.0).unwrap()
}

fn labeled_templates(templates: &[TemplateRecord]) -> Vec<LabeledTemplate> {
    templates
        .iter()
        .map(|t| LabeledTemplate {
            grid: t.grid.clone(),
            mask: t.mask.clone(),
            class_id: t.meta.class_id.clone(),
            viewpoint: t.meta.viewpoint,
        })
        .collect()
}

fn labeled_queries(queries: &[QueryRecord]) -> Vec<LabeledQuery> {
    queries
        .iter()
        .map(|q| LabeledQuery {
            grid: q.grid.clone(),
            class_id: q.class_id.clone().unwrap(),
            viewpoint: q.gt_viewpoint.unwrap(),
        })
        .collect()
}

fn criterion_4() -> Verdict {
    let model = DescriptorModel::new(SyntheticSpec {
        dim: 384,
        signal_dim: Some(64),
        nuisance_dim: 64,
        mask: MaskShape::Full,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let amplitude = 10.0;
    let templates = hemisphere_templates(&model, 301, 0).unwrap();
    let train_q = hemisphere_queries(&model, 800, 0.05, amplitude, 11);
    let test_q = hemisphere_queries(&model, 300, 0.05, amplitude, 12);
    let dataset = TupleDataset::new(labeled_queries(&train_q), labeled_templates(&templates), 15.0).unwrap();
    let mut head = ProjectionHead::random(384, 32, 5).unwrap();
    head.calibrate(&dataset.all_grids()).unwrap();

    let cfg = OptimizerConfig {
        epochs: 4,
        max_steps: Some(200),
        ..Default::default()
    };
    let probes: Vec<TrainingBatch> = dataset
        .batches(cfg.batch_size, cfg.tau, 4040)
        .take(20)
        .collect::<Result<_, _>>()
        .unwrap();
    let probe_loss = |h: &ProjectionHead| {
        probes.iter().map(|b| batch_loss(b, h, cfg.variant).unwrap()).sum::<f64>() / probes.len() as f64
    };

    let acc_before = accuracy_with(&head, &templates, &test_q);
    let loss_before = probe_loss(&head);
    let out = train_head(&dataset, head, &cfg, 3).unwrap();
    let loss_after = probe_loss(&out.head);
    let acc_after = accuracy_with(&out.head, &templates, &test_q);

    let steps = out.trace.len();
    let mean = |rows: &[tokenmatch::contrastive::TraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let trace_ratio = mean(&out.trace[steps - 10..]) / mean(&out.trace[..10]);
    let ratio = loss_after / loss_before;
    let lift = acc_after - acc_before;
    verdict(
        steps == 200 && ratio < 0.8 && lift >= 0.10,
        format!(
            "lr {:.4e}, {steps} steps; probe loss {loss_before:.4} -> {loss_after:.4} (ratio {ratio:.3}, need < 0.8; \
             trace last/first-10 ratio {trace_ratio:.3}); Acc15 {acc_before:.3} -> {acc_after:.3} (lift {:+.1} points, need >= +10)",
            cfg.learning_rate(),
            100.0 * lift
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let head = ProjectionHead::random(6, 4, 5).unwrap();
    for b in 2..=16usize {
        let batch = training_batch(&mut rng, b, 2, 2, 6);
        let sims = batch_similarities(&batch, &head).unwrap();
        let rows_ok = sims.neg.iter().all(|r| r.len() == b - 1);
        if batch.negative_count() != b * b - b || sims.negative_count() != b * b - b || !rows_ok {
            return verdict(false, format!("b={b}: {} negatives", sims.negative_count()));
        }
    }
    let mut worst = 0.0f64;
    for s in [-150.0, -3.0, 0.0, 0.7, 42.0, 196.0] {
        let l = info_nce_loss(&[s, s], &[vec![s], vec![s]], DEFAULT_TAU, LossVariant::StandardInfoNce).unwrap();
        worst = worst.max((l / 2.0 - std::f64::consts::LN_2).abs());
    }
    let g = gaussian_grid(&mut rng, 14, 14, 8);
    let tuple = TrainingTuple {
        query: g.clone(),
        positive: g.clone(),
        positive_mask: TokenMask::full(14, 14),
        negative: g.clone(),
        negative_mask: TokenMask::full(14, 14),
    };
    let batch = TrainingBatch::new(vec![tuple.clone(), tuple], DEFAULT_TAU).unwrap();
    let grid_loss = batch_loss(&batch, &ProjectionHead::random(8, 8, 9).unwrap(), LossVariant::StandardInfoNce).unwrap();
    worst = worst.max((grid_loss / 2.0 - std::f64::consts::LN_2).abs());
    verdict(
        worst <= 1e-10,
        format!("negatives = b^2 - b for b in 2..=16 (240 at 16); symmetric loss - ln 2 per sample: max {worst:.1e} (need <= 1e-10)"),
    )
}

// ---------------------------------------------------------------- 6

const CUBE_F: f64 = 100.0;
const IMG: usize = 128;

fn cube_intrinsics() -> Intrinsics {
    Intrinsics::new(Focal::isotropic(CUBE_F), (IMG as f64 / 2.0, IMG as f64 / 2.0))
}

/// Distance map of the front face of a unit cube centered on the optical
/// axis, face at depth `z_face`, traced analytically at pixel centers.
fn front_face_oracle(z_face: f64, intr: &Intrinsics) -> DepthMap {
    let mut data = vec![0.0; IMG * IMG];
    for y in 0..IMG {
        for x in 0..IMG {
            let a = (x as f64 + 0.5 - intr.cx) / intr.fx;
            let b = (y as f64 + 0.5 - intr.cy) / intr.fy;
            if (a * z_face).abs() <= 0.5 && (b * z_face).abs() <= 0.5 {
                data[y * IMG + x] = z_face * (1.0 + a * a + b * b).sqrt();
            }
        }
    }
    DepthMap::new(IMG, IMG, data).unwrap()
}

fn vsd_oracle(est: &DepthMap, gt: &DepthMap, test: &DepthMap, tau: f64) -> f64 {
    let (mut union, mut bad) = (0usize, 0usize);
    for i in 0..test.data.len() {
        let (e, g, t) = (est.data[i], gt.data[i], test.data[i]);
        let ve = e > 0.0 && t > 0.0 && e <= t + tau;
        let vg = g > 0.0 && t > 0.0 && g <= t + tau;
        if ve || vg {
            union += 1;
            if !(ve && vg && (e - g).abs() < tau) {
                bad += 1;
            }
        }
    }
    bad as f64 / union as f64
}

fn criterion_6() -> Verdict {
    let cube = TriMesh::cube(1.0);
    let intr = cube_intrinsics();
    let z = 3.0;
    let gt = Pose6D::new(Rotation::identity(), Vec3::new(0.0, 0.0, z)).unwrap();
    let params = VsdParams {
        tau: 0.020,
        occlusion_tol: 0.020,
    };
    let test = render_depth(&cube, &gt, &intr, IMG, IMG).unwrap();
    let self_err = e_vsd(&gt, &gt, &cube, &test, &intr, &params).unwrap().error;

    let face = front_face_oracle(z - 0.5, &intr);
    let render_gap = test
        .data
        .iter()
        .zip(&face.data)
        .map(|(a, b)| if (*a > 0.0) != (*b > 0.0) { f64::INFINITY } else { (a - b).abs() })
        .fold(0.0f64, f64::max);

    let mut shifted = Vec::new();
    let mut oracle_gap = 0.0f64;
    for dz in [0.030, -0.030] {
        let est = Pose6D::new(Rotation::identity(), Vec3::new(0.0, 0.0, z + dz)).unwrap();
        let e = e_vsd(&est, &gt, &cube, &test, &intr, &params).unwrap().error;
        let oracle = vsd_oracle(&front_face_oracle(z + dz - 0.5, &intr), &face, &face, params.tau);
        oracle_gap = oracle_gap.max((e - oracle).abs());
        shifted.push(e);
    }
    let score = vsd_score(&[0.1, 0.29, 0.3, 0.9], 0.3).unwrap();
    let pass = self_err == 0.0 && shifted.iter().all(|&e| e == 1.0) && oracle_gap <= 1e-6 && render_gap <= 1e-6 && score == 0.5;
    verdict(
        pass,
        format!(
            "e_vsd(P,P) = {self_err}; 30 mm axial offset (farther, nearer) = {:?} (need 1), oracle gap {oracle_gap:.1e}, \
             rendered-vs-traced distance gap {render_gap:.1e}; vsd_score = {score} (need 0.5)",
            shifted
        ),
    )
}

// ---------------------------------------------------------------- 7

fn centered_box(cx: f64, cy: f64, w: f64, h: f64) -> PixelBox {
    PixelBox::new(cx - w / 2.0, cy - h / 2.0, w, h).unwrap()
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let n = 200;
    let mut records = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let side = rng.random_range(0.05..0.3);
        let truth = {
            let z = rng.random_range(0.5..2.0);
            Vec3::new(rng.random_range(-0.2..0.2) * z, rng.random_range(-0.2..0.2) * z, z)
        };
        let mut meta = synthetic_meta("obj", random_view(&mut rng));
        meta.z_tmp = rng.random_range(0.4..1.2);
        meta.x_tmp = rng.random_range(-0.05..0.05);
        meta.y_tmp = rng.random_range(-0.05..0.05);
        meta.f_tmp = Focal {
            fx: rng.random_range(400.0..700.0),
            fy: rng.random_range(400.0..700.0),
        };
        meta.c_tmp = (rng.random_range(60.0..68.0), rng.random_range(60.0..68.0));
        meta.box_tmp = centered_box(
            meta.f_tmp.fx * meta.x_tmp / meta.z_tmp + meta.c_tmp.0,
            meta.f_tmp.fy * meta.y_tmp / meta.z_tmp + meta.c_tmp.1,
            meta.f_tmp.fx * side / meta.z_tmp,
            meta.f_tmp.fy * side / meta.z_tmp,
        );
        let f_obs = Focal {
            fx: rng.random_range(500.0..1200.0),
            fy: rng.random_range(500.0..1200.0),
        };
        let c_obs = (rng.random_range(300.0..340.0), rng.random_range(220.0..260.0));
        let obs = tokenmatch::matcher::Observation {
            box_obs: centered_box(
                f_obs.fx * truth.x / truth.z + c_obs.0,
                f_obs.fy * truth.y / truth.z + c_obs.1,
                f_obs.fx * side / truth.z,
                f_obs.fy * side / truth.z,
            ),
            c_obs,
            f_obs,
        };
        records.push(TemplateRecord {
            meta,
            grid: TokenGrid::new(1, 1, 1, vec![1.0]).unwrap(),
            mask: TokenMask::full(1, 1),
        });
        scenes.push((obs, truth));
    }
    let db = build_db(records).unwrap();
    let mut worst = 0.0f64;
    for (i, (obs, truth)) in scenes.iter().enumerate() {
        let mut q = QueryRecord::new(TokenGrid::new(1, 1, 1, vec![1.0]).unwrap());
        q.observation = Some(*obs);
        let meta = db.meta(i);
        let result = MatchResult {
            hits: vec![Hit {
                template: i,
                class_id: meta.class_id.clone(),
                viewpoint: meta.viewpoint,
                score: 1.0,
            }],
            delta: 0.2,
        };
        let pose = lift_to_6d(&result, &q, &db).unwrap();
        let z = estimate_depth(&obs.box_obs, &meta.box_tmp, obs.f_obs, meta.f_tmp, meta.z_tmp).unwrap();
        let t = estimate_translation(obs, meta, z).unwrap();
        if t != pose.translation {
            return verdict(false, format!("scene {i}: lift and direct estimate disagree"));
        }
        for k in 0..3 {
            worst = worst.max((pose.translation[k] - truth[k]).abs() / truth[k].abs().max(truth.z));
        }
    }
    let f = Focal::isotropic(600.0);
    let b = PixelBox::new(10.0, 10.0, 30.0, 40.0).unwrap();
    let equal = estimate_depth(&b, &b, f, f, 0.7).unwrap();
    let half = estimate_depth(&PixelBox::new(0.0, 0.0, 15.0, 20.0).unwrap(), &b, f, f, 0.7).unwrap();
    let pass = worst <= 0.02 && equal == 0.7 && half == 1.4;
    verdict(
        pass,
        format!(
            "{n} scenes, z in [0.5, 2] m: worst per-axis translation error {:.2e}% (need <= 2%); equal boxes -> {equal} (z_tmp 0.7), half diagonal -> {half}",
            100.0 * worst
        ),
    )
}

// ---------------------------------------------------------------- 8

fn time_match(threads: usize, q: &QueryRecord, db: &TemplateDb, params: &MatchParams) -> (Duration, MatchResult) {
    with_threads(threads, || {
        let mut best = Duration::MAX;
        let mut result = None;
        for _ in 0..3 {
            let t0 = Instant::now();
            let r = match_query(q, db, params).unwrap();
            best = best.min(t0.elapsed());
            result = Some(r);
        }
        (best, result.unwrap())
    })
    .unwrap()
}

fn criterion_8() -> Verdict {
    let n = 92_232;
    let (h, w, d) = (14, 14, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut builder = TemplateDbBuilder::with_capacity(h, w, d, n);
    let mut buf = vec![0.0f32; h * w * d];
    let mask = vec![true; h * w];
    for i in 0..n {
        for x in buf.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let view = Viewpoint::new(i as f64 * 0.001, 0.3, 0.0).unwrap();
        builder.push_parts(synthetic_meta("obj", view), &buf, &mask).unwrap();
    }
    let db = builder.finish().unwrap();
    drop(buf);
    let q = QueryRecord::new(gaussian_grid(&mut rng, h, w, d));
    let params = MatchParams::top_k(10);
    let cores = std::thread::available_parallelism().map(|c| c.get()).unwrap_or(1);

    let (t1, r1) = time_match(1, &q, &db, &params);
    let (_, r2) = time_match(2, &q, &db, &params);
    let (t8, r8) = time_match(8, &q, &db, &params);
    let identical = r1 == r2 && r1 == r8;
    let speedup = t1.as_secs_f64() / t8.as_secs_f64();
    let pass = t1.as_secs_f64() <= 2.0 && speedup >= 3.0 && identical;
    verdict(
        pass,
        format!(
            "{n} templates, {:.2} GB resident; 1 thread {:.3}s (need <= 2s); 8 threads {:.3}s, speedup {speedup:.2}x \
             (need >= 3x; {cores} core(s) available); top-10 identical across 1/2/8 threads: {identical}",
            db.memory_bytes() as f64 / 1e9,
            t1.as_secs_f64(),
            t8.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn tokenmatch_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tokenmatch"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_file(path: &Path, expected: &[u8]) -> Result<(), String> {
    let got = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if got == expected {
        Ok(())
    } else {
        Err(format!("{} differs from the library output", path.display()))
    }
}

fn tmpd_round_trip() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let specials = [0.0f32, -0.0, f32::MIN_POSITIVE, 1e-40, -1e-45, f32::MAX, f32::MIN, 1.0 / 3.0];
    let mut entries = Vec::new();
    for _ in 0..20 {
        let (h, w, d) = (7, 5, 13);
        let data = (0..h * w * d)
            .map(|_| {
                if rng.random_bool(0.1) {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)
                }
            })
            .collect();
        let grid = TokenGrid::new(h, w, d, data).map_err(|e| e.to_string())?;
        entries.push(GridEntry::new(grid, random_mask(&mut rng, h, w, 0.5)).unwrap());
    }
    let bytes = encode_tmpd(&entries).map_err(|e| e.to_string())?;
    let (_, back) = decode_tmpd(&bytes).map_err(|e| e.to_string())?;
    let bitwise = back.len() == entries.len()
        && back.iter().zip(&entries).all(|(a, b)| {
            a.mask == b.mask
                && a.grid.shape() == b.grid.shape()
                && a.grid.data().iter().zip(b.grid.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    if !bitwise {
        return Err("decoded grids differ bitwise".into());
    }
    if encode_tmpd(&back).map_err(|e| e.to_string())? != bytes {
        return Err("re-encoding changed the bytes".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path().join("g.tmpd");
    write_grids(&p, &entries).map_err(|e| e.to_string())?;
    same_file(&p, &bytes)?;
    let again = read_grids(&p).map_err(|e| e.to_string())?;
    if encode_tmpd(&again).map_err(|e| e.to_string())? != bytes {
        return Err("file round trip changed the bytes".into());
    }
    Ok(bytes.len())
}

fn db_rebuild(model: &DescriptorModel) -> Result<(), String> {
    let records = hemisphere_templates(model, 120, 6).map_err(|e| e.to_string())?;
    let (t1, m1) = build_db(records.clone()).and_then(|db| db.encode()).map_err(|e| e.to_string())?;
    let (t2, m2) = build_db(records).and_then(|db| db.encode()).map_err(|e| e.to_string())?;
    if (&t1, &m1) != (&t2, &m2) {
        return Err("two builds from the same records differ".into());
    }
    let manifest = parse_manifest(std::str::from_utf8(&m1).unwrap()).map_err(|e| e.to_string())?;
    let (t3, m3) = TemplateDb::from_parts(&t1, &manifest)
        .and_then(|db| db.encode())
        .map_err(|e| e.to_string())?;
    if (&t1, &m1) != (&t3, &m3) {
        return Err("reloaded database re-encodes differently".into());
    }
    Ok(())
}

fn cli_matches_library(model: &DescriptorModel, model_seed: u64) -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let ms = model_seed.to_string();
    let mut checked = 0;

    tokenmatch_cli(&["sample-views", "--count", "301", "--seed", "4", "--out", &p("views.jsonl")])?;
    let mut views = Vec::new();
    write_viewpoints(&mut views, &sample_hemisphere(301, 4).unwrap()).unwrap();
    same_file(Path::new(&p("views.jsonl")), &views)?;
    checked += 1;

    tokenmatch_cli(&[
        "synthesize", "--kind", "templates", "--count", "60", "--model-seed", &ms, "--seed", "3",
        "--out", &p("t.tmpd"), "--out-manifest", &p("t.jsonl"),
    ])?;
    let templates = hemisphere_templates(model, 60, 3).unwrap();
    let t_entries: Vec<GridEntry> = templates
        .iter()
        .map(|t| GridEntry::new(t.grid.clone(), t.mask.clone()).unwrap())
        .collect();
    let t_manifest: Vec<_> = templates.iter().map(|t| t.meta.to_manifest()).collect();
    same_file(Path::new(&p("t.tmpd")), &encode_tmpd(&t_entries).unwrap())?;
    same_file(Path::new(&p("t.jsonl")), &encode_manifest(&t_manifest))?;
    checked += 2;

    tokenmatch_cli(&[
        "synthesize", "--kind", "queries", "--count", "40", "--model-seed", &ms, "--seed", "9", "--noise", "0.05",
        "--out", &p("q.tmpd"), "--out-manifest", &p("q.jsonl"),
    ])?;
    let queries = hemisphere_queries(model, 40, 0.05, 0.0, 9);
    let q_entries: Vec<GridEntry> = queries.iter().map(|q| GridEntry::unmasked(q.grid.clone())).collect();
    let q_manifest: Vec<_> = queries.iter().map(|q| q.to_manifest()).collect();
    same_file(Path::new(&p("q.tmpd")), &encode_tmpd(&q_entries).unwrap())?;
    same_file(Path::new(&p("q.jsonl")), &encode_manifest(&q_manifest))?;
    checked += 2;

    tokenmatch_cli(&[
        "build-db", "--descriptors", &p("t.tmpd"), "--manifest", &p("t.jsonl"),
        "--out", &p("db.tmpd"), "--out-manifest", &p("db.jsonl"),
    ])?;
    let db = build_db(templates.clone()).unwrap();
    let (db_bytes, db_manifest) = db.encode().unwrap();
    same_file(Path::new(&p("db.tmpd")), &db_bytes)?;
    same_file(Path::new(&p("db.jsonl")), &db_manifest)?;
    checked += 2;

    tokenmatch_cli(&[
        "match", "--db", &p("db.tmpd"), "--db-manifest", &p("db.jsonl"), "--queries", &p("q.tmpd"),
        "--query-manifest", &p("q.jsonl"), "--top-k", "5", "--out", &p("r.csv"),
    ])?;
    let results = batch_match(&queries, &db, &MatchParams::top_k(5)).unwrap();
    same_file(Path::new(&p("r.csv")), encode_results_csv(&results).unwrap().as_bytes())?;
    checked += 1;

    std::fs::write(p("cube.ply"), write_ply(&TriMesh::cube(0.1))).unwrap();
    let mesh_arg = format!("{SYNTH_CLASS}={}", p("cube.ply"));
    tokenmatch_cli(&[
        "evaluate", "--db", &p("db.tmpd"), "--db-manifest", &p("db.jsonl"), "--queries", &p("q.tmpd"),
        "--query-manifest", &p("q.jsonl"), "--results", &p("r.csv"), "--mesh", &mesh_arg, "--out-dir", &p("eval"),
    ])?;
    let meshes = HashMap::from([(SYNTH_CLASS.to_string(), TriMesh::cube(0.1))]);
    let ctx = PoseEvalContext {
        db: &db,
        meshes: &meshes,
        test_depths: None,
        width: 128,
        height: 128,
        vsd: VsdParams::default(),
    };
    let report = evaluate(&queries, &results, &ctx).unwrap();
    same_file(&dir.path().join("eval/per_query.csv"), report.to_csv().unwrap().as_bytes())?;
    same_file(&dir.path().join("eval/aggregates.json"), (report.aggregates_json() + "\n").as_bytes())?;
    checked += 2;

    tokenmatch_cli(&["report", "--per-query", &p("eval/per_query.csv"), "--out-dir", &p("rep")])?;
    let again = EvalReport::from_rows(EvalReport::rows_from_csv(&report.to_csv().unwrap()).unwrap()).unwrap();
    same_file(&dir.path().join("rep/aggregates.json"), (again.aggregates_json() + "\n").as_bytes())?;
    checked += 1;

    tokenmatch_cli(&[
        "train-head", "--train-queries", &p("q.tmpd"), "--train-query-manifest", &p("q.jsonl"),
        "--templates", &p("t.tmpd"), "--template-manifest", &p("t.jsonl"), "--descriptor-dim", "8",
        "--seed", "12", "--batch-size", "8", "--max-steps", "3", "--lr", "0.01",
        "--out-head", &p("head.bin"), "--out-trace", &p("trace.csv"),
    ])?;
    let dataset = TupleDataset::new(labeled_queries(&queries), labeled_templates(&templates), 30.0).unwrap();
    let mut head = ProjectionHead::random(32, 8, 12).unwrap();
    head.calibrate(&dataset.all_grids()).unwrap();
    let cfg = OptimizerConfig {
        base_lr: 0.01,
        batch_size: 8,
        max_steps: Some(3),
        ..Default::default()
    };
    let trained = train_head(&dataset, head, &cfg, 12).unwrap();
    same_file(Path::new(&p("head.bin")), &encode_head(&trained.head))?;
    same_file(Path::new(&p("trace.csv")), trace_csv(&trained.trace).unwrap().as_bytes())?;
    checked += 2;

    tokenmatch_cli(&[
        "build-db", "--descriptors", &p("t.tmpd"), "--manifest", &p("t.jsonl"), "--head", &p("head.bin"),
        "--out", &p("pdb.tmpd"), "--out-manifest", &p("pdb.jsonl"),
    ])?;
    let head = tokenmatch::contrastive::decode_head(&encode_head(&trained.head)).unwrap();
    let projected: Vec<TemplateRecord> = templates
        .iter()
        .map(|t| TemplateRecord {
            grid: head.project(&t.grid).unwrap(),
            ..t.clone()
        })
        .collect();
    let (pdb, _) = build_db(projected).unwrap().encode().unwrap();
    same_file(Path::new(&p("pdb.tmpd")), &pdb)?;
    checked += 1;
    Ok(checked)
}

fn criterion_9() -> Verdict {
    let model_seed = 2;
    let model = DescriptorModel::new(SyntheticSpec {
        dim: 32,
        seed: model_seed,
        ..Default::default()
    })
    .unwrap();
    let tmpd = tmpd_round_trip();
    let rebuild = db_rebuild(&model);
    let cli = cli_matches_library(&model, model_seed);
    let pass = tmpd.is_ok() && rebuild.is_ok() && cli.is_ok();
    let show = |r: Result<String, String>| r.unwrap_or_else(|e| format!("FAILED ({e})"));
    verdict(
        pass,
        format!(
            "TMPD bit-exact: {}; DB rebuild byte-identical: {}; CLI vs library: {}",
            show(tmpd.map(|n| format!("yes ({n} bytes)"))),
            show(rebuild.map(|_| "yes".into())),
            show(cli.map(|n| format!("{n} outputs identical"))),
        ),
    )
}

fn main() {
    let minute = Duration::from_secs(60);
    let results = [
        run(1, "matcher equals naive reference", Some(minute), criterion_1),
        run(2, "synthetic retrieval benchmark", Some(minute), criterion_2),
        run(3, "gradient vs finite differences", None, criterion_3),
        run(4, "training efficacy", Some(5 * minute), criterion_4),
        run(5, "contrastive loss structure", None, criterion_5),
        run(6, "VSD fixtures", None, criterion_6),
        run(7, "pose lift round trip", None, criterion_7),
        run(8, "throughput at 92,232 templates", None, criterion_8),
        run(9, "format round trips", None, criterion_9),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
