//! Projection head and contrastive training over (query, positive, negative)
//! descriptor tuples.
//!
//! The head maps each token independently:
//!
//! ```text
//! u = (x - mean) / sqrt(var + bn_eps)        batch norm, no affine
//! y = W u + bias
//! z = gain * (y - mean(y)) / sqrt(var(y) + ln_eps) + shift
//! ```
//!
//! In training mode `mean`/`var` are the statistics of every token in the
//! batch; in inference mode the running estimates are used.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_between, Viewpoint};
use crate::store::{TokenGrid, TokenMask};

pub const DEFAULT_TAU: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Training,
    #[default]
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    dim_in: usize,
    dim_out: usize,
    /// Row-major `dim_out × dim_in`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    ln_gain: Vec<f64>,
    ln_shift: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    bn_eps: f64,
    ln_eps: f64,
    bn_momentum: f64,
    mode: HeadMode,
}

/// Parameter gradients, laid out like the head's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_shift: Vec<f64>,
}

impl HeadGradient {
    fn zeros(head: &ProjectionHead) -> Self {
        Self {
            weight: vec![0.0; head.weight.len()],
            bias: vec![0.0; head.dim_out],
            ln_gain: vec![0.0; head.dim_out],
            ln_shift: vec![0.0; head.dim_out],
        }
    }

    /// All entries in parameter order (weight, bias, gain, shift).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v.extend_from_slice(&self.ln_gain);
        v.extend_from_slice(&self.ln_shift);
        v
    }
}

struct InputStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("head {name} contains non-finite values")));
    }
    Ok(())
}

impl ProjectionHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim_in: usize,
        dim_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        ln_gain: Vec<f64>,
        ln_shift: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    ) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        let lens = [
            ("weight", weight.len(), dim_in * dim_out),
            ("bias", bias.len(), dim_out),
            ("ln_gain", ln_gain.len(), dim_out),
            ("ln_shift", ln_shift.len(), dim_out),
            ("running_mean", running_mean.len(), dim_in),
            ("running_var", running_var.len(), dim_in),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::invalid(format!("head {name} has {got} values, expected {want}")));
            }
        }
        for (name, v) in [
            ("weight", &weight),
            ("bias", &bias),
            ("ln_gain", &ln_gain),
            ("ln_shift", &ln_shift),
            ("running_mean", &running_mean),
        ] {
            check_finite(name, v)?;
        }
        if running_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("head running variance must be positive"));
        }
        Ok(Self {
            dim_in,
            dim_out,
            weight,
            bias,
            ln_gain,
            ln_shift,
            running_mean,
            running_var,
            bn_eps: BN_EPS,
            ln_eps: LN_EPS,
            bn_momentum: BN_MOMENTUM,
            mode: HeadMode::Inference,
        })
    }

    /// Uniform `±1/sqrt(dim_in)` weights and bias, unit gain, zero shift,
    /// running statistics `(0, 1)`.
    pub fn random(dim_in: usize, dim_out: usize, seed: u64) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim_in as f64).sqrt();
        let weight = (0..dim_in * dim_out).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..dim_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self::new(
            dim_in,
            dim_out,
            weight,
            bias,
            vec![1.0; dim_out],
            vec![0.0; dim_out],
            vec![0.0; dim_in],
            vec![1.0; dim_in],
        )
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self::new(
            dim,
            dim,
            weight,
            vec![0.0; dim],
            vec![1.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![1.0; dim],
        )
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn ln_gain(&self) -> &[f64] {
        &self.ln_gain
    }

    pub fn ln_shift(&self) -> &[f64] {
        &self.ln_shift
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: HeadMode) {
        self.mode = mode;
    }

    pub fn with_mode(mut self, mode: HeadMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + 3 * self.dim_out
    }

    /// Parameters in gradient order (weight, bias, gain, shift).
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v.extend_from_slice(&self.ln_gain);
        v.extend_from_slice(&self.ln_shift);
        v
    }

    /// Mutable access to parameter `i` in [`params`](Self::params) order.
    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let w = self.weight.len();
        let d = self.dim_out;
        match i {
            i if i < w => &mut self.weight[i],
            i if i < w + d => &mut self.bias[i - w],
            i if i < w + 2 * d => &mut self.ln_gain[i - w - d],
            i => &mut self.ln_shift[i - w - 2 * d],
        }
    }

    /// Learnable parameters bit-equal (running statistics ignored).
    pub fn same_params(&self, other: &Self) -> bool {
        self.weight == other.weight
            && self.bias == other.bias
            && self.ln_gain == other.ln_gain
            && self.ln_shift == other.ln_shift
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.dim() != self.dim_in {
            return Err(Error::invalid(format!(
                "grid dim {} does not match head input dim {}",
                grid.dim(),
                self.dim_in
            )));
        }
        Ok(())
    }

    fn running_stats(&self) -> InputStats {
        InputStats {
            mean: self.running_mean.clone(),
            inv_std: self.running_var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect(),
        }
    }

    /// Per-feature mean and biased variance over every token of `grids`.
    fn moments(&self, grids: &[&TokenGrid]) -> (Vec<f64>, Vec<f64>, usize) {
        let d = self.dim_in;
        let mut mean = vec![0.0; d];
        let mut n = 0usize;
        for g in grids {
            for tok in g.tokens() {
                for (m, &x) in mean.iter_mut().zip(tok) {
                    *m += x as f64;
                }
                n += 1;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for g in grids {
            for tok in g.tokens() {
                for ((v, &x), m) in var.iter_mut().zip(tok).zip(&mean) {
                    let c = x as f64 - m;
                    *v += c * c;
                }
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        (mean, var, n)
    }

    fn batch_stats(&self, grids: &[&TokenGrid]) -> InputStats {
        let (mean, var, _) = self.moments(grids);
        let inv_std = var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect();
        InputStats { mean, inv_std }
    }

    /// Sets the running statistics to the exact statistics of `grids`.
    pub fn calibrate(&mut self, grids: &[&TokenGrid]) -> Result<()> {
        if grids.is_empty() {
            return Err(Error::invalid("calibration needs at least one grid"));
        }
        for g in grids {
            self.check_grid(g)?;
        }
        let (mean, var, n) = self.moments(grids);
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        self.running_mean = mean;
        self.running_var = var.iter().map(|v| (v * unbias).max(f64::MIN_POSITIVE)).collect();
        Ok(())
    }

    /// Forward pass of one token into `u` (normalized input), `yhat`
    /// (layer-normalized, pre-affine) and `z`; returns the LN inverse std.
    fn forward_token(&self, x: &[f32], stats: &InputStats, u: &mut [f64], yhat: &mut [f64], z: &mut [f64]) -> f64 {
        for j in 0..self.dim_in {
            u[j] = (x[j] as f64 - stats.mean[j]) * stats.inv_std[j];
        }
        for o in 0..self.dim_out {
            let row = &self.weight[o * self.dim_in..(o + 1) * self.dim_in];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(u.iter()) {
                acc += w * x;
            }
            yhat[o] = acc;
        }
        let d = self.dim_out as f64;
        let mean = yhat.iter().sum::<f64>() / d;
        let var = yhat.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + self.ln_eps).sqrt();
        for o in 0..self.dim_out {
            yhat[o] = (yhat[o] - mean) * r;
            z[o] = self.ln_gain[o] * yhat[o] + self.ln_shift[o];
        }
        r
    }

    fn project_with(&self, grid: &TokenGrid, stats: &InputStats) -> Vec<f64> {
        let mut u = vec![0.0; self.dim_in];
        let mut yhat = vec![0.0; self.dim_out];
        let mut out = vec![0.0; grid.len() * self.dim_out];
        for (tok, z) in grid.tokens().zip(out.chunks_exact_mut(self.dim_out)) {
            self.forward_token(tok, stats, &mut u, &mut yhat, z);
        }
        out
    }

    /// Projects every token. Inference mode uses the running statistics;
    /// training mode normalizes with this grid's own token statistics.
    pub fn project(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        self.check_grid(grid)?;
        let stats = match self.mode {
            HeadMode::Inference => self.running_stats(),
            HeadMode::Training => self.batch_stats(&[grid]),
        };
        let out = self.project_with(grid, &stats);
        let data = out.iter().map(|&v| v as f32).collect();
        TokenGrid::new(grid.height(), grid.width(), self.dim_out, data)
    }
}

/// One `(query, positive, negative)` training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTuple {
    pub query: TokenGrid,
    pub positive: TokenGrid,
    /// Carried for completeness; positives are compared over all tokens.
    pub positive_mask: TokenMask,
    pub negative: TokenGrid,
    pub negative_mask: TokenMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    tuples: Vec<TrainingTuple>,
    tau: f64,
}

impl TrainingBatch {
    pub fn new(tuples: Vec<TrainingTuple>, tau: f64) -> Result<Self> {
        if tuples.len() < 2 {
            return Err(Error::invalid(format!(
                "batch needs at least 2 tuples for in-batch negatives, got {}",
                tuples.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let shape = tuples[0].query.shape();
        for (i, t) in tuples.iter().enumerate() {
            for (name, g) in [("query", &t.query), ("positive", &t.positive), ("negative", &t.negative)] {
                if g.shape() != shape {
                    return Err(Error::invalid(format!(
                        "tuple {i}: {name} shape {:?} differs from {shape:?}",
                        g.shape()
                    )));
                }
            }
            for (name, m) in [("positive_mask", &t.positive_mask), ("negative_mask", &t.negative_mask)] {
                if (m.height(), m.width()) != (shape.0, shape.1) {
                    return Err(Error::invalid(format!("tuple {i}: {name} shape differs from grid")));
                }
            }
        }
        Ok(Self { tuples, tau })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tuples(&self) -> &[TrainingTuple] {
        &self.tuples
    }

    /// `b² − b`.
    pub fn negative_count(&self) -> usize {
        self.len() * self.len() - self.len()
    }

    fn grids(&self) -> Vec<&TokenGrid> {
        self.tuples
            .iter()
            .flat_map(|t| [&t.query, &t.positive, &t.negative])
            .collect()
    }
}

/// Positive scores and, per query, its scores against every other tuple's
/// negative (`neg[i]` skips `k == i`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSimilarities {
    pub pos: Vec<f64>,
    pub neg: Vec<Vec<f64>>,
}

impl BatchSimilarities {
    pub fn negative_count(&self) -> usize {
        self.neg.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `−Σᵢ log(exp(posᵢ/τ) / (exp(posᵢ/τ) + Σₖ exp(negᵢₖ/τ)))`.
    #[default]
    StandardInfoNce,
    /// `−Σᵢ log(exp(posᵢ/τ) / Σₖ (negᵢₖ/τ))`; undefined when the sum is ≤ 0.
    PaperLiteral,
}

fn check_loss_inputs(pos: &[f64], neg: &[Vec<f64>], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if pos.is_empty() || pos.len() != neg.len() {
        return Err(Error::invalid(format!(
            "need one negative row per positive, got {} positives and {} rows",
            pos.len(),
            neg.len()
        )));
    }
    if let Some(i) = neg.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("sample {i} has no negatives")));
    }
    if pos.iter().chain(neg.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("similarities must be finite"));
    }
    Ok(())
}

/// Loss and its derivatives with respect to every similarity.
fn loss_and_sensitivities(pos: &[f64], neg: &[Vec<f64>], tau: f64, variant: LossVariant) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    check_loss_inputs(pos, neg, tau)?;
    let mut loss = 0.0;
    let mut dpos = Vec::with_capacity(pos.len());
    let mut dneg = Vec::with_capacity(pos.len());
    for (i, (&p, row)) in pos.iter().zip(neg).enumerate() {
        let a = p / tau;
        match variant {
            LossVariant::StandardInfoNce => {
                let top = row.iter().fold(f64::NEG_INFINITY, |m, &n| m.max(n / tau));
                // l = log(1 + Σ exp(n/τ − a)), evaluated around the larger logit
                let (l, lse) = if a >= top {
                    let s: f64 = row.iter().map(|&n| (n / tau - a).exp()).sum();
                    let l = s.ln_1p();
                    (l, a + l)
                } else {
                    let s: f64 = (a - top).exp() + row.iter().map(|&n| (n / tau - top).exp()).sum::<f64>();
                    let lse = top + s.ln();
                    (lse - a, lse)
                };
                loss += l;
                dpos.push(((a - lse).exp() - 1.0) / tau);
                dneg.push(row.iter().map(|&n| (n / tau - lse).exp() / tau).collect());
            }
            LossVariant::PaperLiteral => {
                let s: f64 = row.iter().map(|&n| n / tau).sum();
                if !(s > 0.0) {
                    return Err(Error::Domain(format!(
                        "sample {i}: negative similarity sum {s} is not positive, log undefined"
                    )));
                }
                loss += s.ln() - a;
                dpos.push(-1.0 / tau);
                dneg.push(vec![1.0 / (tau * s); row.len()]);
            }
        }
    }
    Ok((loss, dpos, dneg))
}

/// Contrastive loss summed over samples.
pub fn info_nce_loss(pos: &[f64], neg: &[Vec<f64>], tau: f64, variant: LossVariant) -> Result<f64> {
    loss_and_sensitivities(pos, neg, tau, variant).map(|r| r.0)
}

struct GridForward {
    u: Vec<f64>,
    yhat: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    norms: Vec<f64>,
}

struct BatchForward {
    grids: Vec<GridForward>,
    tokens: usize,
}

fn forward_batch(head: &ProjectionHead, batch: &TrainingBatch) -> Result<BatchForward> {
    let grids = batch.grids();
    head.check_grid(grids[0])?;
    let stats = match head.mode {
        HeadMode::Inference => head.running_stats(),
        HeadMode::Training => head.batch_stats(&grids),
    };
    let t = grids[0].len();
    let (di, dout) = (head.dim_in, head.dim_out);
    let out = grids
        .iter()
        .map(|g| {
            let mut f = GridForward {
                u: vec![0.0; t * di],
                yhat: vec![0.0; t * dout],
                r: vec![0.0; t],
                z: vec![0.0; t * dout],
                norms: vec![0.0; t],
            };
            for (k, tok) in g.tokens().enumerate() {
                let z = &mut f.z[k * dout..(k + 1) * dout];
                f.r[k] = head.forward_token(
                    tok,
                    &stats,
                    &mut f.u[k * di..(k + 1) * di],
                    &mut f.yhat[k * dout..(k + 1) * dout],
                    z,
                );
                f.norms[k] = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            f
        })
        .collect();
    Ok(BatchForward { grids: out, tokens: t })
}

fn cos(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn pair_sum(f: &BatchForward, dout: usize, qa: usize, gb: usize, mask: Option<&[bool]>) -> f64 {
    let (a, b) = (&f.grids[qa], &f.grids[gb]);
    let mut s = 0.0;
    for t in 0..f.tokens {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        s += cos(&a.z[t * dout..(t + 1) * dout], a.norms[t], &b.z[t * dout..(t + 1) * dout], b.norms[t]);
    }
    s
}

fn similarities_from(f: &BatchForward, batch: &TrainingBatch, dout: usize) -> BatchSimilarities {
    let b = batch.len();
    let pos = (0..b).map(|i| pair_sum(f, dout, 3 * i, 3 * i + 1, None)).collect();
    let neg = (0..b)
        .map(|i| {
            (0..b)
                .filter(|&k| k != i)
                .map(|k| pair_sum(f, dout, 3 * i, 3 * k + 2, Some(batch.tuples[k].negative_mask.bits())))
                .collect()
        })
        .collect();
    BatchSimilarities { pos, neg }
}

/// Per-query positive and in-batch negative scores under `head`.
pub fn batch_similarities(batch: &TrainingBatch, head: &ProjectionHead) -> Result<BatchSimilarities> {
    let f = forward_batch(head, batch)?;
    Ok(similarities_from(&f, batch, head.dim_out))
}

/// Loss of `batch` under `head`.
pub fn batch_loss(batch: &TrainingBatch, head: &ProjectionHead, variant: LossVariant) -> Result<f64> {
    let s = batch_similarities(batch, head)?;
    info_nce_loss(&s.pos, &s.neg, batch.tau, variant)
}

/// Accumulates `g · ∂cos(a, b)/∂a` into `da` and the symmetric term into `db`.
fn cos_backward(g: f64, a: &[f64], na: f64, b: &[f64], nb: f64, da: &mut [f64], db: &mut [f64]) {
    if na == 0.0 || nb == 0.0 || g == 0.0 {
        return;
    }
    let c = cos(a, na, b, nb);
    let inv = 1.0 / (na * nb);
    let (ca, cb) = (c / (na * na), c / (nb * nb));
    for k in 0..a.len() {
        da[k] += g * (b[k] * inv - ca * a[k]);
        db[k] += g * (a[k] * inv - cb * b[k]);
    }
}

fn evaluate(batch: &TrainingBatch, head: &ProjectionHead, variant: LossVariant) -> Result<(f64, HeadGradient)> {
    let (di, dout) = (head.dim_in, head.dim_out);
    let f = forward_batch(head, batch)?;
    let sims = similarities_from(&f, batch, dout);
    let (loss, dpos, dneg) = loss_and_sensitivities(&sims.pos, &sims.neg, batch.tau, variant)?;

    let t = f.tokens;
    let mut dz: Vec<Vec<f64>> = f.grids.iter().map(|_| vec![0.0; t * dout]).collect();
    let b = batch.len();
    let mut pair = |ga: usize, gb: usize, g: f64, mask: Option<&[bool]>| {
        let (lo, hi) = dz.split_at_mut(ga.max(gb));
        let (da, db) = if ga < gb { (&mut lo[ga], &mut hi[0]) } else { (&mut hi[0], &mut lo[gb]) };
        let (a, bb) = (&f.grids[ga], &f.grids[gb]);
        for k in 0..t {
            if mask.is_some_and(|m| !m[k]) {
                continue;
            }
            let s = k * dout..(k + 1) * dout;
            cos_backward(g, &a.z[s.clone()], a.norms[k], &bb.z[s.clone()], bb.norms[k], &mut da[s.clone()], &mut db[s]);
        }
    };
    for i in 0..b {
        pair(3 * i, 3 * i + 1, dpos[i], None);
        let mut col = 0;
        for k in 0..b {
            if k == i {
                continue;
            }
            pair(3 * i, 3 * k + 2, dneg[i][col], Some(batch.tuples[k].negative_mask.bits()));
            col += 1;
        }
    }

    let mut grad = HeadGradient::zeros(head);
    let mut dyhat = vec![0.0; dout];
    for (g, dzg) in f.grids.iter().zip(&dz) {
        for k in 0..t {
            let dzk = &dzg[k * dout..(k + 1) * dout];
            if dzk.iter().all(|&v| v == 0.0) {
                continue;
            }
            let yh = &g.yhat[k * dout..(k + 1) * dout];
            for o in 0..dout {
                grad.ln_gain[o] += dzk[o] * yh[o];
                grad.ln_shift[o] += dzk[o];
                dyhat[o] = dzk[o] * head.ln_gain[o];
            }
            let m1 = dyhat.iter().sum::<f64>() / dout as f64;
            let m2 = dyhat.iter().zip(yh).map(|(a, b)| a * b).sum::<f64>() / dout as f64;
            let u = &g.u[k * di..(k + 1) * di];
            for o in 0..dout {
                let dy = g.r[k] * (dyhat[o] - m1 - yh[o] * m2);
                grad.bias[o] += dy;
                let row = &mut grad.weight[o * di..(o + 1) * di];
                for (w, x) in row.iter_mut().zip(u) {
                    *w += dy * x;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Loss and its gradient with respect to every head parameter.
///
/// Batch-norm statistics are treated as functions of the inputs only (the
/// head has no batch-norm parameters), so they carry no parameter gradient.
pub fn loss_gradient(batch: &TrainingBatch, head: &ProjectionHead, variant: LossVariant) -> Result<(f64, HeadGradient)> {
    if head.mode != HeadMode::Training {
        return Err(Error::invalid("loss_gradient requires a head in training mode"));
    }
    evaluate(batch, head, variant)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    /// Steps over which weight decay anneals; defaults to the run length.
    pub weight_decay_horizon: Option<usize>,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tau: f64,
    pub variant: LossVariant,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 2.5e-5,
            batch_size: 16,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            weight_decay_horizon: None,
            epochs: 1,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tau: DEFAULT_TAU,
            variant: LossVariant::StandardInfoNce,
        }
    }
}

impl OptimizerConfig {
    /// Linear scaling rule `lr_b · batch_size / 256`.
    pub fn learning_rate(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    /// Cosine schedule from `weight_decay_start` at step 0 to
    /// `weight_decay_end` at `horizon`.
    pub fn weight_decay_at(&self, step: usize, horizon: usize) -> f64 {
        let p = if horizon == 0 { 1.0 } else { (step.min(horizon) as f64) / horizon as f64 };
        self.weight_decay_end + 0.5 * (self.weight_decay_start - self.weight_decay_end) * (1.0 + (PI * p).cos())
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("base_lr", self.base_lr),
            ("weight_decay_start", self.weight_decay_start),
            ("weight_decay_end", self.weight_decay_end),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::invalid("training needs at least one step"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("invalid Adam moment parameters"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in trace {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    pub trace: Vec<TraceRow>,
}

/// AdamW with decoupled weight decay on the linear weights only.
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, head: &mut ProjectionHead, grad: &HeadGradient, lr: f64, wd: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let nw = head.weight.len();
        for (i, g) in grad.flatten().into_iter().enumerate() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let p = head.param_mut(i);
            if i < nw {
                *p *= 1.0 - lr * wd;
            }
            *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

/// Trains on a stream of batches for at most `steps` steps. Running input
/// statistics are left as they are; set them with
/// [`ProjectionHead::calibrate`].
pub fn train_on_batches<I>(batches: I, steps: usize, head: ProjectionHead, cfg: &OptimizerConfig) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = Result<TrainingBatch>>,
{
    cfg.validate()?;
    let mut head = head.with_mode(HeadMode::Training);
    let horizon = cfg.weight_decay_horizon.unwrap_or(steps);
    let lr = cfg.learning_rate();
    let mut opt = AdamW::new(head.param_count());
    let mut trace = Vec::with_capacity(steps);
    for (step, batch) in batches.into_iter().take(steps).enumerate() {
        let batch = batch?;
        let (loss, grad) = evaluate(&batch, &head, cfg.variant).map_err(|e| match e {
            Error::Domain(m) => Error::Training { step, message: m },
            e => e,
        })?;
        if !loss.is_finite() || grad.flatten().iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                message: format!("loss became {loss}"),
            });
        }
        let wd = cfg.weight_decay_at(step, horizon);
        opt.step(&mut head, &grad, lr, wd, cfg);
        trace.push(TraceRow {
            step,
            loss,
            lr,
            weight_decay: wd,
        });
    }
    if trace.is_empty() {
        return Err(Error::invalid("batch stream produced no batches"));
    }
    head.set_mode(HeadMode::Inference);
    Ok(TrainOutcome { head, trace })
}

/// A labeled query crop.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledQuery {
    pub grid: TokenGrid,
    pub class_id: String,
    pub viewpoint: Viewpoint,
}

/// A labeled template.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTemplate {
    pub grid: TokenGrid,
    pub mask: TokenMask,
    pub class_id: String,
    pub viewpoint: Viewpoint,
}

/// Queries and templates from which training tuples are drawn: the positive
/// of a query is its nearest same-class template, the negative a random
/// template of another class or at least `negative_min_angle_deg` away.
#[derive(Clone, Debug)]
pub struct TupleDataset {
    queries: Vec<LabeledQuery>,
    templates: Vec<LabeledTemplate>,
    positive_of: Vec<usize>,
    negatives_of: Vec<Vec<usize>>,
}

impl TupleDataset {
    pub fn new(queries: Vec<LabeledQuery>, templates: Vec<LabeledTemplate>, negative_min_angle_deg: f64) -> Result<Self> {
        if queries.is_empty() || templates.is_empty() {
            return Err(Error::invalid("tuple dataset needs queries and templates"));
        }
        let shape = templates[0].grid.shape();
        if let Some(i) = templates.iter().position(|t| t.grid.shape() != shape) {
            return Err(Error::invalid(format!("template {i}: grid shape differs")));
        }
        if let Some(i) = queries.iter().position(|q| q.grid.shape() != shape) {
            return Err(Error::invalid(format!("query {i}: grid shape differs from templates")));
        }
        if let Some(i) = templates.iter().position(|t| (t.mask.height(), t.mask.width()) != (shape.0, shape.1)) {
            return Err(Error::invalid(format!("template {i}: mask shape differs from grid")));
        }
        let mut positive_of = Vec::with_capacity(queries.len());
        let mut negatives_of = Vec::with_capacity(queries.len());
        for (qi, q) in queries.iter().enumerate() {
            let dir = q.viewpoint.direction();
            let mut best: Option<(f64, usize)> = None;
            let mut negs = Vec::new();
            for (ti, t) in templates.iter().enumerate() {
                let a = angle_between(&dir, &t.viewpoint.direction())?;
                if t.class_id == q.class_id {
                    if best.is_none_or(|(b, _)| a < b) {
                        best = Some((a, ti));
                    }
                    if a >= negative_min_angle_deg {
                        negs.push(ti);
                    }
                } else {
                    negs.push(ti);
                }
            }
            let (_, p) = best.ok_or_else(|| Error::invalid(format!("query {qi}: no template of class {}", q.class_id)))?;
            if negs.is_empty() {
                return Err(Error::invalid(format!("query {qi}: no template qualifies as a negative")));
            }
            positive_of.push(p);
            negatives_of.push(negs);
        }
        Ok(Self {
            queries,
            templates,
            positive_of,
            negatives_of,
        })
    }

    pub fn queries(&self) -> &[LabeledQuery] {
        &self.queries
    }

    pub fn templates(&self) -> &[LabeledTemplate] {
        &self.templates
    }

    pub fn positive_of(&self, query: usize) -> usize {
        self.positive_of[query]
    }

    pub fn tuple(&self, query: usize, negative: usize) -> TrainingTuple {
        let p = &self.templates[self.positive_of[query]];
        let n = &self.templates[negative];
        TrainingTuple {
            query: self.queries[query].grid.clone(),
            positive: p.grid.clone(),
            positive_mask: p.mask.clone(),
            negative: n.grid.clone(),
            negative_mask: n.mask.clone(),
        }
    }

    /// Every grid (queries then templates), for calibrating input statistics.
    pub fn all_grids(&self) -> Vec<&TokenGrid> {
        self.queries
            .iter()
            .map(|q| &q.grid)
            .chain(self.templates.iter().map(|t| &t.grid))
            .collect()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        (self.queries.len() / batch_size).max(1)
    }

    /// Deterministic batch stream: each epoch shuffles the queries and cuts
    /// them into consecutive batches, dropping the remainder.
    pub fn batches(&self, batch_size: usize, tau: f64, seed: u64) -> impl Iterator<Item = Result<TrainingBatch>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.queries.len();
        let mut order: Vec<usize> = (0..n).collect();
        let spe = self.steps_per_epoch(batch_size);
        let mut cursor = spe;
        std::iter::from_fn(move || {
            if batch_size < 2 || batch_size > n {
                return Some(Err(Error::invalid(format!(
                    "batch size {batch_size} must be in 2..={n} (query count)"
                ))));
            }
            if cursor == spe {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor * batch_size..(cursor + 1) * batch_size];
            cursor += 1;
            let tuples = idx
                .iter()
                .map(|&q| {
                    let negs = &self.negatives_of[q];
                    self.tuple(q, negs[rng.random_range(0..negs.len())])
                })
                .collect();
            Some(TrainingBatch::new(tuples, tau))
        })
    }
}

/// Trains `head` on tuples drawn from `dataset`; all randomness comes from
/// `seed`.
pub fn train_head(dataset: &TupleDataset, head: ProjectionHead, cfg: &OptimizerConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut steps = cfg.epochs * dataset.steps_per_epoch(cfg.batch_size);
    if let Some(m) = cfg.max_steps {
        steps = steps.min(m);
    }
    train_on_batches(dataset.batches(cfg.batch_size, cfg.tau, seed), steps, head, cfg)
}

const HEAD_FORMAT: &str = "tokenmatch-head";
const HEAD_VERSION: u32 = 1;
const HEAD_MAX_DIM: usize = 1 << 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadHeader {
    format: String,
    version: u32,
    dim_in: usize,
    dim_out: usize,
    bn_eps: f64,
    ln_eps: f64,
    bn_momentum: f64,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// One JSON header line, then little-endian f32 weight (row-major
/// `dim_out × dim_in`), bias, layer-norm gain and shift.
pub fn encode_head(head: &ProjectionHead) -> Vec<u8> {
    let header = HeadHeader {
        format: HEAD_FORMAT.into(),
        version: HEAD_VERSION,
        dim_in: head.dim_in,
        dim_out: head.dim_out,
        bn_eps: head.bn_eps,
        ln_eps: head.ln_eps,
        bn_momentum: head.bn_momentum,
        running_mean: head.running_mean.clone(),
        running_var: head.running_var.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("head header serializes");
    out.push(b'\n');
    for v in head.weight.iter().chain(&head.bias).chain(&head.ln_gain).chain(&head.ln_shift) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<ProjectionHead> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(0, "head header is not newline-terminated"))?;
    let header: HeadHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(0, format!("head header: {e}")))?;
    if header.format != HEAD_FORMAT {
        return Err(Error::format(0, format!("unknown head format {:?}", header.format)));
    }
    if header.version != HEAD_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.version.min(u16::MAX as u32) as u16,
            expected: HEAD_VERSION as u16,
        });
    }
    let (di, dout) = (header.dim_in, header.dim_out);
    if di == 0 || dout == 0 || di > HEAD_MAX_DIM || dout > HEAD_MAX_DIM {
        return Err(Error::format(0, format!("head dims {di}x{dout} out of range")));
    }
    let body = &bytes[nl + 1..];
    let count = di * dout + 3 * dout;
    if body.len() != count * 4 {
        return Err(Error::format(
            (nl + 1 + body.len().min(count * 4)) as u64,
            format!("head body has {} bytes, expected {}", body.len(), count * 4),
        ));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::format((nl + 1 + 4 * i) as u64, "non-finite head parameter"));
    }
    for (name, v) in [("bn_eps", header.bn_eps), ("ln_eps", header.ln_eps)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::format(0, format!("{name} must be positive")));
        }
    }
    if !(0.0..=1.0).contains(&header.bn_momentum) {
        return Err(Error::format(0, "bn_momentum must lie in [0, 1]"));
    }
    let w = di * dout;
    let mut head = ProjectionHead::new(
        di,
        dout,
        vals[..w].to_vec(),
        vals[w..w + dout].to_vec(),
        vals[w + dout..w + 2 * dout].to_vec(),
        vals[w + 2 * dout..].to_vec(),
        header.running_mean,
        header.running_var,
    )
    .map_err(|e| Error::format(0, e.to_string()))?;
    head.bn_eps = header.bn_eps;
    head.ln_eps = header.ln_eps;
    head.bn_momentum = header.bn_momentum;
    Ok(head)
}

pub fn write_head(path: &Path, head: &ProjectionHead) -> Result<()> {
    fs::write(path, encode_head(head)).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path) -> Result<ProjectionHead> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes)
}
