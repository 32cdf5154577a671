//! Per-token cosine similarity and masked aggregation.
//!
//! The scalar kernels here ([`dot`], [`token_norm`], [`cosine_from_parts`])
//! are the single source of the floating-point operation order used by both
//! the grid-level functions and the batch matcher, so the two paths produce
//! bit-identical scores.

use crate::error::{Error, Result};
use crate::store::{TokenGrid, TokenMask};

const LANES: usize = 8;

/// Dot product with a fixed eight-lane accumulation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

#[inline]
pub fn token_norm(a: &[f32]) -> f64 {
    (dot(a, a) as f64).sqrt()
}

/// Cosine from a precomputed dot product and norms; `None` when either token
/// has zero norm.
#[inline]
pub fn cosine_from_parts(dot: f32, norm_a: f64, norm_b: f64) -> Option<f64> {
    let denom = norm_a * norm_b;
    if denom > 0.0 {
        Some((dot as f64 / denom).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// One similarity value per token position.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Number of positions where either token had zero norm (scored 0).
    pub degenerate_tokens: usize,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "similarity map of {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            degenerate_tokens: 0,
        })
    }

    fn check_mask(&self, mask: &TokenMask) -> Result<()> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::invalid(format!(
                "mask shape {}x{} does not match similarity map {}x{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

/// Cosine similarity between corresponding tokens of two grids.
pub fn token_cosine(q: &TokenGrid, t: &TokenGrid) -> Result<SimilarityMap> {
    if q.shape() != t.shape() {
        return Err(Error::invalid(format!(
            "grid shapes differ: {:?} vs {:?}",
            q.shape(),
            t.shape()
        )));
    }
    let mut degenerate = 0;
    let values = q
        .tokens()
        .zip(t.tokens())
        .map(|(a, b)| {
            match cosine_from_parts(dot(a, b), token_norm(a), token_norm(b)) {
                Some(c) => c,
                None => {
                    degenerate += 1;
                    0.0
                }
            }
        })
        .collect();
    Ok(SimilarityMap {
        height: q.height(),
        width: q.width(),
        values,
        degenerate_tokens: degenerate,
    })
}

/// Sum of similarities at positions where the mask is set.
pub fn masked_sum(map: &SimilarityMap, mask: &TokenMask) -> Result<f64> {
    thresholded_masked_sum(map, mask, f64::NEG_INFINITY)
}

/// Sum of similarities where the mask is set and the value is strictly
/// greater than `delta`.
pub fn thresholded_masked_sum(map: &SimilarityMap, mask: &TokenMask, delta: f64) -> Result<f64> {
    map.check_mask(mask)?;
    if delta.is_nan() {
        return Err(Error::invalid("delta is NaN"));
    }
    let mut sum = 0.0f64;
    for (v, &m) in map.values.iter().zip(mask.bits()) {
        if m && *v > delta {
            sum += *v;
        }
    }
    Ok(sum)
}

/// [`masked_sum`] divided by the mask cardinality (0 for an empty mask).
/// Diagnostic only; retrieval uses plain sums.
pub fn masked_mean(map: &SimilarityMap, mask: &TokenMask) -> Result<f64> {
    let sum = masked_sum(map, mask)?;
    Ok(match mask.count_set() {
        0 => 0.0,
        n => sum / n as f64,
    })
}

/// [`thresholded_masked_sum`] divided by the mask cardinality.
pub fn thresholded_masked_mean(map: &SimilarityMap, mask: &TokenMask, delta: f64) -> Result<f64> {
    let sum = thresholded_masked_sum(map, mask, delta)?;
    Ok(match mask.count_set() {
        0 => 0.0,
        n => sum / n as f64,
    })
}
