//! Synthetic token-grid descriptors as smooth random functions of viewpoint.
//!
//! Each token `t` owns a random rotation `R_t` and an orthonormal basis
//! `A_t`; its descriptor for viewing direction `v` is `A_t ψ(R_t v)`, where
//! `ψ` stacks weighted degree-1..3 monomial features with
//! `ψ(a)·ψ(b) = Σ w_k (a·b)^k`. Per-token cosine between two views is then a
//! strictly increasing function of the cosine of the angle between them, so
//! noiseless retrieval returns the angularly nearest template.
//!
//! Queries can carry a view-dependent "domain gap" component living in a
//! subspace orthogonal to every template descriptor, plus Gaussian noise.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{sample_hemisphere, viewpoint_to_rotation, Vec3, Viewpoint};
use crate::matcher::{Observation, QueryRecord};
use crate::store::{Focal, PixelBox, TemplateMeta, TemplateRecord, TokenGrid, TokenMask};

/// Feature weights of degrees 1, 2, 3.
pub const DEGREE_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
pub const FEATURE_DIM: usize = 19;

/// `κ(c) = Σ w_k c^k`, the per-token cosine between noiseless views whose
/// directions have cosine `c`.
pub fn kernel(c: f64) -> f64 {
    let [a, b, d] = DEGREE_WEIGHTS;
    a * c + b * c * c + d * c * c * c
}

fn features(v: &Vec3) -> [f64; FEATURE_DIM] {
    let (x, y, z) = (v.x, v.y, v.z);
    let [w1, w2, w3] = DEGREE_WEIGHTS.map(f64::sqrt);
    let (s2, s3, s6) = (2f64.sqrt(), 3f64.sqrt(), 6f64.sqrt());
    [
        w1 * x,
        w1 * y,
        w1 * z,
        w2 * x * x,
        w2 * y * y,
        w2 * z * z,
        w2 * s2 * x * y,
        w2 * s2 * x * z,
        w2 * s2 * y * z,
        w3 * x * x * x,
        w3 * y * y * y,
        w3 * z * z * z,
        w3 * s3 * x * x * y,
        w3 * s3 * x * x * z,
        w3 * s3 * y * y * x,
        w3 * s3 * y * y * z,
        w3 * s3 * z * z * x,
        w3 * s3 * z * z * y,
        w3 * s6 * x * y * z,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskShape {
    Full,
    /// Tokens whose center lies within `radius` (fraction of the half-size)
    /// of the grid center.
    Disc { radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub grid: usize,
    pub dim: usize,
    /// Dimension of the subspace holding every template descriptor; the
    /// whole space when `None`.
    pub signal_dim: Option<usize>,
    /// Dimension of the query domain-gap subspace (0 disables it).
    pub nuisance_dim: usize,
    pub mask: MaskShape,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid: 14,
            dim: 32,
            signal_dim: None,
            nuisance_dim: 0,
            mask: MaskShape::Disc { radius: 0.8 },
            seed: 0,
        }
    }
}

fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

struct TokenMap {
    rotation: Matrix3<f64>,
    basis: DMatrix<f64>,
}

impl TokenMap {
    fn eval(&self, v: &Vec3, out: &mut DVector<f64>) {
        let f = DVector::from_row_slice(&features(&(self.rotation * v)));
        self.basis.mul_to(&f, out);
    }
}

/// A fixed random descriptor function of viewpoint.
pub struct DescriptorModel {
    spec: SyntheticSpec,
    signal: Vec<TokenMap>,
    nuisance: Vec<TokenMap>,
    mask: TokenMask,
}

impl DescriptorModel {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.grid == 0 || spec.grid > 64 {
            return Err(Error::invalid(format!("grid size {} must be in 1..=64", spec.grid)));
        }
        if spec.dim < FEATURE_DIM {
            return Err(Error::invalid(format!(
                "descriptor dimension {} is below the feature dimension {FEATURE_DIM}",
                spec.dim
            )));
        }
        let sd = spec.signal_dim.unwrap_or(spec.dim);
        if sd < FEATURE_DIM || sd > spec.dim {
            return Err(Error::invalid(format!(
                "signal dimension {sd} must lie in {FEATURE_DIM}..={}",
                spec.dim
            )));
        }
        if spec.nuisance_dim > 0 && (spec.nuisance_dim < FEATURE_DIM || sd + spec.nuisance_dim > spec.dim) {
            return Err(Error::invalid(format!(
                "nuisance dimension {} must be at least {FEATURE_DIM} and fit beside the signal in {}",
                spec.nuisance_dim, spec.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let frame = orthonormal(spec.dim, sd + spec.nuisance_dim, &mut rng);
        let s_frame = frame.columns(0, sd).into_owned();
        let n_frame = frame.columns(sd, spec.nuisance_dim).into_owned();
        let tokens = spec.grid * spec.grid;
        let signal = (0..tokens)
            .map(|_| TokenMap {
                rotation: random_rotation(&mut rng),
                basis: &s_frame * orthonormal(sd, FEATURE_DIM, &mut rng),
            })
            .collect();
        let nuisance = if spec.nuisance_dim == 0 {
            Vec::new()
        } else {
            (0..tokens)
                .map(|_| TokenMap {
                    rotation: random_rotation(&mut rng),
                    basis: &n_frame * orthonormal(spec.nuisance_dim, FEATURE_DIM, &mut rng),
                })
                .collect()
        };
        let half = spec.grid as f64 / 2.0;
        let bits = (0..tokens)
            .map(|i| match spec.mask {
                MaskShape::Full => true,
                MaskShape::Disc { radius } => {
                    let (r, c) = ((i / spec.grid) as f64 + 0.5 - half, (i % spec.grid) as f64 + 0.5 - half);
                    (r * r + c * c).sqrt() <= radius * half
                }
            })
            .collect();
        let mask = TokenMask::new(spec.grid, spec.grid, bits)?;
        if mask.count_set() == 0 {
            return Err(Error::invalid("mask shape covers no token"));
        }
        Ok(Self {
            spec,
            signal,
            nuisance,
            mask,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn mask(&self) -> &TokenMask {
        &self.mask
    }

    /// Noiseless descriptors; every token has unit norm.
    pub fn template_grid(&self, v: &Viewpoint) -> TokenGrid {
        self.query_grid(v, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Descriptors plus `nuisance ×` the domain-gap component and Gaussian
    /// noise with standard deviation `noise_rel ×` the signal RMS.
    pub fn query_grid(&self, v: &Viewpoint, noise_rel: f64, nuisance: f64, rng: &mut ChaCha8Rng) -> TokenGrid {
        let d = self.spec.dim;
        let dir = v.direction();
        let sigma = noise_rel / (d as f64).sqrt();
        let mut buf = DVector::zeros(d);
        let mut nbuf = DVector::zeros(d);
        let mut data = Vec::with_capacity(self.signal.len() * d);
        for (t, map) in self.signal.iter().enumerate() {
            map.eval(&dir, &mut buf);
            if nuisance != 0.0 && !self.nuisance.is_empty() {
                self.nuisance[t].eval(&dir, &mut nbuf);
                buf.axpy(nuisance, &nbuf, 1.0);
            }
            for x in buf.iter() {
                let n: f64 = if sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                data.push((x + sigma * n) as f32);
            }
        }
        TokenGrid::new(self.spec.grid, self.spec.grid, d, data).expect("finite synthetic grid")
    }
}

/// Uniformly distributed upper-hemisphere viewpoints.
pub fn random_hemisphere_views(n: usize, rng: &mut ChaCha8Rng) -> Vec<Viewpoint> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(0.0..1.0);
            let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Viewpoint::new(az, z.asin(), 0.0).expect("valid viewpoint")
        })
        .collect()
}

pub const SYNTH_CLASS: &str = "synthetic";
pub const SYNTH_Z: f64 = 0.8;
pub const SYNTH_F: f64 = 500.0;
pub const SYNTH_IMAGE: f64 = 128.0;

/// Template render metadata for a centered object at `SYNTH_Z`.
pub fn synthetic_meta(class_id: &str, v: Viewpoint) -> TemplateMeta {
    let c = SYNTH_IMAGE / 2.0;
    TemplateMeta {
        class_id: class_id.to_string(),
        viewpoint: v,
        rotation: viewpoint_to_rotation(&v),
        z_tmp: SYNTH_Z,
        f_tmp: Focal::isotropic(SYNTH_F),
        box_tmp: PixelBox::new(c - 20.0, c - 20.0, 40.0, 40.0).expect("valid box"),
        c_tmp: (c, c),
        x_tmp: 0.0,
        y_tmp: 0.0,
    }
}

/// Templates at `n` hemisphere lattice views.
pub fn hemisphere_templates(model: &DescriptorModel, n: usize, seed: u64) -> Result<Vec<TemplateRecord>> {
    Ok(sample_hemisphere(n, seed)?
        .into_iter()
        .map(|v| TemplateRecord {
            meta: synthetic_meta(SYNTH_CLASS, v),
            grid: model.template_grid(&v),
            mask: model.mask().clone(),
        })
        .collect())
}

/// Labeled queries at random hemisphere views observed with the template
/// camera and box.
pub fn hemisphere_queries(model: &DescriptorModel, n: usize, noise_rel: f64, nuisance: f64, seed: u64) -> Vec<QueryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = random_hemisphere_views(n, &mut rng);
    views
        .into_iter()
        .map(|v| {
            let meta = synthetic_meta(SYNTH_CLASS, v);
            let mut q = QueryRecord::new(model.query_grid(&v, noise_rel, nuisance, &mut rng));
            q.class_id = Some(SYNTH_CLASS.to_string());
            q.gt_viewpoint = Some(v);
            q.gt_translation = Some(Vec3::new(0.0, 0.0, SYNTH_Z));
            q.observation = Some(Observation {
                box_obs: meta.box_tmp,
                c_obs: meta.c_tmp,
                f_obs: meta.f_tmp,
            });
            q
        })
        .collect()
}
