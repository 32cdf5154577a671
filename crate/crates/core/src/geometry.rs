//! Rotations, viewing directions and uniform viewpoint sampling.
//!
//! Spherical convention used throughout the crate: azimuth is measured about
//! +Z starting from +X, elevation from the XY-plane toward +Z. A viewpoint's
//! direction is the unit vector
//! `(cos(el) cos(az), cos(el) sin(az), sin(el))`, i.e. the position of the
//! camera on the unit sphere around the object. In-plane rotation is a
//! rotation about that direction (the optical axis).
//!
//! All angles are stored normalized to `[0, 2π)` except elevation.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const POLE_EPS: f64 = 1e-12;

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Smallest absolute difference between two angles, in radians.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// A camera viewpoint on the unit sphere around the object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    direction: Vec3,
    azimuth: f64,
    elevation: f64,
    in_plane: f64,
}

impl Viewpoint {
    pub fn new(azimuth: f64, elevation: f64, in_plane: f64) -> Result<Self> {
        if !(azimuth.is_finite() && elevation.is_finite() && in_plane.is_finite()) {
            return Err(Error::invalid("viewpoint angles must be finite"));
        }
        if !(-PI / 2.0..=PI / 2.0).contains(&elevation) {
            return Err(Error::invalid(format!(
                "elevation {elevation} outside [-pi/2, pi/2]"
            )));
        }
        let azimuth = wrap_angle(azimuth);
        let (sa, ca) = azimuth.sin_cos();
        let (se, ce) = elevation.sin_cos();
        let direction = Vec3::new(ce * ca, ce * sa, se).normalize();
        Ok(Self {
            direction,
            azimuth,
            elevation,
            in_plane: wrap_angle(in_plane),
        })
    }

    /// Builds a viewpoint from a direction vector with zero in-plane rotation.
    pub fn from_direction(direction: &Vec3) -> Result<Self> {
        let n = direction.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid("direction must be nonzero and finite"));
        }
        let d = direction / n;
        let elevation = d.z.atan2(d.x.hypot(d.y));
        let azimuth = if d.x.hypot(d.y) < POLE_EPS {
            0.0
        } else {
            d.y.atan2(d.x)
        };
        Self::new(azimuth, elevation, 0.0)
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn in_plane(&self) -> f64 {
        self.in_plane
    }

    /// Same viewpoint with a different in-plane rotation.
    pub fn with_in_plane(&self, in_plane: f64) -> Self {
        Self {
            in_plane: wrap_angle(in_plane),
            ..*self
        }
    }
}

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and handedness (tolerance 1e-6).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::invalid(format!(
                "matrix is not orthonormal (max |R^T R - I| = {err:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        Ok(Self(m))
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, rhs: &Rotation) -> Self {
        Self(self.0 * rhs.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic distance on SO(3), in degrees.
    pub fn geodesic_deg(&self, other: &Rotation) -> f64 {
        let rel = self.0.transpose() * other.0;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

/// Angle between two (not necessarily unit) vectors, in degrees.
pub fn angle_between(u: &Vec3, v: &Vec3) -> Result<f64> {
    let nu = u.norm();
    let nv = v.norm();
    if !(nu > 0.0 && nv > 0.0) || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::invalid("angle_between needs nonzero finite vectors"));
    }
    let c = (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Rotation mapping +X onto the viewing direction, followed by the
/// in-plane rotation about that direction: `Rz(az) · Ry(-el) · Rx(in_plane)`.
pub fn viewpoint_to_rotation(v: &Viewpoint) -> Rotation {
    Rotation::about_z(v.azimuth)
        .compose(&Rotation::about_y(-v.elevation))
        .compose(&Rotation::about_x(v.in_plane))
}

/// Inverse of [`viewpoint_to_rotation`]. At the poles the azimuth is fixed to
/// zero and the remaining freedom is folded into the in-plane angle.
pub fn rotation_to_viewpoint(r: &Rotation) -> Viewpoint {
    let d = r.0.column(0).into_owned();
    let horiz = d.x.hypot(d.y);
    let elevation = d.z.atan2(horiz);
    let azimuth = if horiz < POLE_EPS { 0.0 } else { d.y.atan2(d.x) };
    let base = Rotation::about_z(azimuth).compose(&Rotation::about_y(-elevation));
    let m = base.0.transpose() * r.0;
    let in_plane = m[(2, 1)].atan2(m[(1, 1)]);
    // elevation comes from atan2 on a unit vector so it is always in range
    Viewpoint::new(azimuth, elevation, in_plane).expect("finite angles")
}

/// Object-to-camera rotation for a camera placed at `view` looking at the
/// origin. Camera axes: x right, y down, z forward (toward the object).
pub fn camera_rotation(view: &Rotation) -> Rotation {
    // rows: camera x = R e_y, camera y = -R e_z, camera z = -R e_x
    let flip = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0);
    Rotation(flip * view.0.transpose())
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

fn azimuth_offset(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random::<f64>() * TAU
}

fn fibonacci_point(z: f64, i: usize, offset: f64) -> Result<Viewpoint> {
    let elevation = z.clamp(-1.0, 1.0).asin();
    let azimuth = i as f64 * GOLDEN_ANGLE + offset;
    Viewpoint::new(azimuth, elevation, 0.0)
}

/// `n` near-uniform viewpoints on the upper hemisphere (elevation ≥ 0) from a
/// Fibonacci lattice whose azimuthal phase is drawn from `seed`.
///
/// `n = 1` returns the pole.
pub fn sample_hemisphere(n: usize, seed: u64) -> Result<Vec<Viewpoint>> {
    if n == 0 {
        return Err(Error::invalid("hemisphere sample count must be >= 1"));
    }
    if n == 1 {
        return Ok(vec![Viewpoint::new(0.0, PI / 2.0, 0.0)?]);
    }
    let offset = azimuth_offset(seed);
    (0..n)
        .map(|i| fibonacci_point(1.0 - (i as f64 + 0.5) / n as f64, i, offset))
        .collect()
}

/// Full-sphere Fibonacci lattice of `n_views` directions, each repeated with
/// `n_inplane` equally spaced in-plane rotations. Output is view-major.
pub fn sample_sphere_with_inplane(
    n_views: usize,
    n_inplane: usize,
    seed: u64,
) -> Result<Vec<Viewpoint>> {
    if n_views == 0 || n_inplane == 0 {
        return Err(Error::invalid("view and in-plane counts must be >= 1"));
    }
    let offset = azimuth_offset(seed);
    let step = TAU / n_inplane as f64;
    let mut out = Vec::with_capacity(n_views * n_inplane);
    for i in 0..n_views {
        let z = 1.0 - (2 * i + 1) as f64 / n_views as f64;
        let base = fibonacci_point(z, i, offset)?;
        out.extend((0..n_inplane).map(|k| base.with_in_plane(k as f64 * step)));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ViewpointLine {
    azimuth: f64,
    elevation: f64,
    in_plane: f64,
}

/// Writes one JSON object per line with `azimuth`, `elevation`, `in_plane`.
pub fn write_viewpoints<W: Write>(mut out: W, views: &[Viewpoint]) -> std::io::Result<()> {
    for v in views {
        let line = ViewpointLine {
            azimuth: v.azimuth,
            elevation: v.elevation,
            in_plane: v.in_plane,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a viewpoint JSON-lines document. Blank lines are skipped.
pub fn parse_viewpoints(text: &str) -> Result<Vec<Viewpoint>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ViewpointLine =
            serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let v = Viewpoint::new(rec.azimuth, rec.elevation, rec.in_plane)
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push(v);
    }
    Ok(out)
}

pub fn read_viewpoints<R: BufRead>(mut input: R) -> Result<Vec<Viewpoint>> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<viewpoints>", e))?;
    parse_viewpoints(&text)
}
