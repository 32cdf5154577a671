//! Lifting a retrieved rotation to a full 6D pose from box geometry.
//!
//! Depth follows from similar triangles: the ratio of template to observed
//! box diagonals (each divided by its focal length) scales the template's
//! render distance. Lateral offsets come from the displacement of each box
//! center relative to its principal point, back-projected at the respective
//! depth. Boxes are `(x, y, w, h)` with `(x, y)` the top-left corner; the
//! "box coordinate" used for offsets is the box center.

use crate::error::{Error, Result};
use crate::geometry::{camera_rotation, Rotation, Vec3};
use crate::matcher::{MatchResult, Observation, QueryRecord};
use crate::store::{Focal, PixelBox, TemplateDb, TemplateMeta};

/// Object pose in the camera frame: `X_cam = rotation · X_obj + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose6D {
    pub rotation: Rotation,
    /// Meters.
    pub translation: Vec3,
}

impl Pose6D {
    pub fn new(rotation: Rotation, translation: Vec3) -> Result<Self> {
        if !(translation.z > 0.0) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "pose translation z must be positive, got {}",
                translation.z
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    /// Pose a template was rendered at.
    pub fn of_template(meta: &TemplateMeta) -> Result<Self> {
        Self::new(
            camera_rotation(&meta.rotation),
            Vec3::new(meta.x_tmp, meta.y_tmp, meta.z_tmp),
        )
    }
}

fn check_box(b: &PixelBox, what: &str) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0 && b.w.is_finite() && b.h.is_finite()) {
        return Err(Error::invalid(format!("{what} extent {}x{} must be positive", b.w, b.h)));
    }
    Ok(())
}

/// Observed object distance in meters.
pub fn estimate_depth(box_obs: &PixelBox, box_tmp: &PixelBox, f_obs: Focal, f_tmp: Focal, z_tmp: f64) -> Result<f64> {
    check_box(box_obs, "observed box")?;
    check_box(box_tmp, "template box")?;
    f_obs.validate()?;
    f_tmp.validate()?;
    if !(z_tmp > 0.0 && z_tmp.is_finite()) {
        return Err(Error::invalid(format!("z_tmp {z_tmp} must be positive")));
    }
    // angular diagonals; reduce to diag(box)/f for isotropic focals
    let tmp = (box_tmp.w / f_tmp.fx).hypot(box_tmp.h / f_tmp.fy);
    let obs = (box_obs.w / f_obs.fx).hypot(box_obs.h / f_obs.fy);
    Ok(z_tmp * tmp / obs)
}

/// Observed translation `(x_tmp + Δx, y_tmp + Δy, z_obs)` in meters.
pub fn estimate_translation(obs: &Observation, t: &TemplateMeta, z_obs: f64) -> Result<Vec3> {
    if !(z_obs > 0.0 && z_obs.is_finite()) {
        return Err(Error::invalid(format!("estimated depth {z_obs} must be positive")));
    }
    check_box(&obs.box_obs, "observed box")?;
    obs.f_obs.validate()?;
    t.validate()?;
    let (ox, oy) = obs.box_obs.center();
    let (tx, ty) = t.box_tmp.center();
    let dx = (ox - obs.c_obs.0) * z_obs / obs.f_obs.fx - (tx - t.c_tmp.0) * t.z_tmp / t.f_tmp.fx;
    let dy = (oy - obs.c_obs.1) * z_obs / obs.f_obs.fy - (ty - t.c_tmp.1) * t.z_tmp / t.f_tmp.fy;
    Ok(Vec3::new(t.x_tmp + dx, t.y_tmp + dy, z_obs))
}

/// Full pose from the rank-1 hit of `result`.
pub fn lift_to_6d(result: &MatchResult, q: &QueryRecord, db: &TemplateDb) -> Result<Pose6D> {
    let hit = result
        .best()
        .ok_or_else(|| Error::invalid("match result has no hits"))?;
    if hit.template >= db.len() {
        return Err(Error::invalid(format!("template index {} out of range", hit.template)));
    }
    let obs = q
        .observation
        .as_ref()
        .ok_or_else(|| Error::invalid("query is missing field `observation` (box, c, f)"))?;
    let meta = db.meta(hit.template);
    let z = estimate_depth(&obs.box_obs, &meta.box_tmp, obs.f_obs, meta.f_tmp, meta.z_tmp)?;
    let t = estimate_translation(obs, meta, z)?;
    Pose6D::new(camera_rotation(&meta.rotation), t)
}
