//! Triangle meshes and a z-buffered depth rasterizer.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::pose::Pose6D;
use crate::store::Focal;

/// Pinhole intrinsics in pixels. Pixel `(u, v)` covers `[u, u+1) × [v, v+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(focal: Focal, principal: (f64, f64)) -> Self {
        Self {
            fx: focal.fx,
            fy: focal.fy,
            cx: principal.0,
            cy: principal.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("degenerate intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Ratio of ray length to depth at image point `(u, v)`.
    pub fn ray_scale(&self, u: f64, v: f64) -> f64 {
        let a = (u - self.cx) / self.fx;
        let b = (v - self.cy) / self.fy;
        (1.0 + a * a + b * b).sqrt()
    }
}

/// Per-pixel distance from the camera center in meters; 0 means no surface.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("depth map size mismatch"));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("depth values must be finite and non-negative"));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn covered(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::invalid(format!("triangle {i} references a missing vertex")));
            }
        }
        if vertices.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid("mesh vertices must be finite"));
        }
        Ok(Self { vertices, triangles })
    }

    /// Number of zero-area triangles (kept, they rasterize to nothing).
    pub fn degenerate_triangles(&self) -> usize {
        self.triangles
            .iter()
            .filter(|[a, b, c]| {
                let (a, b, c) = (self.vertices[*a], self.vertices[*b], self.vertices[*c]);
                (b - a).cross(&(c - a)).norm() == 0.0
            })
            .count()
    }

    /// Axis-aligned cube of side `side` centered at the origin.
    pub fn cube(side: f64) -> Self {
        let h = side / 2.0;
        let vertices = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 == 0 { -h } else { h },
                    if i & 2 == 0 { -h } else { h },
                    if i & 4 == 0 { -h } else { h },
                )
            })
            .collect();
        let triangles = vec![
            [0, 2, 1], [1, 2, 3], // z-
            [4, 5, 6], [5, 7, 6], // z+
            [0, 1, 4], [1, 5, 4], // y-
            [2, 6, 3], [3, 6, 7], // y+
            [0, 4, 2], [2, 4, 6], // x-
            [1, 3, 5], [3, 7, 5], // x+
        ];
        Self { vertices, triangles }
    }

    /// Latitude/longitude sphere with `stacks` rings and `slices` segments.
    pub fn uv_sphere(radius: f64, stacks: usize, slices: usize) -> Self {
        let stacks = stacks.max(2);
        let slices = slices.max(3);
        let mut vertices = vec![Vec3::new(0.0, 0.0, radius)];
        for i in 1..stacks {
            let theta = std::f64::consts::PI * i as f64 / stacks as f64;
            for j in 0..slices {
                let phi = std::f64::consts::TAU * j as f64 / slices as f64;
                vertices.push(radius * Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, -radius));
        let bottom = vertices.len() - 1;
        let ring = |i: usize, j: usize| 1 + (i - 1) * slices + j % slices;
        let mut triangles = Vec::new();
        for j in 0..slices {
            triangles.push([0, ring(1, j), ring(1, j + 1)]);
            triangles.push([bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
        }
        for i in 1..stacks - 1 {
            for j in 0..slices {
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
                triangles.push([a, c, b]);
                triangles.push([b, c, d]);
            }
        }
        Self { vertices, triangles }
    }

    /// Longest edge length, useful as a tessellation bound.
    pub fn max_edge(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|[a, b, c]| [(*a, *b), (*b, *c), (*c, *a)])
            .map(|(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .fold(0.0, f64::max)
    }
}

const NEAR: f64 = 1e-6;

#[inline]
fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Rasterizes `mesh` under `pose` into a distance map. Both triangle windings
/// are drawn; triangles with a vertex at or behind the camera plane are
/// skipped.
pub fn render_depth(mesh: &TriMesh, pose: &Pose6D, intr: &Intrinsics, width: usize, height: usize) -> Result<DepthMap> {
    intr.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::invalid("render target must be non-empty"));
    }
    if !(pose.translation.z > 0.0) {
        return Err(Error::invalid("pose must place the object in front of the camera"));
    }
    let mut depth = DepthMap::zeros(width, height);
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|v| pose.transform(v)).collect();
    for tri in &mesh.triangles {
        let p = [cam[tri[0]], cam[tri[1]], cam[tri[2]]];
        if p.iter().any(|v| v.z <= NEAR) {
            continue;
        }
        let s: Vec<(f64, f64)> = p.iter().map(|v| intr.project(v)).collect();
        let area = edge(s[0].0, s[0].1, s[1].0, s[1].1, s[2].0, s[2].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = s.iter().map(|v| v.0).fold(f64::INFINITY, f64::min).floor().max(0.0);
        let max_x = s.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(width as f64);
        let min_y = s.iter().map(|v| v.1).fold(f64::INFINITY, f64::min).floor().max(0.0);
        let max_y = s.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(height as f64);
        if min_x >= max_x || min_y >= max_y {
            continue;
        }
        let inv_z = [1.0 / p[0].z, 1.0 / p[1].z, 1.0 / p[2].z];
        for y in min_y as usize..max_y as usize {
            let py = y as f64 + 0.5;
            for x in min_x as usize..max_x as usize {
                let px = x as f64 + 0.5;
                let w0 = edge(s[1].0, s[1].1, s[2].0, s[2].1, px, py) / area;
                let w1 = edge(s[2].0, s[2].1, s[0].0, s[0].1, px, py) / area;
                let w2 = edge(s[0].0, s[0].1, s[1].0, s[1].1, px, py) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
                let d = z * intr.ray_scale(px, py);
                let slot = &mut depth.data[y * width + x];
                if *slot == 0.0 || d < *slot {
                    *slot = d;
                }
            }
        }
    }
    Ok(depth)
}
