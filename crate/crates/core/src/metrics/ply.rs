//! ASCII PLY reader for vertex positions and triangular faces.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

use super::render::TriMesh;

struct Element {
    name: String,
    count: usize,
    /// Scalar property names; list properties are recorded as `None`.
    props: Vec<Option<String>>,
}

/// Parses an ASCII PLY document. Extra vertex properties and extra elements
/// are skipped; faces must be triangles.
pub fn parse_ply(text: &str) -> Result<TriMesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::parse(1, "missing `ply` magic")),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::parse(0, "header ended without `end_header`"))?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(Error::parse(n, "only ASCII PLY is supported"));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| Error::parse(n, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(n, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(n, "property before any element"))?;
                let words: Vec<&str> = tok.collect();
                match words.as_slice() {
                    ["list", _, _, _name] => el.props.push(None),
                    [_ty, name] => el.props.push(Some(name.to_string())),
                    _ => return Err(Error::parse(n, "malformed property")),
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::parse(n, format!("unknown header keyword `{other}`"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(1, "missing `format` line"));
    }

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let pos = |axis: &str| {
                    el.props
                        .iter()
                        .position(|p| p.as_deref() == Some(axis))
                        .ok_or_else(|| Error::parse(0, format!("vertex element lacks `{axis}`")))
                };
                let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
                if el.props.iter().any(Option::is_none) {
                    return Err(Error::parse(0, "list properties on vertices are not supported"));
                }
                for _ in 0..el.count {
                    let (n, line) = lines.next().ok_or_else(|| Error::parse(0, "missing vertex lines"))?;
                    let vals: Vec<f64> = line
                        .split_whitespace()
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::parse(n, format!("bad vertex value: {e}")))?;
                    if vals.len() != el.props.len() {
                        return Err(Error::parse(n, "vertex property count mismatch"));
                    }
                    let v = Vec3::new(vals[ix], vals[iy], vals[iz]);
                    if v.iter().any(|c| !c.is_finite()) {
                        return Err(Error::parse(n, "non-finite vertex coordinate"));
                    }
                    vertices.push(v);
                }
            }
            "face" => {
                if el.props.len() != 1 || el.props[0].is_some() {
                    return Err(Error::parse(0, "face element must hold a single index list"));
                }
                for _ in 0..el.count {
                    let (n, line) = lines.next().ok_or_else(|| Error::parse(0, "missing face lines"))?;
                    let idx: Vec<usize> = line
                        .split_whitespace()
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::parse(n, format!("bad face index: {e}")))?;
                    match idx.as_slice() {
                        [3, a, b, c] => triangles.push([*a, *b, *c]),
                        [k, ..] if *k != 3 => return Err(Error::parse(n, "only triangular faces are supported")),
                        _ => return Err(Error::parse(n, "face index count mismatch")),
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    lines.next().ok_or_else(|| Error::parse(0, format!("missing `{}` lines", el.name)))?;
                }
            }
        }
    }
    TriMesh::new(vertices, triangles)
}

/// Writes a mesh as ASCII PLY.
pub fn write_ply(mesh: &TriMesh) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    for v in &mesh.vertices {
        s.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for [a, b, c] in &mesh.triangles {
        s.push_str(&format!("3 {a} {b} {c}\n"));
    }
    s
}
