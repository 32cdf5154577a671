//! Token-grid descriptors, the TMPD container, metadata manifests and the
//! template database.
//!
//! TMPD layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "TMPD"
//!      4     2  version (1)
//!      6     2  reserved (0)
//!      8     4  record count
//!     12     2  grid height
//!     14     2  grid width
//!     16     2  descriptor dim
//!     18     2  reserved (0)
//!     20     -  per record: height*width*dim f32 descriptors, then
//!               height*width mask bytes (0 or 1)
//! ```
//!
//! Record metadata lives in a JSON-lines manifest next to the binary file,
//! one line per record in the same order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{viewpoint_to_rotation, Rotation, Viewpoint};
use crate::similarity::token_norm;

pub const TMPD_MAGIC: &[u8; 4] = b"TMPD";
pub const TMPD_VERSION: u16 = 1;
pub const TMPD_HEADER_LEN: usize = 20;

/// An `height × width` grid of `dim`-dimensional token descriptors, stored
/// token-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if data.len() != height * width * dim {
            return Err(Error::invalid(format!(
                "grid {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite descriptor value at {i}")));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new(height, width, dim, vec![0.0; height * width * dim])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Token count `height * width`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }
}

/// Binary per-token mask over a token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// One TMPD record: a descriptor grid with its token mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub grid: TokenGrid,
    pub mask: TokenMask,
}

impl GridEntry {
    pub fn new(grid: TokenGrid, mask: TokenMask) -> Result<Self> {
        if (grid.height, grid.width) != (mask.height, mask.width) {
            return Err(Error::invalid("mask shape does not match grid shape"));
        }
        Ok(Self { grid, mask })
    }

    /// Entry with every token marked foreground.
    pub fn unmasked(grid: TokenGrid) -> Self {
        let mask = TokenMask::full(grid.height, grid.width);
        Self { grid, mask }
    }
}

fn shape_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u16")))
}

/// Serializes entries into a TMPD byte buffer.
pub fn encode_tmpd(entries: &[GridEntry]) -> Result<Vec<u8>> {
    let (h, w, d) = entries.first().map(|e| e.grid.shape()).unwrap_or((0, 0, 0));
    for (i, e) in entries.iter().enumerate() {
        if e.grid.shape() != (h, w, d) {
            return Err(Error::invalid(format!(
                "record {i} has shape {:?}, expected {:?}",
                e.grid.shape(),
                (h, w, d)
            )));
        }
        if (e.mask.height, e.mask.width) != (h, w) {
            return Err(Error::invalid(format!("record {i} mask shape mismatch")));
        }
    }
    let count = u32::try_from(entries.len()).map_err(|_| Error::invalid("too many records"))?;
    let record_len = h * w * d * 4 + h * w;
    let mut buf = Vec::with_capacity(TMPD_HEADER_LEN + record_len * entries.len());
    buf.extend_from_slice(TMPD_MAGIC);
    buf.extend_from_slice(&TMPD_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&shape_u16(h, "height")?.to_le_bytes());
    buf.extend_from_slice(&shape_u16(w, "width")?.to_le_bytes());
    buf.extend_from_slice(&shape_u16(d, "dim")?.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for e in entries {
        for v in e.grid.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(e.mask.bits.iter().map(|&b| b as u8));
    }
    Ok(buf)
}

/// Parsed TMPD header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TmpdHeader {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

pub fn decode_tmpd_header(bytes: &[u8]) -> Result<TmpdHeader> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != TMPD_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"TMPD\""));
    }
    if bytes.len() < TMPD_HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let version = le_u16(bytes, 4);
    if version != TMPD_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: TMPD_VERSION,
        });
    }
    let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header = TmpdHeader {
        count,
        height: le_u16(bytes, 12) as usize,
        width: le_u16(bytes, 14) as usize,
        dim: le_u16(bytes, 16) as usize,
    };
    if count > 0 && (header.height == 0 || header.width == 0 || header.dim == 0) {
        return Err(Error::format(12, "zero grid dimension with nonzero record count"));
    }
    Ok(header)
}

/// Parses a TMPD byte buffer.
pub fn decode_tmpd(bytes: &[u8]) -> Result<(TmpdHeader, Vec<GridEntry>)> {
    let header = decode_tmpd_header(bytes)?;
    let tokens = header.height * header.width;
    let record_len = tokens * header.dim * 4 + tokens;
    let expected = (record_len as u128) * header.count as u128 + TMPD_HEADER_LEN as u128;
    if (bytes.len() as u128) < expected {
        let complete = (bytes.len() - TMPD_HEADER_LEN) / record_len.max(1);
        let offset = TMPD_HEADER_LEN + complete * record_len;
        return Err(Error::format(
            offset as u64,
            format!(
                "truncated: {} records declared, data ends inside record {complete}",
                header.count
            ),
        ));
    }
    if (bytes.len() as u128) > expected {
        return Err(Error::format(expected as u64, "trailing bytes after last record"));
    }
    let mut entries = Vec::with_capacity(header.count);
    let mut pos = TMPD_HEADER_LEN;
    for _ in 0..header.count {
        let mut data = Vec::with_capacity(tokens * header.dim);
        for chunk in bytes[pos..pos + tokens * header.dim * 4].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::format(
                    (pos + data.len() * 4) as u64,
                    "non-finite descriptor value",
                ));
            }
            data.push(v);
        }
        pos += tokens * header.dim * 4;
        let mut bits = Vec::with_capacity(tokens);
        for (k, &b) in bytes[pos..pos + tokens].iter().enumerate() {
            match b {
                0 => bits.push(false),
                1 => bits.push(true),
                _ => {
                    return Err(Error::format(
                        (pos + k) as u64,
                        format!("mask byte {b} is not 0 or 1"),
                    ))
                }
            }
        }
        pos += tokens;
        let grid = TokenGrid::new(header.height, header.width, header.dim, data)?;
        let mask = TokenMask::new(header.height, header.width, bits)?;
        entries.push(GridEntry { grid, mask });
    }
    Ok((header, entries))
}

pub fn write_grids(path: &Path, entries: &[GridEntry]) -> Result<()> {
    let bytes = encode_tmpd(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grids(path: &Path) -> Result<Vec<GridEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tmpd(&bytes).map(|(_, entries)| entries)
}

/// Pixel rectangle: top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!("box extent {w}x{h} must be positive")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Focal length in pixels, possibly anisotropic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "FocalRepr", into = "FocalRepr")]
pub struct Focal {
    pub fx: f64,
    pub fy: f64,
}

impl Focal {
    pub fn isotropic(f: f64) -> Self {
        Self { fx: f, fy: f }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "focal length ({}, {}) must be positive",
                self.fx, self.fy
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FocalRepr {
    Scalar(f64),
    Pair([f64; 2]),
}

impl From<FocalRepr> for Focal {
    fn from(r: FocalRepr) -> Self {
        match r {
            FocalRepr::Scalar(f) => Focal::isotropic(f),
            FocalRepr::Pair([fx, fy]) => Focal { fx, fy },
        }
    }
}

impl From<Focal> for FocalRepr {
    fn from(f: Focal) -> Self {
        if f.fx == f.fy {
            FocalRepr::Scalar(f.fx)
        } else {
            FocalRepr::Pair([f.fx, f.fy])
        }
    }
}

/// One manifest line. Template manifests carry every field; query manifests
/// reuse the schema with ground-truth class/viewpoint/translation and the
/// observed box, principal point and focal length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_plane: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_tmp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_tmp: Option<Focal>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_tmp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_tmp: Option<f64>,
    /// Observed focal length in pixels (query manifests only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Focal>,
    /// Ground-truth translation in meters (query manifests only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
}

fn require<T: Copy>(v: Option<T>, field: &str, index: usize) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("record {index}: missing field `{field}`")))
}

impl ManifestRecord {
    pub fn viewpoint(&self) -> Result<Option<Viewpoint>> {
        match (self.azimuth, self.elevation) {
            (Some(az), Some(el)) => Viewpoint::new(az, el, self.in_plane.unwrap_or(0.0)).map(Some),
            (None, None) => Ok(None),
            _ => Err(Error::invalid("azimuth and elevation must be given together")),
        }
    }

    pub fn pixel_box(&self) -> Result<Option<PixelBox>> {
        self.bbox
            .map(|[x, y, w, h]| PixelBox::new(x, y, w, h))
            .transpose()
    }
}

/// Parses a JSON-lines manifest. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn encode_manifest(records: &[ManifestRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_manifest(records))
        .map_err(|e| Error::io(path, e))
}

/// Render metadata of one template.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMeta {
    pub class_id: String,
    pub viewpoint: Viewpoint,
    /// View rotation, see [`viewpoint_to_rotation`].
    pub rotation: Rotation,
    /// Render distance in meters.
    pub z_tmp: f64,
    pub f_tmp: Focal,
    pub box_tmp: PixelBox,
    /// Principal point in pixels.
    pub c_tmp: (f64, f64),
    /// Lateral template offset in meters; zero for templates rendered on axis.
    pub x_tmp: f64,
    pub y_tmp: f64,
}

impl TemplateMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_tmp > 0.0 && self.z_tmp.is_finite()) {
            return Err(Error::invalid(format!("z_tmp {} must be positive", self.z_tmp)));
        }
        self.f_tmp.validate()?;
        PixelBox::new(self.box_tmp.x, self.box_tmp.y, self.box_tmp.w, self.box_tmp.h)?;
        Ok(())
    }

    pub fn from_manifest(r: &ManifestRecord, index: usize) -> Result<Self> {
        let class_id = r
            .class_id
            .clone()
            .ok_or_else(|| Error::invalid(format!("record {index}: missing field `class_id`")))?;
        let viewpoint = Viewpoint::new(
            require(r.azimuth, "azimuth", index)?,
            require(r.elevation, "elevation", index)?,
            r.in_plane.unwrap_or(0.0),
        )?;
        let [x, y, w, h] = require(r.bbox, "box", index)?;
        let [cx, cy] = require(r.c, "c", index)?;
        let meta = Self {
            class_id,
            rotation: viewpoint_to_rotation(&viewpoint),
            viewpoint,
            z_tmp: require(r.z_tmp, "z_tmp", index)?,
            f_tmp: require(r.f_tmp, "f_tmp", index)?,
            box_tmp: PixelBox::new(x, y, w, h)
                .map_err(|e| Error::invalid(format!("record {index}: {e}")))?,
            c_tmp: (cx, cy),
            x_tmp: r.x_tmp.unwrap_or(0.0),
            y_tmp: r.y_tmp.unwrap_or(0.0),
        };
        meta.validate()
            .map_err(|e| Error::invalid(format!("record {index}: {e}")))?;
        Ok(meta)
    }

    pub fn to_manifest(&self) -> ManifestRecord {
        ManifestRecord {
            class_id: Some(self.class_id.clone()),
            azimuth: Some(self.viewpoint.azimuth()),
            elevation: Some(self.viewpoint.elevation()),
            in_plane: Some(self.viewpoint.in_plane()),
            z_tmp: Some(self.z_tmp),
            f_tmp: Some(self.f_tmp),
            bbox: Some(self.box_tmp.to_array()),
            c: Some([self.c_tmp.0, self.c_tmp.1]),
            x_tmp: (self.x_tmp != 0.0).then_some(self.x_tmp),
            y_tmp: (self.y_tmp != 0.0).then_some(self.y_tmp),
            f: None,
            translation: None,
        }
    }
}

/// A template: descriptors, mask and render metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateRecord {
    pub meta: TemplateMeta,
    pub grid: TokenGrid,
    pub mask: TokenMask,
}

/// Immutable template database with a contiguous, template-major
/// descriptor block and precomputed per-token norms.
#[derive(Debug)]
pub struct TemplateDb {
    height: usize,
    width: usize,
    dim: usize,
    descriptors: Vec<f32>,
    token_norms: Vec<f64>,
    masks: Vec<bool>,
    meta: Vec<TemplateMeta>,
    class_index: BTreeMap<String, Vec<usize>>,
}

/// Borrowed view of one template inside a [`TemplateDb`].
#[derive(Clone, Copy, Debug)]
pub struct TemplateView<'a> {
    pub index: usize,
    pub meta: &'a TemplateMeta,
    pub descriptors: &'a [f32],
    pub token_norms: &'a [f64],
    pub mask: &'a [bool],
}

/// Incremental builder; appends straight into the contiguous block so large
/// databases never hold a second copy of the descriptors.
#[derive(Debug)]
pub struct TemplateDbBuilder {
    db: TemplateDb,
}

impl TemplateDbBuilder {
    pub fn new(height: usize, width: usize, dim: usize) -> Self {
        Self::with_capacity(height, width, dim, 0)
    }

    pub fn with_capacity(height: usize, width: usize, dim: usize, n: usize) -> Self {
        let t = height * width;
        Self {
            db: TemplateDb {
                height,
                width,
                dim,
                descriptors: Vec::with_capacity(n * t * dim),
                token_norms: Vec::with_capacity(n * t),
                masks: Vec::with_capacity(n * t),
                meta: Vec::with_capacity(n),
                class_index: BTreeMap::new(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.db.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.db.meta.is_empty()
    }

    /// Appends one template from raw parts.
    pub fn push_parts(&mut self, meta: TemplateMeta, descriptors: &[f32], mask: &[bool]) -> Result<()> {
        let index = self.db.meta.len();
        let t = self.db.height * self.db.width;
        let d = self.db.dim;
        if descriptors.len() != t * d || mask.len() != t {
            return Err(Error::invalid(format!(
                "record {index}: shape does not match database grid {}x{}x{}",
                self.db.height, self.db.width, d
            )));
        }
        if !mask.iter().any(|b| *b) {
            return Err(Error::invalid(format!("record {index}: template mask is empty")));
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("record {index}: non-finite descriptor")));
        }
        meta.validate()
            .map_err(|e| Error::invalid(format!("record {index}: {e}")))?;
        self.db.descriptors.extend_from_slice(descriptors);
        self.db
            .token_norms
            .extend(descriptors.chunks_exact(d).map(token_norm));
        self.db.masks.extend_from_slice(mask);
        self.db
            .class_index
            .entry(meta.class_id.clone())
            .or_default()
            .push(index);
        self.db.meta.push(meta);
        Ok(())
    }

    pub fn push(&mut self, record: TemplateRecord) -> Result<()> {
        let index = self.db.meta.len();
        if record.grid.height() != self.db.height
            || record.grid.width() != self.db.width
            || record.grid.dim() != self.db.dim
        {
            return Err(Error::invalid(format!(
                "record {index}: grid shape {:?} differs from {:?}",
                record.grid.shape(),
                (self.db.height, self.db.width, self.db.dim)
            )));
        }
        self.push_parts(record.meta, record.grid.data(), record.mask.bits())
    }

    pub fn finish(self) -> Result<TemplateDb> {
        if self.db.meta.is_empty() {
            return Err(Error::invalid("template database needs at least one record"));
        }
        Ok(self.db)
    }
}

/// Builds a database from records, preserving their order.
pub fn build_db(records: Vec<TemplateRecord>) -> Result<TemplateDb> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("template database needs at least one record"))?;
    let (h, w, d) = first.grid.shape();
    let mut builder = TemplateDbBuilder::with_capacity(h, w, d, records.len());
    for r in records {
        builder.push(r)?;
    }
    builder.finish()
}

impl TemplateDb {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim)
    }

    pub fn tokens_per_template(&self) -> usize {
        self.height * self.width
    }

    pub fn meta(&self, index: usize) -> &TemplateMeta {
        &self.meta[index]
    }

    pub fn class_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.class_index
    }

    pub fn class_indices(&self, class_id: &str) -> Option<&[usize]> {
        self.class_index.get(class_id).map(Vec::as_slice)
    }

    pub fn template(&self, index: usize) -> TemplateView<'_> {
        let t = self.tokens_per_template();
        let d = self.dim;
        TemplateView {
            index,
            meta: &self.meta[index],
            descriptors: &self.descriptors[index * t * d..(index + 1) * t * d],
            token_norms: &self.token_norms[index * t..(index + 1) * t],
            mask: &self.masks[index * t..(index + 1) * t],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = TemplateView<'_>> + '_ {
        (0..self.len()).map(|i| self.template(i))
    }

    /// Owned copy of one template.
    pub fn record(&self, index: usize) -> TemplateRecord {
        let v = self.template(index);
        TemplateRecord {
            meta: v.meta.clone(),
            grid: TokenGrid::new(self.height, self.width, self.dim, v.descriptors.to_vec())
                .expect("database grids are valid"),
            mask: TokenMask::new(self.height, self.width, v.mask.to_vec())
                .expect("database masks are valid"),
        }
    }

    /// Heap bytes held by the numeric blocks (descriptors, norms, masks).
    pub fn memory_bytes(&self) -> usize {
        self.descriptors.capacity() * std::mem::size_of::<f32>()
            + self.token_norms.capacity() * std::mem::size_of::<f64>()
            + self.masks.capacity()
    }

    /// Loads a database from a TMPD file and its manifest.
    pub fn load(tmpd: &Path, manifest: &Path) -> Result<Self> {
        let bytes = fs::read(tmpd).map_err(|e| Error::io(tmpd, e))?;
        let records = read_manifest(manifest)?;
        Self::from_parts(&bytes, &records)
    }

    pub fn from_parts(tmpd: &[u8], manifest: &[ManifestRecord]) -> Result<Self> {
        let (header, entries) = decode_tmpd(tmpd)?;
        if header.count != manifest.len() {
            return Err(Error::invalid(format!(
                "descriptor file has {} records but manifest has {}",
                header.count,
                manifest.len()
            )));
        }
        let mut builder =
            TemplateDbBuilder::with_capacity(header.height, header.width, header.dim, header.count);
        for (i, (entry, rec)) in entries.into_iter().zip(manifest).enumerate() {
            let meta = TemplateMeta::from_manifest(rec, i)?;
            builder.push(TemplateRecord {
                meta,
                grid: entry.grid,
                mask: entry.mask,
            })?;
        }
        builder.finish()
    }

    /// Encodes the database back to TMPD bytes and manifest bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let entries: Vec<GridEntry> = (0..self.len())
            .map(|i| {
                let r = self.record(i);
                GridEntry {
                    grid: r.grid,
                    mask: r.mask,
                }
            })
            .collect();
        let manifest: Vec<ManifestRecord> = self.meta.iter().map(TemplateMeta::to_manifest).collect();
        Ok((encode_tmpd(&entries)?, encode_manifest(&manifest)))
    }

    pub fn save(&self, tmpd: &Path, manifest: &Path) -> Result<()> {
        let (bin, text) = self.encode()?;
        fs::write(tmpd, bin).map_err(|e| Error::io(tmpd, e))?;
        fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
    }
}
