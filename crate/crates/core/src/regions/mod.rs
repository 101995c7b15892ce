//! Facial geometry: landmark files, action-unit crop boxes, crop/resize and
//! patch tiling.

mod crop;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crop::{crop_resize, crop_resize_batch, patch_tokens, patchify, unpatchify};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;

/// Index of each landmark's horizontal mirror in the 68-point layout.
pub const MIRROR: [usize; NUM_LANDMARKS] = {
    let mut m = [0usize; NUM_LANDMARKS];
    let mut i = 0;
    while i < NUM_LANDMARKS {
        m[i] = match i {
            0..=16 => 16 - i,
            17..=26 => 43 - i,
            27..=30 => i,
            31..=35 => 66 - i,
            36..=39 => 81 - i,
            40 | 41 => 87 - i,
            42..=45 => 81 - i,
            46 | 47 => 87 - i,
            48..=54 => 102 - i,
            55..=59 => 114 - i,
            60..=64 => 124 - i,
            _ => 132 - i,
        };
        i += 1;
    }
    m
};

/// 68 facial landmarks in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Geometry(format!("expected {NUM_LANDMARKS} landmarks, got {}", points.len())));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Geometry("landmarks must be finite".into()));
        }
        Ok(Self { points })
    }

    /// Error unless every point lies inside a `width × height` image.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for (i, &(x, y)) in self.points.iter().enumerate() {
            if x < 0.0 || y < 0.0 || x > width as f64 || y > height as f64 {
                return Err(Error::Geometry(format!("landmark {i} at ({x}, {y}) outside {width}x{height} image")));
            }
        }
        Ok(())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { points: self.points.iter().map(|&(x, y)| (x + dx, y + dy)).collect() }
    }

    /// Reflect about the vertical line `x = axis`, relabelling so each point
    /// keeps its anatomical role.
    pub fn mirror(&self, axis: f64) -> Self {
        Self { points: (0..NUM_LANDMARKS).map(|i| (2.0 * axis - self.points[MIRROR[i]].0, self.points[MIRROR[i]].1)).collect() }
    }
}

/// Read a landmark file of 68 lines `x y`, checked against the image size.
pub fn load_landmarks(path: &Path, width: usize, height: usize) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(line_no, format!("expected \"x y\", found {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(line_no, format!("not a number: {s:?}")));
        points.push((num(fields[0])?, num(fields[1])?));
    }
    if points.len() != NUM_LANDMARKS {
        return Err(parse_err(
            text.lines().count(),
            format!("expected {NUM_LANDMARKS} landmarks, found {}", points.len()),
        ));
    }
    let set = LandmarkSet::new(points)?;
    set.check_bounds(width, height)?;
    Ok(set)
}

pub fn write_landmarks(set: &LandmarkSet, path: &Path) -> Result<()> {
    let text: String = set.points.iter().map(|(x, y)| format!("{x} {y}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Axis-aligned box in continuous pixel coordinates: pixel `(i, j)` covers
/// `[j, j+1) × [i, i+1)`, so the whole image is `[0, w] × [0, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl AuBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersects_image(&self, width: usize, height: usize) -> bool {
        self.x0 < width as f64 && self.x1 > 0.0 && self.y0 < height as f64 && self.y1 > 0.0
    }

    fn padded_square(&self, padding: f64) -> Self {
        let (w, h) = (self.width(), self.height());
        let (w, h) = (w * (1.0 + 2.0 * padding), h * (1.0 + 2.0 * padding));
        let side = w.max(h);
        let (cx, cy) = ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0);
        Self { x0: cx - side / 2.0, y0: cy - side / 2.0, x1: cx + side / 2.0, y1: cy + side / 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub anchors: Vec<usize>,
}

/// Mapping from action-unit regions to landmark anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuGeometry {
    pub padding: f64,
    pub full_face_padding: f64,
    #[serde(rename = "region")]
    pub regions: Vec<RegionSpec>,
}

pub const DEFAULT_GEOMETRY: &str = include_str!("../../assets/au_geometry.toml");

impl Default for AuGeometry {
    fn default() -> Self {
        Self::parse(DEFAULT_GEOMETRY).expect("shipped geometry is valid")
    }
}

impl AuGeometry {
    pub fn parse(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(format!("geometry: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::Config("geometry defines no regions".into()));
        }
        if !(self.padding >= 0.0 && self.full_face_padding >= 0.0) {
            return Err(Error::Config("padding must be non-negative".into()));
        }
        for r in &self.regions {
            if r.anchors.is_empty() || r.anchors.iter().any(|&a| a >= NUM_LANDMARKS) {
                return Err(Error::Config(format!("region {} needs anchors in 0..{NUM_LANDMARKS}", r.name)));
            }
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }
}

/// The action-unit boxes of one face plus its full-face box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuRegionSet {
    pub names: Vec<String>,
    pub boxes: Vec<AuBox>,
    pub full_face: AuBox,
}

fn anchor_box(lm: &LandmarkSet, anchors: impl Iterator<Item = usize>, what: &str) -> Result<AuBox> {
    let mut b = AuBox { x0: f64::INFINITY, y0: f64::INFINITY, x1: f64::NEG_INFINITY, y1: f64::NEG_INFINITY };
    for a in anchors {
        let (x, y) = lm.points[a];
        b = AuBox { x0: b.x0.min(x), y0: b.y0.min(y), x1: b.x1.max(x), y1: b.y1.max(y) };
    }
    if !(b.area() > 0.0) {
        return Err(Error::Geometry(format!("anchors of {what} span zero area")));
    }
    Ok(b)
}

/// Padded, squared bounding boxes of each region's anchors, plus the
/// full-face box around all landmarks.
pub fn compute_au_boxes(lm: &LandmarkSet, geometry: &AuGeometry) -> Result<AuRegionSet> {
    let boxes = geometry
        .regions
        .iter()
        .map(|r| Ok(anchor_box(lm, r.anchors.iter().copied(), &r.name)?.padded_square(geometry.padding)))
        .collect::<Result<Vec<_>>>()?;
    let full_face = anchor_box(lm, 0..NUM_LANDMARKS, "full face")?.padded_square(geometry.full_face_padding);
    Ok(AuRegionSet { names: geometry.regions.iter().map(|r| r.name.clone()).collect(), boxes, full_face })
}

/// Uniform `n × n` split of the full-face box, row-major.
pub fn grid_boxes(full_face: &AuBox, n: usize) -> AuRegionSet {
    let (cw, ch) = (full_face.width() / n as f64, full_face.height() / n as f64);
    let mut boxes = Vec::with_capacity(n * n);
    let mut names = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let x0 = full_face.x0 + c as f64 * cw;
            let y0 = full_face.y0 + r as f64 * ch;
            boxes.push(AuBox { x0, y0, x1: x0 + cw, y1: y0 + ch });
            names.push(format!("cell_{r}_{c}"));
        }
    }
    AuRegionSet { names, boxes, full_face: *full_face }
}
