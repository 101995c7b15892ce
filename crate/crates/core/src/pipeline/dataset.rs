use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dgm::{read_raw_field, FramePair};
use crate::error::{Error, Result};
use crate::regions::{load_landmarks, LandmarkSet};
use crate::tensor::{Real, Tensor};

/// The three general classes, indexed in this order.
pub const CLASS_NAMES: [&str; 3] = ["negative", "positive", "surprise"];

pub fn class_index(name: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name.trim()))
        .ok_or_else(|| Error::usage(format!("unknown class {name:?}; expected one of {CLASS_NAMES:?}")))
}

/// One labelled sequence: onset is `frames[0]`, the labelled apex is `frames[apex]`.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub subject: String,
    /// Source dataset name, for per-part reporting.
    pub domain: String,
    pub label: usize,
    pub frames: Vec<Tensor<T>>,
    pub apex: usize,
    /// Landmarks of the onset frame.
    pub landmarks: LandmarkSet,
    /// Externally computed displacement `[2, h, w]` in pixels, if provided.
    pub flow: Option<Tensor<T>>,
}

/// Whether frames are loaded for training (apex may be jittered) or evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    Train,
    Eval,
}

impl<T: Real> Sample<T> {
    pub fn pair_at(&self, apex: usize) -> Result<FramePair<T>> {
        let frame = self
            .frames
            .get(apex)
            .ok_or_else(|| Error::usage(format!("apex {apex} outside a {}-frame sequence", self.frames.len())))?;
        FramePair::new(self.frames[0].clone(), frame.clone(), self.subject.clone(), Some(self.label))
    }

    /// The labelled pair.
    pub fn pair(&self) -> Result<FramePair<T>> {
        self.pair_at(self.apex)
    }

    /// Apex index used when loading: jittered by ±1 in training when enabled,
    /// always the labelled apex in evaluation.
    pub fn load_apex<R: Rng + ?Sized>(&self, mode: LoadMode, jitter: bool, rng: &mut R) -> Result<usize> {
        match mode {
            LoadMode::Train if jitter => jitter_index(self.frames.len(), self.apex, rng),
            _ => Ok(self.apex),
        }
    }
}

/// Neighbour of `apex` chosen uniformly among those inside `[0, len)`.
pub fn jitter_index<R: Rng + ?Sized>(len: usize, apex: usize, rng: &mut R) -> Result<usize> {
    if apex >= len {
        return Err(Error::usage(format!("apex {apex} outside a {len}-frame sequence")));
    }
    let below = apex > 0;
    let above = apex + 1 < len;
    match (below, above) {
        (true, true) => Ok(if rng.random_bool(0.5) { apex + 1 } else { apex - 1 }),
        (true, false) => Ok(apex - 1),
        (false, true) => Ok(apex + 1),
        (false, false) => Err(Error::usage("apex jitter needs a sequence of at least 2 frames")),
    }
}

/// Onset/apex pair with the apex replaced by a random neighbour.
pub fn apex_jitter<T: Real, R: Rng + ?Sized>(
    sequence: &[Tensor<T>],
    apex: usize,
    subject: &str,
    label: Option<usize>,
    rng: &mut R,
) -> Result<FramePair<T>> {
    let j = jitter_index(sequence.len(), apex, rng)?;
    FramePair::new(sequence[0].clone(), sequence[j].clone(), subject, label)
}

/// A labelled collection of sequences sharing one frame geometry.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::usage("dataset is empty"))?;
        let shape = first.frames.first().ok_or_else(|| Error::usage("sample without frames"))?.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("dataset", format!("frames must be [M, h, w], got {shape:?}")));
        }
        for s in &samples {
            if s.subject.is_empty() {
                return Err(Error::usage(format!("sample {} has no subject id", s.id)));
            }
            if s.label >= CLASS_NAMES.len() {
                return Err(Error::usage(format!("sample {} has label {} outside the 3 classes", s.id, s.label)));
            }
            if s.frames.len() < 2 || s.apex == 0 || s.apex >= s.frames.len() {
                return Err(Error::usage(format!(
                    "sample {} needs an onset and an apex (apex {} of {} frames)",
                    s.id,
                    s.apex,
                    s.frames.len()
                )));
            }
            if s.frames.iter().any(|f| f.shape() != shape.as_slice()) {
                return Err(Error::shape("dataset", format!("sample {} frames differ from {shape:?}", s.id)));
            }
            if let Some(f) = &s.flow {
                if f.shape() != [2, shape[1], shape[2]] {
                    return Err(Error::shape("dataset", format!("sample {} flow has shape {:?}", s.id, f.shape())));
                }
            }
            s.landmarks.check_bounds(shape[2], shape[1])?;
        }
        Ok(Self { samples, channels: shape[0], height: shape[1], width: shape[2] })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn loso_split(&self) -> Result<Vec<Fold>> {
        let subjects: Vec<&str> = self.samples.iter().map(|s| s.subject.as_str()).collect();
        loso_split(&subjects)
    }
}

/// One leave-one-subject-out fold: indices into the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject (sorted), given each sample's subject.
pub fn loso_split<S: AsRef<str>>(subjects: &[S]) -> Result<Vec<Fold>> {
    let distinct: BTreeSet<&str> = subjects.iter().map(|s| s.as_ref()).collect();
    if distinct.len() < 2 {
        return Err(Error::usage(format!("LOSO needs at least 2 subjects, found {}", distinct.len())));
    }
    Ok(distinct
        .into_iter()
        .map(|held| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..subjects.len()).partition(|&i| subjects[i].as_ref() == held);
            Fold { subject: held.to_string(), train, test }
        })
        .collect())
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub subject: String,
    #[serde(default)]
    pub domain: String,
    pub label: String,
    pub apex: usize,
    pub landmarks: String,
    /// Frame paths separated by `;`, onset first.
    pub frames: String,
    /// Optional raw displacement file.
    #[serde(default)]
    pub flow: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 2, msg: e.to_string() })
        })
        .collect()
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), line: 0, msg: format!("{other:?}") },
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel.trim())
}

/// Load every sample listed in a manifest, reading frames as `channels`-channel images.
pub fn load_dataset<T: Real>(manifest: &Path, channels: usize) -> Result<Dataset<T>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let frames = row
            .frames
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|f| read_image(&resolve(base, f), channels))
            .collect::<Result<Vec<Tensor<T>>>>()?;
        let shape = frames.first().map(|f| f.shape().to_vec()).unwrap_or_default();
        if shape.len() != 3 {
            return Err(Error::usage(format!("sample {} lists no frames", row.id)));
        }
        let landmarks = load_landmarks(&resolve(base, &row.landmarks), shape[2], shape[1])?;
        let flow = if row.flow.trim().is_empty() {
            None
        } else {
            let field = read_raw_field::<T>(&resolve(base, &row.flow), 1.0)?;
            let mut t = field.to_channels_first();
            t = t.reshape(&[2, field.height(), field.width()])?;
            Some(t)
        };
        samples.push(Sample {
            label: class_index(&row.label)?,
            id: row.id,
            subject: row.subject,
            domain: row.domain,
            frames,
            apex: row.apex,
            landmarks,
            flow,
        });
    }
    Dataset::new(samples)
}

/// Read a PNG/PGM into `[channels, h, w]` with values in `[0, 1]`.
pub fn read_image<T: Real>(path: &Path, channels: usize) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), msg: other.to_string() },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::Config(format!("images must have 1 or 3 channels, not {c}"))),
    };
    let mut data = vec![T::zero(); channels * h * w];
    for (p, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * h * w + p] = T::of(v as f64 / 255.0);
        }
    }
    Tensor::new(&[channels, h, w], data)
}

/// Write a `[1 or 3, h, w]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn write_image<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("write_image", format!("expected [1|3, h, w], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut raw = vec![0u8; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            raw[p * c + ch] = to_byte(t.data()[ch * h * w + p].f64());
        }
    }
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &raw, w as u32, h as u32, color)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}

/// Nearest 8-bit level of a `[0, 1]` value.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
