//! Procedural micro-expression sequences with known displacement.
//!
//! A face is a continuous intensity function built from its 68 landmarks
//! (head ellipse, textured skin, brow/eye/nose/mouth strokes). Frame `k` of a
//! sequence samples that function at `p + s_k·D(p)`, where `D` is a smooth
//! class-specific backward field and `s_k` the expression intensity, so `D` is
//! the exact backward displacement from onset to apex.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{to_byte, write_image, write_manifest, Dataset, ManifestRow, Sample, CLASS_NAMES};
use crate::dgm::{write_raw_field, DisplacementField};
use crate::error::{Error, Result};
use crate::regions::{write_landmarks, LandmarkSet, NUM_LANDMARKS};
use crate::tensor::{Real, Tensor};

/// Appearance shift applied to every subject assigned to a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub brightness: f64,
    pub contrast: f64,
    pub amplitude_scale: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self { name: "synthetic".into(), brightness: 0.0, contrast: 1.0, amplitude_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub subjects: usize,
    /// Number of classes used, taken in order from the class list.
    pub classes: usize,
    pub samples_per_class: usize,
    pub size: usize,
    pub frames: usize,
    pub apex: usize,
    /// Peak displacement range in pixels at a 128-pixel frame.
    pub amplitude: (f64, f64),
    pub seed: u64,
    /// Subjects are assigned to domains round-robin.
    pub domains: Vec<DomainSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            subjects: 10,
            classes: 3,
            samples_per_class: 6,
            size: 128,
            frames: 7,
            apex: 3,
            amplitude: (2.5, 4.0),
            seed: 0,
            domains: vec![DomainSpec::default()],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::usage("synthetic dataset needs at least one subject, class and sample"));
        }
        if self.classes > CLASS_NAMES.len() {
            return Err(Error::usage(format!("at most {} classes are defined", CLASS_NAMES.len())));
        }
        if self.size < 32 {
            return Err(Error::usage(format!("frame size {} is too small for a face", self.size)));
        }
        if self.frames < 2 || self.apex == 0 || self.apex >= self.frames {
            return Err(Error::usage(format!("apex {} must lie in 1..{}", self.apex, self.frames)));
        }
        let (lo, hi) = self.amplitude;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::usage(format!("amplitude range {:?} is invalid", self.amplitude)));
        }
        if self.domains.is_empty() {
            return Err(Error::usage("at least one domain is required"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.subjects * self.classes * self.samples_per_class
    }

    /// Expression intensity of frame `k`: rises to 1 at the apex, then decays.
    pub fn intensity(&self, k: usize) -> f64 {
        if k <= self.apex {
            let t = k as f64 / self.apex as f64;
            0.5 - 0.5 * (std::f64::consts::PI * t).cos()
        } else {
            let t = (k - self.apex) as f64 / (self.frames - self.apex) as f64;
            1.0 - 0.75 * t
        }
    }
}

/// Generated data plus the ground truth behind it.
#[derive(Clone, Debug)]
pub struct SyntheticDataset<T> {
    pub dataset: Dataset<T>,
    /// Backward displacement onset→apex per sample, `[2, h, w]` in pixels.
    pub fields: Vec<Tensor<T>>,
    pub spec: SyntheticSpec,
}

/// Canonical 68-point layout of a frontal face in a 128-pixel frame.
fn template() -> Vec<(f64, f64)> {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let t = std::f64::consts::PI * i as f64 / 16.0;
        p.push((64.0 - 40.0 * t.cos(), 58.0 + 50.0 * t.sin()));
    }
    for i in 0..5 {
        let u = i as f64 / 4.0;
        p.push((34.0 + 24.0 * u, 42.0 - 4.0 * (std::f64::consts::PI * u).sin()));
    }
    for i in 0..5 {
        let u = i as f64 / 4.0;
        p.push((70.0 + 24.0 * u, 42.0 - 4.0 * (std::f64::consts::PI * u).sin()));
    }
    p.extend([(64.0, 50.0), (64.0, 57.0), (64.0, 64.0), (64.0, 71.0)]);
    p.extend([(56.0, 76.0), (60.0, 78.0), (64.0, 79.0), (68.0, 78.0), (72.0, 76.0)]);
    p.extend([(38.0, 52.0), (43.0, 49.0), (49.0, 49.0), (54.0, 52.0), (49.0, 55.0), (43.0, 55.0)]);
    p.extend([(74.0, 52.0), (79.0, 49.0), (85.0, 49.0), (90.0, 52.0), (85.0, 55.0), (79.0, 55.0)]);
    p.extend([
        (50.0, 92.0),
        (54.0, 89.0),
        (58.0, 87.5),
        (64.0, 88.5),
        (70.0, 87.5),
        (74.0, 89.0),
        (78.0, 92.0),
        (74.0, 95.5),
        (70.0, 97.5),
        (64.0, 98.0),
        (58.0, 97.5),
        (54.0, 95.5),
    ]);
    p.extend([(52.0, 92.0), (58.0, 90.5), (64.0, 91.0), (70.0, 90.5), (76.0, 92.0), (70.0, 93.5), (64.0, 94.0), (58.0, 93.5)]);
    p
}

/// Per-subject look and face shape.
#[derive(Clone, Debug)]
struct Appearance {
    background: f64,
    skin: f64,
    darkness: f64,
    /// `(amplitude, kx, ky, phase)` of each skin texture wave.
    texture: Vec<(f64, f64, f64, f64)>,
    brightness: f64,
    contrast: f64,
}

/// Subject landmarks: the template with mirrored shape variation, scaled,
/// shifted and resized to `size`.
fn subject_landmarks<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<(f64, f64)> {
    let mut p = template();
    let eye_spread: f64 = rng.random_range(-1.5..1.5);
    let brow_lift: f64 = rng.random_range(-2.0..2.0);
    let mouth_spread: f64 = rng.random_range(-2.0..2.0);
    let mouth_drop: f64 = rng.random_range(-2.0..2.0);
    for (i, pt) in p.iter_mut().enumerate() {
        let side = (pt.0 - 64.0).signum();
        match i {
            17..=26 => pt.1 -= brow_lift,
            36..=47 => pt.0 += side * eye_spread,
            48..=67 => {
                pt.0 += side * mouth_spread * (pt.0 - 64.0).abs() / 14.0;
                pt.1 += mouth_drop;
            }
            _ => {}
        }
    }
    let s: f64 = rng.random_range(0.92..1.06);
    let (dx, dy): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    let k = size as f64 / 128.0;
    p.iter().map(|&(x, y)| (k * (64.0 + s * (x - 64.0) + dx), k * (64.0 + s * (y - 64.0) + dy))).collect()
}

fn appearance<R: Rng + ?Sized>(size: usize, domain: &DomainSpec, rng: &mut R) -> Appearance {
    let k = 128.0 / size as f64;
    let texture = (0..3)
        .map(|_| {
            let period: f64 = rng.random_range(7.0..15.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let w = 2.0 * std::f64::consts::PI / period * k;
            (rng.random_range(0.015..0.03), w * angle.cos(), w * angle.sin(), rng.random_range(0.0..6.3))
        })
        .collect();
    Appearance {
        background: rng.random_range(0.1..0.3),
        skin: rng.random_range(0.55..0.75),
        darkness: rng.random_range(0.8..1.1),
        texture,
        brightness: domain.brightness,
        contrast: domain.contrast,
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Continuous face rendering defined by landmarks and appearance.
struct Face<'a> {
    lm: &'a [(f64, f64)],
    look: &'a Appearance,
    /// Pixel length scale relative to a 128-pixel frame.
    k: f64,
    strokes: Vec<(Vec<(f64, f64)>, f64, f64)>,
    eyes: [((f64, f64), f64, f64); 2],
    head: ((f64, f64), f64, f64, f64),
}

impl<'a> Face<'a> {
    fn new(lm: &'a [(f64, f64)], look: &'a Appearance, size: usize) -> Self {
        let k = size as f64 / 128.0;
        let path = |idx: &[usize]| idx.iter().map(|&i| lm[i]).collect::<Vec<_>>();
        let strokes = vec![
            (path(&[17, 18, 19, 20, 21]), 1.6 * k, 0.6),
            (path(&[22, 23, 24, 25, 26]), 1.6 * k, 0.6),
            (path(&[27, 28, 29, 30]), 1.2 * k, 0.12),
            (path(&[31, 32, 33, 34, 35]), 1.0 * k, 0.2),
            (path(&[48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 48]), 1.1 * k, 0.3),
            (path(&[60, 61, 62, 63, 64]), 0.9 * k, 0.55),
            (path(&[64, 65, 66, 67, 60]), 0.9 * k, 0.35),
        ];
        let eye = |a: usize, b: usize, top: [usize; 2], bottom: [usize; 2]| {
            let c = ((lm[a].0 + lm[b].0) / 2.0, (lm[a].1 + lm[b].1) / 2.0);
            let rx = (lm[b].0 - lm[a].0).abs() / 2.0;
            let ry = (lm[bottom[0]].1 + lm[bottom[1]].1 - lm[top[0]].1 - lm[top[1]].1).abs() / 4.0;
            (c, rx, ry.max(0.5 * k))
        };
        let eyes = [eye(36, 39, [37, 38], [40, 41]), eye(42, 45, [43, 44], [46, 47])];
        let cx = (lm[0].0 + lm[16].0) / 2.0;
        let cy = (lm[0].1 + lm[16].1) / 2.0;
        let head = ((cx, cy), (lm[16].0 - lm[0].0) / 2.0 + 2.0 * k, lm[8].1 - cy, 1.2 * (lm[8].1 - cy));
        Self { lm, look, k, strokes, eyes, head }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let look = self.look;
        let ((cx, cy), rx, ry_low, ry_high) = self.head;
        let ry = if y > cy { ry_low } else { ry_high };
        let r = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
        let inside = sigmoid((1.0 - r) * rx / (0.8 * self.k));
        let mut skin = look.skin;
        for &(a, kx, ky, ph) in &look.texture {
            skin += a * (kx * x + ky * y + ph).sin();
        }
        let mut v = look.background + 0.05 * y / (128.0 * self.k);
        v += (skin - v) * inside;
        let mut shade = 1.0;
        for (path, sigma, depth) in &self.strokes {
            let mut d = f64::INFINITY;
            for seg in path.windows(2) {
                d = d.min(dist_to_segment((x, y), seg[0], seg[1]));
            }
            if d < 4.0 * sigma {
                shade *= 1.0 - depth * look.darkness * (-(d * d) / (2.0 * sigma * sigma)).exp();
            }
        }
        for &((ex, ey), erx, ery) in &self.eyes {
            let e = (((x - ex) / erx).powi(2) + ((y - ey) / ery).powi(2)).sqrt();
            let fill = sigmoid((1.0 - e) * ery / (0.6 * self.k));
            shade *= 1.0 - 0.55 * look.darkness * fill;
            let pr = ((x - ex).powi(2) + (y - ey).powi(2)).sqrt();
            shade *= 1.0 - 0.5 * fill * sigmoid((1.8 * self.k - pr) / (0.5 * self.k));
        }
        for &n in &[32usize, 34] {
            let (nx, ny) = self.lm[n];
            let d2 = (x - nx).powi(2) + (y - ny).powi(2);
            shade *= 1.0 - 0.45 * (-d2 / (2.0 * (1.3 * self.k).powi(2))).exp();
        }
        let v = v * shade;
        (0.5 + look.contrast * (v - 0.5) + look.brightness).clamp(0.0, 1.0)
    }
}

/// Landmark motions `(index, (mx, my), radius)` of one class at unit amplitude.
fn class_motions(class: usize) -> Vec<(usize, (f64, f64), f64)> {
    match class {
        // negative: brows knit inwards and down, mouth corners drop
        0 => vec![
            (19, (0.3, 0.2), 5.0),
            (20, (0.6, 0.4), 5.0),
            (21, (0.8, 0.5), 5.0),
            (22, (-0.8, 0.5), 5.0),
            (23, (-0.6, 0.4), 5.0),
            (24, (-0.3, 0.2), 5.0),
            (48, (0.0, 0.45), 4.0),
            (54, (0.0, 0.45), 4.0),
        ],
        // positive: mouth corners pulled up and out
        1 => vec![
            (48, (-0.5, -0.8), 5.0),
            (54, (0.5, -0.8), 5.0),
            (49, (-0.25, -0.4), 4.0),
            (59, (-0.25, -0.4), 4.0),
            (53, (0.25, -0.4), 4.0),
            (55, (0.25, -0.4), 4.0),
        ],
        // surprise: brows raised, upper lids lifted
        _ => {
            let mut m: Vec<_> = (17..=26).map(|i| (i, (0.0, -1.0), 5.0)).collect();
            m.extend([37, 38, 43, 44].map(|i| (i, (0.0, -0.35), 3.0)));
            m
        }
    }
}

/// Backward field `D(p) = −u(p)`, with `u` a normalised blend of Gaussian
/// bumps carrying each landmark's motion.
fn backward_field(lm: &[(f64, f64)], class: usize, amplitude: f64, size: usize) -> Vec<(f64, f64)> {
    let k = size as f64 / 128.0;
    let motions: Vec<_> = class_motions(class)
        .into_iter()
        .map(|(i, (mx, my), r)| (lm[i], (mx * amplitude, my * amplitude), r * k))
        .collect();
    let mut field = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let (mut ux, mut uy, mut wsum) = (0.0, 0.0, 0.0);
            for &((cx, cy), (mx, my), r) in &motions {
                let w = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp();
                ux += w * mx;
                uy += w * my;
                wsum += w;
            }
            let norm = wsum.max(1.0);
            field.push((-ux / norm, -uy / norm));
        }
    }
    field
}

fn render_frame<T: Real>(face: &Face<'_>, field: &[(f64, f64)], s: f64, size: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dx, dy) = field[i * size + j];
            let v = face.eval(j as f64 + 0.5 + s * dx, i as f64 + 0.5 + s * dy);
            data.push(T::of(to_byte(v) as f64 / 255.0));
        }
    }
    Tensor::new(&[1, size, size], data).expect("sized")
}

/// Deterministic synthetic dataset: subjects × classes × samples, ordered
/// subject-major. Frames are single-channel and quantised to 8 bits.
pub fn generate_synthetic_dataset<T: Real>(spec: &SyntheticSpec) -> Result<SyntheticDataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size;
    let mut samples = Vec::with_capacity(spec.num_samples());
    let mut fields = Vec::with_capacity(spec.num_samples());
    for s in 0..spec.subjects {
        let subject = format!("s{:02}", s + 1);
        let domain = &spec.domains[s % spec.domains.len()];
        let lm = subject_landmarks(size, &mut rng);
        let base_look = appearance(size, domain, &mut rng);
        let landmarks = LandmarkSet::new(lm.clone())?;
        for class in 0..spec.classes {
            for n in 0..spec.samples_per_class {
                let amplitude =
                    rng.random_range(spec.amplitude.0..=spec.amplitude.1) * domain.amplitude_scale * size as f64 / 128.0;
                let mut look = base_look.clone();
                look.skin += rng.random_range(-0.03..0.03);
                let face = Face::new(&lm, &look, size);
                let field = backward_field(&lm, class, amplitude, size);
                let frames = (0..spec.frames).map(|k| render_frame(&face, &field, spec.intensity(k), size)).collect();
                // stored at f32 precision, as in the raw field file
                let mut gt = vec![T::zero(); 2 * size * size];
                for (p, &(dx, dy)) in field.iter().enumerate() {
                    gt[p] = T::of(dx as f32 as f64);
                    gt[size * size + p] = T::of(dy as f32 as f64);
                }
                let gt = Tensor::new(&[2, size, size], gt)?;
                samples.push(Sample {
                    id: format!("{subject}_{}_{n}", CLASS_NAMES[class]),
                    subject: subject.clone(),
                    domain: domain.name.clone(),
                    label: class,
                    frames,
                    apex: spec.apex,
                    landmarks: landmarks.clone(),
                    flow: Some(gt.clone()),
                });
                fields.push(gt);
            }
        }
    }
    Ok(SyntheticDataset { dataset: Dataset::new(samples)?, fields, spec: spec.clone() })
}

/// Write frames, landmarks, ground-truth fields and `manifest.csv` under `dir`.
pub fn write_synthetic_dataset<T: Real>(data: &SyntheticDataset<T>, dir: &Path) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(data.dataset.len());
    for (sample, field) in data.dataset.samples.iter().zip(&data.fields) {
        let rel = format!("{}/{}", sample.subject, sample.id);
        let sdir = dir.join(&rel);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut frames = Vec::with_capacity(sample.frames.len());
        for (k, f) in sample.frames.iter().enumerate() {
            let name = format!("{rel}/frame_{k}.png");
            write_image(f, &dir.join(&name))?;
            frames.push(name);
        }
        let lm = format!("{rel}/landmarks.txt");
        write_landmarks(&sample.landmarks, &dir.join(&lm))?;
        let flow = format!("{rel}/displacement.bin");
        let s = field.shape();
        let df = DisplacementField::from_channels_first(&field.clone().reshape(&[1, 2, s[1], s[2]])?, 0, 1.0);
        write_raw_field(&df, &dir.join(&flow))?;
        rows.push(ManifestRow {
            id: sample.id.clone(),
            subject: sample.subject.clone(),
            domain: sample.domain.clone(),
            label: CLASS_NAMES[sample.label].to_string(),
            apex: sample.apex,
            landmarks: lm,
            frames: frames.join(";"),
            flow,
        });
    }
    write_manifest(&rows, &dir.join("manifest.csv"))?;
    Ok(rows)
}
