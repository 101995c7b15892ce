//! Displacement-field export: raw binary and optical-flow colour coding.
//!
//! Raw layout (little-endian): `u32 h`, `u32 w`, then `h·w` pairs of `f32`
//! `(x, y)` in row-major pixel order.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::DisplacementField;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Hue segment lengths of the standard flow colour wheel:
/// red–yellow, yellow–green, green–cyan, cyan–blue, blue–magenta, magenta–red.
pub const COLOR_WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = COLOR_WHEEL_SEGMENTS;
    let mut wheel = Vec::with_capacity(COLOR_WHEEL_SEGMENTS.iter().sum());
    let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor();
    for i in 0..ry {
        wheel.push([255.0, ramp(i, ry), 0.0]);
    }
    for i in 0..yg {
        wheel.push([255.0 - ramp(i, yg), 255.0, 0.0]);
    }
    for i in 0..gc {
        wheel.push([0.0, 255.0, ramp(i, gc)]);
    }
    for i in 0..cb {
        wheel.push([0.0, 255.0 - ramp(i, cb), 255.0]);
    }
    for i in 0..bm {
        wheel.push([ramp(i, bm), 0.0, 255.0]);
    }
    for i in 0..mr {
        wheel.push([255.0, 0.0, 255.0 - ramp(i, mr)]);
    }
    wheel
}

/// Colour-code a field. Hue encodes direction, saturation encodes magnitude
/// relative to the largest vector in the field; zero motion is white.
pub fn flow_to_rgb<T: Real>(field: &DisplacementField<T>) -> RgbImage {
    let (h, w) = (field.height(), field.width());
    let v = field.values.data();
    let max_rad = (0..h * w)
        .map(|p| v[2 * p].f64().hypot(v[2 * p + 1].f64()))
        .fold(0.0f64, f64::max);
    let max_rad = if max_rad > 0.0 { max_rad } else { 1.0 };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (u, vv) = (v[2 * p].f64() / max_rad, v[2 * p + 1].f64() / max_rad);
            let rad = u.hypot(vv);
            let a = (-vv).atan2(-u) / std::f64::consts::PI;
            let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
            let k0 = (fk.floor() as usize).min(ncols - 1);
            let k1 = (k0 + 1) % ncols;
            let f = fk - k0 as f64;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
                let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
                px[c] = (255.0 * col).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

pub fn write_flow_png<T: Real>(field: &DisplacementField<T>, path: &Path) -> Result<()> {
    flow_to_rgb(field)
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn write_raw_field<T: Real>(field: &DisplacementField<T>, path: &Path) -> Result<()> {
    let (h, w) = (field.height(), field.width());
    let mut out = Vec::with_capacity(8 + h * w * 8);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in field.values.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_raw_field<T: Real>(path: &Path, alpha: f64) -> Result<DisplacementField<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: 0, msg };
    if bytes.len() < 8 {
        return Err(bad("missing {h, w} header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + h * w * 8 {
        return Err(bad(format!("expected {} bytes for a {h}x{w} field, found {}", 8 + h * w * 8, bytes.len())));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Ok(DisplacementField { values: Tensor::new(&[h, w, 2], data)?, alpha })
}
