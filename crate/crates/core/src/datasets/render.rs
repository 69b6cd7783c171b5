//! Rasterization of a single factor combination.

use super::FactorSpec;
use crate::error::{Error, Result};

/// RGB fill colors, indexed by the color factor.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.20, 0.35, 0.90],
    [0.90, 0.85, 0.20],
    [0.80, 0.30, 0.80],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

/// Square, plus, triangle, ring, disc, diamond.
pub const SHAPE_COUNT: usize = 6;

const BACKGROUND: f32 = 0.5;

/// Pixel geometry shared by every image of one spec.
#[derive(Clone, Debug)]
pub(super) struct Geometry {
    radii: Vec<f32>,
    centers_x: Vec<f32>,
    centers_y: Vec<f32>,
    /// Spacing of neighbouring centers and radii, in pixels.
    pub(super) steps: [f32; 3],
}

fn spread(count: usize, margin: f32, size: usize) -> Vec<f32> {
    let span = size as f32 - 1.0 - 2.0 * margin;
    (0..count)
        .map(|i| margin + span * i as f32 / (count - 1) as f32)
        .collect()
}

impl Geometry {
    pub(super) fn new(spec: &FactorSpec) -> Result<Self> {
        let s = spec.image_size as f32;
        let radii: Vec<f32> = (0..spec.sizes)
            .map(|k| s * (0.20 + 0.10 * k as f32 / (spec.sizes - 1) as f32))
            .collect();
        let largest = radii[radii.len() - 1];
        let margin = largest + 0.5;
        let positions = spec.positions_x.max(spec.positions_y);
        let step = (s - 1.0 - 2.0 * margin) / (positions - 1) as f32;
        if radii[0] < 1.5 || step < 1.0 {
            return Err(Error::Config(format!(
                "image size {} is too small for {} sizes at {} positions",
                spec.image_size, spec.sizes, positions
            )));
        }
        let span = s - 1.0 - 2.0 * margin;
        Ok(Geometry {
            steps: [
                span / (spec.positions_x - 1) as f32,
                span / (spec.positions_y - 1) as f32,
                radii[1] - radii[0],
            ],
            radii,
            centers_x: spread(spec.positions_x, margin, spec.image_size),
            centers_y: spread(spec.positions_y, margin, spec.image_size),
        })
    }
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx.abs().max(dy.abs()) <= 0.85 * r,
        1 => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
        2 => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.6 * (dy + r),
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        4 => dx * dx + dy * dy <= r * r,
        _ => dx.abs() + dy.abs() <= r,
    }
}

/// Subsamples per pixel side used to estimate shape coverage.
const SUPERSAMPLE: usize = 4;

/// Render `[shape, color, x, y, size]` into a `3×s×s` image, with `offset`
/// added to the center and radius; each pixel blends background and fill
/// by the fraction of the pixel covered.
pub(super) fn render(
    geo: &Geometry,
    size: usize,
    factors: &[u32; 5],
    offset: [f32; 3],
    out: &mut [f32],
) {
    let [shape, color, px, py, sz] = factors.map(|v| v as usize);
    let cx = geo.centers_x[px] + offset[0];
    let cy = geo.centers_y[py] + offset[1];
    let r = geo.radii[sz] + offset[2];
    let rgb = PALETTE[color];
    let plane = size * size;
    let sub = SUPERSAMPLE as f32;
    for i in 0..size {
        for j in 0..size {
            let mut hits = 0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let y = i as f32 - 0.5 + (a as f32 + 0.5) / sub;
                    let x = j as f32 - 0.5 + (b as f32 + 0.5) / sub;
                    hits += usize::from(inside(shape, x - cx, y - cy, r));
                }
            }
            let coverage = hits as f32 / (sub * sub);
            for (ch, &c) in rgb.iter().enumerate() {
                out[ch * plane + i * size + j] = coverage * (c - BACKGROUND);
            }
        }
    }
}
