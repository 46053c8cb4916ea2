//! Static box-obstacle occlusion applied to a subset of frames.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene_io::{Mask, SceneDataset};

const BISECTION_STEPS: usize = 64;

/// Axis-aligned rectangle in pixel-index coordinates. Pixel `(col, row)` is
/// inside when `|col - cx| <= half_w` and `|row - cy| <= half_h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl Rect {
    pub fn contains(&self, col: usize, row: usize) -> bool {
        (col as f64 - self.cx).abs() <= self.half_w && (row as f64 - self.cy).abs() <= self.half_h
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::new(width, height);
        for row in 0..height {
            for col in 0..width {
                m.set(col, row, self.contains(col, row));
            }
        }
        m
    }
}

/// Mean `(col, row)` of the set pixels.
pub fn valid_pixel_centroid(mask: &Mask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(col, row) {
                sx += col as f64;
                sy += row as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("mask has no valid pixels".into()));
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Inclusive `(min_col, min_row, max_col, max_row)` of the set pixels.
pub fn bounding_box(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(col, row) {
                bb = Some(match bb {
                    None => (col, row, col, row),
                    Some((a, b, c, d)) => (a.min(col), b.min(row), c.max(col), d.max(row)),
                });
            }
        }
    }
    bb
}

/// Fraction of set pixels of `mask` inside `rect`.
pub fn covered_fraction(mask: &Mask, rect: &Rect) -> f64 {
    let mut inside = 0usize;
    let mut total = 0usize;
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(col, row) {
                total += 1;
                inside += rect.contains(col, row) as usize;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

/// Smallest rectangle of the mask's bounding-box aspect ratio, centered on
/// the valid-pixel centroid, that covers at least `coverage` of the valid
/// pixels.
pub fn occlusion_rect(mask: &Mask, coverage: f64) -> Result<Rect> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage {coverage} outside (0, 1]")));
    }
    let (cx, cy) = valid_pixel_centroid(mask)?;
    let (c0, r0, c1, r1) = bounding_box(mask).expect("nonempty mask has a bounding box");
    let (bw, bh) = ((c1 - c0 + 1) as f64, (r1 - r0 + 1) as f64);
    let rect = |s: f64| Rect {
        cx,
        cy,
        half_w: s * bw / 2.0,
        half_h: s * bh / 2.0,
    };
    // at s = 2 the rectangle contains the whole bounding box
    let (mut lo, mut hi) = (0.0, 2.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if covered_fraction(mask, &rect(mid)) >= coverage {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(rect(hi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionReport {
    pub rect: Rect,
    /// Sorted indices (positions in `dataset.frames`) of occluded frames.
    pub occluded_frames: Vec<usize>,
    /// Fraction of union-valid pixels under the rectangle.
    pub covered_fraction: f64,
}

/// Union of the subject masks of all training frames.
pub fn union_mask(dataset: &SceneDataset) -> Mask {
    let mut u = Mask::new(dataset.width(), dataset.height());
    for f in &dataset.frames {
        u.data.iter_mut().zip(&f.subject_mask.data).for_each(|(a, &b)| *a |= b);
    }
    u
}

/// Masks one shared rectangle in `round(frame_fraction * N)` seeded-random
/// frames and clears the occlusion mask of the rest.
pub fn simulate_occlusion(
    dataset: &mut SceneDataset,
    coverage: f64,
    frame_fraction: f64,
    seed: u64,
) -> Result<OcclusionReport> {
    if !(0.0..=1.0).contains(&frame_fraction) {
        return Err(Error::Config(format!("frame fraction {frame_fraction} outside [0, 1]")));
    }
    let union = union_mask(dataset);
    let rect = occlusion_rect(&union, coverage)?;
    let n = dataset.frames.len();
    let count = (frame_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    let rect_mask = rect.to_mask(union.width, union.height);
    let clear = Mask::new(union.width, union.height);
    for (i, f) in dataset.frames.iter_mut().enumerate() {
        f.occlusion_mask = if chosen.binary_search(&i).is_ok() {
            rect_mask.clone()
        } else {
            clear.clone()
        };
    }
    Ok(OcclusionReport {
        rect,
        occluded_frames: chosen,
        covered_fraction: covered_fraction(&union, &rect),
    })
}
