//! Training-camera measurements behind the occlusion benchmark: PSNR under
//! the occluder and accumulated alpha inside the true silhouette.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::metrics::psnr;
use crate::motion::MotionField;
use crate::renderer::{render_rays, FrameContext};
use crate::scene_io::{pixel_ray, Image, Mask, SceneDataset};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchmarkReport {
    /// PSNR pooled over occluded pixels of the evaluated frames.
    pub occluded_psnr: f64,
    /// Mean alpha over silhouette pixels of the evaluated frames.
    pub silhouette_alpha: f64,
    /// Mean alpha over silhouette pixels under the occluder.
    pub occluded_silhouette_alpha: f64,
    pub frames: usize,
}

pub const REPORT_HEADER: &str = "model,frames,occluded_psnr,silhouette_alpha,occluded_silhouette_alpha";

impl BenchmarkReport {
    pub fn csv_row(&self, model: &str) -> String {
        format!(
            "{model},{},{},{},{}",
            self.frames, self.occluded_psnr, self.silhouette_alpha, self.occluded_silhouette_alpha
        )
    }
}

/// Rows of one CSV table for several named reports.
pub fn report_csv(rows: &[(&str, BenchmarkReport)]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{}", r.csv_row(name));
    }
    s
}

/// Every `stride`-th occluded frame (positions in `dataset.frames`).
pub fn occluded_frames(dataset: &SceneDataset, stride: usize) -> Vec<usize> {
    dataset
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.occlusion_mask.count() > 0)
        .map(|(i, _)| i)
        .step_by(stride.max(1))
        .collect()
}

/// Renders the occluded and silhouette pixels of `frames` through their
/// training cameras and measures them against the stored ground truth.
pub fn evaluate_occluded(field: &Field, dataset: &SceneDataset, frames: &[usize], samples: usize) -> Result<BenchmarkReport> {
    if frames.is_empty() {
        return Err(Error::Empty("no frames to evaluate".into()));
    }
    let motion = MotionField::new(&dataset.template)?;
    let (w, h) = (dataset.width(), dataset.height());
    // frames stacked vertically so one PSNR call pools every pixel
    let mut pred = Image::new(w, h * frames.len());
    let mut reference = Image::new(w, h * frames.len());
    let mut occluded = Mask::new(w, h * frames.len());
    let (mut sil_sum, mut sil_n, mut occ_sum, mut occ_n) = (0.0, 0usize, 0.0, 0usize);
    for (slot, &fi) in frames.iter().enumerate() {
        let frame = &dataset.frames[fi];
        let camera = &dataset.cameras[fi];
        let pixels: Vec<(usize, usize)> = (0..h)
            .flat_map(|row| (0..w).map(move |col| (col, row)))
            .filter(|&(c, r)| frame.occlusion_mask.get(c, r) || frame.subject_mask.get(c, r))
            .collect();
        let rays = pixels
            .iter()
            .map(|&(c, r)| pixel_ray(camera, c, r))
            .collect::<Result<Vec<_>>>()?;
        let ctx = FrameContext::new(&motion, &dataset.template, &frame.pose)?;
        let out = render_rays(field, &ctx, &rays, samples)?;
        for (&(c, r), px) in pixels.iter().zip(&out) {
            let (occ, sil) = (frame.occlusion_mask.get(c, r), frame.subject_mask.get(c, r));
            if occ {
                let row = slot * h + r;
                pred.set(c, row, px.color);
                reference.set(c, row, frame.image.get(c, r));
                occluded.set(c, row, true);
            }
            if sil {
                sil_sum += px.alpha;
                sil_n += 1;
                if occ {
                    occ_sum += px.alpha;
                    occ_n += 1;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(BenchmarkReport {
        occluded_psnr: psnr(&pred, &reference, &occluded)?,
        silhouette_alpha: mean(sil_sum, sil_n),
        occluded_silhouette_alpha: mean(occ_sum, occ_n),
        frames: frames.len(),
    })
}
