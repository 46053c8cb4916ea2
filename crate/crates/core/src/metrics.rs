//! PSNR and SSIM over arbitrary pixel sets.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scene_io::{Image, Mask};

pub const PSNR_CAP: f64 = 99.0;
/// Accumulated alpha above which a predicted pixel counts as covered.
pub const ALPHA_VISIBLE: f64 = 1e-3;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(pred: &Image, reference: &Image, set: &Mask) -> Result<()> {
    if (pred.width, pred.height) != (reference.width, reference.height)
        || (set.width, set.height) != (pred.width, pred.height)
    {
        return Err(Error::LengthMismatch(format!(
            "images {}x{} and {}x{} with a {}x{} pixel set",
            pred.width, pred.height, reference.width, reference.height, set.width, set.height
        )));
    }
    if set.count() == 0 {
        return Err(Error::Empty("metric pixel set is empty".into()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with the squared error averaged over the set and the
/// three channels; capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, reference: &Image, set: &Mask) -> Result<f64> {
    check_shapes(pred, reference, set)?;
    // compensated sum keeps uniform errors exact
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut n = 0usize;
    for (i, _) in set.data.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..3 {
            let d = pred.data[3 * i + k] - reference.data[3 * i + k];
            let v = d * d;
            let t = sum + v;
            comp += if sum.abs() >= v { (sum - t) + v } else { (v - t) + sum };
            sum = t;
        }
        n += 3;
    }
    let mse = (sum + comp) / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter; the window is truncated at the image border
/// and renormalized.
fn blur(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, kv) in (-r..=r).zip(kernel) {
                    let (sx, sy) = if horizontal { (x as isize + t, y as isize) } else { (x as isize, y as isize + t) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += kv * src[sy as usize * w + sx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Mean SSIM over window centers in `set`, averaged over channels.
pub fn ssim(pred: &Image, reference: &Image, set: &Mask) -> Result<f64> {
    check_shapes(pred, reference, set)?;
    let (w, h) = (pred.width, pred.height);
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    for k in 0..3 {
        let x: Vec<f64> = pred.data.iter().skip(k).step_by(3).copied().collect();
        let y: Vec<f64> = reference.data.iter().skip(k).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, my) = (blur(&x, w, h, &kernel), blur(&y, w, h, &kernel));
        let (exx, eyy, exy) = (blur(&xx, w, h, &kernel), blur(&yy, w, h, &kernel), blur(&xy, w, h, &kernel));
        let mut sum = 0.0;
        for i in (0..w * h).filter(|&i| set.data[i]) {
            let (vx, vy, cxy) = (exx[i] - mx[i] * mx[i], eyy[i] - my[i] * my[i], exy[i] - mx[i] * my[i]);
            sum += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / set.count() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Every pixel.
    Full,
    /// Predicted coverage plus the visible supervised region.
    Vis,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Full => "full",
            EvalMode::Vis => "vis",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EvalMode::Full),
            "vis" => Ok(EvalMode::Vis),
            other => Err(Error::Config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// Pixels with predicted alpha above [`ALPHA_VISIBLE`] or inside the
/// unoccluded reference silhouette.
pub fn visible_set(alpha: &[f64], subject: &Mask, occlusion: &Mask) -> Result<Mask> {
    if alpha.len() != subject.data.len() || occlusion.data.len() != subject.data.len() {
        return Err(Error::LengthMismatch(format!(
            "{} alpha values for a {}x{} mask",
            alpha.len(),
            subject.width,
            subject.height
        )));
    }
    Ok(Mask {
        width: subject.width,
        height: subject.height,
        data: alpha
            .iter()
            .zip(subject.data.iter().zip(&occlusion.data))
            .map(|(&a, (&s, &o))| a > ALPHA_VISIBLE || (s && !o))
            .collect(),
    })
}

/// `(psnr, ssim)` of a rendered frame against its reference.
pub fn evaluate(
    pred: &Image,
    alpha: &[f64],
    reference: &Image,
    mode: EvalMode,
    subject: &Mask,
    occlusion: &Mask,
) -> Result<(f64, f64)> {
    let set = match mode {
        EvalMode::Full => Mask {
            width: pred.width,
            height: pred.height,
            data: vec![true; pred.width * pred.height],
        },
        EvalMode::Vis => visible_set(alpha, subject, occlusion)?,
    };
    if set.count() == 0 {
        return Err(Error::Empty("no visible pixels to evaluate".into()));
    }
    Ok((psnr(pred, reference, &set)?, ssim(pred, reference, &set)?))
}
