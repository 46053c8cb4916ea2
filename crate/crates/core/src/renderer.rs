//! Ray sampling, volume compositing and whole-image rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{CustomOp, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{Field, PreparedSample};
use crate::geometry::{Aabb, ArticulatedMesh, Vec3};
use crate::motion::{bone_transforms, pose_vertices, BoneTransforms, MotionField, PoseFrame};
use crate::scene_io::{pixel_ray, Camera, Image, Ray};

pub const SAMPLES_PER_RAY: usize = 128;
/// Minimum peak alpha for a ray to contribute a termination point.
pub const TAU_VIS: f64 = 0.5;
/// Relative dilation of the posed template box used for ray bounds.
pub const BOUNDS_DILATION: f64 = 0.15;
/// Rays per tape when rendering whole images.
const RENDER_CHUNK: usize = 64;

/// Slab intersection. `near` is clamped to 0 when the origin is inside.
pub fn ray_bounds(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.direction[a]);
        if d == 0.0 {
            if o < aabb.min[a] || o > aabb.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (aabb.min[a] - o) / d;
        let t2 = (aabb.max[a] - o) / d;
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    if far <= near || far <= 0.0 {
        return None;
    }
    Some((near.max(0.0), far))
}

/// Depths and spacings along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub z: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Stratified samples over `[near, far]`; bin centers when `rng` is `None`.
/// The last spacing is the bin width.
pub fn sample_ray<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> RaySamples {
    let w = (far - near) / n as f64;
    let z: Vec<f64> = match rng {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * w).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * w).collect(),
    };
    let mut delta: Vec<f64> = z.windows(2).map(|p| p[1] - p[0]).collect();
    if n > 0 {
        delta.push(w);
    }
    RaySamples { z, delta }
}

/// Per-sample weights `T_i alpha_i` with `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
/// Returns the accumulated alpha `1 - T_n`, which equals the weight sum up to
/// rounding but never leaves [0, 1].
fn weights_into(sigmas: &[f64], deltas: &[f64], out: &mut Vec<f64>) -> f64 {
    out.clear();
    let mut acc = 0.0f64;
    for (s, d) in sigmas.iter().zip(deltas) {
        let tau = s * d;
        out.push((-acc).exp() * -(-tau).exp_m1());
        acc += tau;
    }
    -(-acc).exp_m1()
}

/// Composites samples front to back over a black background.
pub fn volume_render(colors: &[[f64; 3]], sigmas: &[f64], deltas: &[f64]) -> Result<([f64; 3], f64)> {
    if colors.len() != sigmas.len() || sigmas.len() != deltas.len() {
        return Err(Error::LengthMismatch(format!(
            "{} colors, {} densities, {} spacings",
            colors.len(),
            sigmas.len(),
            deltas.len()
        )));
    }
    let mut w = Vec::with_capacity(sigmas.len());
    let acc = weights_into(sigmas, deltas, &mut w);
    let mut rgb = [0.0; 3];
    for (wi, c) in w.iter().zip(colors) {
        for k in 0..3 {
            rgb[k] += wi * c[k];
        }
    }
    Ok((rgb, acc))
}

/// Per-sample `1 - exp(-sigma delta)`.
pub fn alphas(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    sigmas.iter().zip(deltas).map(|(s, d)| -(-s * d).exp_m1()).collect()
}

/// Canonical point of the highest-alpha sample (first on ties), if it
/// reaches [`TAU_VIS`].
pub fn termination_point(alphas: &[f64], canonical: &[Vec3]) -> Result<Option<Vec3>> {
    if alphas.is_empty() {
        return Err(Error::Empty("termination point of an empty ray".into()));
    }
    if alphas.len() != canonical.len() {
        return Err(Error::LengthMismatch(format!("{} alphas for {} points", alphas.len(), canonical.len())));
    }
    let mut best = 0;
    for (i, &a) in alphas.iter().enumerate() {
        if a > alphas[best] {
            best = i;
        }
    }
    Ok((alphas[best] >= TAU_VIS).then_some(canonical[best]))
}

/// Front-to-back compositing of fixed-length rays on the tape. Output is
/// `rays x 4`: color then accumulated alpha.
struct CompositeOp {
    samples: usize,
    delta: Vec<f64>,
}

impl CompositeOp {
    fn forward(&self, rgb: &Tensor, sigma: &Tensor) -> Tensor {
        let n = self.samples;
        let rays = sigma.rows / n;
        let mut out = Tensor::zeros(rays, 4);
        let mut w = Vec::with_capacity(n);
        for r in 0..rays {
            let span = r * n..(r + 1) * n;
            let acc = weights_into(&sigma.data[span.clone()], &self.delta[span.clone()], &mut w);
            let o = out.row_mut(r);
            for (i, wi) in span.zip(&w) {
                let c = rgb.row(i);
                o[0] += wi * c[0];
                o[1] += wi * c[1];
                o[2] += wi * c[2];
            }
            o[3] = acc;
        }
        out
    }
}

impl CustomOp for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, grad_inputs: &mut [Tensor], _params: &mut Gradients) {
        let (rgb, sigma) = (inputs[0], inputs[1]);
        let n = self.samples;
        let mut w = Vec::with_capacity(n);
        for r in 0..grad_out.rows {
            let g = grad_out.row(r);
            let span = r * n..(r + 1) * n;
            weights_into(&sigma.data[span.clone()], &self.delta[span.clone()], &mut w);
            // d/dtau_k = T_{k+1} (g.c_k + gA) - sum_{i>k} w_i (g.c_i + gA)
            let mut tail = 0.0;
            let mut acc = 0.0f64;
            let incl: Vec<f64> = span
                .clone()
                .map(|i| {
                    acc += sigma.data[i] * self.delta[i];
                    acc
                })
                .collect();
            for (k, i) in span.enumerate().rev() {
                let c = rgb.row(i);
                let gc = g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + g[3];
                let t_next = (-incl[k]).exp();
                let d_tau = t_next * gc - tail;
                grad_inputs[1].data[i] = d_tau * self.delta[i];
                let gr = grad_inputs[0].row_mut(i);
                gr[0] = w[k] * g[0];
                gr[1] = w[k] * g[1];
                gr[2] = w[k] * g[2];
                tail += w[k] * gc;
            }
        }
    }
}

/// Composites `rgb` (`S x 3`) and `sigma` (`S x 1`) for rays of `samples`
/// consecutive rows each.
pub fn composite_taped<'a>(tape: &mut Tape<'a>, rgb: Var, sigma: Var, delta: Vec<f64>, samples: usize) -> Result<Var> {
    let (c, s) = (tape.value(rgb), tape.value(sigma));
    if c.rows != s.rows || s.rows != delta.len() || samples == 0 || s.rows % samples != 0 || c.cols != 3 || s.cols != 1 {
        return Err(Error::LengthMismatch(format!(
            "composite of {}x{} colors, {}x{} densities, {} spacings in rays of {samples}",
            c.rows,
            c.cols,
            s.rows,
            s.cols,
            delta.len()
        )));
    }
    let op = CompositeOp { samples, delta };
    let out = op.forward(c, s);
    Ok(tape.custom(Box::new(op), &[rgb, sigma], out))
}

/// Samples of the rays that hit the bounds, flattened ray-major.
#[derive(Clone, Debug, Default)]
pub struct SampleBatch {
    pub samples_per_ray: usize,
    /// Input index of each hit ray.
    pub ray_index: Vec<usize>,
    pub x: Vec<Vec3>,
    pub canonical: Vec<Vec3>,
    pub z: Vec<f64>,
    pub delta: Vec<f64>,
    pub prepared: Vec<PreparedSample>,
}

impl SampleBatch {
    pub fn num_rays(&self) -> usize {
        self.ray_index.len()
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Stratified-jitter source: ray `i` of a batch draws from stream
/// `stream_base + i` of `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Jitter {
    pub seed: u64,
    pub stream_base: u64,
}

/// Posed geometry of one frame.
pub struct FrameContext<'a> {
    pub motion: &'a MotionField,
    pub transforms: BoneTransforms,
    pub bounds: Aabb,
}

/// Box of the posed template, dilated for ray bounds.
pub fn posed_bounds(template: &ArticulatedMesh, transforms: &BoneTransforms) -> Result<Aabb> {
    Aabb::from_points(&pose_vertices(template, transforms))
        .map(|b| b.dilated(BOUNDS_DILATION))
        .ok_or_else(|| Error::Empty("template has no vertices".into()))
}

impl<'a> FrameContext<'a> {
    pub fn new(motion: &'a MotionField, template: &ArticulatedMesh, pose: &PoseFrame) -> Result<Self> {
        let transforms = bone_transforms(pose, template)?;
        let bounds = posed_bounds(template, &transforms)?;
        Ok(Self {
            motion,
            transforms,
            bounds,
        })
    }

    /// Bounds, samples, warp and neighbor lookups for every ray.
    pub fn sample(&self, field: &Field, rays: &[Ray], samples: usize, jitter: Option<Jitter>) -> Result<SampleBatch> {
        let per_ray: Vec<Option<(Vec<Vec3>, Vec<Vec3>, RaySamples, Vec<PreparedSample>)>> = rays
            .par_iter()
            .enumerate()
            .map(|(i, ray)| -> Result<_> {
                let Some((near, far)) = ray_bounds(ray, &self.bounds) else {
                    return Ok(None);
                };
                let rs = match jitter {
                    Some(j) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(j.seed);
                        rng.set_stream(j.stream_base.wrapping_add(i as u64));
                        sample_ray(near, far, samples, Some(&mut rng))
                    }
                    None => sample_ray::<ChaCha8Rng>(near, far, samples, None),
                };
                let xs: Vec<Vec3> = rs.z.iter().map(|&z| ray.at(z)).collect();
                let cs: Vec<Vec3> = xs.iter().map(|x| self.motion.warp(x, &self.transforms)).collect();
                let prep = cs.iter().map(|c| field.prepare(c)).collect::<Result<Vec<_>>>()?;
                Ok(Some((xs, cs, rs, prep)))
            })
            .collect::<Result<_>>()?;

        let hits = per_ray.iter().filter(|r| r.is_some()).count();
        let mut batch = SampleBatch {
            samples_per_ray: samples,
            ray_index: Vec::with_capacity(hits),
            x: Vec::with_capacity(hits * samples),
            canonical: Vec::with_capacity(hits * samples),
            z: Vec::with_capacity(hits * samples),
            delta: Vec::with_capacity(hits * samples),
            prepared: Vec::with_capacity(hits * samples),
        };
        for (i, r) in per_ray.into_iter().enumerate() {
            if let Some((xs, cs, rs, prep)) = r {
                batch.ray_index.push(i);
                batch.x.extend(xs);
                batch.canonical.extend(cs);
                batch.z.extend(rs.z);
                batch.delta.extend(rs.delta);
                batch.prepared.extend(prep);
            }
        }
        Ok(batch)
    }
}

/// Tape handles of a rendered batch.
pub struct TapedRender {
    /// `hit rays x 4`: color then accumulated alpha.
    pub composite: Var,
    /// Pre-activation densities, `samples x 1`.
    pub sigma_raw: Var,
    pub sigma: Var,
}

pub fn render_taped<'a>(tape: &mut Tape<'a>, field: &'a Field, batch: &SampleBatch) -> Result<TapedRender> {
    let out = field.forward_taped(tape, &batch.prepared)?;
    let composite = composite_taped(tape, out.rgb, out.sigma, batch.delta.clone(), batch.samples_per_ray)?;
    Ok(TapedRender {
        composite,
        sigma_raw: out.sigma_raw,
        sigma: out.sigma,
    })
}

/// Termination points of the hit rays in a rendered batch.
pub fn batch_terminations(batch: &SampleBatch, sigma: &Tensor) -> Result<Vec<Option<Vec3>>> {
    let n = batch.samples_per_ray;
    (0..batch.num_rays())
        .map(|r| {
            let span = r * n..(r + 1) * n;
            let a = alphas(&sigma.data[span.clone()], &batch.delta[span.clone()]);
            termination_point(&a, &batch.canonical[span])
        })
        .collect()
}

/// Per-ray result of an untaped render.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayRender {
    pub color: [f64; 3],
    pub alpha: f64,
}

/// Renders rays without jitter; misses are black with zero alpha.
pub fn render_rays(field: &Field, ctx: &FrameContext, rays: &[Ray], samples: usize) -> Result<Vec<RayRender>> {
    let mut out = vec![
        RayRender {
            color: [0.0; 3],
            alpha: 0.0
        };
        rays.len()
    ];
    for (c, chunk) in rays.chunks(RENDER_CHUNK).enumerate() {
        let batch = ctx.sample(field, chunk, samples, None)?;
        if batch.num_rays() == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let r = render_taped(&mut tape, field, &batch)?;
        tape.check_finite()?;
        let v = tape.value(r.composite);
        for (k, &i) in batch.ray_index.iter().enumerate() {
            let row = v.row(k);
            out[c * RENDER_CHUNK + i] = RayRender {
                color: [row[0], row[1], row[2]],
                alpha: row[3],
            };
        }
    }
    Ok(out)
}

/// Full image and alpha map of one posed frame through `camera`.
pub fn render_image(field: &Field, ctx: &FrameContext, camera: &Camera, samples: usize) -> Result<(Image, Vec<f64>)> {
    let (w, h) = (camera.width, camera.height);
    let rays = (0..h)
        .flat_map(|row| (0..w).map(move |col| (col, row)))
        .map(|(col, row)| pixel_ray(camera, col, row))
        .collect::<Result<Vec<_>>>()?;
    let rendered = render_rays(field, ctx, &rays, samples)?;
    let mut img = Image::new(w, h);
    let mut alpha = vec![0.0; w * h];
    for (i, r) in rendered.iter().enumerate() {
        img.data[3 * i..3 * i + 3].copy_from_slice(&r.color);
        alpha[i] = r.alpha;
    }
    Ok((img, alpha))
}
