//! Losses, Adam, patch sampling and the optimization loop.

pub mod checkpoint;
mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Group, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{Field, FieldMode, Mlp};
use crate::geometry::{build_scales, ArticulatedMesh, Vec3};
use crate::hashgrid::{HashGrid, HashGridConfig};
use crate::motion::MotionField;
use crate::occlusion::bounding_box;
use crate::renderer::{batch_terminations, render_taped, FrameContext, Jitter, SampleBatch};
use crate::scene_io::{pixel_ray, Camera, FrameRecord, Image, Ray, SceneDataset};
use crate::visibility::update_attention;

pub use config::{key_values, TrainConfig};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MLP_SEED_SALT: u64 = 0x6d6c_7000;
const JITTER_SEED_SALT: u64 = 0x6a69_7400;

/// Mean squared error over the pixels with `mask` set, averaged over the
/// three channels. `pred` and `reference` are interleaved RGB.
pub fn mse_loss(pred: &[f64], reference: &[f64], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..3 {
            let d = pred[3 * i + k] - reference[3 * i + k];
            sum += d * d;
        }
    }
    sum / (3 * n) as f64
}

/// `m exp(relu(beta - relu(sigma_raw)) - beta)` with `m = [d < 0]`.
pub fn comp_loss(sigma_raw: f64, d: f64, beta: f64) -> f64 {
    if d >= 0.0 {
        return 0.0;
    }
    ((beta - sigma_raw.max(0.0)).max(0.0) - beta).exp()
}

/// Mean of [`comp_loss`] over all samples.
pub fn comp_loss_mean(sigma_raw: &[f64], d: &[f64], beta: f64) -> f64 {
    if sigma_raw.is_empty() {
        return 0.0;
    }
    sigma_raw.iter().zip(d).map(|(&s, &d)| comp_loss(s, d, beta)).sum::<f64>() / sigma_raw.len() as f64
}

pub fn total_loss(mse: f64, lpips: f64, comp: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_mse * mse + cfg.lambda_lpips * lpips + cfg.lambda_comp * comp
}

/// Perceptual loss plugin: value and gradient with respect to `pred`'s
/// interleaved RGB values.
pub trait PerceptualLoss: Send + Sync {
    fn loss(&self, pred: &Image, reference: &Image) -> (f64, Vec<f64>);
}

/// Bias-corrected Adam with one moment pair per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    moments: [(Vec<f64>, Vec<f64>); 3],
}

fn group_slot(g: Group) -> usize {
    Group::ALL.iter().position(|&x| x == g).unwrap()
}

impl Adam {
    pub fn new(sizes: [usize; 3]) -> Self {
        Self {
            step: 0,
            moments: sizes.map(|n| (vec![0.0; n], vec![0.0; n])),
        }
    }

    pub fn for_field(field: &Field) -> Self {
        Self::new(Group::ALL.map(|g| field.num_params(g)))
    }

    pub fn moments(&self, g: Group) -> (&[f64], &[f64]) {
        let (m, v) = &self.moments[group_slot(g)];
        (m, v)
    }

    pub(crate) fn moments_mut(&mut self, g: Group) -> (&mut Vec<f64>, &mut Vec<f64>) {
        let (m, v) = &mut self.moments[group_slot(g)];
        (m, v)
    }

    /// One update of every group; `params` and `lrs` are in [`Group::ALL`]
    /// order. Nothing changes when a gradient is non-finite.
    pub fn update(&mut self, params: [&mut [f64]; 3], grads: &Gradients, lrs: [f64; 3]) -> Result<()> {
        grads.check_finite()?;
        for (slot, g) in Group::ALL.iter().enumerate() {
            if params[slot].len() != grads.get(*g).len() || self.moments[slot].0.len() != grads.get(*g).len() {
                return Err(Error::LengthMismatch(format!("{} parameters and gradients differ", g.name())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for ((slot, g), p) in Group::ALL.iter().enumerate().zip(params) {
            let (m, v) = &mut self.moments[slot];
            for (((p, &gr), m), v) in p.iter_mut().zip(grads.get(*g)).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gr;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gr * gr;
                *p -= lrs[slot] * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Freshly initialized field for `template`.
pub fn build_field(template: &ArticulatedMesh, cfg: &TrainConfig) -> Result<Field> {
    let aabb = template
        .aabb()
        .ok_or_else(|| Error::Mesh("template has no vertices".into()))?;
    let mut gc = match cfg.mode {
        FieldMode::Surface => HashGridConfig::surface(&aabb),
        FieldMode::Point => HashGridConfig::point(&aabb),
    };
    gc.levels = cfg.grid_levels;
    gc.table_size = 1usize << cfg.grid_table_log2;
    gc.features = cfg.grid_features;
    gc.base_resolution = cfg.grid_base_resolution;
    gc.max_resolution = cfg.grid_max_resolution;
    let grid = HashGrid::new(gc, cfg.seed)?;
    let mut field = Field {
        mode: cfg.mode,
        use_attention: cfg.attention,
        grid,
        mlp: Mlp::zeros(1, 0, 1, 1),
        surface: build_scales(template)?,
    };
    field.mlp = Mlp::new(
        field.feature_dim(),
        cfg.mlp_layers,
        cfg.mlp_width,
        4,
        cfg.density_bias,
        cfg.seed ^ MLP_SEED_SALT,
    );
    Ok(field)
}

/// All trainable state plus optimizer moments.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub field: Field,
    pub adam: Adam,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(template: &ArticulatedMesh, cfg: &TrainConfig) -> Result<Self> {
        let field = build_field(template, cfg)?;
        let adam = Adam::for_field(&field);
        Ok(Self {
            field,
            adam,
            iteration: 0,
        })
    }

    fn apply_gradients(&mut self, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
        let mut offsets = self.field.surface.flat_offsets();
        let Field { mlp, grid, .. } = &mut self.field;
        self.adam.update(
            [mlp.params_mut(), &mut offsets, grid.params_mut()],
            grads,
            [cfg.lr_mlp, cfg.lr_vertices, cfg.lr_grid],
        )?;
        self.field.surface.load_flat_offsets(&offsets)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub col0: usize,
    pub row0: usize,
    pub width: usize,
    pub height: usize,
}

/// Rays of one step, in patch-major, row-major order.
#[derive(Clone, Debug)]
pub struct RaySet {
    pub patches: Vec<Patch>,
    pub pixels: Vec<(usize, usize)>,
    pub rays: Vec<Ray>,
    /// Whether each ray contributes to the photometric loss.
    pub supervised: Vec<bool>,
}

impl RaySet {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Square windows whose centers are uniform over the subject bounding box,
/// shifted to lie inside the image. `None` when the subject mask is empty.
pub fn sample_patches<R: Rng>(frame: &FrameRecord, camera: &Camera, cfg: &TrainConfig, rng: &mut R) -> Result<Option<RaySet>> {
    let Some((c0, r0, c1, r1)) = bounding_box(&frame.subject_mask) else {
        warn!("frame {} has an empty subject mask; skipping", frame.frame_index);
        return Ok(None);
    };
    let (w, h) = (frame.subject_mask.width, frame.subject_mask.height);
    let (pw, ph) = (cfg.patch_size.min(w), cfg.patch_size.min(h));
    let sup = if cfg.supervise_background {
        frame.occlusion_mask.data.iter().map(|&o| !o).collect::<Vec<_>>()
    } else {
        frame.supervision_mask().data
    };
    let mut set = RaySet {
        patches: Vec::with_capacity(cfg.patches_per_step),
        pixels: Vec::with_capacity(cfg.patches_per_step * pw * ph),
        rays: Vec::with_capacity(cfg.patches_per_step * pw * ph),
        supervised: Vec::with_capacity(cfg.patches_per_step * pw * ph),
    };
    for _ in 0..cfg.patches_per_step {
        let (cx, cy) = (rng.gen_range(c0..=c1), rng.gen_range(r0..=r1));
        let col0 = cx.saturating_sub(pw / 2).min(w - pw);
        let row0 = cy.saturating_sub(ph / 2).min(h - ph);
        set.patches.push(Patch {
            col0,
            row0,
            width: pw,
            height: ph,
        });
        for row in row0..row0 + ph {
            for col in col0..col0 + pw {
                set.pixels.push((col, row));
                set.rays.push(pixel_ray(camera, col, row)?);
                set.supervised.push(sup[row * w + col]);
            }
        }
    }
    Ok(Some(set))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub mse: f64,
    pub comp: f64,
    pub total: f64,
}

/// `sum_i w_i (rgb_i + (1 - acc_i) bg - t_i)^2 + c` on the tape, with
/// `rgb` and `acc` read from `composite`.
fn weighted_squared_error<'a>(
    tape: &mut Tape<'a>,
    composite: Var,
    background: [f64; 3],
    target: Tensor,
    weight: Tensor,
    constant: f64,
) -> Var {
    let rows = target.rows;
    let mut rgb = tape.slice_cols(composite, 0, 3);
    if background != [0.0; 3] {
        let acc = tape.slice_cols(composite, 3, 4);
        let bg_row = tape.constant(Tensor::from_vec(1, 3, background.to_vec()));
        let covered = tape.matmul(acc, bg_row);
        let shown = tape.sub(rgb, covered);
        let bg = tape.constant(Tensor::from_vec(rows, 3, background.repeat(rows)));
        rgb = tape.add(shown, bg);
    }
    let t = tape.constant(target);
    let diff = tape.sub(rgb, t);
    let sq = tape.mul(diff, diff);
    let w = tape.constant(weight);
    let weighted = tape.mul(sq, w);
    let s = tape.sum(weighted);
    tape.add_scalar(s, constant)
}

/// Batch mean of the completeness penalty on the tape.
fn comp_taped<'a>(tape: &mut Tape<'a>, sigma_raw: Var, inside: Tensor, beta: f64) -> Var {
    let s = tape.relu(sigma_raw);
    let neg = tape.scale(s, -1.0);
    let shifted = tape.add_scalar(neg, beta);
    let clipped = tape.relu(shifted);
    let exponent = tape.add_scalar(clipped, -beta);
    let e = tape.exp(exponent);
    let m = tape.constant(inside);
    let masked = tape.mul(e, m);
    tape.mean(masked)
}

/// One optimization step on frame `iteration mod N`. `None` when the frame
/// was skipped.
pub fn train_step(
    state: &mut TrainState,
    dataset: &SceneDataset,
    motion: &MotionField,
    cfg: &TrainConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<Option<StepStats>> {
    let Some(out) = compute_step(&state.field, dataset, motion, cfg, state.iteration, perceptual)? else {
        return Ok(None);
    };
    state.apply_gradients(&out.gradients, cfg)?;
    let points: Vec<Vec3> = out.terminations.into_iter().flatten().collect();
    if !points.is_empty() {
        update_attention(&mut state.field.surface, &points)?;
    }
    Ok(Some(out.stats))
}

/// Losses, gradients and termination points of one step, without touching
/// the parameters.
pub struct StepOutput {
    pub stats: StepStats,
    pub gradients: Gradients,
    /// Empty unless the field uses attention.
    pub terminations: Vec<Option<Vec3>>,
}

pub fn compute_step(
    field: &Field,
    dataset: &SceneDataset,
    motion: &MotionField,
    cfg: &TrainConfig,
    iter: usize,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<Option<StepOutput>> {
    match draw_step(field, dataset, motion, cfg, iter)? {
        Some(draw) => evaluate_step(field, dataset, &draw, cfg, perceptual).map(Some),
        None => Ok(None),
    }
}

/// The discrete part of one step: rays, jittered samples, neighbor sets,
/// targets and the inside mask of the completeness term.
#[derive(Clone, Debug)]
pub struct StepDraw {
    pub iteration: usize,
    pub frame: usize,
    pub rays: RaySet,
    pub background: [f64; 3],
    pub batch: SampleBatch,
    /// Per hit ray; `weight` is zero for unsupervised rays.
    target: Tensor,
    weight: Tensor,
    /// Error of supervised rays that miss the bounds.
    miss_const: f64,
    inside: Tensor,
}

pub fn draw_step(
    field: &Field,
    dataset: &SceneDataset,
    motion: &MotionField,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<Option<StepDraw>> {
    let fi = iter % dataset.frames.len();
    let frame = &dataset.frames[fi];
    let camera = &dataset.cameras[fi];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iter as u64);
    let Some(rays) = sample_patches(frame, camera, cfg, &mut rng)? else {
        return Ok(None);
    };
    let background: [f64; 3] = if cfg.random_background { rng.gen() } else { [0.0; 3] };
    let ctx = FrameContext::new(motion, &dataset.template, &frame.pose)?;
    let jitter = Jitter {
        seed: cfg.seed ^ JITTER_SEED_SALT,
        stream_base: (iter as u64) << 32,
    };
    let batch = ctx.sample(field, &rays.rays, cfg.samples, Some(jitter))?;

    let reference = |i: usize| {
        let (col, row) = rays.pixels[i];
        if frame.subject_mask.get(col, row) {
            frame.image.get(col, row)
        } else {
            background
        }
    };
    let n_sup = rays.supervised.iter().filter(|&&s| s).count();
    let inv = if n_sup > 0 { 1.0 / (3 * n_sup) as f64 } else { 0.0 };
    let mut hit = vec![false; rays.len()];
    batch.ray_index.iter().for_each(|&i| hit[i] = true);
    // unhit rays show the background and carry no gradient
    let miss_const: f64 = (0..rays.len())
        .filter(|&i| rays.supervised[i] && !hit[i])
        .map(|i| reference(i).iter().zip(&background).map(|(r, b)| (r - b) * (r - b)).sum::<f64>() * inv)
        .sum();
    let hits = batch.num_rays();
    let mut target = Tensor::zeros(hits, 3);
    let mut weight = Tensor::zeros(hits, 3);
    for (k, &i) in batch.ray_index.iter().enumerate() {
        target.row_mut(k).copy_from_slice(&reference(i));
        if rays.supervised[i] {
            weight.row_mut(k).iter_mut().for_each(|w| *w = inv);
        }
    }
    let inside = Tensor::column(
        batch
            .prepared
            .iter()
            .map(|p| if p.signed_distance < 0.0 { 1.0 } else { 0.0 })
            .collect(),
    );
    Ok(Some(StepDraw {
        iteration: iter,
        frame: fi,
        rays,
        background,
        batch,
        target,
        weight,
        miss_const,
        inside,
    }))
}

/// Losses and gradients of `field` on a fixed draw.
pub fn evaluate_step(
    field: &Field,
    dataset: &SceneDataset,
    draw: &StepDraw,
    cfg: &TrainConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<StepOutput> {
    let batch = &draw.batch;
    let lambda_comp = cfg.comp_weight(draw.iteration);
    let mut grads = field.zero_gradients();
    let (stats, terminations) = {
        let mut tape = Tape::new();
        let (mse, comp, total, terms);
        if batch.num_rays() > 0 {
            let r = render_taped(&mut tape, field, batch)?;
            let mse_v = weighted_squared_error(
                &mut tape,
                r.composite,
                draw.background,
                draw.target.clone(),
                draw.weight.clone(),
                draw.miss_const,
            );
            let comp_v = comp_taped(&mut tape, r.sigma_raw, draw.inside.clone(), cfg.beta);
            let a = tape.scale(mse_v, cfg.lambda_mse);
            let b = tape.scale(comp_v, lambda_comp);
            let total_v = tape.add(a, b);
            mse = tape.value(mse_v).item();
            comp = tape.value(comp_v).item();
            let mut t = tape.value(total_v).item();
            if cfg.lambda_mse != 0.0 || lambda_comp != 0.0 {
                tape.backward(total_v, &mut grads)?;
            }
            if let Some(p) = perceptual {
                let frame = &dataset.frames[draw.frame];
                let (value, seed) = perceptual_seed(p, &draw.rays, &batch.ray_index, tape.value(r.composite), frame)?;
                t += cfg.lambda_lpips * value;
                if cfg.lambda_lpips != 0.0 {
                    tape.backward_with(r.composite, seed.map(|g| g * cfg.lambda_lpips), &mut grads)?;
                }
            }
            total = t;
            terms = if field.use_attention && field.mode == FieldMode::Surface {
                batch_terminations(batch, tape.value(r.sigma))?
            } else {
                Vec::new()
            };
        } else {
            mse = draw.miss_const;
            comp = 0.0;
            total = cfg.lambda_mse * mse;
            terms = Vec::new();
        }
        (StepStats { mse, comp, total }, terms)
    };
    if !stats.total.is_finite() {
        return Err(Error::NonFiniteLoss(draw.iteration));
    }
    Ok(StepOutput {
        stats,
        gradients: grads,
        terminations,
    })
}

trait TensorMap {
    fn map(self, f: impl Fn(f64) -> f64) -> Tensor;
}

impl TensorMap for Tensor {
    fn map(mut self, f: impl Fn(f64) -> f64) -> Tensor {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// Perceptual value summed over patches and its gradient on the composite.
fn perceptual_seed(
    p: &dyn PerceptualLoss,
    rays: &RaySet,
    ray_index: &[usize],
    composite: &Tensor,
    frame: &FrameRecord,
) -> Result<(f64, Tensor)> {
    let mut row_of = vec![None; rays.len()];
    for (k, &i) in ray_index.iter().enumerate() {
        row_of[i] = Some(k);
    }
    let mut seed = Tensor::zeros(composite.rows, composite.cols);
    let mut value = 0.0;
    let mut at = 0;
    for patch in &rays.patches {
        let n = patch.width * patch.height;
        let mut pred = Image::new(patch.width, patch.height);
        let mut reference = Image::new(patch.width, patch.height);
        for j in 0..n {
            let (col, row) = rays.pixels[at + j];
            if let Some(k) = row_of[at + j] {
                let r = composite.row(k);
                pred.data[3 * j..3 * j + 3].copy_from_slice(&r[..3]);
            }
            reference.data[3 * j..3 * j + 3].copy_from_slice(&frame.image.get(col, row));
        }
        let (v, g) = p.loss(&pred, &reference);
        if g.len() != 3 * n {
            return Err(Error::LengthMismatch("perceptual gradient does not match the patch".into()));
        }
        value += v;
        for j in 0..n {
            if let Some(k) = row_of[at + j] {
                seed.row_mut(k)[..3].iter_mut().zip(&g[3 * j..3 * j + 3]).for_each(|(s, g)| *s += g);
            }
        }
        at += n;
    }
    Ok((value, seed))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub mse: f64,
    pub comp: f64,
    pub total: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "iter,mse,comp,total,seconds";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{:.3}", self.iter, self.mse, self.comp, self.total, self.seconds)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Interval means, one row per `log_every` iterations.
    pub log: Vec<LogRow>,
    /// Per-iteration statistics; `None` for skipped frames.
    pub history: Vec<Option<StepStats>>,
}

#[derive(Default)]
pub struct TrainOptions<'p> {
    /// Receives `loss.csv`, periodic checkpoints and `checkpoint.bin`.
    pub out_dir: Option<PathBuf>,
    pub perceptual: Option<&'p dyn PerceptualLoss>,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS_LOG: &str = "loss.csv";

pub fn periodic_checkpoint_name(iter: usize) -> String {
    format!("checkpoint_{iter:06}.bin")
}

/// Continues `state` up to `cfg.iterations`.
pub fn run(state: &mut TrainState, dataset: &SceneDataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    dataset.validate()?;
    let motion = MotionField::new(&dataset.template)?;
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let start = Instant::now();
    let mut report = TrainReport::default();
    while state.iteration < cfg.iterations {
        let stats = train_step(state, dataset, &motion, cfg, opts.perceptual)?;
        state.iteration += 1;
        report.history.push(stats);
        let it = state.iteration;
        if it % cfg.log_every == 0 {
            let window: Vec<StepStats> = report.history.iter().rev().take(cfg.log_every).flatten().copied().collect();
            let n = window.len().max(1) as f64;
            let row = LogRow {
                iter: it,
                mse: window.iter().map(|s| s.mse).sum::<f64>() / n,
                comp: window.iter().map(|s| s.comp).sum::<f64>() / n,
                total: window.iter().map(|s| s.total).sum::<f64>() / n,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("{}", row.to_csv());
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{}", row.to_csv())
                    .and_then(|_| f.flush())
                    .map_err(|e| Error::io(&*path, e))?;
            }
            report.log.push(row);
        }
        if let Some(dir) = &opts.out_dir {
            if it % cfg.checkpoint_every == 0 && it < cfg.iterations {
                checkpoint::save(&dir.join(periodic_checkpoint_name(it)), cfg, state)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), cfg, state)?;
    }
    Ok(report)
}

/// Initializes a model for `dataset` and trains it.
pub fn train(dataset: &SceneDataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<(TrainState, TrainReport)> {
    let mut state = TrainState::new(&dataset.template, cfg)?;
    let report = run(&mut state, dataset, cfg, opts)?;
    Ok((state, report))
}

/// Path of the final checkpoint inside a training output directory.
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join(FINAL_CHECKPOINT)
}
