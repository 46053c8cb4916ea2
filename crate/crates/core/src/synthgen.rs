//! Synthetic benchmark: a capsule humanoid with a procedural texture, a
//! looping walk cycle and a z-buffer rasterizer producing frames and masks.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ArticulatedMesh, Bone, Vec3};
use crate::motion::{bone_transforms, pose_vertices, PoseFrame};
use crate::scene_io::{write_manifest, Camera, EvalView, FrameRecord, Image, Mask, SceneDataset};

pub const NUM_BONES: usize = 12;
/// Joint band width as a fraction of limb length.
pub const JOINT_BAND: f64 = 0.2;

const AMBIENT: f64 = 0.4;
const DIFFUSE: f64 = 0.6;

/// Limb dimensions of the template, in scene units.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanoidDims {
    pub torso_length: f64,
    pub torso_radius: f64,
    pub head_length: f64,
    pub head_radius: f64,
    pub arm_length: f64,
    pub arm_radius: f64,
    pub leg_length: f64,
    pub leg_radius: f64,
    /// Capsule tessellation: vertices per ring, rings per hemisphere, and
    /// cylinder rings between the hemispheres.
    pub segments: usize,
    pub cap_rings: usize,
    pub body_rings: usize,
}

impl Default for HumanoidDims {
    fn default() -> Self {
        Self {
            torso_length: 3.2,
            torso_radius: 1.0,
            head_length: 1.0,
            head_radius: 0.75,
            arm_length: 3.2,
            arm_radius: 0.4,
            leg_length: 4.8,
            leg_radius: 0.5,
            segments: 12,
            cap_rings: 4,
            body_rings: 5,
        }
    }
}

/// A two-bone capsule: `start -> joint -> end`, bones `(first, second)`.
struct Capsule {
    start: Vec3,
    joint: Vec3,
    end: Vec3,
    radius: f64,
    bones: (usize, usize),
}

struct Layout {
    bones: Vec<Bone>,
    capsules: Vec<Capsule>,
}

fn layout(d: &HumanoidDims) -> Result<Layout> {
    let all = [
        d.torso_length,
        d.torso_radius,
        d.head_length,
        d.head_radius,
        d.arm_length,
        d.arm_radius,
        d.leg_length,
        d.leg_radius,
    ];
    if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config("humanoid dimensions must be positive".into()));
    }
    if d.segments < 3 || d.cap_rings < 1 {
        return Err(Error::Config("capsules need at least 3 segments and 1 cap ring".into()));
    }
    let y = Vec3::y();
    let x = Vec3::x();
    let pelvis = Vec3::zeros();
    let spine = y * (d.torso_length / 2.0);
    let top = y * d.torso_length;
    let neck = top + y * (0.4 * d.head_radius + 0.1);
    let head = neck + y * (d.head_length / 2.0);
    let crown = neck + y * d.head_length;
    let shoulder_y = d.torso_length - 0.4 * d.torso_radius;
    let shoulder_x = d.torso_radius + d.arm_radius;
    let hip_x = 0.55 * d.torso_radius;
    let hip = |s: f64| Vec3::new(s * hip_x, -0.4 * d.torso_radius, 0.0);
    let shoulder = |s: f64| Vec3::new(s * shoulder_x, shoulder_y, 0.0);

    let mut bones = vec![
        Bone { parent: None, head: pelvis },
        Bone { parent: Some(0), head: spine },
        Bone { parent: Some(1), head: neck },
        Bone { parent: Some(2), head },
    ];
    let mut capsules = vec![
        Capsule { start: pelvis, joint: spine, end: top, radius: d.torso_radius, bones: (0, 1) },
        Capsule { start: neck, joint: head, end: crown, radius: d.head_radius, bones: (2, 3) },
    ];
    for side in [1.0, -1.0] {
        let s = shoulder(side);
        let elbow = s + x * (side * d.arm_length / 2.0);
        let wrist = s + x * (side * d.arm_length);
        let b = bones.len();
        bones.push(Bone { parent: Some(1), head: s });
        bones.push(Bone { parent: Some(b), head: elbow });
        capsules.push(Capsule { start: s, joint: elbow, end: wrist, radius: d.arm_radius, bones: (b, b + 1) });
    }
    for side in [1.0, -1.0] {
        let h = hip(side);
        let knee = h - y * (d.leg_length / 2.0);
        let ankle = h - y * d.leg_length;
        let b = bones.len();
        bones.push(Bone { parent: Some(0), head: h });
        bones.push(Bone { parent: Some(b), head: knee });
        capsules.push(Capsule { start: h, joint: knee, end: ankle, radius: d.leg_radius, bones: (b, b + 1) });
    }
    debug_assert_eq!(bones.len(), NUM_BONES);
    Ok(Layout { bones, capsules })
}

/// Vertices per capsule for the given tessellation.
pub fn capsule_vertex_count(d: &HumanoidDims) -> usize {
    2 + d.segments * (2 * d.cap_rings + d.body_rings)
}

/// Capsule index of every template vertex (0 torso, 1 head, 2/3 arms, 4/5 legs).
pub fn vertex_parts(d: &HumanoidDims) -> Vec<usize> {
    let per = capsule_vertex_count(d);
    (0..6).flat_map(|c| std::iter::repeat(c).take(per)).collect()
}

/// Capsule humanoid with 12 bones and blended skin weights over joint bands.
pub fn build_template(d: &HumanoidDims) -> Result<ArticulatedMesh> {
    let Layout { bones, capsules } = layout(d)?;
    let k = bones.len();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    for cap in &capsules {
        let base = vertices.len();
        let axis = cap.end - cap.start;
        let len = axis.norm();
        let u = axis / len;
        let helper = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = u.cross(&helper).normalize();
        let e2 = u.cross(&e1);
        // (axial position, ring radius) from the start pole to the end pole
        let mut profile = Vec::new();
        for i in 1..=d.cap_rings {
            let phi = PI / 2.0 * i as f64 / d.cap_rings as f64;
            profile.push((-cap.radius * phi.cos(), cap.radius * phi.sin()));
        }
        for m in 1..=d.body_rings {
            profile.push((len * m as f64 / (d.body_rings + 1) as f64, cap.radius));
        }
        for i in (1..=d.cap_rings).rev() {
            let phi = PI / 2.0 * i as f64 / d.cap_rings as f64;
            profile.push((len + cap.radius * phi.cos(), cap.radius * phi.sin()));
        }
        let s = d.segments;
        let joint_s = (cap.joint - cap.start).dot(&u);
        let half_band = JOINT_BAND * len / 2.0;
        let mut push = |p: Vec3, along: f64| {
            vertices.push(p);
            let t = ((along - (joint_s - half_band)) / (2.0 * half_band)).clamp(0.0, 1.0);
            let mut row = vec![0.0; k];
            row[cap.bones.0] += 1.0 - t;
            row[cap.bones.1] += t;
            weights.extend(row);
        };
        push(cap.start - u * cap.radius, -cap.radius);
        for &(along, rho) in &profile {
            for j in 0..s {
                let th = TAU * j as f64 / s as f64;
                push(cap.start + u * along + (e1 * th.cos() + e2 * th.sin()) * rho, along);
            }
        }
        push(cap.end + u * cap.radius, len + cap.radius);

        let rings = profile.len();
        let ring = |r: usize, j: usize| base + 1 + r * s + j % s;
        let last = base + 1 + rings * s;
        for j in 0..s {
            faces.push([base, ring(0, j + 1), ring(0, j)]);
            faces.push([last, ring(rings - 1, j), ring(rings - 1, j + 1)]);
        }
        for r in 0..rings - 1 {
            for j in 0..s {
                faces.push([ring(r, j), ring(r, j + 1), ring(r + 1, j)]);
                faces.push([ring(r, j + 1), ring(r + 1, j + 1), ring(r + 1, j)]);
            }
        }
    }
    ArticulatedMesh::new(vertices, faces, weights, bones)
}

/// Low-frequency per-part color pattern in [0.1, 0.9].
#[derive(Clone, Debug)]
pub struct Texture {
    bases: [[f64; 3]; 6],
    directions: [[Vec3; 3]; 6],
    phases: [[f64; 3]; 6],
}

const PART_COLORS: [[f64; 3]; 6] = [
    [0.75, 0.35, 0.30],
    [0.80, 0.65, 0.50],
    [0.30, 0.55, 0.75],
    [0.35, 0.70, 0.35],
    [0.55, 0.40, 0.70],
    [0.70, 0.60, 0.25],
];
const PATTERN_AMPLITUDE: f64 = 0.1;
const PATTERN_FREQUENCY: f64 = 1.6;

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut directions = [[Vec3::zeros(); 3]; 6];
        let mut phases = [[0.0; 3]; 6];
        for part in 0..6 {
            for c in 0..3 {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                directions[part][c] = v.try_normalize(1e-9).unwrap_or(Vec3::y());
                phases[part][c] = rng.gen_range(0.0..TAU);
            }
        }
        Self {
            bases: PART_COLORS,
            directions,
            phases,
        }
    }

    /// Albedo of a canonical point on `part`.
    pub fn color(&self, part: usize, p: &Vec3) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            let wave = (PATTERN_FREQUENCY * self.directions[part][k].dot(p) + self.phases[part][k]).sin();
            *ck = (self.bases[part][k] + PATTERN_AMPLITUDE * wave).clamp(0.1, 0.9);
        }
        c
    }
}

/// Per-vertex albedo of a template built from `d`.
pub fn procedural_texture(mesh: &ArticulatedMesh, d: &HumanoidDims, texture: &Texture) -> Vec<[f64; 3]> {
    let parts = vertex_parts(d);
    mesh.vertices.iter().zip(parts).map(|(v, p)| texture.color(p, v)).collect()
}

fn axis_angle(axis: Vec3, angle: f64) -> [f64; 4] {
    let q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle);
    [q.w, q.i, q.j, q.k]
}

fn joint_scales(seed: u64) -> [f64; NUM_BONES] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale = [0.0; NUM_BONES];
    for s in scale.iter_mut() {
        *s = rng.gen_range(0.4..1.0);
    }
    // thighs carry the full amplitude
    scale[8] = 1.0;
    scale[10] = 1.0;
    scale
}

/// Pose at frame `f` of a walk cycle of `period` frames.
fn cycle_pose(f: usize, period: usize, amplitude: f64, scale: &[f64; NUM_BONES]) -> PoseFrame {
    let th = TAU * f as f64 / period.max(1) as f64;
    let (s1, knee) = (th.sin(), 0.5 * (1.0 - th.cos()));
    let a = |b: usize| amplitude * scale[b];
    let rot = [
        axis_angle(Vec3::y(), 0.25 * a(0) * s1),
        axis_angle(Vec3::y(), 0.3 * a(1) * s1),
        [1.0, 0.0, 0.0, 0.0],
        axis_angle(Vec3::x(), 0.3 * a(3) * s1),
        axis_angle(Vec3::z(), a(4) * s1),
        axis_angle(Vec3::z(), 0.5 * a(5) * knee),
        axis_angle(Vec3::z(), a(6) * s1),
        axis_angle(Vec3::z(), -0.5 * a(7) * knee),
        axis_angle(Vec3::x(), a(8) * s1),
        axis_angle(Vec3::x(), a(9) * knee),
        axis_angle(Vec3::x(), -a(10) * s1),
        axis_angle(Vec3::x(), a(11) * knee),
    ];
    let sway = [0.3 * s1, 0.15 * (2.0 * th).sin(), 0.0];
    PoseFrame::from_wxyz(&rot, sway)
}

/// One cycle of a walk: frame `f` has phase `2 pi f / n`, frame 0 is the
/// rest pose, and the largest joint angle equals `amplitude` whenever `n` is
/// a multiple of 4.
pub fn pose_sequence(n_frames: usize, amplitude: f64, seed: u64) -> Vec<PoseFrame> {
    let scale = joint_scales(seed);
    (0..n_frames).map(|f| cycle_pose(f, n_frames, amplitude, &scale)).collect()
}

/// Z-buffered rendering of colored triangles with flat Lambertian shading.
/// `light` points toward the light. Returns the image and coverage mask.
pub fn rasterize(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    colors: &[[f64; 3]],
    camera: &Camera,
    light: &Vec3,
) -> Result<(Image, Mask)> {
    camera.validate()?;
    if colors.len() != vertices.len() {
        return Err(Error::LengthMismatch(format!("{} colors for {} vertices", colors.len(), vertices.len())));
    }
    let (w, h) = (camera.width, camera.height);
    let mut img = Image::new(w, h);
    let mut mask = Mask::new(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    let light = light.normalize();
    let projected: Vec<Option<(f64, f64, f64)>> = vertices.iter().map(|v| camera.project(v)).collect();
    for f in faces {
        let (Some(p0), Some(p1), Some(p2)) = (projected[f[0]], projected[f[1]], projected[f[2]]) else {
            continue;
        };
        let area = (p1.0 - p0.0) * (p2.1 - p0.1) - (p2.0 - p0.0) * (p1.1 - p0.1);
        if area == 0.0 {
            continue;
        }
        let n = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
        let Some(n) = n.try_normalize(1e-300) else { continue };
        let shade = AMBIENT + DIFFUSE * n.dot(&light).max(0.0);
        let lo_u = p0.0.min(p1.0).min(p2.0).floor().max(0.0) as usize;
        let hi_u = (p0.0.max(p1.0).max(p2.0).ceil().max(0.0) as usize).min(w);
        let lo_v = p0.1.min(p1.1).min(p2.1).floor().max(0.0) as usize;
        let hi_v = (p0.1.max(p1.1).max(p2.1).ceil().max(0.0) as usize).min(h);
        for row in lo_v..hi_v {
            for col in lo_u..hi_u {
                let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
                let b0 = ((p1.0 - u) * (p2.1 - v) - (p2.0 - u) * (p1.1 - v)) / area;
                let b1 = ((p2.0 - u) * (p0.1 - v) - (p0.0 - u) * (p2.1 - v)) / area;
                let b2 = 1.0 - b0 - b1;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                // perspective-correct weights
                let (q0, q1, q2) = (b0 / p0.2, b1 / p1.2, b2 / p2.2);
                let qs = q0 + q1 + q2;
                let z = 1.0 / qs;
                let i = row * w + col;
                if z >= depth[i] {
                    continue;
                }
                depth[i] = z;
                let (c0, c1, c2) = (colors[f[0]], colors[f[1]], colors[f[2]]);
                let mut rgb = [0.0; 3];
                for k in 0..3 {
                    rgb[k] = ((q0 * c0[k] + q1 * c1[k] + q2 * c2[k]) / qs * shade).clamp(0.0, 1.0);
                }
                img.set(col, row, rgb);
                mask.data[i] = true;
            }
        }
    }
    Ok((img, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dims: HumanoidDims,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Peak joint angle in radians.
    pub amplitude: f64,
    pub focal: f64,
    pub camera_distance: f64,
    /// Azimuths (radians about +y) of the held-out cameras; the training
    /// camera sits at azimuth 0 on the -z side.
    pub eval_azimuths: Vec<f64>,
    pub light: Vec3,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: HumanoidDims::default(),
            frames: 40,
            width: 64,
            height: 64,
            amplitude: 0.6,
            focal: 140.0,
            camera_distance: 30.0,
            eval_azimuths: vec![PI / 3.0, PI, 5.0 * PI / 3.0],
            light: Vec3::new(-0.4, 0.6, -1.0),
            seed: 0,
        }
    }
}

/// Camera on a horizontal circle around the subject, looking at it.
pub fn orbit_camera(cfg: &SynthConfig, azimuth: f64) -> Result<Camera> {
    let target = Vec3::new(0.0, -0.2, 0.0);
    let eye = target + Vec3::new(-azimuth.sin(), 0.0, -azimuth.cos()) * cfg.camera_distance;
    Camera::look_at(eye, target, Vec3::y(), cfg.focal, cfg.width, cfg.height)
}

/// Renders the whole benchmark in memory. Occlusion masks are empty.
pub fn synthesize(cfg: &SynthConfig) -> Result<SceneDataset> {
    if cfg.frames == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(Error::Config("frames, width and height must be positive".into()));
    }
    let template = build_template(&cfg.dims)?;
    let texture = Texture::new(cfg.seed);
    let colors = procedural_texture(&template, &cfg.dims, &texture);
    let poses = pose_sequence(cfg.frames, cfg.amplitude, cfg.seed);
    let train_cam = orbit_camera(cfg, 0.0)?;
    let eval_cams = cfg
        .eval_azimuths
        .iter()
        .map(|&a| orbit_camera(cfg, a))
        .collect::<Result<Vec<_>>>()?;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut eval_frames: Vec<Vec<FrameRecord>> = vec![Vec::with_capacity(cfg.frames); eval_cams.len()];
    for (i, pose) in poses.iter().enumerate() {
        let posed = pose_vertices(&template, &bone_transforms(pose, &template)?);
        let shot = |cam: &Camera| -> Result<FrameRecord> {
            let (image, subject_mask) = rasterize(&posed, &template.faces, &colors, cam, &cfg.light)?;
            Ok(FrameRecord {
                frame_index: i,
                image,
                subject_mask,
                occlusion_mask: Mask::new(cam.width, cam.height),
                pose: pose.clone(),
            })
        };
        let fr = shot(&train_cam)?;
        if fr.subject_mask.count() == 0 {
            return Err(Error::frame(i, "subject is not visible from the training camera"));
        }
        frames.push(fr);
        for (cam, out) in eval_cams.iter().zip(eval_frames.iter_mut()) {
            out.push(shot(cam)?);
        }
    }
    let eval_views = eval_cams
        .into_iter()
        .zip(eval_frames)
        .enumerate()
        .map(|(k, (camera, frames))| EvalView {
            name: format!("view{}", k + 1),
            camera,
            frames,
        })
        .collect();
    let dataset = SceneDataset {
        cameras: vec![train_cam; cfg.frames],
        frames,
        template,
        canonical_pose: PoseFrame::canonical(NUM_BONES),
        eval_views,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Renders the benchmark and writes it under `dir`; returns the manifest path.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    write_manifest(&synthesize(cfg)?, dir)
}
