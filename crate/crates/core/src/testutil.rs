//! Small meshes shared by unit and integration tests.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{ArticulatedMesh, Bone, Vec3};
use crate::motion::PoseFrame;
use crate::scene_io::{Camera, EvalView, FrameRecord, Image, Mask, SceneDataset};

/// Subdivided icosahedron projected onto a sphere of `radius`.
pub fn icosphere(radius: f64, subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    (v.into_iter().map(|p| p * radius).collect(), f)
}

fn single_bone(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> ArticulatedMesh {
    let n = vertices.len();
    ArticulatedMesh::new(
        vertices,
        faces,
        vec![1.0; n],
        vec![Bone { parent: None, head: Vec3::zeros() }],
    )
    .expect("valid test mesh")
}

pub fn sphere_mesh(radius: f64, subdivisions: usize) -> ArticulatedMesh {
    let (v, f) = icosphere(radius, subdivisions);
    single_bone(v, f)
}

/// Latitude/longitude unit sphere with `rings * segments + 2` vertices whose
/// positions are jittered by up to `jitter` (radially preserved).
pub fn uv_sphere_mesh(rings: usize, segments: usize, jitter: f64, seed: u64) -> ArticulatedMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![Vec3::new(0.0, 1.0, 0.0)];
    for r in 0..rings {
        let phi = std::f64::consts::PI * (r as f64 + 1.0) / (rings as f64 + 1.0);
        for s in 0..segments {
            let th = std::f64::consts::TAU * s as f64 / segments as f64;
            let p = Vec3::new(phi.sin() * th.cos(), phi.cos(), phi.sin() * th.sin());
            let j = Vec3::new(
                rng.gen_range(-jitter..=jitter),
                rng.gen_range(-jitter..=jitter),
                rng.gen_range(-jitter..=jitter),
            );
            v.push((p + j).normalize());
        }
    }
    v.push(Vec3::new(0.0, -1.0, 0.0));
    let south = v.len() - 1;
    let ring = |r: usize, s: usize| 1 + r * segments + s % segments;
    let mut f = Vec::new();
    for s in 0..segments {
        f.push([0, ring(0, s + 1), ring(0, s)]);
        f.push([south, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            f.push([ring(r, s), ring(r, s + 1), ring(r + 1, s)]);
            f.push([ring(r, s + 1), ring(r + 1, s + 1), ring(r + 1, s)]);
        }
    }
    single_bone(v, f)
}

/// Two-bone sphere scene with `frames` frames of random 8-bit content.
pub fn tiny_dataset(frames: usize, width: usize, height: usize) -> SceneDataset {
    let (v, f) = icosphere(1.0, 3);
    let mut w = Vec::with_capacity(v.len() * 2);
    for p in &v {
        let t = (0.5 + 0.5 * p.y).clamp(0.0, 1.0);
        w.extend([1.0 - t, t]);
    }
    let bones = vec![
        Bone { parent: None, head: Vec3::zeros() },
        Bone { parent: Some(0), head: Vec3::new(0.0, 0.5, 0.0) },
    ];
    let template = ArticulatedMesh::new(v, f, w, bones).expect("valid test mesh");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let camera = Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), Vec3::y(), 1.5 * width as f64, width, height)
        .expect("valid camera");
    let mut record = |i: usize, occluded: bool| {
        let mut image = Image::new(width, height);
        image.data.iter_mut().for_each(|x| *x = rng.gen_range(0u8..=255) as f64 / 255.0);
        let mut subject_mask = Mask::new(width, height);
        subject_mask.data.iter_mut().for_each(|b| *b = rng.gen_bool(0.5));
        let mut occlusion_mask = Mask::new(width, height);
        if occluded {
            occlusion_mask.data.iter_mut().for_each(|b| *b = rng.gen_bool(0.3));
        }
        let angle = 0.1 * i as f64;
        let half = angle / 2.0;
        let pose = PoseFrame::from_wxyz(
            &[[1.0, 0.0, 0.0, 0.0], [half.cos(), 0.0, 0.0, half.sin()]],
            [0.0, 0.01 * i as f64, 0.0],
        );
        FrameRecord { frame_index: i, image, subject_mask, occlusion_mask, pose }
    };
    let records: Vec<FrameRecord> = (0..frames).map(|i| record(i, true)).collect();
    let eval_frames: Vec<FrameRecord> = (0..frames).map(|i| record(i, false)).collect();
    let eval_camera =
        Camera::look_at(Vec3::new(4.0, 0.0, 0.0), Vec3::zeros(), Vec3::y(), 1.5 * width as f64, width, height)
            .expect("valid camera");
    SceneDataset {
        cameras: vec![camera; frames],
        frames: records,
        template,
        canonical_pose: PoseFrame::canonical(2),
        eval_views: vec![EvalView { name: "side".into(), camera: eval_camera, frames: eval_frames }],
    }
}
