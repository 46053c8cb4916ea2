//! Motion field: maps observation-space points to the canonical space with a
//! weighted sum of per-bone rigid transforms.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, ArticulatedMesh, KdTree, Vec3};

const QUAT_TOL: f64 = 1e-6;
const WEIGHT_FLOOR: f64 = 1e-8;

/// Per-bone rotations (w-x-y-z quaternions, active, right-handed) and a
/// root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub rotations: Vec<Quaternion<f64>>,
    pub root_translation: Vec3,
}

impl PoseFrame {
    pub fn canonical(bones: usize) -> Self {
        Self {
            rotations: vec![Quaternion::identity(); bones],
            root_translation: Vec3::zeros(),
        }
    }

    pub fn from_wxyz(rotations: &[[f64; 4]], root_translation: [f64; 3]) -> Self {
        Self {
            rotations: rotations.iter().map(|q| Quaternion::new(q[0], q[1], q[2], q[3])).collect(),
            root_translation: Vec3::from(root_translation),
        }
    }

    pub fn to_wxyz(&self) -> Vec<[f64; 4]> {
        self.rotations.iter().map(|q| [q.w, q.i, q.j, q.k]).collect()
    }

    pub fn num_bones(&self) -> usize {
        self.rotations.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (bone, q) in self.rotations.iter().enumerate() {
            let norm = q.norm();
            if !((norm - 1.0).abs() <= QUAT_TOL) {
                return Err(Error::NonUnitQuaternion { bone, norm });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Per-bone rigid maps in both directions.
#[derive(Clone, Debug)]
pub struct BoneTransforms {
    /// `(R_i, t_i)`: observation to canonical.
    pub to_canonical: Vec<RigidTransform>,
    /// `G_i`: canonical to observation (forward skinning).
    pub to_observation: Vec<RigidTransform>,
}

impl BoneTransforms {
    pub fn len(&self) -> usize {
        self.to_canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_canonical.is_empty()
    }
}

/// Forward kinematics over the bone chain, then inverted per bone.
pub fn bone_transforms(pose: &PoseFrame, template: &ArticulatedMesh) -> Result<BoneTransforms> {
    let k = template.num_bones();
    if pose.num_bones() != k {
        return Err(Error::BoneCount {
            pose: pose.num_bones(),
            template: k,
        });
    }
    pose.validate()?;
    // world frame of each joint in the posed configuration
    let mut joint: Vec<RigidTransform> = Vec::with_capacity(k);
    for (i, bone) in template.bones.iter().enumerate() {
        let rot = UnitQuaternion::from_quaternion(pose.rotations[i]).to_rotation_matrix().into_inner();
        let local = match bone.parent {
            None => RigidTransform {
                rotation: rot,
                translation: pose.root_translation + bone.head,
            },
            Some(p) => {
                let offset = bone.head - template.bones[p].head;
                joint[p].compose(&RigidTransform {
                    rotation: rot,
                    translation: offset,
                })
            }
        };
        joint.push(local);
    }
    let to_observation: Vec<RigidTransform> = joint
        .iter()
        .zip(&template.bones)
        .map(|(a, b)| RigidTransform {
            rotation: a.rotation,
            translation: a.translation - a.rotation * b.head,
        })
        .collect();
    let to_canonical = to_observation.iter().map(|g| g.inverse()).collect();
    Ok(BoneTransforms {
        to_canonical,
        to_observation,
    })
}

/// Canonical skinning-weight field plus the weighted-sum warp.
///
/// The canonical weight of a point is the skin weight row of its nearest
/// template vertex, and zero outside the template box dilated by 10%.
#[derive(Clone, Debug)]
pub struct MotionField {
    tree: KdTree,
    weights: Vec<f64>,
    bones: usize,
    support: Aabb,
}

impl MotionField {
    pub fn new(template: &ArticulatedMesh) -> Result<Self> {
        let support = template
            .aabb()
            .ok_or_else(|| Error::Mesh("template has no vertices".into()))?
            .dilated(0.1);
        Ok(Self {
            tree: KdTree::new(&template.vertices),
            weights: template.skin_weight_table().to_vec(),
            bones: template.num_bones(),
            support,
        })
    }

    pub fn num_bones(&self) -> usize {
        self.bones
    }

    /// Nearest template vertex of canonical point `y`, `None` outside support.
    fn support_vertex(&self, y: &Vec3) -> Option<usize> {
        if !self.support.contains(y) {
            return None;
        }
        Some(self.tree.nearest(y, 1)[0].1)
    }

    /// Observation-space blend weights plus the per-bone canonical candidates.
    pub fn skinning_weights_with_candidates(&self, x: &Vec3, transforms: &BoneTransforms) -> (Vec<f64>, Vec<Vec3>) {
        let k = self.bones;
        let mut raw = Vec::with_capacity(k);
        let mut cands: Vec<Vec3> = Vec::with_capacity(k);
        let mut nearest: Vec<Option<usize>> = Vec::with_capacity(k);
        for i in 0..k {
            let y = transforms.to_canonical[i].apply(x);
            // bones sharing a transform share the lookup
            let v = match cands.iter().position(|c| *c == y) {
                Some(j) => nearest[j],
                None => self.support_vertex(&y),
            };
            raw.push(v.map_or(0.0, |v| self.weights[v * k + i]));
            cands.push(y);
            nearest.push(v);
        }
        let total: f64 = raw.iter().sum();
        if raw.iter().all(|&w| w < WEIGHT_FLOOR) || !(total > 0.0) {
            return (vec![1.0 / k as f64; k], cands);
        }
        (raw.into_iter().map(|w| w / total).collect(), cands)
    }

    pub fn skinning_weights(&self, x: &Vec3, transforms: &BoneTransforms) -> Vec<f64> {
        self.skinning_weights_with_candidates(x, transforms).0
    }

    /// `sum_i w_i(x) (R_i x + t_i)`.
    pub fn warp(&self, x: &Vec3, transforms: &BoneTransforms) -> Vec3 {
        let (w, cands) = self.skinning_weights_with_candidates(x, transforms);
        cands.iter().zip(&w).map(|(c, wi)| c * *wi).sum()
    }
}

/// Convenience wrapper building the transforms and the weight field.
pub fn warp_to_canonical(x: &Vec3, pose: &PoseFrame, template: &ArticulatedMesh) -> Result<Vec3> {
    let t = bone_transforms(pose, template)?;
    Ok(MotionField::new(template)?.warp(x, &t))
}

/// Forward linear blend skinning of every template vertex.
pub fn pose_vertices(template: &ArticulatedMesh, transforms: &BoneTransforms) -> Vec<Vec3> {
    template
        .vertices
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            template
                .skin_weights(vi)
                .iter()
                .zip(&transforms.to_observation)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, g)| g.apply(v) * *w)
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Bone;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quat_axis_angle(axis: Vector3<f64>, angle: f64) -> Quaternion<f64> {
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
    }

    /// Two-bone stick: bone 0 at the origin, bone 1 at (1,0,0). Vertices
    /// around bone 0 are bound to it, vertices around bone 1 to bone 1.
    fn two_bone_mesh() -> ArticulatedMesh {
        let mut v = Vec::new();
        let mut w = Vec::new();
        let mut f = Vec::new();
        for (bone, cx) in [(0usize, 0.5), (1usize, 1.5)] {
            let base = v.len();
            let (sv, sf) = crate::testutil::icosphere(0.3, 1);
            for p in sv {
                v.push(p + Vector3::new(cx, 0.0, 0.0));
                w.extend(if bone == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
            }
            f.extend(sf.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        }
        let bones = vec![
            Bone { parent: None, head: Vec3::zeros() },
            Bone { parent: Some(0), head: Vec3::new(1.0, 0.0, 0.0) },
        ];
        ArticulatedMesh::new(v, f, w, bones).unwrap()
    }

    #[test]
    fn canonical_pose_gives_identity_transforms() {
        let m = two_bone_mesh();
        let t = bone_transforms(&PoseFrame::canonical(2), &m).unwrap();
        for r in &t.to_canonical {
            assert_eq!(r.rotation, Matrix3::identity());
            assert_eq!(r.translation, Vec3::zeros());
        }
    }

    #[test]
    fn root_translation_inverts_to_shift() {
        let m = two_bone_mesh();
        let mut pose = PoseFrame::canonical(2);
        pose.root_translation = Vec3::new(0.4, -1.0, 2.0);
        let t = bone_transforms(&pose, &m).unwrap();
        let x = Vec3::new(0.3, 0.2, 0.1);
        for r in &t.to_canonical {
            assert!((r.apply(&x) - (x - pose.root_translation)).norm() < 1e-15);
        }
        let mf = MotionField::new(&m).unwrap();
        let xo = Vec3::new(0.5, 0.0, 0.0) + pose.root_translation;
        assert!((mf.warp(&xo, &t) - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn single_bone_rotation_inverse() {
        let m = crate::testutil::sphere_mesh(1.0, 1);
        let pose = PoseFrame {
            rotations: vec![quat_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2)],
            root_translation: Vec3::zeros(),
        };
        let t = bone_transforms(&pose, &m).unwrap();
        let rz_m90 = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((t.to_canonical[0].rotation - rz_m90).norm() < 1e-15);
        assert!(t.to_canonical[0].translation.norm() < 1e-15);
        let id = t.to_observation[0].compose(&t.to_canonical[0]);
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-15);
        assert!(id.translation.norm() < 1e-15);
        assert!((t.to_canonical[0].rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_poses() {
        let m = two_bone_mesh();
        assert!(matches!(
            bone_transforms(&PoseFrame::canonical(3), &m),
            Err(Error::BoneCount { pose: 3, template: 2 })
        ));
        let mut p = PoseFrame::canonical(2);
        p.rotations[1] = Quaternion::new(1.1, 0.0, 0.0, 0.0);
        assert!(matches!(bone_transforms(&p, &m), Err(Error::NonUnitQuaternion { bone: 1, .. })));
    }

    #[test]
    fn weights_on_vertices_and_fallback() {
        let m = two_bone_mesh();
        let mf = MotionField::new(&m).unwrap();
        let t = bone_transforms(&PoseFrame::canonical(2), &m).unwrap();
        assert_eq!(mf.skinning_weights(&m.vertices[3], &t), vec![1.0, 0.0]);
        let last = m.vertices.len() - 1;
        assert_eq!(mf.skinning_weights(&m.vertices[last], &t), vec![0.0, 1.0]);
        // far outside the template support
        assert_eq!(mf.skinning_weights(&Vec3::new(50.0, 0.0, 0.0), &t), vec![0.5, 0.5]);
        // canonical pose warps to itself
        let x = Vec3::new(0.7, 0.1, -0.2);
        assert_eq!(mf.warp(&x, &t), x);
    }

    #[test]
    fn symmetric_pose_splits_weight() {
        let v = vec![
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.3),
            Vec3::new(-1.3, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.3),
            Vec3::new(1.3, 0.0, 0.0),
        ];
        let f = vec![[0, 1, 2], [3, 5, 4]];
        let w = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let bones = vec![
            Bone { parent: None, head: Vec3::zeros() },
            Bone { parent: Some(0), head: Vec3::zeros() },
        ];
        let m = ArticulatedMesh::new(v, f, w, bones).unwrap();
        let mf = MotionField::new(&m).unwrap();
        // bone 0 at -90 degrees about z, bone 1 at +90 (local +180)
        let half = std::f64::consts::FRAC_PI_2;
        let pose = PoseFrame {
            rotations: vec![quat_axis_angle(Vector3::z(), -half), quat_axis_angle(Vector3::z(), 2.0 * half)],
            root_translation: Vec3::zeros(),
        };
        let t = bone_transforms(&pose, &m).unwrap();
        let w = mf.skinning_weights(&Vec3::new(0.0, 1.0, 0.0), &t);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_skinning_round_trip() {
        let m = two_bone_mesh();
        let mf = MotionField::new(&m).unwrap();
        let pose = PoseFrame {
            rotations: vec![quat_axis_angle(Vector3::y(), 0.4), quat_axis_angle(Vector3::z(), 0.7)],
            root_translation: Vec3::new(0.1, 0.2, -0.3),
        };
        let t = bone_transforms(&pose, &m).unwrap();
        for (posed, rest) in pose_vertices(&m, &t).iter().zip(&m.vertices) {
            assert!((mf.warp(posed, &t) - rest).norm() < 1e-2);
        }
    }

    #[test]
    fn warp_is_invariant_to_global_rigid_motion() {
        let m = two_bone_mesh();
        let mf = MotionField::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pose = PoseFrame {
                rotations: vec![
                    quat_axis_angle(Vector3::new(rng.gen(), rng.gen(), rng.gen()), rng.gen_range(-1.0..1.0)),
                    quat_axis_angle(Vector3::new(0.0, 0.0, 1.0), rng.gen_range(-1.0..1.0)),
                ],
                root_translation: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            };
            let motion = RigidTransform {
                rotation: UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::new(rng.gen(), 1.0, rng.gen())), rng.gen_range(-3.0..3.0))
                    .to_rotation_matrix()
                    .into_inner(),
                translation: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            };
            let root_head = m.bones[0].head;
            let mq = UnitQuaternion::from_matrix(&motion.rotation).into_inner();
            let moved = PoseFrame {
                rotations: vec![mq * pose.rotations[0], pose.rotations[1]],
                root_translation: motion.apply(&(pose.root_translation + root_head)) - root_head,
            };
            let t = bone_transforms(&pose, &m).unwrap();
            let tm = bone_transforms(&moved, &m).unwrap();
            let x = Vec3::new(rng.gen_range(0.0..2.0), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let a = mf.warp(&x, &t);
            let b = mf.warp(&motion.apply(&x), &tm);
            assert!((a - b).norm() < 1e-9);
        }
    }
}
