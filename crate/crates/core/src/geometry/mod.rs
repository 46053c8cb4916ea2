//! The geometry prior: template mesh, multi-scale vertex sets and the
//! nearest-vertex machinery used to condition the radiance field on the body
//! surface.

mod blend;
mod fps;
mod kdtree;
mod surface;

pub use blend::{blend_nearest_vertex, signed_distance, Blend, SurfacePoint};
pub use fps::{farthest_point_sample, farthest_point_sample_by_key};
pub use kdtree::KdTree;
pub use surface::{build_scales, MultiScaleSurface, NeighborSet, SurfaceScale, NUM_SCALES, SCALE_RATIO};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Number of neighbors gathered per scale.
pub const K_NEIGHBORS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Bone {
    pub parent: Option<usize>,
    /// Rest-pose joint position in canonical space.
    pub head: Vec3,
}

/// Template surface with skinning data. Stands in as the body geometry prior.
#[derive(Clone, Debug)]
pub struct ArticulatedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
    /// Row-major `vertices.len() x bones.len()`.
    skin_weights: Vec<f64>,
    pub bones: Vec<Bone>,
}

impl ArticulatedMesh {
    /// Validates the inputs and computes area-weighted vertex normals.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        skin_weights: Vec<f64>,
        bones: Vec<Bone>,
    ) -> Result<Self> {
        let n = vertices.len();
        let k = bones.len();
        if skin_weights.len() != n * k {
            return Err(Error::Mesh(format!(
                "expected {} skin weights ({n} vertices x {k} bones), got {}",
                n * k,
                skin_weights.len()
            )));
        }
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::Mesh(format!("face {fi} references vertex >= {n}")));
            }
        }
        for (bi, b) in bones.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= bi {
                    return Err(Error::Mesh(format!(
                        "bone {bi} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        if k > 0 {
            for (vi, row) in skin_weights.chunks(k).enumerate() {
                if row.iter().any(|&w| !(w >= 0.0)) {
                    return Err(Error::Mesh(format!("vertex {vi} has a negative skin weight")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Mesh(format!("vertex {vi} skin weights sum to {s}")));
                }
            }
        }
        let normals = compute_vertex_normals(&vertices, &faces)?;
        Ok(Self {
            vertices,
            faces,
            normals,
            skin_weights,
            bones,
        })
    }

    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    pub fn skin_weights(&self, vertex: usize) -> &[f64] {
        let k = self.bones.len();
        &self.skin_weights[vertex * k..(vertex + 1) * k]
    }

    pub fn skin_weight_table(&self) -> &[f64] {
        &self.skin_weights
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.vertices)
    }

    /// Median length over unique undirected edges.
    pub fn median_edge_length(&self) -> f64 {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let mut lens: Vec<f64> = edges
            .iter()
            .map(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .collect();
        if lens.is_empty() {
            return 0.0;
        }
        lens.sort_by(f64::total_cmp);
        lens[lens.len() / 2]
    }
}

/// Normalized area-weighted sum of incident face normals.
pub fn compute_vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<Vec3>> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    let mut touched = vec![false; vertices.len()];
    for f in faces {
        let [a, b, c] = *f;
        // Cross product magnitude is twice the triangle area.
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        for &i in f {
            acc[i] += n;
            touched[i] = true;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            if !touched[i] {
                return Err(Error::IsolatedVertex(i));
            }
            let len = n.norm();
            if !(len > 1e-300) {
                return Err(Error::Mesh(format!("vertex {i} has a degenerate normal")));
            }
            Ok(n / len)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points(points: &[Vec3]) -> Option<Self> {
        let first = points.first()?;
        let mut min = *first;
        let mut max = *first;
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Self { min, max })
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Grows the half-extent on every axis by `ratio` (0.1 = 10%).
    pub fn dilated(&self, ratio: f64) -> Self {
        let c = self.center();
        let h = self.extent() * 0.5 * (1.0 + ratio);
        Self {
            min: c - h,
            max: c + h,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}
