use super::{farthest_point_sample, ArticulatedMesh, KdTree, Vec3};
use crate::error::{Error, Result};

pub const NUM_SCALES: usize = 4;
pub const SCALE_RATIO: f64 = 0.25;

/// One level of the multi-scale parameterization.
#[derive(Clone, Debug)]
pub struct SurfaceScale {
    /// Template vertex ids, ascending. Local index `i` refers to
    /// `template_indices[i]`.
    pub template_indices: Vec<usize>,
    pub init_positions: Vec<Vec3>,
    pub init_normals: Vec<Vec3>,
    offsets: Vec<Vec3>,
    current: Vec<Vec3>,
    attention: Vec<f64>,
    tree: KdTree,
    /// Largest displacement of `current` from the tree snapshot.
    drift: f64,
}

impl SurfaceScale {
    fn new(template_indices: Vec<usize>, points: &[Vec3], normals: &[Vec3]) -> Self {
        let init_positions: Vec<Vec3> = template_indices.iter().map(|&i| points[i]).collect();
        let init_normals = template_indices.iter().map(|&i| normals[i]).collect();
        let n = template_indices.len();
        Self {
            tree: KdTree::new(&init_positions),
            current: init_positions.clone(),
            template_indices,
            init_positions,
            init_normals,
            offsets: vec![Vec3::zeros(); n],
            attention: vec![1.0; n],
            drift: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.template_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.template_indices.is_empty()
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    /// `init_position + offset` for every vertex.
    pub fn current_positions(&self) -> &[Vec3] {
        &self.current
    }

    pub fn attention(&self) -> &[f64] {
        &self.attention
    }

    pub fn attention_mut(&mut self) -> &mut [f64] {
        &mut self.attention
    }
}

/// Four nested vertex sets: the full template and three farthest-point
/// subsamplings at ratio 0.25.
#[derive(Clone, Debug)]
pub struct MultiScaleSurface {
    pub scales: Vec<SurfaceScale>,
    /// KD-trees are rebuilt once some vertex drifts farther than this.
    rebuild_threshold: f64,
}

/// The k nearest current-position vertices of one scale, closest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub query: Vec3,
    /// Local indices into the scale.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

pub fn build_scales(mesh: &ArticulatedMesh) -> Result<MultiScaleSurface> {
    MultiScaleSurface::from_points(&mesh.vertices, &mesh.normals, 0.5 * mesh.median_edge_length())
}

impl MultiScaleSurface {
    /// Builds the scale hierarchy over arbitrary points with unit normals.
    pub fn from_points(points: &[Vec3], normals: &[Vec3], rebuild_threshold: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Mesh("surface has no vertices".into()));
        }
        if normals.len() != points.len() {
            return Err(Error::LengthMismatch("one normal per point required".into()));
        }
        let mut scales = Vec::with_capacity(NUM_SCALES);
        let mut ids: Vec<usize> = (0..points.len()).collect();
        scales.push(SurfaceScale::new(ids.clone(), points, normals));
        for _ in 1..NUM_SCALES {
            let pts: Vec<Vec3> = ids.iter().map(|&i| points[i]).collect();
            let count = ((ids.len() as f64) * SCALE_RATIO).ceil() as usize;
            let picked = farthest_point_sample(&pts, count.max(1), 0)?;
            let mut next: Vec<usize> = picked.into_iter().map(|local| ids[local]).collect();
            next.sort_unstable();
            scales.push(SurfaceScale::new(next.clone(), points, normals));
            ids = next;
        }
        Ok(Self {
            scales,
            rebuild_threshold,
        })
    }

    pub fn scale(&self, s: usize) -> &SurfaceScale {
        &self.scales[s]
    }

    pub fn num_vertices(&self) -> usize {
        self.scales.iter().map(|s| s.len()).sum()
    }

    pub fn rebuild_threshold(&self) -> f64 {
        self.rebuild_threshold
    }

    /// Exact k nearest neighbors at `scale` by current position, ties to the
    /// lowest local index.
    pub fn knn(&self, scale: usize, query: &Vec3, k: usize) -> Result<NeighborSet> {
        let sc = self
            .scales
            .get(scale)
            .ok_or_else(|| Error::Config(format!("scale {scale} out of range")))?;
        if k > sc.len() {
            return Err(Error::NotEnoughPoints {
                requested: k,
                available: sc.len(),
            });
        }
        let slack = if sc.drift > 0.0 { sc.drift * (1.0 + 1e-9) } else { 0.0 };
        let found = sc.tree.nearest_moved(&sc.current, slack, query, k);
        Ok(NeighborSet {
            query: *query,
            indices: found.iter().map(|f| f.1).collect(),
            distances: found.iter().map(|f| f.0.sqrt()).collect(),
        })
    }

    /// Replaces the offsets of one scale. Rebuilds that scale's KD-tree when
    /// the drift from its snapshot exceeds the rebuild threshold.
    pub fn set_offsets(&mut self, scale: usize, offsets: &[Vec3]) -> Result<()> {
        let threshold = self.rebuild_threshold;
        let sc = &mut self.scales[scale];
        if offsets.len() != sc.len() {
            return Err(Error::LengthMismatch(format!(
                "scale {scale} has {} vertices, got {} offsets",
                sc.len(),
                offsets.len()
            )));
        }
        if offsets.iter().any(|o| !o.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("vertex offsets at scale {scale}")));
        }
        sc.offsets.copy_from_slice(offsets);
        for i in 0..sc.len() {
            sc.current[i] = sc.init_positions[i] + sc.offsets[i];
        }
        let snap = sc.tree.snapshot();
        sc.drift = sc
            .current
            .iter()
            .zip(snap)
            .map(|(c, s)| (c - s).norm())
            .fold(0.0, f64::max);
        if sc.drift > threshold {
            sc.tree = KdTree::new(&sc.current);
            sc.drift = 0.0;
        }
        Ok(())
    }

    /// Offsets of all scales, flattened scale-major as x, y, z triples.
    pub fn flat_offsets(&self) -> Vec<f64> {
        self.scales
            .iter()
            .flat_map(|s| s.offsets.iter().flat_map(|o| [o.x, o.y, o.z]))
            .collect()
    }

    pub fn load_flat_offsets(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != 3 * self.num_vertices() {
            return Err(Error::LengthMismatch(format!(
                "expected {} offset values, got {}",
                3 * self.num_vertices(),
                flat.len()
            )));
        }
        let mut at = 0;
        for s in 0..self.scales.len() {
            let n = self.scales[s].len();
            let offs: Vec<Vec3> = flat[at..at + 3 * n]
                .chunks(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect();
            self.set_offsets(s, &offs)?;
            at += 3 * n;
        }
        Ok(())
    }

    /// Displacement from the initial position projected on the initial
    /// normal.
    pub fn vertex_signed_offset(&self, scale: usize, index: usize) -> f64 {
        let sc = &self.scales[scale];
        let (o, n) = (sc.offsets[index], sc.init_normals[index]);
        o.x * n.x + o.y * n.y + o.z * n.z
    }

    /// Start offset of each scale inside [`Self::flat_offsets`], in vertices.
    pub fn scale_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.scales.len());
        let mut at = 0;
        for s in &self.scales {
            starts.push(at);
            at += s.len();
        }
        starts
    }
}
