//! The radiance field: point term, visibility-weighted surface term, MLP,
//! and the point-based baseline.
//!
//! Two evaluation paths share every arithmetic kernel. [`Field::radiance`]
//! evaluates one canonical point directly; [`Field::forward_taped`] evaluates
//! a batch on a [`Tape`] with vertex encodings computed once per batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, CustomOp, Gradients, Group, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{MultiScaleSurface, SurfacePoint, Vec3, K_NEIGHBORS, NUM_SCALES};
use crate::hashgrid::HashGrid;
use crate::visibility;

const COLOR_CHANNELS: usize = 3;
const OUTPUTS: usize = COLOR_CHANNELS + 1;

/// Fully connected ReLU network with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    shapes: Vec<(usize, usize)>,
    params: Vec<f64>,
}

impl Mlp {
    /// He-uniform hidden layers, Xavier-uniform output layer, zero biases
    /// except the density output bias.
    pub fn new(input: usize, hidden_layers: usize, width: usize, output: usize, density_bias: f64, seed: u64) -> Self {
        let shapes = Self::layout(input, hidden_layers, width, output);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let last = shapes.len() - 1;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let bound = if l == last {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
            let mut bias = vec![0.0; fan_out];
            if l == last {
                bias[fan_out - 1] = density_bias;
            }
            params.extend(bias);
        }
        Self { shapes, params }
    }

    pub fn zeros(input: usize, hidden_layers: usize, width: usize, output: usize) -> Self {
        let shapes = Self::layout(input, hidden_layers, width, output);
        let n = shapes.iter().map(|(i, o)| i * o + o).sum();
        Self {
            shapes,
            params: vec![0.0; n],
        }
    }

    pub fn from_params(shapes: Vec<(usize, usize)>, params: Vec<f64>) -> Result<Self> {
        if shapes.is_empty() || shapes.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(Error::Config("inconsistent MLP layer shapes".into()));
        }
        let n: usize = shapes.iter().map(|(i, o)| i * o + o).sum();
        if n != params.len() {
            return Err(Error::LengthMismatch(format!("MLP expects {n} parameters, got {}", params.len())));
        }
        Ok(Self { shapes, params })
    }

    fn layout(input: usize, hidden_layers: usize, width: usize, output: usize) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input;
        for _ in 0..hidden_layers {
            shapes.push((fan_in, width));
            fan_in = width;
        }
        shapes.push((fan_in, output));
        shapes
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, l: usize) -> (usize, Tensor, Tensor) {
        let offset: usize = self.shapes[..l].iter().map(|(i, o)| i * o + o).sum();
        let (i, o) = self.shapes[l];
        let w = Tensor::from_vec(i, o, self.params[offset..offset + i * o].to_vec());
        let b = Tensor::from_vec(1, o, self.params[offset + i * o..offset + i * o + o].to_vec());
        (offset, w, b)
    }

    /// Untaped evaluation over rows of `x`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.shapes.len() - 1;
        for l in 0..self.shapes.len() {
            let (_, w, b) = self.layer(l);
            h = autodiff::add_row(&autodiff::matmul(&h, &w), &b);
            if l < last {
                h.data.iter_mut().for_each(|v| *v = autodiff::relu(*v));
            }
        }
        h
    }

    pub fn forward_taped<'a>(&self, tape: &mut Tape<'a>, x: Var) -> Var {
        let mut h = x;
        let last = self.shapes.len() - 1;
        for l in 0..self.shapes.len() {
            let (offset, w, b) = self.layer(l);
            let (i, o) = self.shapes[l];
            let w = tape.param(w, Group::Mlp, offset);
            let b = tape.param(b, Group::Mlp, offset + i * o);
            let z = tape.matmul(h, w);
            h = tape.add_row(z, b);
            if l < last {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Color and density at one canonical point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma_raw: f64,
    pub sigma: f64,
}

impl RadianceSample {
    fn from_output(out: &[f64]) -> Self {
        Self {
            color: [autodiff::sigmoid(out[0]), autodiff::sigmoid(out[1]), autodiff::sigmoid(out[2])],
            sigma_raw: out[3],
            sigma: autodiff::relu(out[3]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldMode {
    /// Point term plus multi-scale surface term over a 4D grid.
    Surface,
    /// Canonical coordinate through a 3D grid only.
    Point,
}

/// Everything evaluated per canonical point, with its trainable state.
#[derive(Clone, Debug)]
pub struct Field {
    pub mode: FieldMode,
    pub use_attention: bool,
    pub grid: HashGrid,
    pub mlp: Mlp,
    pub surface: MultiScaleSurface,
}

/// Neighbor lookups of one canonical point, reused by the batched path.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub x: Vec3,
    /// Local indices of the k nearest current vertices per scale; only the
    /// finest scale is filled in point mode.
    pub neighbors: [[u32; K_NEIGHBORS]; NUM_SCALES],
    /// Signed distance of the point term.
    pub signed_distance: f64,
}

/// Batched outputs on the tape.
pub struct FieldOutputs {
    pub rgb: Var,
    pub sigma_raw: Var,
    pub sigma: Var,
}

impl Field {
    pub fn feature_dim(&self) -> usize {
        let enc = self.grid.config().output_dim();
        match self.mode {
            FieldMode::Surface => enc * (1 + NUM_SCALES),
            FieldMode::Point => enc,
        }
    }

    pub fn num_params(&self, g: Group) -> usize {
        match g {
            Group::Mlp => self.mlp.params().len(),
            Group::Grid => self.grid.params().len(),
            Group::Vertices => 3 * self.surface.num_vertices(),
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros(self.num_params(Group::Mlp), self.num_params(Group::Vertices), self.num_params(Group::Grid))
    }

    fn neighbors(&self, scale: usize, x: &Vec3) -> Result<Vec<usize>> {
        Ok(self.surface.knn(scale, x, K_NEIGHBORS)?.indices)
    }

    fn finest_blend(&self, x: &Vec3, idx: &[usize]) -> Result<SurfacePoint> {
        let sc = self.surface.scale(0);
        let pos: Vec<Vec3> = idx.iter().map(|&i| sc.current_positions()[i]).collect();
        let nrm: Vec<Vec3> = idx.iter().map(|&i| sc.init_normals[i]).collect();
        SurfacePoint::evaluate(x, &pos, &nrm)
    }

    fn aggregation_weights(&self, scale: usize, idx: &[usize]) -> Vec<f64> {
        if self.use_attention {
            visibility::attention_weights(&self.surface, scale, idx)
        } else {
            visibility::uniform_weights(idx.len())
        }
    }

    /// `[current position, signed offset]` of one vertex.
    fn vertex_coord(&self, scale: usize, i: usize) -> [f64; 4] {
        let p = self.surface.scale(scale).current_positions()[i];
        [p.x, p.y, p.z, self.surface.vertex_signed_offset(scale, i)]
    }

    /// `encode([v_hat, d])` over the finest-scale neighbors, plus the blend.
    pub fn point_term(&self, x: &Vec3) -> Result<(Vec<f64>, SurfacePoint)> {
        let idx = self.neighbors(0, x)?;
        let sp = self.finest_blend(x, &idx)?;
        let v = sp.vertex;
        let feat = self.grid.encode(&[v.x, v.y, v.z, sp.signed_distance])?;
        Ok((feat, sp))
    }

    /// Per-scale attention-weighted mean of neighbor encodings, concatenated.
    pub fn surface_term(&self, x: &Vec3) -> Result<Vec<f64>> {
        let dim = self.grid.config().output_dim();
        let mut out = vec![0.0; dim * NUM_SCALES];
        for s in 0..NUM_SCALES {
            let idx = self.neighbors(s, x)?;
            let w = self.aggregation_weights(s, &idx);
            let encs = idx
                .iter()
                .map(|&i| self.grid.encode(&self.vertex_coord(s, i)))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<&[f64]> = encs.iter().map(|e| e.as_slice()).collect();
            weighted_sum_into(&mut out[s * dim..(s + 1) * dim], &w, &rows);
        }
        Ok(out)
    }

    /// Feature vector fed to the MLP.
    pub fn features(&self, x: &Vec3) -> Result<Vec<f64>> {
        match self.mode {
            FieldMode::Surface => {
                let (mut f, _) = self.point_term(x)?;
                f.extend(self.surface_term(x)?);
                Ok(f)
            }
            FieldMode::Point => self.grid.encode(&[x.x, x.y, x.z]),
        }
    }

    /// Color and density at one canonical point.
    pub fn radiance(&self, x: &Vec3) -> Result<RadianceSample> {
        let f = self.features(x)?;
        let out = self.mlp.forward(&Tensor::from_vec(1, f.len(), f));
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("MLP output at {x:?}")));
        }
        Ok(RadianceSample::from_output(&out.data))
    }

    /// Neighbor lookups and the point-term signed distance.
    pub fn prepare(&self, x: &Vec3) -> Result<PreparedSample> {
        let mut neighbors = [[0u32; K_NEIGHBORS]; NUM_SCALES];
        let scales = match self.mode {
            FieldMode::Surface => NUM_SCALES,
            FieldMode::Point => 1,
        };
        let mut d = 0.0;
        for s in 0..scales {
            let idx = self.neighbors(s, x)?;
            if s == 0 {
                d = self.finest_blend(x, &idx)?.signed_distance;
            }
            for (slot, i) in neighbors[s].iter_mut().zip(idx) {
                *slot = i as u32;
            }
        }
        Ok(PreparedSample {
            x: *x,
            neighbors,
            signed_distance: d,
        })
    }

    /// Batched forward on the tape.
    pub fn forward_taped<'a>(&'a self, tape: &mut Tape<'a>, samples: &[PreparedSample]) -> Result<FieldOutputs> {
        let features = match self.mode {
            FieldMode::Surface => self.surface_features_taped(tape, samples)?,
            FieldMode::Point => {
                let coords = Tensor::from_vec(samples.len(), 3, samples.iter().flat_map(|s| [s.x.x, s.x.y, s.x.z]).collect());
                let c = tape.constant(coords);
                encode_taped(tape, &self.grid, c)
            }
        };
        let out = self.mlp.forward_taped(tape, features);
        let logits = tape.slice_cols(out, 0, COLOR_CHANNELS);
        let rgb = tape.sigmoid(logits);
        let sigma_raw = tape.slice_cols(out, COLOR_CHANNELS, OUTPUTS);
        let sigma = tape.relu(sigma_raw);
        Ok(FieldOutputs { rgb, sigma_raw, sigma })
    }

    fn surface_features_taped<'a>(&'a self, tape: &mut Tape<'a>, samples: &[PreparedSample]) -> Result<Var> {
        let starts = self.surface.scale_starts();
        let mut finest_positions = None;
        let mut tables = Vec::with_capacity(NUM_SCALES);
        for s in 0..NUM_SCALES {
            let sc = self.surface.scale(s);
            let n = sc.len();
            let flat = |v: &[Vec3]| Tensor::from_vec(n, 3, v.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
            let off = tape.param(flat(sc.offsets()), Group::Vertices, 3 * starts[s]);
            let init = tape.constant(flat(&sc.init_positions));
            let pos = tape.add(init, off);
            let nrm = tape.constant(flat(&sc.init_normals));
            let proj = tape.mul(off, nrm);
            let dv = tape.sum_cols(proj);
            let coords = tape.concat_cols(&[pos, dv]);
            tables.push(encode_taped(tape, &self.grid, coords));
            if s == 0 {
                finest_positions = Some(pos);
            }
        }
        let pos0 = finest_positions.expect("at least one scale");
        let blend = BlendOp::forward(tape, &self.surface.scale(0).init_normals, pos0, samples)?;
        let point = encode_taped(tape, &self.grid, blend);
        let mut parts = vec![point];
        for (s, &table) in tables.iter().enumerate() {
            let mut idx = Vec::with_capacity(samples.len());
            let mut weights = Vec::with_capacity(samples.len());
            for smp in samples {
                let nb: Vec<usize> = smp.neighbors[s].iter().map(|&i| i as usize).collect();
                weights.push(self.aggregation_weights(s, &nb));
                idx.push(smp.neighbors[s]);
            }
            parts.push(GatherOp::forward(tape, table, idx, weights));
        }
        Ok(tape.concat_cols(&parts))
    }
}

/// `out = sum_j w_j rows_j`, accumulated in neighbor order.
pub fn weighted_sum_into(out: &mut [f64], weights: &[f64], rows: &[&[f64]]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (w, row) in weights.iter().zip(rows) {
        for (o, r) in out.iter_mut().zip(row.iter()) {
            *o += w * r;
        }
    }
}

struct EncodeOp<'a> {
    grid: &'a HashGrid,
}

impl CustomOp for EncodeOp<'_> {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, grad_inputs: &mut [Tensor], params: &mut Gradients) {
        let coords = inputs[0];
        let dims = coords.cols;
        let table = params.get_mut(Group::Grid);
        for r in 0..coords.rows {
            let g = grad_out.row(r);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let c = coords.row(r);
            self.grid.backward_table(c, g, table);
            let gc = self.grid.backward_coord(c, g);
            grad_inputs[0].row_mut(r).copy_from_slice(&gc[..dims]);
        }
    }
}

/// Encodes every row of `coords` (rows must be finite).
pub fn encode_taped<'a>(tape: &mut Tape<'a>, grid: &'a HashGrid, coords: Var) -> Var {
    let c = tape.value(coords);
    let dim = grid.config().output_dim();
    let mut out = Tensor::zeros(c.rows, dim);
    for r in 0..c.rows {
        if c.row(r).iter().all(|v| v.is_finite()) {
            grid.encode_into(c.row(r), out.row_mut(r));
        } else {
            out.row_mut(r).iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
    tape.custom(Box::new(EncodeOp { grid }), &[coords], out)
}

/// Blended vertex and signed distance per sample from the finest-scale
/// vertex positions.
struct BlendOp<'a> {
    normals: &'a [Vec3],
    neighbors: Vec<[u32; K_NEIGHBORS]>,
    points: Vec<SurfacePoint>,
}

impl<'a> BlendOp<'a> {
    fn forward(tape: &mut Tape<'a>, normals: &'a [Vec3], positions: Var, samples: &[PreparedSample]) -> Result<Var> {
        let pos = tape.value(positions);
        let mut out = Tensor::zeros(samples.len(), 4);
        let mut points = Vec::with_capacity(samples.len());
        for (r, s) in samples.iter().enumerate() {
            let p: Vec<Vec3> = s.neighbors[0].iter().map(|&i| row3(pos, i as usize)).collect();
            let n: Vec<Vec3> = s.neighbors[0].iter().map(|&i| normals[i as usize]).collect();
            let sp = SurfacePoint::evaluate(&s.x, &p, &n)?;
            out.row_mut(r).copy_from_slice(&[sp.vertex.x, sp.vertex.y, sp.vertex.z, sp.signed_distance]);
            points.push(sp);
        }
        let op = BlendOp {
            normals,
            neighbors: samples.iter().map(|s| s.neighbors[0]).collect(),
            points,
        };
        Ok(tape.custom(Box::new(op), &[positions], out))
    }
}

fn row3(t: &Tensor, r: usize) -> Vec3 {
    let v = t.row(r);
    Vec3::new(v[0], v[1], v[2])
}

impl CustomOp for BlendOp<'_> {
    fn name(&self) -> &'static str {
        "surface_blend"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, grad_inputs: &mut [Tensor], _params: &mut Gradients) {
        let pos = inputs[0];
        for (r, (sp, nb)) in self.points.iter().zip(&self.neighbors).enumerate() {
            let g = grad_out.row(r);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let p: Vec<Vec3> = nb.iter().map(|&i| row3(pos, i as usize)).collect();
            let n: Vec<Vec3> = nb.iter().map(|&i| self.normals[i as usize]).collect();
            let gp = sp.backward(&p, &n, &Vec3::new(g[0], g[1], g[2]), g[3]);
            for (&i, gi) in nb.iter().zip(gp) {
                let dst = grad_inputs[0].row_mut(i as usize);
                dst[0] += gi.x;
                dst[1] += gi.y;
                dst[2] += gi.z;
            }
        }
    }
}

/// Weighted mean of table rows per sample.
struct GatherOp {
    idx: Vec<[u32; K_NEIGHBORS]>,
    weights: Vec<Vec<f64>>,
}

impl GatherOp {
    fn forward<'a>(tape: &mut Tape<'a>, table: Var, idx: Vec<[u32; K_NEIGHBORS]>, weights: Vec<Vec<f64>>) -> Var {
        let t = tape.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (r, (nb, w)) in idx.iter().zip(&weights).enumerate() {
            let rows: Vec<&[f64]> = nb.iter().map(|&i| t.row(i as usize)).collect();
            weighted_sum_into(out.row_mut(r), w, &rows);
        }
        tape.custom(Box::new(GatherOp { idx, weights }), &[table], out)
    }
}

impl CustomOp for GatherOp {
    fn name(&self) -> &'static str {
        "weighted_gather"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, grad_inputs: &mut [Tensor], _params: &mut Gradients) {
        for (r, (nb, w)) in self.idx.iter().zip(&self.weights).enumerate() {
            let g = grad_out.row(r);
            for (&i, wi) in nb.iter().zip(w) {
                grad_inputs[0].row_mut(i as usize).iter_mut().zip(g).for_each(|(d, gv)| *d += wi * gv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_scales;
    use crate::hashgrid::HashGridConfig;
    use crate::testutil::{sphere_mesh, uv_sphere_mesh};

    fn field(mode: FieldMode, seed: u64) -> Field {
        let mesh = uv_sphere_mesh(14, 24, 0.02, seed);
        let surface = build_scales(&mesh).unwrap();
        let aabb = mesh.aabb().unwrap();
        let cfg = match mode {
            FieldMode::Surface => HashGridConfig::surface(&aabb),
            FieldMode::Point => HashGridConfig::point(&aabb),
        };
        let mut grid = HashGrid::new(cfg, seed).unwrap();
        grid.params_mut().iter_mut().for_each(|p| *p *= 3e3);
        let dim = match mode {
            FieldMode::Surface => 80,
            FieldMode::Point => 16,
        };
        Field {
            mode,
            use_attention: true,
            grid,
            mlp: Mlp::new(dim, 2, 16, 4, 0.5, seed),
            surface,
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)))
            .collect()
    }

    #[test]
    fn zero_network_is_grey_and_empty() {
        let mut f = field(FieldMode::Surface, 1);
        f.mlp = Mlp::zeros(80, 4, 64, 4);
        let r = f.radiance(&Vec3::new(0.1, 0.2, 0.3)).unwrap();
        assert_eq!(r.color, [0.5; 3]);
        assert_eq!(r.sigma, 0.0);
        let mut b = field(FieldMode::Point, 1);
        b.mlp = Mlp::zeros(16, 4, 64, 4);
        let x = Vec3::new(0.4, -0.2, 0.3);
        let r = b.radiance(&x).unwrap();
        assert_eq!(r.color, [0.5; 3]);
        assert_eq!(r.sigma, 0.0);
        assert_eq!(b.radiance(&x).unwrap(), r);
    }

    #[test]
    fn negative_raw_density_is_clipped() {
        let r = RadianceSample::from_output(&[0.0, 1.0, -1.0, -3.0]);
        assert_eq!(r.sigma, 0.0);
        assert_eq!(r.sigma_raw, -3.0);
    }

    #[test]
    fn point_term_on_a_vertex() {
        let f = field(FieldMode::Surface, 2);
        let v = f.surface.scale(0).init_positions[17];
        let (feat, sp) = f.point_term(&v).unwrap();
        // coincident query: inverse-distance weights with a 1e-8 floor
        assert!(sp.fallback);
        assert!((sp.vertex - v).norm() < 1e-6);
        assert!(sp.signed_distance.abs() < 1e-6);
        let want = f.grid.encode(&[v.x, v.y, v.z, 0.0]).unwrap();
        assert!(feat.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn point_term_is_mirror_symmetric_about_a_plane() {
        // planar vertex patch in z = 0 with +z normals
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Vec3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let normals = vec![Vec3::z(); pts.len()];
        let surface = MultiScaleSurface::from_points(&pts, &normals, 0.05).unwrap();
        let f = Field {
            mode: FieldMode::Surface,
            use_attention: true,
            grid: HashGrid::new(HashGridConfig::with_domain(vec![-1.0; 4], vec![1.0; 4]), 1).unwrap(),
            mlp: Mlp::zeros(80, 1, 8, 4),
            surface,
        };
        let up = Vec3::new(0.17, 0.23, 0.05);
        let down = Vec3::new(0.17, 0.23, -0.05);
        let (_, a) = f.point_term(&up).unwrap();
        let (_, b) = f.point_term(&down).unwrap();
        assert!((a.vertex - b.vertex).norm() < 1e-15);
        assert!((a.signed_distance + b.signed_distance).abs() < 1e-15);
        assert!(a.signed_distance > 0.0);
    }

    #[test]
    fn surface_term_weighting() {
        let mut f = field(FieldMode::Surface, 3);
        let x = Vec3::new(0.3, 0.8, 0.2);
        let dim = 16;
        // uniform attention: plain mean of the five encodings
        let st = f.surface_term(&x).unwrap();
        for s in 0..NUM_SCALES {
            let nb = f.surface.knn(s, &x, 5).unwrap().indices;
            let encs: Vec<Vec<f64>> = nb.iter().map(|&i| f.grid.encode(&f.vertex_coord(s, i)).unwrap()).collect();
            for k in 0..dim {
                let mean = encs.iter().map(|e| e[k]).sum::<f64>() / 5.0;
                assert!((st[s * dim + k] - mean).abs() < 1e-15);
            }
        }
        // one dominant score
        let nb = f.surface.knn(1, &x, 5).unwrap().indices;
        f.surface.scales[1].attention_mut()[nb[2]] = 1e9;
        let st = f.surface_term(&x).unwrap();
        let e = f.grid.encode(&f.vertex_coord(1, nb[2])).unwrap();
        for k in 0..dim {
            assert!((st[dim + k] - e[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_forward_equals_single_point_evaluation_exactly() {
        for mode in [FieldMode::Surface, FieldMode::Point] {
            let mut f = field(mode, 4);
            let offs: Vec<f64> = (0..3 * f.surface.num_vertices()).map(|i| ((i * 7919) % 13) as f64 * 1e-3).collect();
            f.surface.load_flat_offsets(&offs).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for sc in &mut f.surface.scales {
                sc.attention_mut().iter_mut().for_each(|a| *a = rng.gen_range(1.0..5.0));
            }
            let pts = random_points(40, 4);
            let prepared: Vec<PreparedSample> = pts.iter().map(|p| f.prepare(p).unwrap()).collect();
            let mut tape = Tape::new();
            let out = f.forward_taped(&mut tape, &prepared).unwrap();
            for (r, p) in pts.iter().enumerate() {
                let single = f.radiance(p).unwrap();
                assert_eq!(tape.value(out.rgb).row(r), &single.color);
                assert_eq!(tape.value(out.sigma_raw).row(r), &[single.sigma_raw]);
                assert_eq!(tape.value(out.sigma).row(r), &[single.sigma]);
            }
        }
    }

    #[test]
    fn attention_scale_invariance() {
        let mut f = field(FieldMode::Surface, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sc in &mut f.surface.scales {
            sc.attention_mut().iter_mut().for_each(|a| *a = rng.gen_range(1.0..20.0));
        }
        let pts = random_points(30, 5);
        for lambda in [0.5, 3.0, 100.0] {
            for s in 0..NUM_SCALES {
                let mut g = f.clone();
                g.surface.scales[s].attention_mut().iter_mut().for_each(|a| *a *= lambda);
                for p in &pts {
                    let a = f.surface_term(p).unwrap();
                    let b = g.surface_term(p).unwrap();
                    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9));
                }
            }
        }
    }

    #[test]
    fn outputs_stay_in_range() {
        let f = field(FieldMode::Surface, 6);
        for p in random_points(100, 6) {
            let r = f.radiance(&p).unwrap();
            assert!(r.color.iter().all(|c| *c > 0.0 && *c < 1.0));
            assert!(r.sigma >= 0.0);
        }
    }

    #[test]
    fn nearby_queries_share_surface_vertices() {
        let mesh = sphere_mesh(1.0, 3);
        let f = Field {
            mode: FieldMode::Surface,
            use_attention: true,
            grid: HashGrid::new(HashGridConfig::surface(&mesh.aabb().unwrap()), 0).unwrap(),
            mlp: Mlp::zeros(80, 1, 8, 4),
            surface: build_scales(&mesh).unwrap(),
        };
        let spacing = mesh.median_edge_length();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut shared = 0;
        for _ in 0..1000 {
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let a = dir * rng.gen_range(0.85..1.15);
            let step = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let b = a + step * spacing * rng.gen_range(0.0..1.0);
            let ok = (0..NUM_SCALES).all(|s| {
                let na = f.surface.knn(s, &a, 5).unwrap().indices;
                let nb = f.surface.knn(s, &b, 5).unwrap().indices;
                na.iter().any(|i| nb.contains(i))
            });
            shared += ok as usize;
        }
        assert!(shared >= 950, "{shared}");
    }
}
