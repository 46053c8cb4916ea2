//! Multiresolution hash encoding over a D-dimensional box (D = 3 or 4).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Aabb;

/// Per-dimension hash multipliers.
pub const PRIMES: [u32; 4] = [1, 2654435761, 805459861, 3674653429];

pub const INIT_RANGE: f64 = 1e-4;

/// Signed-distance half width as a fraction of the template box diagonal.
pub const SIGNED_DISTANCE_RATIO: f64 = 0.15;

/// Dilation of the canonical template box used as the spatial domain.
pub const DOMAIN_DILATION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub domain_min: Vec<f64>,
    pub domain_max: Vec<f64>,
}

impl HashGridConfig {
    /// Default level/table settings over an explicit box.
    pub fn with_domain(domain_min: Vec<f64>, domain_max: Vec<f64>) -> Self {
        Self {
            levels: 8,
            table_size: 1 << 14,
            features: 2,
            base_resolution: 4,
            max_resolution: 128,
            domain_min,
            domain_max,
        }
    }

    /// 4D domain: dilated canonical box plus the signed-distance range.
    pub fn surface(template_box: &Aabb) -> Self {
        let b = template_box.dilated(DOMAIN_DILATION);
        let d = SIGNED_DISTANCE_RATIO * template_box.diagonal();
        Self::with_domain(vec![b.min.x, b.min.y, b.min.z, -d], vec![b.max.x, b.max.y, b.max.z, d])
    }

    /// 3D domain for the point-based baseline.
    pub fn point(template_box: &Aabb) -> Self {
        let b = template_box.dilated(DOMAIN_DILATION);
        Self::with_domain(vec![b.min.x, b.min.y, b.min.z], vec![b.max.x, b.max.y, b.max.z])
    }

    pub fn dims(&self) -> usize {
        self.domain_min.len()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn num_params(&self) -> usize {
        self.levels * self.table_size * self.features
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hash grid: {m}")));
        if !(1..=4).contains(&self.dims()) || self.domain_max.len() != self.dims() {
            return bad("domain must have 1 to 4 matching dimensions");
        }
        if self.domain_min.iter().zip(&self.domain_max).any(|(a, b)| !(a.is_finite() && b.is_finite() && b > a)) {
            return bad("domain box must be finite with max > min");
        }
        if self.levels == 0 || self.features == 0 {
            return bad("levels and features must be positive");
        }
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 31 {
            return bad("table size must be a power of two");
        }
        if self.base_resolution < 2 || self.max_resolution < self.base_resolution {
            return bad("need 2 <= base resolution <= max resolution");
        }
        Ok(())
    }

    pub fn growth_factor(&self) -> f64 {
        if self.levels == 1 {
            return 1.0;
        }
        (((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64).exp()
    }

    /// `floor(N_min b^l)`; the small guard keeps exact powers (such as the
    /// top level landing on N_max) from rounding down.
    pub fn resolutions(&self) -> Vec<usize> {
        let b = self.growth_factor();
        (0..self.levels)
            .map(|l| ((self.base_resolution as f64 * b.powi(l as i32)) * (1.0 + 1e-12)).floor() as usize)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: usize,
    dense: bool,
}

/// Trainable tables plus the level layout.
#[derive(Clone, Debug)]
pub struct HashGrid {
    config: HashGridConfig,
    levels: Vec<Level>,
    /// Level-major, then slot, then feature.
    params: Vec<f64>,
}

/// Corner lookups of one coordinate at one level.
struct Cell {
    base: [u32; 4],
    frac: [f64; 4],
    /// d(position in cells)/d(coordinate); zero where the coordinate was clamped.
    scale: [f64; 4],
}

impl HashGrid {
    pub fn new(config: HashGridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..config.num_params()).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
        Self::from_params(config, params)
    }

    pub fn from_params(config: HashGridConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(Error::LengthMismatch(format!(
                "hash grid expects {} parameters, got {}",
                config.num_params(),
                params.len()
            )));
        }
        let d = config.dims() as u32;
        let levels = config
            .resolutions()
            .into_iter()
            .map(|res| Level {
                res,
                dense: ((res + 1) as u128).pow(d) <= config.table_size as u128,
            })
            .collect();
        Ok(Self { config, levels, params })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.levels[level].res
    }

    pub fn level_is_dense(&self, level: usize) -> bool {
        self.levels[level].dense
    }

    /// Table slot of an integer corner at `level`.
    pub fn slot(&self, level: usize, corner: &[u32]) -> usize {
        let lv = &self.levels[level];
        let t = self.config.table_size;
        if lv.dense {
            let mut idx = 0usize;
            let mut stride = 1usize;
            for &c in corner {
                idx += c as usize * stride;
                stride *= lv.res + 1;
            }
            idx
        } else {
            let mut h = 0u32;
            for (c, p) in corner.iter().zip(PRIMES) {
                h ^= c.wrapping_mul(p);
            }
            h as usize & (t - 1)
        }
    }

    fn cell(&self, level: usize, coord: &[f64]) -> Cell {
        let res = self.levels[level].res;
        let mut cell = Cell {
            base: [0; 4],
            frac: [0.0; 4],
            scale: [0.0; 4],
        };
        for d in 0..self.config.dims() {
            let lo = self.config.domain_min[d];
            let span = self.config.domain_max[d] - lo;
            let raw = (coord[d] - lo) / span;
            let t = raw.clamp(0.0, 1.0);
            let p = t * res as f64;
            let b = (p.floor() as usize).min(res - 1);
            cell.base[d] = b as u32;
            cell.frac[d] = p - b as f64;
            cell.scale[d] = if raw == t { res as f64 / span } else { 0.0 };
        }
        cell
    }

    fn corner_slots(&self, level: usize, cell: &Cell, mut f: impl FnMut(usize, usize)) {
        let dims = self.config.dims();
        let mut corner = [0u32; 4];
        for c in 0..1usize << dims {
            for d in 0..dims {
                corner[d] = cell.base[d] + ((c >> d) & 1) as u32;
            }
            f(c, self.slot(level, &corner[..dims]));
        }
    }

    fn corner_weight(dims: usize, cell: &Cell, c: usize) -> f64 {
        let mut w = 1.0;
        for d in 0..dims {
            w *= if (c >> d) & 1 == 1 { cell.frac[d] } else { 1.0 - cell.frac[d] };
        }
        w
    }

    fn check_coord(&self, coord: &[f64]) -> Result<()> {
        if coord.len() != self.config.dims() {
            return Err(Error::LengthMismatch(format!(
                "hash grid is {}-dimensional, got a {}-vector",
                self.config.dims(),
                coord.len()
            )));
        }
        if coord.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("hash grid coordinate {coord:?}")));
        }
        Ok(())
    }

    pub fn encode(&self, coord: &[f64]) -> Result<Vec<f64>> {
        self.check_coord(coord)?;
        let mut out = vec![0.0; self.config.output_dim()];
        self.encode_into(coord, &mut out);
        Ok(out)
    }

    /// Unchecked encode; `coord` must be finite with the grid's dimension.
    pub fn encode_into(&self, coord: &[f64], out: &mut [f64]) {
        let dims = self.config.dims();
        let f = self.config.features;
        let t = self.config.table_size;
        for level in 0..self.levels.len() {
            let cell = self.cell(level, coord);
            let o = &mut out[level * f..(level + 1) * f];
            o.iter_mut().for_each(|v| *v = 0.0);
            let table = &self.params[level * t * f..(level + 1) * t * f];
            self.corner_slots(level, &cell, |c, slot| {
                let w = Self::corner_weight(dims, &cell, c);
                for k in 0..f {
                    o[k] += w * table[slot * f + k];
                }
            });
        }
    }

    /// Adds `dL/dtable` for one query into `grad_table` (same layout as the
    /// parameters).
    pub fn backward_table(&self, coord: &[f64], grad_out: &[f64], grad_table: &mut [f64]) {
        let dims = self.config.dims();
        let f = self.config.features;
        let t = self.config.table_size;
        for level in 0..self.levels.len() {
            let cell = self.cell(level, coord);
            let g = &grad_out[level * f..(level + 1) * f];
            let table = &mut grad_table[level * t * f..(level + 1) * t * f];
            self.corner_slots(level, &cell, |c, slot| {
                let w = Self::corner_weight(dims, &cell, c);
                for k in 0..f {
                    table[slot * f + k] += w * g[k];
                }
            });
        }
    }

    /// `dL/dcoord` for one query; clamped dimensions get zero.
    pub fn backward_coord(&self, coord: &[f64], grad_out: &[f64]) -> [f64; 4] {
        let dims = self.config.dims();
        let f = self.config.features;
        let t = self.config.table_size;
        let mut grad = [0.0; 4];
        for level in 0..self.levels.len() {
            let cell = self.cell(level, coord);
            let g = &grad_out[level * f..(level + 1) * f];
            let table = &self.params[level * t * f..(level + 1) * t * f];
            self.corner_slots(level, &cell, |c, slot| {
                let dot: f64 = (0..f).map(|k| g[k] * table[slot * f + k]).sum();
                for d in 0..dims {
                    if cell.scale[d] == 0.0 {
                        continue;
                    }
                    let mut w = if (c >> d) & 1 == 1 { 1.0 } else { -1.0 };
                    for e in 0..dims {
                        if e != d {
                            w *= if (c >> e) & 1 == 1 { cell.frac[e] } else { 1.0 - cell.frac[e] };
                        }
                    }
                    grad[d] += w * dot * cell.scale[d];
                }
            });
        }
        grad
    }
}
