//! Blended nearest vertex and signed distance of a canonical query.
//!
//! Each neighbor is weighted by `|cos|` between `x - v_i` and its normal
//! `n_i`. When all cosines vanish, or the query sits exactly on a neighbor,
//! the weights fall back to normalized inverse distances.

use super::Vec3;
use crate::error::{Error, Result};

const COS_EPS: f64 = 1e-8;
const IDW_EPS: f64 = 1e-8;
const COINCIDENT: f64 = 1e-12;
const NORMAL_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Blend {
    pub vertex: Vec3,
    /// Normalized, nonnegative, one per neighbor.
    pub weights: Vec<f64>,
    pub fallback: bool,
}

pub fn blend_nearest_vertex(query: &Vec3, positions: &[Vec3], normals: &[Vec3]) -> Result<Blend> {
    let sp = SurfacePoint::evaluate(query, positions, normals)?;
    Ok(Blend {
        vertex: sp.vertex,
        weights: sp.raw.iter().map(|w| w / sp.total).collect(),
        fallback: sp.fallback,
    })
}

/// `(x - v) . n` with `n` the normalized blend of neighbor normals under the
/// blend weights. A degenerate blended normal falls back to the nearest
/// neighbor's normal (the first entry).
pub fn signed_distance(query: &Vec3, normals: &[Vec3], blend: &Blend) -> Result<f64> {
    if normals.is_empty() || normals.len() != blend.weights.len() {
        return Err(Error::Empty("signed distance needs one normal per blend weight".into()));
    }
    let u: Vec3 = normals.iter().zip(&blend.weights).map(|(n, w)| n * *w).sum();
    let len = u.norm();
    let n = if len < NORMAL_EPS { normals[0] } else { u / len };
    Ok((query - blend.vertex).dot(&n))
}

/// Forward state of the blend + signed distance, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SurfacePoint {
    pub vertex: Vec3,
    pub signed_distance: f64,
    pub fallback: bool,
    query: Vec3,
    /// Unnormalized weights (|cos| or inverse distance).
    raw: Vec<f64>,
    total: f64,
    cosines: Vec<f64>,
    dirs: Vec<Vec3>,
    dists: Vec<f64>,
    /// Blended normal before normalization, `None` when degenerate.
    blend_normal: Option<(Vec3, f64)>,
    normal: Vec3,
}

impl SurfacePoint {
    pub fn evaluate(query: &Vec3, positions: &[Vec3], normals: &[Vec3]) -> Result<Self> {
        let k = positions.len();
        if k == 0 {
            return Err(Error::Empty("blend needs at least one neighbor".into()));
        }
        if normals.len() != k {
            return Err(Error::LengthMismatch("one normal per neighbor required".into()));
        }
        let mut dirs = Vec::with_capacity(k);
        let mut dists = Vec::with_capacity(k);
        let mut cosines = Vec::with_capacity(k);
        let mut coincident = false;
        for (p, n) in positions.iter().zip(normals) {
            let r = query - p;
            let d = r.norm();
            if d <= COINCIDENT {
                coincident = true;
                dirs.push(Vec3::zeros());
                cosines.push(0.0);
            } else {
                let dir = r / d;
                cosines.push(dir.dot(n));
                dirs.push(dir);
            }
            dists.push(d);
        }
        let cos_sum: f64 = cosines.iter().map(|c| c.abs()).sum();
        let fallback = coincident || cos_sum < COS_EPS;
        let raw: Vec<f64> = if fallback {
            dists.iter().map(|d| 1.0 / (d + IDW_EPS)).collect()
        } else {
            cosines.iter().map(|c| c.abs()).collect()
        };
        let total: f64 = raw.iter().sum();
        let vertex: Vec3 = positions.iter().zip(&raw).map(|(p, w)| p * (*w / total)).sum();

        let u: Vec3 = normals.iter().zip(&raw).map(|(n, w)| n * *w).sum();
        let len = u.norm();
        // the blend normal is scale-free, so the threshold applies to the
        // normalized-weight sum
        let (blend_normal, normal) = if len / total < NORMAL_EPS {
            (None, normals[0])
        } else {
            (Some((u, len)), u / len)
        };
        let signed_distance = (query - vertex).dot(&normal);
        Ok(Self {
            vertex,
            signed_distance,
            fallback,
            query: *query,
            raw,
            total,
            cosines,
            dirs,
            dists,
            blend_normal,
            normal,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.raw.iter().map(|w| w / self.total).collect()
    }

    /// Gradient of `grad_vertex . vertex + grad_d * signed_distance` with
    /// respect to each neighbor position. Normals and the query are constant.
    pub fn backward(&self, positions: &[Vec3], normals: &[Vec3], grad_vertex: &Vec3, grad_d: f64) -> Vec<Vec3> {
        let k = positions.len();
        let mut gp = vec![Vec3::zeros(); k];
        let mut g_raw = vec![0.0; k];

        // d = (x - v) . n
        let gv = grad_vertex - self.normal * grad_d;
        if let Some((_, len)) = self.blend_normal {
            let gn = (self.query - self.vertex) * grad_d;
            let gu = (gn - self.normal * self.normal.dot(&gn)) / len;
            for i in 0..k {
                g_raw[i] += gu.dot(&normals[i]);
            }
        }
        // v = sum(raw_i p_i) / sum(raw)
        for i in 0..k {
            gp[i] += gv * (self.raw[i] / self.total);
            g_raw[i] += gv.dot(&(positions[i] - self.vertex)) / self.total;
        }
        for i in 0..k {
            if g_raw[i] == 0.0 {
                continue;
            }
            if self.fallback {
                // raw = 1 / (d + eps), d = |x - p|
                let s = 1.0 / (self.dists[i] + IDW_EPS);
                gp[i] += self.dirs[i] * (g_raw[i] * s * s);
            } else {
                // raw = |c|, c = (r . n) / |r|, r = x - p
                let c = self.cosines[i];
                let sign = if c > 0.0 {
                    1.0
                } else if c < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let dc_dr = (normals[i] - self.dirs[i] * c) / self.dists[i];
                gp[i] -= dc_dr * (sign * g_raw[i]);
            }
        }
        gp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize()
    }

    /// Straight-line evaluation of the |cos|-weighted blend, written out
    /// component by component.
    fn oracle_blend(x: [f64; 3], p: &[[f64; 3]], n: &[[f64; 3]]) -> [f64; 3] {
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for i in 0..p.len() {
            let r = [x[0] - p[i][0], x[1] - p[i][1], x[2] - p[i][2]];
            let rl = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let nl = (n[i][0] * n[i][0] + n[i][1] * n[i][1] + n[i][2] * n[i][2]).sqrt();
            let cos = (r[0] * n[i][0] + r[1] * n[i][1] + r[2] * n[i][2]) / (rl * nl);
            let w = cos.abs();
            for a in 0..3 {
                num[a] += w * p[i][a];
            }
            den += w;
        }
        [num[0] / den, num[1] / den, num[2] / den]
    }

    #[test]
    fn single_neighbor_returns_it() {
        let p = [Vec3::new(0.3, -0.2, 1.0)];
        let n = [Vec3::x()];
        let b = blend_nearest_vertex(&Vec3::new(5.0, 1.0, 2.0), &p, &n).unwrap();
        assert_eq!(b.vertex, p[0]);
        assert_eq!(b.weights, vec![1.0]);
    }

    #[test]
    fn mirrored_pair_blends_to_midpoint() {
        let p = [Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let n = [Vec3::new(-0.6, 0.8, 0.0), Vec3::new(0.6, 0.8, 0.0)];
        let x = Vec3::new(0.0, 0.7, 0.0);
        let b = blend_nearest_vertex(&x, &p, &n).unwrap();
        assert!((b.vertex - Vec3::new(0.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(!b.fallback);
    }

    #[test]
    fn matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p: Vec<Vec3> = (0..5).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
            let n: Vec<Vec3> = (0..5).map(|_| rand_unit(&mut rng)).collect();
            let x = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let b = blend_nearest_vertex(&x, &p, &n).unwrap();
            let arr = |v: &Vec3| [v.x, v.y, v.z];
            let o = oracle_blend(arr(&x), &p.iter().map(arr).collect::<Vec<_>>(), &n.iter().map(arr).collect::<Vec<_>>());
            for a in 0..3 {
                assert!((b.vertex[a] - o[a]).abs() < 1e-12);
            }
            // convex combination
            assert!(b.weights.iter().all(|&w| w >= 0.0));
            assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tangent_query_falls_back_to_inverse_distance() {
        let p = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let n = [Vec3::z(), Vec3::z()];
        let x = Vec3::new(0.5, 0.0, 0.0);
        let b = blend_nearest_vertex(&x, &p, &n).unwrap();
        assert!(b.fallback);
        let w0 = 1.0 / (0.5 + 1e-8);
        let w1 = 1.0 / (1.5 + 1e-8);
        assert!((b.weights[0] - w0 / (w0 + w1)).abs() < 1e-12);

        // sitting on a vertex
        let b = blend_nearest_vertex(&p[1], &p, &[Vec3::x(), Vec3::y()]).unwrap();
        assert!(b.fallback);
        assert!((b.vertex - p[1]).norm() < 1e-7);
    }

    #[test]
    fn signed_distance_along_normal() {
        let p = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let n = [Vec3::z(); 3];
        for s in [0.3, -0.2] {
            let v = Vec3::new(0.2, 0.3, 0.0);
            let x = v + Vec3::z() * s;
            let b = blend_nearest_vertex(&x, &p, &n).unwrap();
            let d = signed_distance(&x, &n, &b).unwrap();
            assert!(b.vertex.z.abs() < 1e-15);
            assert!((d - s).abs() < 1e-12);
        }
        let b = Blend { vertex: p[0], weights: vec![1.0, 0.0, 0.0], fallback: false };
        assert_eq!(signed_distance(&p[0], &n, &b).unwrap(), 0.0);
    }

    #[test]
    fn inside_icosphere_distance() {
        let (v, f) = crate::testutil::icosphere(1.0, 3);
        let normals = crate::geometry::compute_vertex_normals(&v, &f).unwrap();
        let surf = crate::geometry::MultiScaleSurface::from_points(&v, &normals, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let dir = rand_unit(&mut rng);
            let x = dir * 0.9;
            let ns = surf.knn(0, &x, 5).unwrap();
            let pos: Vec<Vec3> = ns.indices.iter().map(|&i| v[i]).collect();
            let nor: Vec<Vec3> = ns.indices.iter().map(|&i| normals[i]).collect();
            let b = blend_nearest_vertex(&x, &pos, &nor).unwrap();
            let d = signed_distance(&x, &nor, &b).unwrap();
            assert!((d + 0.1).abs() < 0.02, "d = {d}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..40 {
            let mut p: Vec<Vec3> = (0..5).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
            let n: Vec<Vec3> = (0..5).map(|_| rand_unit(&mut rng)).collect();
            let x = if trial % 10 == 0 {
                // force the inverse-distance branch
                p.iter_mut().for_each(|q| q.z = 0.0);
                Vec3::new(rng.gen(), rng.gen(), 0.0)
            } else {
                Vec3::new(rng.gen(), rng.gen(), rng.gen())
            };
            let n = if trial % 10 == 0 { vec![Vec3::z(); 5] } else { n };
            let gv = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let gd: f64 = rng.gen_range(-1.0..1.0);
            let f = |p: &[Vec3]| {
                let sp = SurfacePoint::evaluate(&x, p, &n).unwrap();
                gv.dot(&sp.vertex) + gd * sp.signed_distance
            };
            let sp = SurfacePoint::evaluate(&x, &p, &n).unwrap();
            let g = sp.backward(&p, &n, &gv, gd);
            let h = 1e-6;
            // off-plane moves leave the inverse-distance branch
            let axes = if trial % 10 == 0 { 2 } else { 3 };
            for i in 0..5 {
                for a in 0..axes {
                    let mut pp = p.clone();
                    pp[i][a] += h;
                    let mut pm = p.clone();
                    pm[i][a] -= h;
                    let fd = (f(&pp) - f(&pm)) / (2.0 * h);
                    let err = (fd - g[i][a]).abs() / fd.abs().max(g[i][a].abs()).max(1e-6);
                    assert!(err < 1e-5, "trial {trial} p{i}[{a}]: fd {fd} ad {}", g[i][a]);
                }
            }
        }
    }
}
