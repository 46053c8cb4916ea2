//! Per-vertex visibility attention: counters bumped around ray termination
//! points and used as aggregation weights.

use crate::error::Result;
use crate::geometry::{MultiScaleSurface, Vec3, K_NEIGHBORS};

/// Resets every score at every scale to 1.
pub fn init_attention(surface: &mut MultiScaleSurface) {
    for sc in &mut surface.scales {
        sc.attention_mut().iter_mut().for_each(|a| *a = 1.0);
    }
}

/// Adds 1 to the k nearest vertices of each point, at every scale.
pub fn update_attention(surface: &mut MultiScaleSurface, points: &[Vec3]) -> Result<()> {
    let mut hits: Vec<Vec<u32>> = surface.scales.iter().map(|s| vec![0; s.len()]).collect();
    for p in points {
        for (s, h) in hits.iter_mut().enumerate() {
            for i in surface.knn(s, p, K_NEIGHBORS.min(surface.scales[s].len()))?.indices {
                h[i] += 1;
            }
        }
    }
    for (sc, h) in surface.scales.iter_mut().zip(hits) {
        sc.attention_mut().iter_mut().zip(h).for_each(|(a, n)| *a += n as f64);
    }
    Ok(())
}

/// `a_i / sum(a)` over the given local indices of one scale.
pub fn attention_weights(surface: &MultiScaleSurface, scale: usize, neighbors: &[usize]) -> Vec<f64> {
    let a = surface.scales[scale].attention();
    normalized(neighbors.iter().map(|&i| a[i]))
}

/// Uniform weights when attention is disabled.
pub fn uniform_weights(k: usize) -> Vec<f64> {
    normalized(std::iter::repeat(1.0).take(k))
}

fn normalized(scores: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let total: f64 = scores.clone().sum();
    scores.map(|a| a / total).collect()
}
