use super::{dist2, Vec3};
use crate::error::{Error, Result};

/// Greedy farthest point sampling. Starts at `seed_index`; every following
/// pick maximizes the distance to the already selected set, ties going to the
/// lowest index.
pub fn farthest_point_sample(points: &[Vec3], count: usize, seed_index: usize) -> Result<Vec<usize>> {
    farthest_point_sample_by_key(points, count, seed_index, |i| i)
}

/// Like [`farthest_point_sample`] but ties are broken by the smallest
/// `tie_key(i)` instead of the smallest position index. Keys must be distinct.
pub fn farthest_point_sample_by_key(
    points: &[Vec3],
    count: usize,
    seed_index: usize,
    tie_key: impl Fn(usize) -> usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if count > n {
        return Err(Error::NotEnoughPoints {
            requested: count,
            available: n,
        });
    }
    if count == 0 {
        return Err(Error::Empty("farthest point sampling needs count >= 1".into()));
    }
    if seed_index >= n {
        return Err(Error::NotEnoughPoints {
            requested: seed_index + 1,
            available: n,
        });
    }

    let mut min_d2 = vec![f64::INFINITY; n];
    let mut selected = vec![false; n];
    let mut out = Vec::with_capacity(count);
    let mut current = seed_index;
    loop {
        out.push(current);
        selected[current] = true;
        if out.len() == count {
            break;
        }
        let anchor = points[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(&points[i], &anchor);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    if min_d2[i] > min_d2[b] || (min_d2[i] == min_d2[b] && tie_key(i) < tie_key(b)) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        current = best.expect("count <= n leaves an unselected point");
    }
    Ok(out)
}
