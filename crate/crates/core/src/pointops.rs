//! Deterministic point-cloud primitives: resampling, farthest point
//! sampling, ball query and k-nearest neighbours.
//!
//! Comparisons use squared Euclidean distance throughout; every tie is
//! broken towards the lowest source index.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{dist2, Point, PointCloud};

/// Fixed-width neighbour lists: row `i` holds `k` indices into a source
/// set of `source_len` points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    pub indices: Vec<usize>,
    pub k: usize,
    pub source_len: usize,
}

impl NeighborIndex {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Exactly `n` points: a uniform subset when the cloud is large enough,
/// otherwise every point plus uniformly drawn duplicates.
pub fn resample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if pc.is_empty() {
        return invalid("cannot resample an empty cloud");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if pc.len() >= n {
        sample(&mut rng, pc.len(), n).into_vec()
    } else {
        let mut idx: Vec<usize> = (0..pc.len()).collect();
        idx.extend((pc.len()..n).map(|_| rng.gen_range(0..pc.len())));
        idx
    };
    Ok(pc.select(&idx))
}

/// Greedy max-min selection of `m` indices starting from `start`.
pub fn fps(positions: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m > n {
        return invalid(format!("farthest point sampling of {m} from {n} points"));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return invalid(format!("start index {start} out of range for {n} points"));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        chosen.push(current);
        taken[current] = true;
        let c = positions[current];
        let mut best: Option<usize> = None;
        for (i, p) in positions.iter().enumerate() {
            let d = dist2(*p, c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !taken[i] && best.map_or(true, |b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(chosen)
}

/// Up to `cap` source indices within `radius` of each center, ascending.
/// Short rows repeat their first hit; empty balls fall back to the nearest
/// source point.
pub fn ball_query(centers: &[Point], positions: &[Point], radius: f64, cap: usize) -> Result<NeighborIndex> {
    if !(radius > 0.0) || cap == 0 {
        return invalid(format!("ball query needs radius > 0 and cap ≥ 1 (got {radius}, {cap})"));
    }
    if positions.is_empty() {
        return invalid("ball query over an empty source set");
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centers.len() * cap);
    for &c in centers {
        let start = indices.len();
        let mut closest = (f64::INFINITY, 0);
        for (i, &p) in positions.iter().enumerate() {
            let d = dist2(p, c);
            if d <= r2 {
                indices.push(i);
                if indices.len() - start == cap {
                    break;
                }
            }
            if d < closest.0 {
                closest = (d, i);
            }
        }
        let fill = if indices.len() > start { indices[start] } else { closest.1 };
        indices.resize(start + cap, fill);
    }
    Ok(NeighborIndex {
        indices,
        k: cap,
        source_len: positions.len(),
    })
}

/// The `k` nearest source points of each query, nearest first.
pub fn knn(queries: &[Point], positions: &[Point], k: usize) -> Result<NeighborIndex> {
    let n = positions.len();
    if k == 0 || k > n {
        return invalid(format!("k-nearest neighbours with k = {k} over {n} points"));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for &q in queries {
        scratch.clear();
        scratch.extend(positions.iter().enumerate().map(|(i, &p)| (dist2(p, q), i)));
        if k < n {
            scratch.select_nth_unstable_by(k - 1, order);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(order);
        indices.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(NeighborIndex {
        indices,
        k,
        source_len: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn resample_equal_size_is_permutation() {
        let pc = PointCloud::new(line(&[0.0, 1.0, 2.0, 3.0]), vec![0.0, 1.0, 2.0, 3.0], 1).unwrap();
        let out = resample(&pc, 4, 9).unwrap();
        let mut f = out.features.clone();
        f.sort_by(f64::total_cmp);
        assert_eq!(f, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn resample_single_point_repeats() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]], vec![0.5], 1).unwrap();
        let out = resample(&pc, 4, 0).unwrap();
        assert_eq!(out.positions, vec![[1.0, 2.0, 3.0]; 4]);
        assert_eq!(out.features, vec![0.5; 4]);
    }

    #[test]
    fn resample_empty_is_error() {
        assert!(resample(&PointCloud::empty(1), 4, 0).is_err());
    }

    #[test]
    fn fps_collinear() {
        assert_eq!(fps(&line(&[0.0, 1.0, 2.0, 3.0]), 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_all_and_degenerate() {
        let pts = line(&[0.0, 5.0, 1.0]);
        let mut all = fps(&pts, 3, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        let same = vec![[1.0, 1.0, 1.0]; 4];
        assert_eq!(fps(&same, 2, 2).unwrap(), vec![2, 0]);
        assert!(fps(&pts, 4, 0).is_err());
    }

    #[test]
    fn ball_query_pads_with_first_hit() {
        let nb = ball_query(&[[0.0; 3]], &line(&[0.0, 1.0, 2.0]), 0.5, 2).unwrap();
        assert_eq!(nb.row(0), &[0, 0]);
    }

    #[test]
    fn ball_query_large_radius_takes_all() {
        let nb = ball_query(&[[1.0, 0.0, 0.0]], &line(&[0.0, 1.0, 2.0]), 10.0, 3).unwrap();
        assert_eq!(nb.row(0), &[0, 1, 2]);
    }

    #[test]
    fn ball_query_empty_ball_uses_nearest() {
        let nb = ball_query(&[[100.0, 0.0, 0.0]], &line(&[0.0, 1.0, 2.0]), 0.5, 3).unwrap();
        assert_eq!(nb.row(0), &[2, 2, 2]);
    }

    #[test]
    fn knn_examples() {
        let pts = line(&[0.0, 1.0, 2.0, 5.0]);
        assert_eq!(knn(&[[2.0, 0.0, 0.0]], &pts, 1).unwrap().row(0), &[2]);
        assert_eq!(knn(&[[0.0; 3]], &pts, 2).unwrap().row(0), &[0, 1]);
        assert_eq!(knn(&[[4.0, 0.0, 0.0]], &pts, 4).unwrap().row(0), &[3, 2, 1, 0]);
        assert!(knn(&[[0.0; 3]], &pts, 5).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let pts = line(&[-1.0, 1.0, -1.0]);
        assert_eq!(knn(&[[0.0; 3]], &pts, 2).unwrap().row(0), &[0, 1]);
    }
}
