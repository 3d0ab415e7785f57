//! Exhaustive reference implementations used to cross-check the fast
//! kernels.

use rand::Rng;

use crate::geometry::{dist2, Box3D, Point};

/// Max-min selection by recomputing every candidate's distance to the whole
/// selected set at each step.
pub fn fps_bruteforce(positions: &[Point], m: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..positions.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&j| dist2(positions[i], positions[j])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.expect("m ≤ N").0);
    }
    chosen
}

/// Full sort of all `(distance, index)` pairs per query.
pub fn knn_bruteforce(queries: &[Point], positions: &[Point], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(queries.len() * k);
    for &q in queries {
        let mut all: Vec<(f64, usize)> = positions.iter().enumerate().map(|(i, &p)| (dist2(q, p), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(all[..k].iter().map(|e| e.1));
    }
    out
}

pub fn ball_query_bruteforce(centers: &[Point], positions: &[Point], radius: f64, cap: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(centers.len() * cap);
    for &c in centers {
        let mut hits: Vec<usize> = (0..positions.len()).filter(|&i| dist2(c, positions[i]) <= radius * radius).collect();
        hits.truncate(cap);
        if hits.is_empty() {
            hits.push(knn_bruteforce(&[c], positions, 1)[0]);
        }
        let first = hits[0];
        hits.resize(cap, first);
        out.extend(hits);
    }
    out
}

/// IoU estimated from `samples` uniform points in the joint bounding box.
pub fn iou_monte_carlo(a: &Box3D, b: &Box3D, samples: usize, rng: &mut impl Rng) -> f64 {
    let ext = |bx: &Box3D| {
        let r = (bx.l * bx.l + bx.w * bx.w).sqrt() / 2.0;
        [[bx.x - r, bx.x + r], [bx.y - r, bx.y + r], [bx.z - bx.h / 2.0, bx.z + bx.h / 2.0]]
    };
    let (ea, eb) = (ext(a), ext(b));
    let lo = [0, 1, 2].map(|k| ea[k][0].min(eb[k][0]));
    let hi = [0, 1, 2].map(|k| ea[k][1].max(eb[k][1]));
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let p = [0, 1, 2].map(|k| rng.gen_range(lo[k]..hi[k]));
        let (ia, ib) = (a.contains(p, 0.0, 0.0), b.contains(p, 0.0, 0.0));
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    let union = na + nb - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}
