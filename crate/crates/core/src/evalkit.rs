//! Rotated 3-D IoU, one-pass Success/Precision and frame-weighted
//! aggregation.
//!
//! Success is the mean, over 101 IoU thresholds `τ_i = (i + 0.5)/101`,
//! of the fraction of frames with IoU > τ_i. Precision does the same with
//! distance thresholds `d_i = 2 (i + 0.5)/101` m and distance < d_i. Both
//! are reported in percent.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::geometry::{distance, Box3D};

pub const THRESHOLDS: usize = 101;
pub const MAX_DISTANCE: f64 = 2.0;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland–Hodgman: `subject` clipped by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for e in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[e], clip[(e + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let (p, q) = (input[i], input[(i + 1) % input.len()]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            if cp >= 0.0 {
                out.push(p);
            }
            if (cp >= 0.0) != (cq >= 0.0) {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_polygon(&a.bev_corners(), &b.bev_corners());
    if poly.len() < 3 {
        0.0
    } else {
        polygon_area(&poly).abs()
    }
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let lo = (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    let hi = (a.z + a.h / 2.0).min(b.z + b.h / 2.0);
    let inter = bev_intersection(a, b) * (hi - lo).max(0.0);
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// `(success, precision)` in percent.
pub fn ope_metrics(pred: &[Box3D], gt: &[Box3D]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return invalid(format!("{} predictions for {} ground-truth frames", pred.len(), gt.len()));
    }
    let mut ious = Vec::with_capacity(gt.len());
    let mut dists = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(gt) {
        ious.push(iou3d(p, g)?);
        dists.push(distance(p.center(), g.center()));
    }
    Ok(curves(&ious, &dists))
}

/// Success and precision from per-frame overlaps and centre distances.
pub fn curves(ious: &[f64], dists: &[f64]) -> (f64, f64) {
    let n = ious.len() as f64;
    let mut succ = 0.0;
    let mut prec = 0.0;
    for i in 0..THRESHOLDS {
        let u = (i as f64 + 0.5) / THRESHOLDS as f64;
        succ += ious.iter().filter(|&&v| v > u).count() as f64 / n;
        prec += dists.iter().filter(|&&d| d < MAX_DISTANCE * u).count() as f64 / n;
    }
    (100.0 * succ / THRESHOLDS as f64, 100.0 * prec / THRESHOLDS as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryResult {
    pub name: String,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub categories: Vec<CategoryResult>,
    pub mean: CategoryResult,
}

/// Frame-count-weighted mean over categories.
pub fn aggregate(categories: &[CategoryResult]) -> Result<EvalReport> {
    let total: usize = categories.iter().map(|c| c.frames).sum();
    if total == 0 {
        return invalid("aggregate over zero frames");
    }
    let w = |f: fn(&CategoryResult) -> f64| categories.iter().map(|c| f(c) * c.frames as f64).sum::<f64>() / total as f64;
    Ok(EvalReport {
        categories: categories.to_vec(),
        mean: CategoryResult {
            name: "Mean".into(),
            frames: total,
            success: w(|c| c.success),
            precision: w(|c| c.precision),
        },
    })
}

impl EvalReport {
    /// Aligned table followed by `key=value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>9} {:>10}", "category", "frames", "success", "precision");
        for c in self.categories.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(s, "{:<16} {:>8} {:>9.2} {:>10.2}", c.name, c.frames, c.success, c.precision);
        }
        s.push('\n');
        for c in self.categories.iter().chain(std::iter::once(&self.mean)) {
            let key = c.name.to_lowercase().replace(char::is_whitespace, "_");
            let _ = writeln!(s, "{key}.frames={}", c.frames);
            let _ = writeln!(s, "{key}.success={:.4}", c.success);
            let _ = writeln!(s, "{key}.precision={:.4}", c.precision);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, t: f64) -> Box3D {
        Box3D::new([x, y, z], w, l, h, t).unwrap()
    }

    #[test]
    fn analytic_cases() {
        let a = bx(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert!((iou3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = bx(1.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert!((iou3d(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let c = bx(5.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_eq!(iou3d(&a, &c).unwrap(), 0.0);
        let d = bx(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, std::f64::consts::FRAC_PI_4);
        let want = 8.0 * (2f64.sqrt() - 1.0) * 2.0;
        let inter = want;
        assert!((iou3d(&a, &d).unwrap() - inter / (16.0 - inter)).abs() < 1e-12);
    }

    #[test]
    fn ope_endpoints() {
        let g = vec![bx(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0); 5];
        let (s, p) = ope_metrics(&g, &g).unwrap();
        assert!((s - 100.0).abs() < 1e-9 && (p - 100.0).abs() < 1e-9);
        let far = vec![bx(10.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0); 5];
        assert_eq!(ope_metrics(&far, &g).unwrap(), (0.0, 0.0));
        let (s, _) = curves(&[0.5; 4], &[0.0; 4]);
        assert!((s - 100.0 * 50.0 / 101.0).abs() < 1e-9);
        assert!(ope_metrics(&g[..2], &g).is_err());
    }

    #[test]
    fn weighted_mean() {
        let r = aggregate(&[
            CategoryResult { name: "A".into(), frames: 1, success: 60.0, precision: 10.0 },
            CategoryResult { name: "B".into(), frames: 2, success: 30.0, precision: 40.0 },
        ])
        .unwrap();
        assert!((r.mean.success - 40.0).abs() < 1e-12);
        assert!((r.mean.precision - 30.0).abs() < 1e-12);
        assert!(r.render().contains("mean.success=40.0000"));
        assert!(aggregate(&[]).is_err());
    }
}
