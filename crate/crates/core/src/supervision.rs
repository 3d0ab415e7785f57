//! Training targets, losses and augmented training samples.
//!
//! Focal loss, per cell with prediction `p` clamped to `[1e-6, 1 − 1e-6]`
//! and target `y`:
//!
//! ```text
//! y == 1 :  −α (1 − p)^γ ln p
//! y <  1 :  −(1 − α) (1 − y)^4 p^γ ln(1 − p)
//! ```
//!
//! summed over the map and divided by `max(1, #cells with y == 1)`.

use std::fmt;

use rand::Rng;
use sot_tensor::{Tensor, Var};

use crate::config::{LossConfig, RunConfig};
use crate::decoder::{HeadOutputs, HeadValues};
use crate::encoder::VoxelGeometry;
use crate::error::{invalid, CoreError, Result};
use crate::geometry::{Box3D, PointCloud};
use crate::tracker::{crop_canonicalize, frame_seed, make_template, CropSpec};

pub const PROB_CLAMP: f64 = 1e-6;

/// Dense targets for every head.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMaps {
    /// `[L, W]`.
    pub bev_cls: Tensor,
    /// `[R, L, W]`; non-zero only at the centre cell.
    pub bev_reg: Tensor,
    /// Flat `L × W` index of the centre cell.
    pub bev_center: Option<usize>,
    /// `[H]`.
    pub z_cls: Tensor,
    /// `[1, H]`.
    pub z_reg: Tensor,
    pub z_center: Option<usize>,
    /// False when the box centre falls outside the grid; all maps are then
    /// zero.
    pub valid: bool,
}

impl LabelMaps {
    /// Head values a perfect network would produce.
    pub fn ideal_heads(&self, z_head: bool) -> HeadValues {
        HeadValues {
            bev_cls: self.bev_cls.clone(),
            bev_reg: self.bev_reg.clone(),
            z: z_head.then(|| (self.z_cls.clone(), self.z_reg.clone())),
        }
    }
}

fn graded(gamma: f64, radius: f64) -> f64 {
    if gamma <= radius {
        1.0 / (gamma + 1.0)
    } else {
        0.0
    }
}

/// Targets for `gt` given in the canonical frame of the search region.
///
/// The centre cell gets 1. Other cells whose centre lies inside the box
/// footprint and within `radius` cells of the centre get `1/(γ+1)`, γ
/// being the cell distance. Regression targets (sub-cell offsets and
/// heading, plus height in metres when `z_head` is false) are written at
/// the centre only.
pub fn construct_labels(gt: &Box3D, geo: &VoxelGeometry, radius: f64, z_head: bool) -> Result<LabelMaps> {
    gt.validate()?;
    let [w, l, h] = geo.dims;
    let r = if z_head { 3 } else { 4 };
    let mut m = LabelMaps {
        bev_cls: Tensor::zeros(&[l, w]),
        bev_reg: Tensor::zeros(&[r, l, w]),
        bev_center: None,
        z_cls: Tensor::zeros(&[h]),
        z_reg: Tensor::zeros(&[1, h]),
        z_center: None,
        valid: false,
    };
    let c = geo.continuous(gt.center());
    let inside = (0..3).all(|a| c[a] >= 0.0 && c[a] < geo.dims[a] as f64) && geo.cell_of(gt.center()).is_some();
    if !inside {
        return Ok(m);
    }
    m.valid = true;
    let (cj, ci, ck) = (c[0].floor() as usize, c[1].floor() as usize, c[2].floor() as usize);

    let frame = gt.frame();
    let cls = m.bev_cls.data_mut();
    for i in 0..l {
        for j in 0..w {
            let gamma = ((i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2)).sqrt();
            cls[i * w + j] = if (i, j) == (ci, cj) {
                1.0
            } else {
                let px = geo.min[0] + (j as f64 + 0.5) * geo.voxel[0];
                let py = geo.min[1] + (i as f64 + 0.5) * geo.voxel[1];
                let q = frame.to_local([px, py, gt.z]);
                if q[0].abs() <= gt.l / 2.0 && q[1].abs() <= gt.w / 2.0 {
                    graded(gamma, radius)
                } else {
                    0.0
                }
            };
        }
    }
    let center = ci * w + cj;
    m.bev_center = Some(center);
    let reg = m.bev_reg.data_mut();
    reg[center] = c[0] - cj as f64;
    reg[l * w + center] = c[1] - ci as f64;
    reg[2 * l * w + center] = gt.theta;
    if !z_head {
        reg[3 * l * w + center] = gt.z;
    }

    let zc = m.z_cls.data_mut();
    for k in 0..h {
        let gamma = (k as f64 - ck as f64).abs();
        let pz = geo.min[2] + (k as f64 + 0.5) * geo.voxel[2];
        zc[k] = if k == ck {
            1.0
        } else if (pz - gt.z).abs() <= gt.h / 2.0 {
            graded(gamma, radius)
        } else {
            0.0
        };
    }
    m.z_center = Some(ck);
    m.z_reg.data_mut()[ck] = c[2] - ck as f64;
    Ok(m)
}

/// Focal loss of probabilities `pred` against soft targets `gt` (same
/// number of elements).
pub fn focal_loss(pred: &Var, gt: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    let n = gt.len();
    if pred.value().len() != n {
        return invalid(format!("focal loss: {} predictions for {n} targets", pred.value().len()));
    }
    let g = pred.graph();
    let p = pred.reshape(&[n])?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let pos: Vec<f64> = gt.data().iter().map(|&y| if y == 1.0 { 1.0 } else { 0.0 }).collect();
    let npos = pos.iter().sum::<f64>().max(1.0);
    let neg: Vec<f64> = gt
        .data()
        .iter()
        .zip(&pos)
        .map(|(&y, &q)| (1.0 - q) * (1.0 - y).powi(4))
        .collect();
    let pos_w = g.constant(Tensor::new(vec![n], pos.iter().map(|q| -alpha * q / npos).collect())?);
    let neg_w = g.constant(Tensor::new(vec![n], neg.iter().map(|q| -(1.0 - alpha) * q / npos).collect())?);
    let pos_term = p.one_minus()?.powf(gamma)?.mul(&p.ln()?)?.mul(&pos_w)?;
    let neg_term = p.powf(gamma)?.mul(&p.one_minus()?.ln()?)?.mul(&neg_w)?;
    Ok(pos_term.add(&neg_term)?.sum()?)
}

/// Summed absolute error of the regression channels at one cell.
/// `pred` is `[R, S...]` and `target` has the same shape.
pub fn l1_at(pred: &Var, target: &Tensor, cell: Option<usize>) -> Result<Var> {
    let g = pred.graph();
    let Some(cell) = cell else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    if pred.shape() != target.shape() {
        return invalid(format!("regression shapes {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let r = pred.shape()[0];
    let s = target.len() / r;
    let row = pred.reshape(&[r, s])?.transpose()?.gather_rows(&[cell])?;
    let want: Vec<f64> = (0..r).map(|ch| target.data()[ch * s + cell]).collect();
    let want = g.constant(Tensor::new(vec![1, r], want)?);
    Ok(row.sub(&want)?.abs()?.sum()?)
}

/// Weighted objective and its four terms.
pub struct LossBreakdown {
    pub total: Var,
    pub cls_bev: f64,
    pub cls_z: f64,
    pub reg_bev: f64,
    pub reg_z: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} cls_bev={:.6} cls_z={:.6} reg_bev={:.6} reg_z={:.6}",
            self.total.value().item(),
            self.cls_bev,
            self.cls_z,
            self.reg_bev,
            self.reg_z
        )
    }
}

/// `λ_cls (cls_bev + cls_z) + λ_reg (reg_bev + reg_z)`.
pub fn total_loss(h: &HeadOutputs, labels: &LabelMaps, cfg: &LossConfig) -> Result<LossBreakdown> {
    let (a, gm) = (cfg.focal_alpha, cfg.focal_gamma);
    let g = h.bev_cls.graph();
    let cls_bev = focal_loss(&h.bev_cls, &labels.bev_cls, a, gm)?;
    let reg_bev = l1_at(&h.bev_reg, &labels.bev_reg, labels.bev_center)?;
    let (cls_z, reg_z) = match &h.z {
        Some((zc, zr)) => (
            focal_loss(zc, &labels.z_cls, a, gm)?,
            l1_at(zr, &labels.z_reg, labels.z_center)?,
        ),
        None => (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0))),
    };
    let total = cls_bev
        .add(&cls_z)?
        .scale(cfg.cls_weight)?
        .add(&reg_bev.add(&reg_z)?.scale(cfg.reg_weight)?)?;
    Ok(LossBreakdown {
        cls_bev: cls_bev.value().item(),
        cls_z: cls_z.value().item(),
        reg_bev: reg_bev.value().item(),
        reg_z: reg_z.value().item(),
        total,
    })
}

/// Network inputs and targets for one frame pair.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub template: PointCloud,
    pub search: PointCloud,
    /// Reference box after the random shift; the search region's frame.
    pub reference: Box3D,
    /// Target box in the search region's canonical frame.
    pub target: Box3D,
    pub labels: LabelMaps,
}

/// Uniform translation within `±shift_xy` horizontally and `±shift_z`
/// vertically.
pub fn random_shift(b: &Box3D, shift_xy: f64, shift_z: f64, rng: &mut impl Rng) -> Box3D {
    let mut u = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let d = [u(shift_xy), u(shift_xy), u(shift_z)];
    b.with_center([b.x + d[0], b.y + d[1], b.z + d[2]])
}

/// Builds the sample predicting frame `t` from frame `t − 1` of a
/// sequence. The search region is the shifted previous box enlarged by
/// `train.search_enlarge`. Returns `LostTarget` when that region is empty.
pub fn make_training_sample(
    frames: &[PointCloud],
    boxes: &[Box3D],
    t: usize,
    cfg: &RunConfig,
    geo: &VoxelGeometry,
    rng: &mut impl Rng,
) -> Result<TrainingSample> {
    if t == 0 || t >= frames.len() || frames.len() != boxes.len() {
        return invalid(format!("training pair {t} outside a {}-frame sequence", frames.len()));
    }
    let n = cfg.model.points;
    let seed = rng.gen::<u64>();
    let history = (t > 1).then(|| (&frames[t - 1], &boxes[t - 1]));
    let template = make_template((&frames[0], &boxes[0]), history, n, frame_seed(seed, t, 0))?;
    let reference = random_shift(&boxes[t - 1], cfg.train.shift_xy, cfg.train.shift_z, rng);
    let spec = CropSpec {
        enlarge: cfg.train.search_enlarge,
        z_range: Some(cfg.region.z),
    };
    let search = crop_canonicalize(&frames[t], &reference, spec, n, frame_seed(seed, t, 1))?;
    let target = reference.frame().box_to_local(&boxes[t]);
    let labels = construct_labels(&target, geo, cfg.loss.label_radius, cfg.model.z_head)?;
    if !labels.valid {
        return Err(CoreError::LostTarget("target centre outside the grid".into()));
    }
    Ok(TrainingSample {
        template,
        search,
        reference,
        target,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RegionConfig;
    use sot_tensor::Graph;

    fn geo() -> VoxelGeometry {
        VoxelGeometry::new(&RegionConfig::default()).unwrap()
    }

    #[test]
    fn center_cell_and_offsets() {
        let g = geo();
        let b = Box3D::new([0.0, 0.0, 0.0], 2.0, 4.0, 1.5, 0.3).unwrap();
        let m = construct_labels(&b, &g, 2.0, true).unwrap();
        let (l, w) = (25, 38);
        let c = m.bev_center.unwrap();
        assert_eq!((c / w, c % w), (12, 18));
        assert!((m.bev_reg.data()[c] - (5.6 / 0.3 - 18.0)).abs() < 1e-12);
        assert!((m.bev_reg.data()[c] - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.bev_reg.data()[2 * l * w + c], 0.3);
        assert_eq!(m.bev_cls.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(m.bev_cls.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(m.bev_cls.data()[c + 1], 0.5);
        assert_eq!(m.bev_cls.data()[c + 10], 0.0);
    }

    #[test]
    fn outside_grid_is_invalid_and_zero() {
        let b = Box3D::new([9.0, 0.0, 0.0], 2.0, 4.0, 1.5, 0.0).unwrap();
        let m = construct_labels(&b, &geo(), 2.0, true).unwrap();
        assert!(!m.valid);
        assert!(m.bev_cls.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn focal_loss_two_by_two() {
        let g = Graph::new();
        let p = g.leaf(Tensor::full(&[2, 2], 0.5));
        let gt = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let l = focal_loss(&p, &gt, 0.25, 2.0).unwrap().value().item();
        let want = 2f64.ln() * (0.25 * 0.25 + 3.0 * 0.75 * 0.25);
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.43322).abs() < 1e-5);
    }

    #[test]
    fn focal_loss_vanishes_for_perfect_prediction() {
        let g = Graph::new();
        let gt = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = g.leaf(Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(focal_loss(&p, &gt, 0.25, 2.0).unwrap().value().item() < 1e-6);
    }

    #[test]
    fn mirrored_map_doubles_negative_term() {
        let g = Graph::new();
        let single = focal_loss(&g.leaf(Tensor::full(&[3], 0.3)), &Tensor::zeros(&[3]), 0.25, 2.0).unwrap();
        let double = focal_loss(&g.leaf(Tensor::full(&[6], 0.3)), &Tensor::zeros(&[6]), 0.25, 2.0).unwrap();
        assert!((double.value().item() - 2.0 * single.value().item()).abs() < 1e-12);
    }

    #[test]
    fn shift_of_zero_keeps_box() {
        let b = Box3D::new([1.0, 2.0, 3.0], 2.0, 4.0, 1.5, 0.3).unwrap();
        let mut rng = rand::thread_rng();
        assert_eq!(random_shift(&b, 0.0, 0.0, &mut rng), b);
    }
}
