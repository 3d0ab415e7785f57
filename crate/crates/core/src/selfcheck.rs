//! Finite-difference and brute-force checks runnable from the command line
//! and the acceptance suite.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sot_tensor::{grad_check, grad_check_params, BatchNorm, Binder, Conv, Linear, ParamStore, Tensor, TensorError, Var};

use crate::attention::{AttentionBlock, FeatureSet};
use crate::config::{DecoderKind, RegionConfig, RunConfig};
use crate::decoder::{decode_box, HeadOutputs, VolumeBlock};
use crate::encoder::{Pyramid, SamplingStarts, SetAbstraction, VoxelGeometry};
use crate::error::{CoreError, Result};
use crate::evalkit::{aggregate, iou3d, CategoryResult};
use crate::geometry::{Box3D, Point, PointCloud};
use crate::model::Model;
use crate::oracle;
use crate::pointops::{ball_query, fps, knn};
use crate::supervision::{construct_labels, focal_loss, l1_at, total_loss};

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-6;

/// One named measurement against its limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<32} {:.3e} (limit {:.1e})", self.name, self.value, self.limit)?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

fn lift<T>(r: Result<T>) -> sot_tensor::Result<T> {
    r.map_err(|e| match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches data")
}

fn points_in(rng: &mut ChaCha8Rng, n: usize, half: [f64; 3]) -> Vec<Point> {
    (0..n).map(|_| [0, 1, 2].map(|k| rng.gen_range(-half[k]..half[k]))).collect()
}

/// Contracts `v` with a fixed random tensor so every coordinate matters.
fn probe(v: &Var, seed: u64) -> sot_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = v.graph().constant(uniform(&mut rng, v.shape(), 1.0));
    v.mul(&w)?.sum()
}

/// Adds uniform noise to every trainable tensor so zero-initialised
/// layers do not hide upstream gradients.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let paths: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect();
    for path in paths {
        for x in store.get_mut(&path)?.data_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
    Ok(())
}

/// Random running statistics so eval-mode normalization is not the identity.
fn randomize_buffers(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let paths: Vec<String> = store.iter().filter(|(_, p)| !p.trainable).map(|(k, _)| k.clone()).collect();
    for path in paths {
        let var = path.ends_with("var");
        for x in store.get_mut(&path)?.data_mut() {
            *x = if var { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.5..0.5) };
        }
    }
    Ok(())
}

fn both_checks(
    name: &str,
    store: &ParamStore,
    input: &Tensor,
    limit: f64,
    f: impl Fn(&Binder<'_>, &Var) -> Result<Var>,
) -> Result<Vec<Check>> {
    let wrt_input = grad_check(
        |v| {
            let b = Binder::new(v.graph(), store, false);
            probe(&lift(f(&b, v))?, 11)
        },
        input,
        FD_EPS,
    )?;
    let report = grad_check_params(
        store,
        |b| {
            let x = b.graph().constant(input.clone());
            probe(&lift(f(b, &x))?, 11)
        },
        FD_EPS,
        None,
        5,
    )?;
    Ok(vec![
        Check::at_most(&format!("{name} (input)"), wrt_input, limit, ""),
        Check::at_most(
            &format!("{name} (params)"),
            report.max_rel_error,
            limit,
            format!("{} coords, worst {}", report.coordinates, report.worst),
        ),
    ])
}

fn layer_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut store = ParamStore::new();
    let lin = Linear::new("lin", 4, 3);
    lin.init(&mut store, rng)?;
    out.extend(both_checks("linear", &store, &uniform(rng, &[5, 4], 1.0), LAYER_TOL, |b, x| Ok(lin.forward(b, x)?))?);

    for (name, kernel, shape) in [
        ("conv1d", vec![3], vec![2, 3, 6]),
        ("conv2d", vec![3, 3], vec![2, 3, 4, 5]),
        ("conv3d", vec![3, 3, 3], vec![1, 3, 3, 4, 4]),
    ] {
        let mut store = ParamStore::new();
        let conv = Conv::new("conv", 3, 2, &kernel);
        conv.init(&mut store, rng)?;
        out.extend(both_checks(name, &store, &uniform(rng, &shape, 1.0), LAYER_TOL, |b, x| Ok(conv.forward(b, x)?))?);
    }

    let mut store = ParamStore::new();
    let bn = BatchNorm::new("bn", 3);
    bn.init(&mut store)?;
    jitter(&mut store, rng, 0.5)?;
    randomize_buffers(&mut store, rng)?;
    let x = uniform(rng, &[4, 3, 5], 1.0);
    out.extend(both_checks("batchnorm eval", &store, &x, LAYER_TOL, |b, v| Ok(bn.forward(b, v)?))?);
    let train = grad_check(
        |v| {
            let b = Binder::new(v.graph(), &store, true);
            probe(&bn.forward(&b, v)?, 11)
        },
        &x,
        FD_EPS,
    )?;
    out.push(Check::at_most("batchnorm train (input)", train, LAYER_TOL, ""));
    Ok(out)
}

fn module_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let half = [1.0, 1.0, 0.5];

    let positions = points_in(rng, 24, half);
    let mut store = ParamStore::new();
    let sa = SetAbstraction::new("setabs", 2, 4, 8, 0.6, 4);
    sa.init(&mut store, rng)?;
    out.extend(both_checks("set abstraction", &store, &uniform(rng, &[24, 2], 1.0), LAYER_TOL, |b, x| {
        let fs = FeatureSet {
            positions: positions.clone(),
            features: x.clone(),
        };
        Ok(sa.forward(b, &fs, 0)?.features)
    })?);

    let positions = points_in(rng, 10, half);
    let mut store = ParamStore::new();
    let attn = AttentionBlock::new("attn", 4, 3);
    attn.init(&mut store, rng)?;
    jitter(&mut store, rng, 0.1)?;
    out.extend(both_checks("self-attention", &store, &uniform(rng, &[10, 4], 1.0), LAYER_TOL, |b, x| {
        let fs = FeatureSet {
            positions: positions.clone(),
            features: x.clone(),
        };
        Ok(attn.self_attend(b, &fs)?.features)
    })?);

    let search_pos = points_in(rng, 9, half);
    let template_pos = points_in(rng, 7, half);
    let (ns, nt) = (search_pos.len(), template_pos.len());
    out.extend(both_checks("cross-attention", &store, &uniform(rng, &[ns + nt, 4], 1.0), LAYER_TOL, |b, x| {
        let search = FeatureSet {
            positions: search_pos.clone(),
            features: x.gather_rows(&(0..ns).collect::<Vec<_>>())?,
        };
        let template = FeatureSet {
            positions: template_pos.clone(),
            features: x.gather_rows(&(ns..ns + nt).collect::<Vec<_>>())?,
        };
        let (s, t) = attn.cross_attend(b, &search, &template)?;
        Ok(b.graph().concat(&[s.features, t.features], 0)?)
    })?);

    let cfg = RunConfig::toy().model;
    let pyramid = Pyramid::new(&cfg);
    let mut store = ParamStore::new();
    pyramid.init(&mut store, rng)?;
    randomize_buffers(&mut store, rng)?;
    let sizes: Vec<usize> = cfg.stage_points.to_vec();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &n| {
        let o = *acc;
        *acc += n;
        Some(o)
    }).collect();
    let stage_pos: Vec<Vec<Point>> = sizes.iter().map(|&n| points_in(rng, n, half)).collect();
    let width = *cfg.stage_channels.iter().max().unwrap_or(&1);
    let total: usize = sizes.iter().sum();
    out.extend(both_checks("pyramid", &store, &uniform(rng, &[total, width], 1.0), LAYER_TOL, |b, x| {
        let mut stages = Vec::new();
        for s in 0..sizes.len() {
            let rows: Vec<usize> = (offsets[s]..offsets[s] + sizes[s]).collect();
            let cols = cfg.stage_channels[s];
            let f = x.gather_rows(&rows)?.transpose()?.gather_rows(&(0..cols).collect::<Vec<_>>())?.transpose()?;
            stages.push(FeatureSet {
                positions: stage_pos[s].clone(),
                features: f,
            });
        }
        Ok(pyramid.forward(b, &stages)?.features)
    })?);

    for (name, kind) in [("decomposed block", DecoderKind::Decomposed), ("conv3d block", DecoderKind::Conv3d)] {
        let block = VolumeBlock::new(kind, "block", 3, 2);
        let mut store = ParamStore::new();
        block.init(&mut store, rng)?;
        randomize_buffers(&mut store, rng)?;
        out.extend(both_checks(name, &store, &uniform(rng, &[3, 3, 4, 5], 1.0), LAYER_TOL, |b, x| {
            Ok(block.forward(b, x)?)
        })?);
    }
    Ok(out)
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let geo = VoxelGeometry::new(&RegionConfig {
        x: [-1.2, 1.2],
        y: [-0.9, 0.9],
        z: [-0.6, 0.6],
        voxel: [0.3; 3],
    })?;
    let [w, l, h] = geo.dims;
    let gt = Box3D::new([0.1, -0.05, 0.02], 0.7, 1.1, 0.5, 0.3)?;
    let labels = construct_labels(&gt, &geo, 2.0, true)?;
    let mut out = Vec::new();

    let logits = uniform(rng, &[l, w], 2.0);
    let focal = grad_check(|v| lift(focal_loss(&v.sigmoid()?, &labels.bev_cls, 0.25, 2.0)), &logits, FD_EPS)?;
    out.push(Check::at_most("focal loss", focal, LAYER_TOL, ""));

    let reg = uniform(rng, &[3, l, w], 1.0);
    let l1 = grad_check(|v| lift(l1_at(v, &labels.bev_reg, labels.bev_center)), &reg, FD_EPS)?;
    out.push(Check::at_most("center l1 loss", l1, LAYER_TOL, ""));

    let cfg = RunConfig::toy().loss;
    let sizes = [l * w, 3 * l * w, h, h];
    let flat = uniform(rng, &[sizes.iter().sum::<usize>(), 1], 2.0);
    let total = grad_check(
        |v| {
            let mut start = 0;
            let mut parts = Vec::new();
            for n in sizes {
                parts.push(v.gather_rows(&(start..start + n).collect::<Vec<_>>())?);
                start += n;
            }
            let heads = HeadOutputs {
                bev_cls: parts[0].reshape(&[l, w])?.sigmoid()?,
                bev_reg: parts[1].reshape(&[3, l, w])?,
                z: Some((parts[2].reshape(&[h])?.sigmoid()?, parts[3].reshape(&[1, h])?)),
            };
            Ok(lift(total_loss(&heads, &labels, &cfg))?.total)
        },
        &flat,
        FD_EPS,
    )?;
    out.push(Check::at_most("total loss", total, LAYER_TOL, ""));
    Ok(out)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, region: &RegionConfig) -> Result<PointCloud> {
    let positions = (0..n)
        .map(|_| {
            [
                rng.gen_range(region.x[0]..region.x[1]),
                rng.gen_range(region.y[0]..region.y[1]),
                rng.gen_range(region.z[0]..region.z[1]),
            ]
        })
        .collect();
    let features = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    PointCloud::new(positions, features, 1)
}

/// Loss of the whole network of `cfg` against its trainable parameters,
/// with normalization in eval mode. `per_param` limits the probed
/// coordinates per tensor.
pub fn end_to_end(cfg: &RunConfig, per_param: Option<usize>, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(cfg)?;
    let mut store = model.init(cfg.seed)?;
    jitter(&mut store, &mut rng, 0.05)?;
    randomize_buffers(&mut store, &mut rng)?;
    let n = cfg.model.points;
    let template = random_cloud(&mut rng, n, &cfg.region)?;
    let search = random_cloud(&mut rng, n, &cfg.region)?;
    let gt = Box3D::new([0.15, 0.1, 0.0], 0.6, 0.9, 0.5, 0.2)?;
    let labels = construct_labels(&gt, &model.geometry, cfg.loss.label_radius, cfg.model.z_head)?;
    let report = grad_check_params(
        &store,
        |b| {
            let heads = lift(model.forward(b, &template, &search, SamplingStarts::default()))?;
            Ok(lift(total_loss(&heads, &labels, &cfg.loss))?.total)
        },
        FD_EPS,
        per_param,
        seed,
    )?;
    Ok(Check::at_most(
        &format!("end-to-end ({n} points)"),
        report.max_rel_error,
        END_TO_END_TOL,
        format!("{} coords, worst {}", report.coordinates, report.worst),
    ))
}

/// Every layer, module and loss term at `LAYER_TOL`.
pub fn local_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = layer_checks(&mut rng)?;
    out.extend(module_checks(&mut rng)?);
    out.extend(loss_checks(&mut rng)?);
    Ok(out)
}

/// [`local_suite`] plus every parameter of the toy network at
/// `END_TO_END_TOL`.
pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = local_suite(seed)?;
    out.push(end_to_end(&RunConfig::toy(), None, seed)?);
    Ok(out)
}

fn mismatch(name: &str, bad: usize, total: usize) -> Check {
    Check::at_most(name, bad as f64, 0.0, format!("{bad}/{total} clouds differ"))
}

/// FPS, kNN and ball query against exhaustive search on `clouds` random
/// clouds of up to 512 points.
pub fn pointops_oracles(clouds: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad_fps, mut bad_knn, mut bad_ball) = (0, 0, 0);
    for _ in 0..clouds {
        let n = rng.gen_range(1..=512);
        let pts = points_in(&mut rng, n, [1.0, 1.0, 1.0]);
        let m = rng.gen_range(1..=n.min(64));
        let start = rng.gen_range(0..n);
        bad_fps += (fps(&pts, m, start)? != oracle::fps_bruteforce(&pts, m, start)) as usize;
        let nq = rng.gen_range(1..=32);
        let queries = points_in(&mut rng, nq, [1.2, 1.2, 1.2]);
        let k = rng.gen_range(1..=n.min(32));
        bad_knn += (knn(&queries, &pts, k)?.indices != oracle::knn_bruteforce(&queries, &pts, k)) as usize;
        let radius = rng.gen_range(0.05..0.8);
        let cap = rng.gen_range(1..=32);
        bad_ball += (ball_query(&queries, &pts, radius, cap)?.indices
            != oracle::ball_query_bruteforce(&queries, &pts, radius, cap)) as usize;
    }
    Ok(vec![
        mismatch("fps vs exhaustive", bad_fps, clouds),
        mismatch("knn vs exhaustive", bad_knn, clouds),
        mismatch("ball query vs exhaustive", bad_ball, clouds),
    ])
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Result<Box3D> {
    Box3D::new(
        [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-0.5..0.5)],
        rng.gen_range(0.5..2.5),
        rng.gen_range(0.5..5.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

/// Largest gap between `iou3d` and a Monte-Carlo estimate over `pairs`
/// overlapping rotated box pairs.
pub fn iou_oracle(pairs: usize, samples: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let a = random_box(&mut rng, 0.5)?;
        let b = random_box(&mut rng, 0.5)?;
        let exact = iou3d(&a, &b)?;
        worst = worst.max((exact - oracle::iou_monte_carlo(&a, &b, samples, &mut rng)).abs());
    }
    Ok(Check::at_most("iou3d vs monte carlo", worst, 0.01, format!("{pairs} pairs, {samples} samples")))
}

/// Worst per-axis centre error (in voxels) and heading error of decoding
/// ideal heads built from `boxes` random boxes inside the default region.
pub fn label_roundtrip(boxes: usize, seed: u64) -> Result<Vec<Check>> {
    let region = RegionConfig::default();
    let geo = VoxelGeometry::new(&region)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = Box3D::new([0.0; 3], 1.0, 1.0, 1.0, 0.0)?;
    let (mut center, mut heading): (f64, f64) = (0.0, 0.0);
    for i in 0..boxes {
        let z_head = i % 2 == 0;
        let c = [0, 1, 2].map(|k| {
            let (lo, hi) = ([region.x, region.y, region.z][k][0], [region.x, region.y, region.z][k][1]);
            rng.gen_range(lo..hi - region.voxel[k])
        });
        let gt = Box3D::new(
            c,
            rng.gen_range(0.5..2.5),
            rng.gen_range(0.5..5.0),
            rng.gen_range(0.5..2.0),
            rng.gen_range(-3.0..3.0),
        )?;
        let labels = construct_labels(&gt, &geo, 2.0, z_head)?;
        let decoded = decode_box(&labels.ideal_heads(z_head), &geo, &identity)?;
        for k in 0..3 {
            center = center.max((decoded.center()[k] - gt.center()[k]).abs() / region.voxel[k]);
        }
        heading = heading.max((decoded.theta - gt.theta).abs());
    }
    Ok(vec![
        Check::at_most("round trip centre (voxels)", center, 0.5, format!("{boxes} boxes")),
        Check::at_most("round trip heading (rad)", heading, 1e-12, ""),
    ])
}

/// Published per-category results and frame counts of the reference
/// benchmark table.
pub fn reference_table() -> Vec<CategoryResult> {
    [("Car", 6424, 73.6, 84.1), ("Cyclist", 308, 74.3, 94.2), ("Van", 1248, 58.7, 66.5), ("Pedestrian", 6088, 55.6, 82.4)]
        .into_iter()
        .map(|(name, frames, success, precision)| CategoryResult {
            name: name.into(),
            frames,
            success,
            precision,
        })
        .collect()
}

pub fn aggregation_check() -> Result<Vec<Check>> {
    let mean = aggregate(&reference_table())?.mean;
    Ok(vec![
        Check::at_most("aggregate success vs 64.5", (mean.success - 64.5).abs(), 0.1, format!("{:.4}", mean.success)),
        Check::at_most("aggregate precision vs 82.0", (mean.precision - 82.0).abs(), 0.1, format!("{:.4}", mean.precision)),
    ])
}

pub fn grid_check() -> Result<Check> {
    let dims = VoxelGeometry::new(&RegionConfig::default())?.dims;
    let off: usize = dims.iter().zip([38, 25, 17]).map(|(&a, b): (&usize, usize)| a.abs_diff(b)).sum();
    Ok(Check::at_most("default grid (38, 25, 17)", off as f64, 0.0, format!("{dims:?}")))
}

/// Every brute-force and reference-value check.
pub fn oracle_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    out.extend(pointops_oracles(200, seed)?);
    out.push(iou_oracle(100, 1_000_000, seed)?);
    out.extend(label_roundtrip(1000, seed)?);
    out.extend(aggregation_check()?);
    out.push(grid_check()?);
    Ok(out)
}

/// Runs `f` and returns its result with the elapsed wall time in seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}
