use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sot_core::attention::{AttentionBlock, FeatureSet};
use sot_core::config::{RegionConfig, RunConfig};
use sot_core::dataio::{decode_pointcloud, encode_pointcloud, parse_tracking_labels, synth_sequence};
use sot_core::decoder::{decode_box, dual_pool};
use sot_core::encoder::{voxelize, Pyramid, SamplingStarts, SetAbstraction, VoxelGeometry};
use sot_core::evalkit::{iou3d, ope_metrics};
use sot_core::geometry::{dist2, Box3D, Frame, Point, PointCloud};
use sot_core::model::Model;
use sot_core::oracle;
use sot_core::pointops::{ball_query, fps, knn};
use sot_core::supervision::construct_labels;
use sot_core::tracker::track_sequence;
use sot_core::CoreError;
use sot_tensor::{Binder, Graph, ParamStore, Tensor};

fn point(r: f64) -> impl Strategy<Value = Point> {
    [-r..r, -r..r, -r..r]
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(point(2.0), min..=max)
}

fn boxes() -> impl Strategy<Value = Box3D> {
    ([-2.0..2.0, -2.0..2.0, -1.0..1.0f64], 0.3..2.5f64, 0.3..5.0f64, 0.3..2.0f64, -PI..PI)
        .prop_map(|(c, w, l, h, t)| Box3D::new(c, w, l, h, t).unwrap())
}

fn features(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn min_pairwise(pts: &[Point], idx: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            best = best.min(dist2(pts[idx[a]], pts[idx[b]]));
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fps_last_pick_is_greedy_optimal(pts in cloud(3, 12), m in 2usize..6, start in 0usize..12) {
        let m = m.min(pts.len());
        let start = start % pts.len();
        let chosen = fps(&pts, m, start).unwrap();
        let score = min_pairwise(&pts, &chosen);
        let (head, _) = chosen.split_at(m - 1);
        for alt in (0..pts.len()).filter(|i| !head.contains(i)) {
            let mut swapped = head.to_vec();
            swapped.push(alt);
            prop_assert!(score >= min_pairwise(&pts, &swapped));
        }
    }

    #[test]
    fn neighbour_searches_match_exhaustive(pts in cloud(1, 512), queries in cloud(1, 16), k in 1usize..16, r in 0.05..1.5f64, cap in 1usize..24) {
        let k = k.min(pts.len());
        prop_assert_eq!(knn(&queries, &pts, k).unwrap().indices, oracle::knn_bruteforce(&queries, &pts, k));
        prop_assert_eq!(
            ball_query(&queries, &pts, r, cap).unwrap().indices,
            oracle::ball_query_bruteforce(&queries, &pts, r, cap)
        );
        let m = k.min(pts.len());
        prop_assert_eq!(fps(&pts, m, 0).unwrap(), oracle::fps_bruteforce(&pts, m, 0));
    }

    #[test]
    fn set_abstraction_ignores_global_translation(pts in cloud(12, 40), shift in [-4i32..4, -4i32..4, -4i32..4]) {
        let shift = shift.map(|s| s as f64 * 0.5);
        let moved: Vec<Point> = pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect();
        let sa = SetAbstraction::new("sa", 2, 5, 6, 0.8, 4);
        let mut store = ParamStore::new();
        sa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let feats = features(pts.len(), 2, 2);
        let run = |positions: &[Point]| {
            let g = Graph::no_grad();
            let b = Binder::new(&g, &store, false);
            let fs = FeatureSet { positions: positions.to_vec(), features: g.constant(feats.clone()) };
            sa.forward(&b, &fs, 0).unwrap().features.value().clone()
        };
        let (a, b) = (run(&pts), run(&moved));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert_eq!(run(&pts), a);
    }

    #[test]
    fn attention_weights_normalised_and_shapes_kept(pts in cloud(6, 24), other in cloud(6, 24), seed in 0u64..1000) {
        let block = AttentionBlock::new("a", 4, 5);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let g = Graph::no_grad();
        let b = Binder::new(&g, &store, false);
        let x = FeatureSet { positions: pts.clone(), features: g.constant(features(pts.len(), 4, seed)) };
        let y = FeatureSet { positions: other.clone(), features: g.constant(features(other.len(), 4, seed + 1)) };
        let trace = block.trace(&b, &x, &x).unwrap();
        let w = trace.weights.value();
        let (n, k, c) = (pts.len(), 5, 4);
        for i in 0..n {
            for ch in 0..c {
                let col: Vec<f64> = (0..k).map(|j| w.data()[(i * k + j) * c + ch]).collect();
                prop_assert!(col.iter().all(|&v| v > 0.0 && v < 1.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let sa = block.self_attend(&b, &x).unwrap();
        prop_assert_eq!(sa.features.shape(), &[n, c][..]);
        let (s, t) = block.cross_attend(&b, &x, &y).unwrap();
        prop_assert_eq!((s.len(), t.len()), (pts.len(), other.len()));
    }

    #[test]
    fn voxel_means_conserve_features(pts in prop::collection::vec(point(7.0), 1..200), seed in 0u64..100) {
        let geo = VoxelGeometry::new(&RegionConfig::default()).unwrap();
        let g = Graph::no_grad();
        let feats = features(pts.len(), 3, seed);
        let fs = FeatureSet { positions: pts.clone(), features: g.constant(feats.clone()) };
        let grid = voxelize(&fs, &geo).unwrap();
        let [w, l, h] = geo.dims;
        prop_assert_eq!(grid.data.shape(), &[3, h, l, w][..]);
        let mut counts = vec![0usize; geo.cells()];
        let mut expected = [0.0f64; 3];
        for (i, p) in pts.iter().enumerate() {
            if let Some(cell) = geo.cell_of(*p) {
                prop_assert!(cell[0] < w && cell[1] < l && cell[2] < h);
                counts[geo.flat(cell)] += 1;
                for (ch, e) in expected.iter_mut().enumerate() {
                    *e += feats.data()[i * 3 + ch];
                }
            }
        }
        prop_assert_eq!(grid.dropped, pts.len() - counts.iter().sum::<usize>());
        let data = grid.data.value().data();
        for (ch, e) in expected.iter().enumerate() {
            let got: f64 = (0..geo.cells()).map(|v| data[ch * geo.cells() + v] * counts[v] as f64).sum();
            prop_assert!((got - e).abs() <= 1e-6 * e.abs().max(1.0));
        }
    }

    #[test]
    fn dual_pool_bounds(seed in 0u64..1000, dims in [1usize..4, 1usize..5, 1usize..5, 1usize..5]) {
        let g = Graph::no_grad();
        let n: usize = dims.iter().product();
        let x = features(n, 1, seed).reshaped(&dims).unwrap();
        let (bev, z) = dual_pool(&g.constant(x.clone())).unwrap();
        let global = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let [c, h, l, w] = dims;
        for ch in 0..c {
            for k in 0..h {
                let slice: Vec<f64> = (0..l * w).map(|s| x.data()[(ch * h + k) * l * w + s]).collect();
                let mean = slice.iter().sum::<f64>() / slice.len() as f64;
                let v = z.value().data()[ch * h + k];
                prop_assert!(v <= global && v >= mean);
            }
        }
        prop_assert!(bev.value().data().iter().all(|&v| v <= global));
        let bmax = bev.value().data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zmax = z.value().data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!((bmax, zmax), (global, global));
    }

    #[test]
    fn label_maps_are_well_formed(b in boxes(), radius in 0.0..4.0f64, z_head in any::<bool>()) {
        let geo = VoxelGeometry::new(&RegionConfig::default()).unwrap();
        let m = construct_labels(&b, &geo, radius, z_head).unwrap();
        let cls = m.bev_cls.data();
        prop_assert!(cls.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(cls.iter().filter(|&&v| v == 1.0).count() <= 1);
        prop_assert!(m.z_cls.data().iter().filter(|&&v| v == 1.0).count() <= 1);
        if let Some(center) = m.bev_center {
            let w = geo.dims[0];
            let (ci, cj) = ((center / w) as f64, (center % w) as f64);
            let gamma = |idx: usize| (((idx / w) as f64 - ci).powi(2) + ((idx % w) as f64 - cj).powi(2)).sqrt();
            let lit: Vec<usize> = (0..cls.len()).filter(|&i| cls[i] > 0.0).collect();
            for &a in &lit {
                for &c in &lit {
                    if gamma(a) < gamma(c) {
                        prop_assert!(cls[a] >= cls[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn decode_inverts_labels(b in boxes(), heading in -PI..PI, z_head in any::<bool>()) {
        let geo = VoxelGeometry::new(&RegionConfig::default()).unwrap();
        let prev = Box3D::new([3.0, -1.0, 0.2], 1.0, 2.0, 1.0, heading).unwrap();
        let local = prev.frame().box_to_local(&b);
        let m = construct_labels(&local, &geo, 2.0, z_head).unwrap();
        prop_assume!(m.valid);
        let d = decode_box(&m.ideal_heads(z_head), &geo, &prev).unwrap();
        for a in 0..3 {
            prop_assert!((d.center()[a] - b.center()[a]).abs() < 1e-9);
        }
        let dt = (d.theta - b.theta).rem_euclid(2.0 * PI);
        prop_assert!(dt.min(2.0 * PI - dt) < 1e-9);
        prop_assert_eq!((d.w, d.l, d.h), (prev.w, prev.l, prev.h));
    }

    #[test]
    fn frame_transforms_are_inverse(p in point(50.0), origin in point(50.0), theta in -PI..PI) {
        let f = Frame { origin, theta };
        let back = f.to_world(f.to_local(p));
        prop_assert!((0..3).all(|a| (back[a] - p[a]).abs() < 1e-9));
    }

    #[test]
    fn iou_symmetric_and_rigid_invariant(a in boxes(), b in boxes(), shift in point(20.0), rot in -PI..PI) {
        let ab = iou3d(&a, &b).unwrap();
        prop_assert!((ab - iou3d(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        let f = Frame { origin: shift, theta: rot };
        let moved = iou3d(&f.box_to_world(&a), &f.box_to_world(&b)).unwrap();
        prop_assert!((ab - moved).abs() < 1e-9);
    }

    #[test]
    fn better_boxes_never_lower_success(gt in prop::collection::vec(boxes(), 1..20), noise in prop::collection::vec(0.0..1.5f64, 20), keep in 0.0..1.0f64) {
        let worse: Vec<Box3D> = gt.iter().zip(&noise).map(|(g, n)| g.with_center([g.x + n, g.y, g.z])).collect();
        let better: Vec<Box3D> = gt.iter().zip(&noise).map(|(g, n)| g.with_center([g.x + n * keep, g.y, g.z])).collect();
        let (sw, pw) = ope_metrics(&worse, &gt).unwrap();
        let (sb, pb) = ope_metrics(&better, &gt).unwrap();
        prop_assert!(sb >= sw && pb >= pw);
    }

    #[test]
    fn pointcloud_binary_round_trip(pts in prop::collection::vec((point(100.0), 0.0..1.0f64), 1..64)) {
        let quant = |v: f64| v as f32 as f64;
        let pc = PointCloud::new(
            pts.iter().map(|(p, _)| p.map(quant)).collect(),
            pts.iter().map(|(_, f)| quant(*f)).collect(),
            1,
        ).unwrap();
        let bytes = encode_pointcloud(&pc).unwrap();
        prop_assert_eq!(bytes.len(), 16 * pts.len());
        let back = decode_pointcloud(&bytes, std::path::Path::new("x.bin")).unwrap();
        prop_assert_eq!(&back, &pc);
        let err = decode_pointcloud(&bytes[..bytes.len() - 1], std::path::Path::new("x.bin")).unwrap_err();
        let is_binary = matches!(err, CoreError::Binary { .. });
        prop_assert!(is_binary);
    }
}

#[test]
fn malformed_label_reports_line() {
    let text = "0 1 Car 0 0 0 0 0 0 0 1.5 1.8 4.2 2.0 1.6 15.0 0.5\n1 1 Car 0 0 0 0 0 0 0 1.5 oops 4.2 2.0 1.6 15.0 0.5\n";
    match parse_tracking_labels(text, std::path::Path::new("labels.txt"), "Car", None) {
        Err(CoreError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn pyramid_concatenates_every_level() {
    let cfg = RunConfig::default().model;
    let pyramid = Pyramid::new(&cfg);
    let mut store = ParamStore::new();
    pyramid.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g = Graph::no_grad();
    let b = Binder::new(&g, &store, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stages: Vec<FeatureSet> = (0..3)
        .map(|s| {
            use rand::Rng;
            let n = cfg.stage_points[s];
            FeatureSet {
                positions: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
                features: g.constant(features(n, cfg.stage_channels[s], s as u64)),
            }
        })
        .collect();
    let out = pyramid.forward(&b, &stages).unwrap();
    assert_eq!(out.features.shape(), &[512 + 256 + 128, 64]);
}

#[test]
fn shared_parameters_stored_once() {
    let cfg = RunConfig::default();
    let store = Model::new(&cfg).unwrap().init(0).unwrap();
    assert!(store.keys().all(|k| !k.contains("template") && !k.contains("search")));
    for s in 1..=3 {
        for part in ["setabs.mlp.0.weight", "self_attn.f1.weight", "cross_attn.f1.weight"] {
            assert_eq!(store.keys().filter(|k| k.ends_with(&format!("stage{s}.{part}"))).count(), 1);
        }
    }
}

#[test]
fn eval_forward_and_parameter_report_are_deterministic() {
    let cfg = RunConfig::toy();
    let model = Model::new(&cfg).unwrap();
    let store = model.init(3).unwrap();
    assert_eq!(Model::parameter_breakdown(&store), Model::parameter_breakdown(&model.init(3).unwrap()));
    let seq = synth_sequence(&sot_core::config::SynthConfig {
        frames: 2,
        start: [0.0, 0.0, 0.0],
        size: [0.6, 1.0, 0.5],
        target_points: 80,
        clutter_points: 40,
        clutter_extent: 2.0,
        ..Default::default()
    })
    .unwrap();
    let pc = sot_core::pointops::resample(&seq.frames[0], cfg.model.points, 9).unwrap();
    let run = || {
        let g = Graph::no_grad();
        let b = Binder::new(&g, &store, false);
        model.forward(&b, &pc, &pc, SamplingStarts::default()).unwrap().values()
    };
    assert_eq!(run(), run());
}

#[test]
fn tracking_is_deterministic_and_keeps_size() {
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic.as_mut().unwrap().frames = 5;
    let seq = synth_sequence(cfg.data.synthetic.as_ref().unwrap()).unwrap();
    let model = Model::new(&cfg).unwrap();
    let store = model.init(0).unwrap();
    let a = track_sequence(&model, &store, &cfg, &seq.frames, seq.boxes[0]).unwrap();
    let b = track_sequence(&model, &store, &cfg, &seq.frames, seq.boxes[0]).unwrap();
    assert_eq!(a.len(), seq.frames.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.bbox == y.bbox && x.lost == y.lost));
    assert!(a.iter().all(|f| (f.bbox.w, f.bbox.l, f.bbox.h) == (seq.boxes[0].w, seq.boxes[0].l, seq.boxes[0].h)));
}
