//! Point-cloud and label files, and generated sequences.
//!
//! Point files hold consecutive little-endian `f32` quadruplets
//! `(x, y, z, intensity)`, 16 bytes per point, with no header.
//!
//! Tracking labels are whitespace-separated text, one object per line:
//!
//! ```text
//! frame track type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y [score]
//! ```
//!
//! where `(x, y, z)` is the bottom-centre of the box in a camera frame
//! (x right, y down, z forward). Boxes convert as
//!
//! ```text
//! center = (x, z, y − h/2)    extents (w, l, h) unchanged    θ = −rotation_y
//! ```
//!
//! so the horizontal plane is spanned by camera x and z and the heading is
//! measured counter-clockwise from camera x in that plane.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DataConfig, SynthConfig};
use crate::error::{invalid, io_err, CoreError, Result};
use crate::geometry::{Box3D, Point, PointCloud};

pub const BYTES_PER_POINT: usize = 16;

/// One tracked object over consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub category: String,
    pub frames: Vec<PointCloud>,
    pub boxes: Vec<Box3D>,
}

impl Sequence {
    pub fn new(id: String, category: String, frames: Vec<PointCloud>, boxes: Vec<Box3D>) -> Result<Self> {
        if frames.len() != boxes.len() || frames.is_empty() {
            return invalid(format!("{} frames with {} boxes", frames.len(), boxes.len()));
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(Self {
            id,
            category,
            frames,
            boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn decode_pointcloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let err = |offset: usize, msg: &str| CoreError::Binary {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    if bytes.is_empty() {
        return Err(err(0, "no points"));
    }
    if bytes.len() % BYTES_PER_POINT != 0 {
        return Err(err(bytes.len() - bytes.len() % BYTES_PER_POINT, "truncated point record"));
    }
    let n = bytes.len() / BYTES_PER_POINT;
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(BYTES_PER_POINT).enumerate() {
        let mut v = [0.0f64; 4];
        for (k, word) in rec.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(word.try_into().expect("4-byte chunk"));
            if !x.is_finite() {
                return Err(err(i * BYTES_PER_POINT + 4 * k, "non-finite value"));
            }
            v[k] = x as f64;
        }
        positions.push([v[0], v[1], v[2]]);
        features.push(v[3]);
    }
    PointCloud::new(positions, features, 1)
}

pub fn read_pointcloud_bin(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_pointcloud(&bytes, path)
}

/// Narrows to `f32`; the first feature channel is stored as intensity.
pub fn encode_pointcloud(pc: &PointCloud) -> Result<Vec<u8>> {
    if pc.dim != 1 {
        return invalid(format!("point files carry one feature channel, cloud has {}", pc.dim));
    }
    let mut out = Vec::with_capacity(pc.len() * BYTES_PER_POINT);
    for (i, p) in pc.positions.iter().enumerate() {
        for v in [p[0], p[1], p[2], pc.features[i]] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pointcloud_bin(path: &Path, pc: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_pointcloud(pc)?).map_err(io_err(path))
}

/// Boxes of one object, in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLabels {
    pub track_id: i64,
    pub frames: Vec<usize>,
    pub boxes: Vec<Box3D>,
}

/// One label line converted to `(frame, track, type, box)`.
pub fn parse_label_line(line: &str) -> std::result::Result<(usize, i64, String, Box3D), String> {
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() != 17 && tok.len() != 18 {
        return Err(format!("expected 17 or 18 columns, found {}", tok.len()));
    }
    let frame: usize = tok[0].parse().map_err(|_| format!("bad frame index {:?}", tok[0]))?;
    let track: i64 = tok[1].parse().map_err(|_| format!("bad track id {:?}", tok[1]))?;
    let mut v = [0.0f64; 14];
    for (k, t) in tok[3..17].iter().enumerate() {
        v[k] = t.parse().map_err(|_| format!("bad number {t:?} in column {}", k + 4))?;
    }
    let [h, w, l, x, y, z, rot] = [v[7], v[8], v[9], v[10], v[11], v[12], v[13]];
    let b = Box3D::new([x, z, y - h / 2.0], w, l, h, -rot).map_err(|e| e.to_string())?;
    Ok((frame, track, tok[2].to_string(), b))
}

/// Boxes of `category`; the track is `track` or, if `None`, the first
/// track of that category in the file. Every line is validated.
pub fn read_tracking_labels(path: &Path, category: &str, track: Option<i64>) -> Result<TrackLabels> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_tracking_labels(&text, path, category, track)
}

pub fn parse_tracking_labels(text: &str, path: &Path, category: &str, track: Option<i64>) -> Result<TrackLabels> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_label_line(line).map_err(|msg| CoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        rows.push(row);
    }
    let id = match track {
        Some(t) => t,
        None => match rows.iter().find(|r| r.2 == category) {
            Some(r) => r.1,
            None => return invalid(format!("{}: no {category} objects", path.display())),
        },
    };
    let mut sel: Vec<(usize, Box3D)> = rows
        .into_iter()
        .filter(|r| r.2 == category && r.1 == id)
        .map(|r| (r.0, r.3))
        .collect();
    sel.sort_by_key(|r| r.0);
    Ok(TrackLabels {
        track_id: id,
        frames: sel.iter().map(|r| r.0).collect(),
        boxes: sel.into_iter().map(|r| r.1).collect(),
    })
}

/// `<root>/label_02/<scene>.txt` with clouds from
/// `<root>/velodyne/<scene>/<frame:06>.bin`.
pub fn load_kitti_sequence(root: &Path, scene: &str, category: &str) -> Result<Sequence> {
    let labels = read_tracking_labels(&root.join("label_02").join(format!("{scene}.txt")), category, None)?;
    if labels.frames.is_empty() {
        return invalid(format!("scene {scene} has no {category} track"));
    }
    let frames = labels
        .frames
        .iter()
        .map(|f| read_pointcloud_bin(&root.join("velodyne").join(scene).join(format!("{f:06}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    Sequence::new(format!("{scene}:{}", labels.track_id), category.to_string(), frames, labels.boxes)
}

/// Box surface samples in object coordinates, slightly inset so they stay
/// inside the box under exact containment tests.
fn surface_points(size: [f64; 3], n: usize, rng: &mut impl Rng) -> Vec<Point> {
    let [w, l, h] = size.map(|v| v * 0.98);
    let faces = [(l * h, 1), (l * h, 1), (w * h, 0), (w * h, 0), (l * w, 2), (l * w, 2)];
    let total: f64 = faces.iter().map(|f| f.0).sum();
    let half = [l / 2.0, w / 2.0, h / 2.0];
    (0..n)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= faces[face].0 {
                pick -= faces[face].0;
                face += 1;
            }
            let axis = faces[face].1;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [0, 1, 2].map(|a| rng.gen_range(-half[a]..=half[a]));
            p[axis] = sign * half[axis];
            p
        })
        .collect()
}

/// Rigid box-shaped target moving at constant velocity and yaw rate
/// through static uniform clutter. Target and clutter points are sampled
/// once; per-frame Gaussian noise of `noise` metres is added to every
/// point.
pub fn synth_sequence(spec: &SynthConfig) -> Result<Sequence> {
    if spec.frames == 0 {
        return invalid("synthetic sequence needs at least one frame");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [w, l, h] = spec.size;
    let boxes: Vec<Box3D> = (0..spec.frames)
        .map(|t| {
            let t = t as f64;
            let c = [0, 1, 2].map(|a| spec.start[a] + spec.velocity[a] * t);
            Box3D::new(c, w, l, h, spec.heading + spec.yaw_rate * t)
        })
        .collect::<Result<_>>()?;
    let target = surface_points(spec.size, spec.target_points, &mut rng);
    let target_intensity: Vec<f64> = (0..target.len()).map(|_| rng.gen_range(0.6..0.9)).collect();
    let ground = spec.start[2] - h / 2.0;
    let (cx, cy) = (
        spec.start[0] + spec.velocity[0] * (spec.frames as f64 - 1.0) / 2.0,
        spec.start[1] + spec.velocity[1] * (spec.frames as f64 - 1.0) / 2.0,
    );
    let mut clutter = Vec::with_capacity(spec.clutter_points);
    while clutter.len() < spec.clutter_points {
        let e = spec.clutter_extent;
        let p = [cx + rng.gen_range(-e..=e), cy + rng.gen_range(-e..=e), ground + rng.gen_range(0.0..=2.0 * h)];
        if boxes.iter().all(|b| !b.contains(p, 0.3, 0.3)) {
            clutter.push((p, rng.gen_range(0.0..0.4)));
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| CoreError::InvalidInput(e.to_string()))?;
    let jitter = |p: Point, rng: &mut ChaCha8Rng| -> Point {
        if spec.noise > 0.0 {
            p.map(|v| v + noise.sample(rng))
        } else {
            p
        }
    };
    let mut frames = Vec::with_capacity(spec.frames);
    for b in &boxes {
        let f = b.frame();
        let mut pc = PointCloud::empty(1);
        for (p, &i) in target.iter().zip(&target_intensity) {
            let q = jitter(f.to_world(*p), &mut rng);
            pc.push(q, &[i]);
        }
        for &(p, i) in &clutter {
            let q = jitter(p, &mut rng);
            pc.push(q, &[i]);
        }
        frames.push(pc);
    }
    Sequence::new(format!("synthetic-{}", spec.seed), "Car".into(), frames, boxes)
}

/// Training sequences named by the data section: the generated sequence
/// when configured, otherwise every listed scene.
pub fn load_sequences(data: &DataConfig) -> Result<Vec<Sequence>> {
    if let Some(s) = &data.synthetic {
        return Ok(vec![synth_sequence(s)?]);
    }
    let Some(root) = &data.kitti_root else {
        return invalid("data section names neither a synthetic sequence nor a dataset root");
    };
    if data.scenes.is_empty() {
        return invalid("no scenes listed");
    }
    data.scenes.iter().map(|s| load_kitti_sequence(root, s, &data.category)).collect()
}

/// `synthetic` selects the generated sequence (configured or default);
/// anything else is a scene id under the dataset root.
pub fn resolve_sequence(data: &DataConfig, id: &str) -> Result<Sequence> {
    if id == "synthetic" {
        return synth_sequence(&data.synthetic.clone().unwrap_or_default());
    }
    let root: &PathBuf = data
        .kitti_root
        .as_ref()
        .ok_or_else(|| CoreError::Config(format!("sequence {id:?} needs data.kitti_root")))?;
    load_kitti_sequence(root, id, &data.category)
}
