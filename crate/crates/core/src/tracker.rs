//! Online tracking: cropping into the previous box's frame, template
//! upkeep and per-frame inference.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use sot_tensor::{Binder, Graph, ParamStore};

use crate::config::RunConfig;
use crate::decoder::decode_box;
use crate::encoder::SamplingStarts;
use crate::error::{invalid, CoreError, Result};
use crate::geometry::{Box3D, PointCloud};
use crate::model::Model;
use crate::pointops::resample;

/// Which part of a frame is kept around a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    /// Added to each horizontal side of the box (m).
    pub enlarge: f64,
    /// Canonical vertical range kept; `None` keeps the box's own height.
    pub z_range: Option<[f64; 2]>,
}

impl CropSpec {
    pub fn box_only() -> Self {
        Self {
            enlarge: 0.0,
            z_range: None,
        }
    }
}

/// Points inside the (enlarged) box, expressed in the box's canonical
/// frame. May be empty.
pub fn crop_local(frame: &PointCloud, b: &Box3D, spec: CropSpec) -> PointCloud {
    let f = b.frame();
    let mut out = PointCloud::empty(frame.dim);
    for (i, &p) in frame.positions.iter().enumerate() {
        let q = f.to_local(p);
        let z_ok = match spec.z_range {
            Some([lo, hi]) => q[2] >= lo && q[2] <= hi,
            None => q[2].abs() <= b.h / 2.0,
        };
        if z_ok && q[0].abs() <= b.l / 2.0 + spec.enlarge && q[1].abs() <= b.w / 2.0 + spec.enlarge {
            out.push(q, frame.feature(i));
        }
    }
    out
}

/// [`crop_local`] resampled to `n` points; an empty crop is reported as a
/// lost target.
pub fn crop_canonicalize(frame: &PointCloud, b: &Box3D, spec: CropSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if frame.is_empty() {
        return invalid("empty frame");
    }
    let crop = crop_local(frame, b, spec);
    if crop.is_empty() {
        return Err(CoreError::LostTarget("no points in the search region".into()));
    }
    resample(&crop, n, seed)
}

/// Union of the first-frame crop and the previous-frame crop (each in its
/// own box frame), resampled to `n` points. An empty previous crop falls
/// back to the first frame alone.
pub fn make_template(
    first: (&PointCloud, &Box3D),
    prev: Option<(&PointCloud, &Box3D)>,
    n: usize,
    seed: u64,
) -> Result<PointCloud> {
    let mut union = crop_local(first.0, first.1, CropSpec::box_only());
    if let Some((frame, b)) = prev {
        union.extend(&crop_local(frame, b, CropSpec::box_only()))?;
    }
    if union.is_empty() {
        return Err(CoreError::LostTarget("template crops are empty".into()));
    }
    resample(&union, n, seed)
}

/// Distinct deterministic seed per frame and purpose.
pub fn frame_seed(base: u64, frame: usize, stream: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((frame as u64) << 8 | stream)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedFrame {
    pub frame: usize,
    pub bbox: Box3D,
    pub lost: bool,
    pub elapsed: Duration,
}

/// Runs the model over `frames` starting from `init` on frame 0.
pub fn track_sequence(model: &Model, store: &ParamStore, cfg: &RunConfig, frames: &[PointCloud], init: Box3D) -> Result<Vec<TrackedFrame>> {
    if frames.is_empty() {
        return invalid("tracking needs at least one frame");
    }
    init.validate()?;
    let n = model.config.points;
    let base = cfg.tracker.search_enlarge;
    let mut enlarge = base;
    let mut out = vec![TrackedFrame {
        frame: 0,
        bbox: init,
        lost: false,
        elapsed: Duration::ZERO,
    }];
    for t in 1..frames.len() {
        let started = Instant::now();
        let prev = out[t - 1].bbox;
        let history = (t > 1).then(|| (&frames[t - 1], &prev));
        let spec = CropSpec {
            enlarge,
            z_range: Some(cfg.region.z),
        };
        let inputs = make_template((&frames[0], &init), history, n, frame_seed(cfg.seed, t, 0)).and_then(|tmpl| {
            let search = crop_canonicalize(&frames[t], &prev, spec, n, frame_seed(cfg.seed, t, 1))?;
            Ok((tmpl, search))
        });
        let (bbox, lost) = match inputs {
            Ok((tmpl, search)) => {
                let g = Graph::no_grad();
                let b = Binder::new(&g, store, false);
                let heads = model.forward(&b, &tmpl, &search, SamplingStarts::default())?;
                (decode_box(&heads.values(), &model.geometry, &prev)?, false)
            }
            Err(CoreError::LostTarget(_)) => (prev, true),
            Err(e) => return Err(e),
        };
        enlarge = if lost { enlarge * cfg.tracker.lost_enlarge_factor } else { base };
        out.push(TrackedFrame {
            frame: t,
            bbox,
            lost,
            elapsed: started.elapsed(),
        });
    }
    Ok(out)
}

/// Track file: a `# w l h <w> <l> <h>` header, then one
/// `frame x y z theta flag` line per frame with flag `ok` or `lost`.
pub fn format_track(frames: &[TrackedFrame]) -> String {
    let mut s = String::new();
    if let Some(f) = frames.first() {
        let b = f.bbox;
        let _ = writeln!(s, "# w l h {:.6} {:.6} {:.6}", b.w, b.l, b.h);
    }
    for f in frames {
        let b = f.bbox;
        let flag = if f.lost { "lost" } else { "ok" };
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6} {flag}", f.frame, b.x, b.y, b.z, b.theta);
    }
    s
}

/// Ground-truth boxes in the track file layout.
pub fn format_boxes(boxes: &[Box3D]) -> String {
    let frames: Vec<TrackedFrame> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| TrackedFrame {
            frame: i,
            bbox: *b,
            lost: false,
            elapsed: Duration::ZERO,
        })
        .collect();
    format_track(&frames)
}

/// Parses [`format_track`] output; `path` is only used in messages.
pub fn parse_track(text: &str, path: &std::path::Path) -> Result<Vec<(usize, Box3D)>> {
    let err = |line: usize, msg: String| CoreError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut size: Option<[f64; 3]> = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let tok: Vec<&str> = rest.split_whitespace().collect();
            if tok.len() == 6 && tok[..3] == ["w", "l", "h"] {
                let mut v = [0.0; 3];
                for (k, t) in tok[3..].iter().enumerate() {
                    v[k] = t.parse().map_err(|_| err(ln, format!("bad size value {t:?}")))?;
                }
                size = Some(v);
            }
            continue;
        }
        let [w, l, h] = size.ok_or_else(|| err(ln, "box line before the size header".into()))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 {
            return Err(err(ln, format!("expected 6 fields, found {}", tok.len())));
        }
        let frame: usize = tok[0].parse().map_err(|_| err(ln, format!("bad frame id {:?}", tok[0])))?;
        let mut v = [0.0; 4];
        for (k, t) in tok[1..5].iter().enumerate() {
            v[k] = t.parse().map_err(|_| err(ln, format!("bad number {t:?}")))?;
        }
        if !matches!(tok[5], "ok" | "lost") {
            return Err(err(ln, format!("unknown flag {:?}", tok[5])));
        }
        let b = Box3D::new([v[0], v[1], v[2]], w, l, h, v[3]).map_err(|e| err(ln, e.to_string()))?;
        out.push((frame, b));
    }
    Ok(out)
}
