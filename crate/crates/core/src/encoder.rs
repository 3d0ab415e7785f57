//! Three-stage point encoder, the multi-level search-feature pyramid and
//! voxelization of the fused features.

use rand::Rng;
use sot_tensor::{BatchNorm, Binder, Conv, Linear, ParamStore, Tensor, Var};

use crate::attention::{AttentionBlock, FeatureSet};
use crate::config::{ModelConfig, RegionConfig};
use crate::error::{invalid, Result};
use crate::geometry::{Point, PointCloud};
use crate::pointops::{ball_query, fps};

/// Sample with FPS, group each sample's ball neighbourhood, embed
/// `(p_j − c_i ‖ x_j)` with a two-layer pointwise MLP and max-pool.
#[derive(Debug, Clone)]
pub struct SetAbstraction {
    pub points: usize,
    pub radius: f64,
    pub cap: usize,
    mlp: [Linear; 2],
}

impl SetAbstraction {
    pub fn new(path: &str, in_channels: usize, out_channels: usize, points: usize, radius: f64, cap: usize) -> Self {
        Self {
            points,
            radius,
            cap,
            mlp: [
                Linear::new(format!("{path}.mlp.0"), 3 + in_channels, out_channels),
                Linear::new(format!("{path}.mlp.1"), out_channels, out_channels),
            ],
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in &self.mlp {
            l.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, b: &Binder<'_>, x: &FeatureSet, start: usize) -> Result<FeatureSet> {
        let centers_idx = fps(&x.positions, self.points, start)?;
        let centers: Vec<Point> = centers_idx.iter().map(|&i| x.positions[i]).collect();
        let nbr = ball_query(&centers, &x.positions, self.radius, self.cap)?;
        let m = centers.len();
        let mut rel = Vec::with_capacity(m * self.cap * 3);
        for (r, c) in centers.iter().enumerate() {
            for &j in nbr.row(r) {
                let p = x.positions[j];
                rel.extend([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
        }
        let rel = b.graph().constant(Tensor::new(vec![m * self.cap, 3], rel)?);
        let grouped = b.graph().concat(&[rel, x.features.gather_rows(&nbr.indices)?], 1)?;
        let h = self.mlp[0].forward(b, &grouped)?.relu()?;
        let h = self.mlp[1].forward(b, &h)?.relu()?;
        let out = self.mlp[1].out_dim;
        Ok(FeatureSet {
            positions: centers,
            features: h.reshape(&[m, self.cap, out])?.max_axis(1)?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.mlp.iter().map(|l| l.out_dim * (l.in_dim + 1)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub setabs: SetAbstraction,
    pub self_attn: Option<AttentionBlock>,
    pub cross_attn: Option<AttentionBlock>,
}

/// FPS start indices for each stage and stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplingStarts {
    pub template: [usize; 3],
    pub search: [usize; 3],
}

impl SamplingStarts {
    /// Seeded random starts for training; zeros are the eval default.
    pub fn random(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let sizes = [cfg.points, cfg.stage_points[0], cfg.stage_points[1]];
        let mut draw = || sizes.map(|n| rng.gen_range(0..n));
        Self {
            template: draw(),
            search: draw(),
        }
    }
}

/// Search-side outputs of every stage.
pub struct EncoderOutput {
    pub stages: Vec<FeatureSet>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut cin = cfg.input_features;
        let stages = (0..3)
            .map(|s| {
                let c = cfg.stage_channels[s];
                let path = format!("encoder.stage{}", s + 1);
                let stage = EncoderStage {
                    setabs: SetAbstraction::new(
                        &format!("{path}.setabs"),
                        cin,
                        c,
                        cfg.stage_points[s],
                        cfg.radii[s],
                        cfg.ball_cap,
                    ),
                    self_attn: cfg.sa_stages[s].then(|| AttentionBlock::new(format!("{path}.self_attn"), c, cfg.neighbors)),
                    cross_attn: cfg.ca_stages[s].then(|| AttentionBlock::new(format!("{path}.cross_attn"), c, cfg.neighbors)),
                };
                cin = c;
                stage
            })
            .collect();
        Self { stages }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for st in &self.stages {
            st.setabs.init(store, rng)?;
            for a in st.self_attn.iter().chain(&st.cross_attn) {
                a.init(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn input_features(b: &Binder<'_>, pc: &PointCloud) -> Result<FeatureSet> {
        let t = Tensor::new(vec![pc.len(), pc.dim], pc.features.clone())?;
        Ok(FeatureSet {
            positions: pc.positions.clone(),
            features: b.graph().constant(t),
        })
    }

    /// Runs both streams through every stage and returns the search side.
    /// The template stream's final cross-attention is skipped because
    /// nothing consumes it.
    pub fn forward(&self, b: &Binder<'_>, template: &PointCloud, search: &PointCloud, starts: SamplingStarts) -> Result<EncoderOutput> {
        let (_, stages) = self.forward_streams(b, template, search, starts)?;
        Ok(EncoderOutput { stages })
    }

    /// Both streams stage by stage: `(template, search)`.
    pub fn forward_streams(
        &self,
        b: &Binder<'_>,
        template: &PointCloud,
        search: &PointCloud,
        starts: SamplingStarts,
    ) -> Result<(Vec<FeatureSet>, Vec<FeatureSet>)> {
        if template.dim != search.dim {
            return invalid("template and search feature widths differ");
        }
        let mut t = Self::input_features(b, template)?;
        let mut s = Self::input_features(b, search)?;
        let (mut touts, mut souts) = (Vec::new(), Vec::new());
        let last = self.stages.len() - 1;
        for (i, st) in self.stages.iter().enumerate() {
            t = st.setabs.forward(b, &t, starts.template[i])?;
            s = st.setabs.forward(b, &s, starts.search[i])?;
            if let Some(sa) = &st.self_attn {
                t = sa.self_attend(b, &t)?;
                s = sa.self_attend(b, &s)?;
            }
            if let Some(ca) = &st.cross_attn {
                let s_new = ca.forward(b, &s, &t)?;
                if i < last {
                    t = ca.forward(b, &t, &s)?;
                }
                s = s_new;
            }
            touts.push(t.clone());
            souts.push(s.clone());
        }
        Ok((touts, souts))
    }
}

/// Per-level `conv1×1 → BN → ReLU → conv1×1` to a common width, then
/// concatenation along the point axis (shallowest level first).
#[derive(Debug, Clone)]
pub struct Pyramid {
    /// Encoder stage index feeding each level.
    pub sources: Vec<usize>,
    pub channels: usize,
    levels: Vec<(Conv, BatchNorm, Conv)>,
}

impl Pyramid {
    pub fn new(cfg: &ModelConfig) -> Self {
        let sources: Vec<usize> = (3 - cfg.pyramid_levels..3).collect();
        let c = cfg.pyramid_channels;
        let levels = sources
            .iter()
            .map(|&s| {
                let p = format!("pyramid.level{}", s + 1);
                (
                    Conv::new(format!("{p}.conv0"), cfg.stage_channels[s], c, &[1]),
                    BatchNorm::new(format!("{p}.bn"), c),
                    Conv::new(format!("{p}.conv1"), c, c, &[1]),
                )
            })
            .collect();
        Self {
            sources,
            channels: c,
            levels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (c0, bn, c1) in &self.levels {
            c0.init(store, rng)?;
            bn.init(store)?;
            c1.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, b: &Binder<'_>, stages: &[FeatureSet]) -> Result<FeatureSet> {
        let mut feats = Vec::new();
        let mut positions = Vec::new();
        for (&src, (c0, bn, c1)) in self.sources.iter().zip(&self.levels) {
            let Some(fs) = stages.get(src) else {
                return invalid(format!("pyramid needs encoder stage {}", src + 1));
            };
            if fs.channels() != c0.cin {
                return invalid(format!("pyramid level expects {} channels, got {}", c0.cin, fs.channels()));
            }
            let n = fs.len();
            let x = fs.features.transpose()?.reshape(&[1, c0.cin, n])?;
            let h = bn.forward(b, &c0.forward(b, &x)?)?.relu()?;
            let h = c1.forward(b, &h)?.reshape(&[self.channels, n])?.transpose()?;
            feats.push(h);
            positions.extend_from_slice(&fs.positions);
        }
        Ok(FeatureSet {
            positions,
            features: b.graph().concat(&feats, 0)?,
        })
    }
}

/// Mapping from canonical coordinates to voxel cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGeometry {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel: [f64; 3],
    /// `(W, L, H)`: cells along x, y and z.
    pub dims: [usize; 3],
}

impl VoxelGeometry {
    /// `floor((max − min) / v) + 1` cells per axis.
    pub fn new(region: &RegionConfig) -> Result<Self> {
        region.validate().map_err(|e| crate::error::CoreError::InvalidInput(e.to_string()))?;
        let min = [region.x[0], region.y[0], region.z[0]];
        let max = [region.x[1], region.y[1], region.z[1]];
        let dims = [0, 1, 2].map(|a| ((max[a] - min[a]) / region.voxel[a] + 1e-9).floor() as usize + 1);
        Ok(Self {
            min,
            max,
            voxel: region.voxel,
            dims,
        })
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn length(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    /// Continuous cell coordinates `(p − min) / v`.
    pub fn continuous(&self, p: Point) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.min[a]) / self.voxel[a])
    }

    /// `(w, l, h)` indices, or `None` outside `[min, max)` on any axis.
    pub fn cell_of(&self, p: Point) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] < self.max[a]) {
                return None;
            }
            out[a] = (((p[a] - self.min[a]) / self.voxel[a]).floor() as usize).min(self.dims[a] - 1);
        }
        Some(out)
    }

    /// Flat index in `H × L × W` order.
    pub fn flat(&self, cell: [usize; 3]) -> usize {
        (cell[2] * self.dims[1] + cell[1]) * self.dims[0] + cell[0]
    }
}

/// Features averaged per voxel, laid out `[C, H, L, W]`.
pub struct VoxelGrid {
    pub geometry: VoxelGeometry,
    pub data: Var,
    pub occupied: Vec<bool>,
    /// Mean position of the points in each occupied cell.
    pub mean_positions: Vec<Option<Point>>,
    pub dropped: usize,
}

pub fn voxelize(fs: &FeatureSet, geometry: &VoxelGeometry) -> Result<VoxelGrid> {
    let cells: Vec<Option<usize>> = fs
        .positions
        .iter()
        .map(|&p| geometry.cell_of(p).map(|c| geometry.flat(c)))
        .collect();
    let n_cells = geometry.cells();
    let mut sums = vec![([0.0; 3], 0usize); n_cells];
    for (p, c) in fs.positions.iter().zip(&cells) {
        if let Some(c) = *c {
            let s = &mut sums[c];
            for a in 0..3 {
                s.0[a] += p[a];
            }
            s.1 += 1;
        }
    }
    let dropped = cells.iter().filter(|c| c.is_none()).count();
    let occupied = sums.iter().map(|s| s.1 > 0).collect();
    let mean_positions = sums
        .iter()
        .map(|(s, n)| (*n > 0).then(|| s.map(|v| v / *n as f64)))
        .collect();
    let [w, l, h] = geometry.dims;
    let data = fs.features.scatter_mean(&cells, n_cells)?.reshape(&[fs.channels(), h, l, w])?;
    Ok(VoxelGrid {
        geometry: *geometry,
        data,
        occupied,
        mean_positions,
        dropped,
    })
}
