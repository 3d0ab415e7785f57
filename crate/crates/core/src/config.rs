//! Run configuration: TOML with one table per subsystem. Unknown keys are
//! rejected and every value is validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// 2-D convolution over each horizontal slice followed by 1-D
    /// convolution along the vertical axis.
    Decomposed,
    /// Plain 3×3×3 convolution blocks.
    Conv3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Template and search clouds are both resampled to this many points.
    pub points: usize,
    pub input_features: usize,
    pub stage_points: [usize; 3],
    pub radii: [f64; 3],
    pub ball_cap: usize,
    pub stage_channels: [usize; 3],
    pub neighbors: usize,
    pub sa_stages: [bool; 3],
    pub ca_stages: [bool; 3],
    /// Number of trailing stages feeding the correlation pyramid (1..=3).
    pub pyramid_levels: usize,
    pub pyramid_channels: usize,
    pub decoder: DecoderKind,
    pub decoder_blocks: usize,
    pub decoder_channels: usize,
    pub subnet_blocks: usize,
    /// Separate vertical prediction subnetwork; without it the BEV
    /// regression head also predicts the vertical center.
    pub z_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            points: 1024,
            input_features: 1,
            stage_points: [512, 256, 128],
            radii: [0.3, 0.5, 0.7],
            ball_cap: 32,
            stage_channels: [64, 128, 256],
            neighbors: 32,
            sa_stages: [true; 3],
            ca_stages: [true; 3],
            pyramid_levels: 3,
            pyramid_channels: 64,
            decoder: DecoderKind::Decomposed,
            decoder_blocks: 3,
            decoder_channels: 64,
            subnet_blocks: 3,
            z_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub voxel: [f64; 3],
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            x: [-5.6, 5.6],
            y: [-3.6, 3.6],
            z: [-2.4, 2.4],
            voxel: [0.3, 0.3, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Graded classification labels are kept within this many cells of the
    /// discrete center.
    pub label_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            reg_weight: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            label_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    /// Samples whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub shift_xy: f64,
    pub shift_z: f64,
    pub search_enlarge: f64,
    /// Re-estimate normalization statistics over every training pair with
    /// the final weights.
    pub recalibrate_norm: bool,
    /// Checkpoint written at the end of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            lr_decay: 0.2,
            decay_every: 6,
            epochs: 20,
            max_steps: 0,
            batch_size: 1,
            shift_xy: 0.3,
            shift_z: 0.1,
            search_enlarge: 2.0,
            recalibrate_norm: true,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub search_enlarge: f64,
    /// Margin multiplier applied to the next search region after a lost frame.
    pub lost_enlarge_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_enlarge: 2.0,
            lost_enlarge_factor: 1.5,
        }
    }
}

/// Parameters of a generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub start: [f64; 3],
    /// Displacement per frame (m).
    pub velocity: [f64; 3],
    pub heading: f64,
    pub yaw_rate: f64,
    /// Box extents `[w, l, h]`.
    pub size: [f64; 3],
    pub target_points: usize,
    pub clutter_points: usize,
    /// Half-width of the square clutter area around the trajectory (m).
    pub clutter_extent: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            start: [10.0, 2.0, 0.0],
            velocity: [0.0; 3],
            heading: 0.3,
            yaw_rate: 0.0,
            size: [2.0, 4.0, 1.5],
            target_points: 600,
            clutter_points: 1500,
            clutter_extent: 12.0,
            noise: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// KITTI tracking layout: `<root>/velodyne/<scene>/<frame>.bin` and
    /// `<root>/label_02/<scene>.txt`.
    pub kitti_root: Option<PathBuf>,
    pub category: String,
    pub scenes: Vec<String>,
    pub synthetic: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kitti_root: None,
            category: "Car".into(),
            scenes: Vec::new(),
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub region: RegionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
}

fn cfg<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sp = self.stage_points;
        if !(self.points > sp[0] && sp[0] > sp[1] && sp[1] > sp[2] && sp[2] > 0) {
            return cfg(format!("point counts must strictly decrease: {} > {sp:?}", self.points));
        }
        if !(self.radii[0] > 0.0 && self.radii[0] < self.radii[1] && self.radii[1] < self.radii[2]) {
            return cfg(format!("radii must be positive and increasing: {:?}", self.radii));
        }
        if self.neighbors == 0 || self.neighbors > sp[2] {
            return cfg(format!("neighbors must be in 1..={} (got {})", sp[2], self.neighbors));
        }
        if self.ball_cap == 0 {
            return cfg("ball_cap must be ≥ 1");
        }
        if !(1..=3).contains(&self.pyramid_levels) {
            return cfg("pyramid_levels must be 1, 2 or 3");
        }
        let widths = [
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.pyramid_channels,
            self.decoder_channels,
        ];
        if widths.contains(&0) {
            return cfg("channel widths must be positive");
        }
        if self.decoder_blocks == 0 || self.subnet_blocks == 0 {
            return cfg("decoder depths must be ≥ 1");
        }
        Ok(())
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !(r[0] < r[1]) {
                return cfg(format!("region {name} must satisfy min < max, got {r:?}"));
            }
        }
        if self.voxel.iter().any(|&v| !(v > 0.0)) {
            return cfg(format!("voxel size must be positive, got {:?}", self.voxel));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.region.validate()?;
        let l = &self.loss;
        if l.cls_weight < 0.0 || l.reg_weight < 0.0 || l.focal_gamma < 0.0 || !(0.0..=1.0).contains(&l.focal_alpha) {
            return cfg("loss weights must be non-negative and alpha in [0, 1]");
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.decay_every == 0 {
            return cfg("train.lr, train.batch_size and train.decay_every must be positive");
        }
        if t.shift_xy < 0.0 || t.shift_z < 0.0 || t.search_enlarge < 0.0 || self.tracker.search_enlarge < 0.0 {
            return cfg("shift magnitudes and enlargements must be non-negative");
        }
        if let Some(s) = &self.data.synthetic {
            if s.frames == 0 || s.target_points == 0 || s.size.iter().any(|&v| !(v > 0.0)) {
                return cfg("synthetic sequence needs frames, target points and positive size");
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Identifies the network architecture and input geometry; stored in
    /// checkpoints so mismatched configurations are caught at load time.
    pub fn architecture_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct Arch<'a> {
            model: &'a ModelConfig,
            region: &'a RegionConfig,
        }
        let text = toml::to_string(&Arch {
            model: &self.model,
            region: &self.region,
        })
        .expect("config always serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl RunConfig {
    /// Reduced network for single-CPU experiments on generated data; keeps
    /// the default region and voxel grid.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig {
            points: 256,
            stage_points: [128, 64, 32],
            ball_cap: 16,
            stage_channels: [16, 32, 32],
            neighbors: 8,
            pyramid_channels: 16,
            decoder_channels: 16,
            ..ModelConfig::default()
        };
        let heading = SynthConfig::default().heading;
        c.data.synthetic = Some(SynthConfig {
            clutter_points: 400,
            velocity: [0.2 * heading.cos(), 0.2 * heading.sin(), 0.0],
            ..SynthConfig::default()
        });
        c
    }

    /// The desk network fitted to its single generated sequence: 50
    /// full-batch steps at a fixed, raised learning rate without box jitter.
    pub fn overfit() -> Self {
        let mut c = Self::desk();
        let pairs = c.data.synthetic.as_ref().map_or(1, |s| s.frames.saturating_sub(1).max(1));
        c.train.lr = 0.02;
        c.train.decay_every = 1000;
        c.train.epochs = 1000;
        c.train.max_steps = 50;
        c.train.batch_size = pairs;
        c.train.shift_xy = 0.0;
        c.train.shift_z = 0.0;
        c
    }

    /// Tiny network and region for finite-difference checks.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig {
            points: 48,
            stage_points: [24, 12, 6],
            radii: [0.4, 0.6, 0.9],
            ball_cap: 4,
            stage_channels: [4, 6, 6],
            neighbors: 3,
            pyramid_channels: 4,
            decoder_blocks: 1,
            decoder_channels: 4,
            subnet_blocks: 1,
            ..ModelConfig::default()
        };
        c.region = RegionConfig {
            x: [-1.2, 1.2],
            y: [-0.9, 0.9],
            z: [-0.6, 0.6],
            voxel: [0.3, 0.3, 0.3],
        };
        c
    }
}
