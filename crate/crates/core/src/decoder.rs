//! Volumetric decoder: factorized 3-D convolution blocks, pooling to a BEV
//! map and a vertical profile, prediction heads and box decoding.

use rand::Rng;
use sot_tensor::{BatchNorm, Binder, Conv, ParamStore, Tensor, Var};

use crate::config::{DecoderKind, ModelConfig};
use crate::encoder::VoxelGeometry;
use crate::error::{invalid, Result};
use crate::geometry::{normalize_angle, Box3D};

/// `conv → BN → ReLU`.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(path: &str, cin: usize, cout: usize, kernel: &[usize]) -> Self {
        Self {
            conv: Conv::new(format!("{path}.conv"), cin, cout, kernel),
            bn: BatchNorm::new(format!("{path}.bn"), cout),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv.init(store, rng)?;
        self.bn.init(store)?;
        Ok(())
    }

    pub fn forward(&self, b: &Binder<'_>, x: &Var) -> Result<Var> {
        Ok(self.bn.forward(b, &self.conv.forward(b, x)?)?.relu()?)
    }

    pub fn parameter_count(&self) -> usize {
        let k: usize = self.conv.kernel.iter().product();
        self.conv.cout * (self.conv.cin * k + 1) + 2 * self.bn.channels
    }
}

/// One volumetric block on `[C, H, L, W]`.
#[derive(Debug, Clone)]
pub enum VolumeBlock {
    /// 3×3 over each horizontal slice, then kernel-3 along the vertical.
    Decomposed { bev: ConvBlock, vertical: ConvBlock },
    Full(ConvBlock),
}

impl VolumeBlock {
    pub fn new(kind: DecoderKind, path: &str, cin: usize, cout: usize) -> Self {
        match kind {
            DecoderKind::Decomposed => Self::Decomposed {
                bev: ConvBlock::new(&format!("{path}.bev"), cin, cout, &[3, 3]),
                vertical: ConvBlock::new(&format!("{path}.vertical"), cout, cout, &[3]),
            },
            DecoderKind::Conv3d => Self::Full(ConvBlock::new(&format!("{path}.conv3d"), cin, cout, &[3, 3, 3])),
        }
    }

    fn parts(&self) -> Vec<&ConvBlock> {
        match self {
            Self::Decomposed { bev, vertical } => vec![bev, vertical],
            Self::Full(c) => vec![c],
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for p in self.parts() {
            p.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, b: &Binder<'_>, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 {
            return invalid(format!("volume block expects [C, H, L, W], got {s:?}"));
        }
        let (h, l, w) = (s[1], s[2], s[3]);
        match self {
            Self::Decomposed { bev, vertical } => {
                let y = bev.forward(b, &x.permute(&[1, 0, 2, 3])?)?;
                let c = y.shape()[1];
                let y = y.permute(&[2, 3, 1, 0])?.reshape(&[l * w, c, h])?;
                let y = vertical.forward(b, &y)?;
                Ok(y.reshape(&[l, w, c, h])?.permute(&[2, 3, 0, 1])?)
            }
            Self::Full(block) => {
                let y = block.forward(b, &x.reshape(&[1, s[0], h, l, w])?)?;
                let c = y.shape()[1];
                Ok(y.reshape(&[c, h, l, w])?)
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parts().iter().map(|p| p.parameter_count()).sum()
    }
}

/// Max over the vertical axis (`[C, L, W]`) and over the horizontal plane
/// (`[C, H]`).
pub fn dual_pool(x: &Var) -> Result<(Var, Var)> {
    let s = x.shape();
    if s.len() != 4 {
        return invalid(format!("dual_pool expects [C, H, L, W], got {s:?}"));
    }
    let bev = x.max_axis(1)?;
    let z = x.reshape(&[s[0], s[1], s[2] * s[3]])?.max_axis(2)?;
    Ok((bev, z))
}

/// Conv blocks followed by 1×1 classification (sigmoid) and regression
/// convolutions. Both output convolutions start at zero, so the initial
/// heatmap is 0.5 everywhere and the initial offsets are 0.
#[derive(Debug, Clone)]
pub struct Subnet {
    pub blocks: Vec<ConvBlock>,
    pub cls: Conv,
    pub reg: Conv,
}

impl Subnet {
    fn new(path: &str, cin: usize, width: usize, depth: usize, kernel: &[usize], reg_channels: usize) -> Self {
        let ones = vec![1; kernel.len()];
        let blocks = (0..depth)
            .map(|i| ConvBlock::new(&format!("{path}.block{i}"), if i == 0 { cin } else { width }, width, kernel))
            .collect();
        Self {
            blocks,
            cls: Conv::new(format!("{path}.cls"), width, 1, &ones),
            reg: Conv::new(format!("{path}.reg"), width, reg_channels, &ones),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for blk in &self.blocks {
            blk.init(store, rng)?;
        }
        for head in [&self.cls, &self.reg] {
            head.init(store, rng)?;
            for path in [head.weight_path(), head.bias_path()] {
                let shape = store.get(&path)?.shape().to_vec();
                store.set(&path, Tensor::zeros(&shape))?;
            }
        }
        Ok(())
    }

    /// Input `[1, C, s...]`; returns `(probabilities [s...], regression [R, s...])`.
    fn forward(&self, b: &Binder<'_>, x: &Var) -> Result<(Var, Var)> {
        let mut h = x.clone();
        for blk in &self.blocks {
            h = blk.forward(b, &h)?;
        }
        let spatial = h.shape()[2..].to_vec();
        let cls = self.cls.forward(b, &h)?.sigmoid()?.reshape(&spatial)?;
        let mut reg_shape = vec![self.reg.cout];
        reg_shape.extend_from_slice(&spatial);
        let reg = self.reg.forward(b, &h)?.reshape(&reg_shape)?;
        Ok((cls, reg))
    }

    pub fn parameter_count(&self) -> usize {
        let conv = |c: &Conv| c.cout * (c.cin * c.kernel.iter().product::<usize>() + 1);
        self.blocks.iter().map(|b| b.parameter_count()).sum::<usize>() + conv(&self.cls) + conv(&self.reg)
    }
}

/// Raw network outputs.
pub struct HeadOutputs {
    /// `[L, W]` centre probabilities.
    pub bev_cls: Var,
    /// `[R, L, W]`: x offset and y offset in cells, heading in radians and,
    /// without a vertical head, the centre height in metres.
    pub bev_reg: Var,
    /// `([H], [1, H])`: vertical centre probabilities and offsets in cells.
    pub z: Option<(Var, Var)>,
}

impl HeadOutputs {
    pub fn values(&self) -> HeadValues {
        HeadValues {
            bev_cls: self.bev_cls.value().clone(),
            bev_reg: self.bev_reg.value().clone(),
            z: self.z.as_ref().map(|(c, r)| (c.value().clone(), r.value().clone())),
        }
    }
}

/// Head outputs as plain tensors, shaped like [`HeadOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub bev_cls: Tensor,
    pub bev_reg: Tensor,
    pub z: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<VolumeBlock>,
    pub bev: Subnet,
    pub vertical: Option<Subnet>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.decoder_channels;
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| {
                let cin = if i == 0 { cfg.pyramid_channels } else { c };
                VolumeBlock::new(cfg.decoder, &format!("decoder.block{i}"), cin, c)
            })
            .collect();
        let bev_reg = if cfg.z_head { 3 } else { 4 };
        Self {
            blocks,
            bev: Subnet::new("head.bev", c, c, cfg.subnet_blocks, &[3, 3], bev_reg),
            vertical: cfg.z_head.then(|| Subnet::new("head.z", c, c, cfg.subnet_blocks, &[3], 1)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for blk in &self.blocks {
            blk.init(store, rng)?;
        }
        self.bev.init(store, rng)?;
        if let Some(v) = &self.vertical {
            v.init(store, rng)?;
        }
        Ok(())
    }

    /// `volume: [C, H, L, W]`.
    pub fn forward(&self, b: &Binder<'_>, volume: &Var) -> Result<HeadOutputs> {
        let mut x = volume.clone();
        for blk in &self.blocks {
            x = blk.forward(b, &x)?;
        }
        let (bev, z) = dual_pool(&x)?;
        let with_batch = |v: &Var| -> Result<Var> {
            let mut s = vec![1];
            s.extend_from_slice(v.shape());
            Ok(v.reshape(&s)?)
        };
        let (bev_cls, bev_reg) = self.bev.forward(b, &with_batch(&bev)?)?;
        let z = match &self.vertical {
            Some(v) => Some(v.forward(b, &with_batch(&z)?)?),
            None => None,
        };
        Ok(HeadOutputs { bev_cls, bev_reg, z })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Peak cell plus regressed offsets, mapped from the canonical frame of
/// `prev` back to the world. Box extents are carried over from `prev`.
pub fn decode_box(h: &HeadValues, geo: &VoxelGeometry, prev: &Box3D) -> Result<Box3D> {
    let [w, l, hh] = geo.dims;
    if h.bev_cls.shape() != [l, w] || h.bev_reg.shape().len() != 3 || h.bev_reg.shape()[1..] != [l, w] {
        return invalid(format!(
            "head shapes {:?}/{:?} do not match a {l}×{w} grid",
            h.bev_cls.shape(),
            h.bev_reg.shape()
        ));
    }
    if !h.bev_cls.is_finite() || !h.bev_reg.is_finite() {
        return invalid("non-finite head outputs");
    }
    let peak = argmax(h.bev_cls.data());
    let (i, j) = (peak / w, peak % w);
    let reg = |ch: usize| h.bev_reg.data()[ch * l * w + peak];
    let x = geo.min[0] + (j as f64 + reg(0)) * geo.voxel[0];
    let y = geo.min[1] + (i as f64 + reg(1)) * geo.voxel[1];
    let theta = reg(2);
    let z = match &h.z {
        Some((cls, zreg)) => {
            if cls.len() != hh || zreg.len() != hh {
                return invalid(format!("vertical head length {} for {hh} cells", cls.len()));
            }
            let k = argmax(cls.data());
            geo.min[2] + (k as f64 + zreg.data()[k]) * geo.voxel[2]
        }
        None => {
            if h.bev_reg.shape()[0] < 4 {
                return invalid("no vertical head and no height channel");
            }
            reg(3)
        }
    };
    let local = Box3D {
        x,
        y,
        z,
        w: prev.w,
        l: prev.l,
        h: prev.h,
        theta: normalize_angle(theta),
    };
    Ok(prev.frame().box_to_world(&local))
}
