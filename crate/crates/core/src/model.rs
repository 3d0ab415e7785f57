//! The full tracking network: encoder, pyramid, voxelization and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sot_tensor::{Binder, ParamStore};

use crate::config::{ModelConfig, RunConfig};
use crate::decoder::{Decoder, HeadOutputs};
use crate::encoder::{voxelize, Encoder, Pyramid, SamplingStarts, VoxelGeometry};
use crate::error::{invalid, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub geometry: VoxelGeometry,
    pub encoder: Encoder,
    pub pyramid: Pyramid,
    pub decoder: Decoder,
}

/// Trainable parameter totals grouped by top-level module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub entries: Vec<(String, usize)>,
    pub total: usize,
}

impl std::fmt::Display for ParameterBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, n) in &self.entries {
            writeln!(f, "{name:<32} {n:>10}")?;
        }
        write!(f, "{:<32} {:>10}", "total", self.total)
    }
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.model.validate()?;
        Ok(Self {
            config: cfg.model.clone(),
            geometry: VoxelGeometry::new(&cfg.region)?,
            encoder: Encoder::new(&cfg.model),
            pyramid: Pyramid::new(&cfg.model),
            decoder: Decoder::new(&cfg.model),
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng)?;
        self.pyramid.init(&mut store, &mut rng)?;
        self.decoder.init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Both clouds must already be canonical and resampled to
    /// `config.points`.
    pub fn forward(&self, b: &Binder<'_>, template: &PointCloud, search: &PointCloud, starts: SamplingStarts) -> Result<HeadOutputs> {
        let n = self.config.points;
        if template.len() != n || search.len() != n {
            return invalid(format!(
                "model expects {n} points per cloud, got {} and {}",
                template.len(),
                search.len()
            ));
        }
        if template.dim != self.config.input_features || search.dim != self.config.input_features {
            return invalid(format!("model expects {} feature channels", self.config.input_features));
        }
        let enc = self.encoder.forward(b, template, search, starts)?;
        let fused = self.pyramid.forward(b, &enc.stages)?;
        let grid = voxelize(&fused, &self.geometry)?;
        self.decoder.forward(b, &grid.data)
    }

    pub fn parameter_breakdown(store: &ParamStore) -> ParameterBreakdown {
        let mut entries: Vec<(String, usize)> = Vec::new();
        for (path, p) in store.iter().filter(|(_, p)| p.trainable) {
            let parts: Vec<&str> = path.split('.').collect();
            let group = match parts[0] {
                "encoder" => {
                    let part = match parts[2] {
                        "self_attn" => "self-attention",
                        "cross_attn" => "cross-attention",
                        _ => "set abstraction",
                    };
                    format!("encoder {} {part}", parts[1])
                }
                "decoder" => "decoder blocks".to_string(),
                "head" => format!("{} head", parts[1]),
                other => other.to_string(),
            };
            let n = p.value.len();
            match entries.iter_mut().find(|(g, _)| *g == group) {
                Some(e) => e.1 += n,
                None => entries.push((group, n)),
            }
        }
        let rank = |g: &str| ["encoder", "pyramid", "decoder", "bev", "z"].iter().position(|p| g.starts_with(p));
        entries.sort_by(|a, b| rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.cmp(&b.0)));
        let total = entries.iter().map(|e| e.1).sum();
        ParameterBreakdown { entries, total }
    }
}
