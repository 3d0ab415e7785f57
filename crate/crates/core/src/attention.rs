//! Local vector attention over k nearest neighbours, used both within one
//! point stream (self-attention) and across the template and search
//! streams (cross-attention).

use rand::Rng;
use sot_tensor::{Binder, Linear, ParamStore, Tensor, Var};

use crate::error::{invalid, Result};
use crate::geometry::Point;
use crate::pointops::knn;

/// Point positions paired with a `[N, C]` feature matrix.
#[derive(Clone)]
pub struct FeatureSet {
    pub positions: Vec<Point>,
    pub features: Var,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

/// `y = f2(attend(f1(x_query), f1(x_source))) + x_query`.
///
/// Logits are `f_a(q_i − k_j + e_ij) / √k` with `e_ij = f_e(p_i − p_j)`,
/// normalized over the k neighbours separately for each channel; the
/// output is `Σ_j w_ij ⊙ (v_j + e_ij)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub path: String,
    pub channels: usize,
    pub neighbors: usize,
    f1: Linear,
    fq: Linear,
    fk: Linear,
    fv: Linear,
    fe: Linear,
    fa1: Linear,
    fa2: Linear,
    f2: Linear,
}

/// Forward results exposed for inspection.
pub struct AttentionTrace {
    pub output: Var,
    /// `[N, k, C]` weights, summing to one over axis 1.
    pub weights: Var,
    pub neighbors: Vec<usize>,
}

impl AttentionBlock {
    pub fn new(path: impl Into<String>, channels: usize, neighbors: usize) -> Self {
        let path = path.into();
        let lin = |name: &str, i: usize| Linear::new(format!("{path}.{name}"), i, channels);
        Self {
            f1: lin("f1", channels),
            fq: lin("query", channels),
            fk: lin("key", channels),
            fv: lin("value", channels),
            fe: lin("pos_enc", 3),
            fa1: lin("attn.0", channels),
            fa2: lin("attn.1", channels),
            f2: lin("f2", channels),
            path,
            channels,
            neighbors,
        }
    }

    fn layers(&self) -> [&Linear; 8] {
        [&self.f1, &self.fq, &self.fk, &self.fv, &self.fe, &self.fa1, &self.fa2, &self.f2]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in self.layers() {
            l.init(store, rng)?;
        }
        Ok(())
    }

    /// Output projection parameter paths (zeroing them makes the block an
    /// identity map).
    pub fn output_paths(&self) -> [String; 2] {
        [self.f2.weight_path(), self.f2.bias_path()]
    }

    pub fn trace(&self, b: &Binder<'_>, query: &FeatureSet, source: &FeatureSet) -> Result<AttentionTrace> {
        let k = self.neighbors;
        if k == 0 || source.len() < k {
            return invalid(format!("attention with k={k} over {} source points", source.len()));
        }
        for fs in [query, source] {
            if fs.features.shape() != [fs.len(), self.channels] {
                return invalid(format!(
                    "attention expects [{}, {}] features, got {:?}",
                    fs.len(),
                    self.channels,
                    fs.features.shape()
                ));
            }
        }
        let n = query.len();
        let c = self.channels;
        let nbr = knn(&query.positions, &source.positions, k)?;

        let hq = self.f1.forward(b, &query.features)?;
        let hs = if std::ptr::eq(query, source) {
            hq.clone()
        } else {
            self.f1.forward(b, &source.features)?
        };
        let q = self.fq.forward(b, &hq)?;
        let key = self.fk.forward(b, &hs)?;
        let val = self.fv.forward(b, &hs)?;

        let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let mut rel = Vec::with_capacity(n * k * 3);
        for (i, &j) in repeat.iter().zip(&nbr.indices) {
            let (pi, pj) = (query.positions[*i], source.positions[j]);
            rel.extend([pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]]);
        }
        let rel = b.graph().constant(Tensor::new(vec![n * k, 3], rel)?);
        let e = self.fe.forward(b, &rel)?;

        let q_rep = q.gather_rows(&repeat)?;
        let k_nb = key.gather_rows(&nbr.indices)?;
        let v_nb = val.gather_rows(&nbr.indices)?;
        let logits = self.fa1.forward(b, &q_rep.sub(&k_nb)?.add(&e)?)?.relu()?;
        let logits = self.fa2.forward(b, &logits)?.scale(1.0 / (k as f64).sqrt())?;
        let weights = logits.reshape(&[n, k, c])?.softmax(1)?;
        let msg = v_nb.add(&e)?.reshape(&[n, k, c])?;
        let pooled = weights.mul(&msg)?.sum_axis(1)?;
        let output = self.f2.forward(b, &pooled)?.add(&query.features)?;
        Ok(AttentionTrace {
            output,
            weights,
            neighbors: nbr.indices,
        })
    }

    pub fn forward(&self, b: &Binder<'_>, query: &FeatureSet, source: &FeatureSet) -> Result<FeatureSet> {
        let t = self.trace(b, query, source)?;
        Ok(FeatureSet {
            positions: query.positions.clone(),
            features: t.output,
        })
    }

    /// Self-attention: queries, keys and values from one stream.
    pub fn self_attend(&self, b: &Binder<'_>, x: &FeatureSet) -> Result<FeatureSet> {
        self.forward(b, x, x)
    }

    /// Cross-attention in both directions with one parameter set:
    /// returns `(search ← template, template ← search)`.
    pub fn cross_attend(&self, b: &Binder<'_>, search: &FeatureSet, template: &FeatureSet) -> Result<(FeatureSet, FeatureSet)> {
        Ok((self.forward(b, search, template)?, self.forward(b, template, search)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.out_dim * l.in_dim + l.out_dim).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sot_tensor::Graph;

    fn setup(c: usize, k: usize) -> (AttentionBlock, ParamStore) {
        let blk = AttentionBlock::new("att", c, k);
        let mut store = ParamStore::new();
        blk.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (blk, store)
    }

    fn cloud(g: &Graph, n: usize, c: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Positions on a dyadic lattice keep differences exact under shifts.
        let positions = (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.gen_range(-64i32..64) as f64 / 32.0))
            .collect();
        let feats = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureSet {
            positions,
            features: g.leaf(Tensor::new(vec![n, c], feats).unwrap()),
        }
    }

    #[test]
    fn weights_normalized_per_channel() {
        let (blk, store) = setup(6, 4);
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        let x = cloud(&g, 10, 6, 1);
        let t = blk.trace(&b, &x, &x).unwrap();
        let w = t.weights.data();
        for i in 0..10 {
            for ch in 0..6 {
                let s: f64 = (0..4).map(|j| w[(i * 4 + j) * 6 + ch]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(t.output.shape(), [10, 6]);
    }

    #[test]
    fn single_neighbor_passes_value_plus_encoding() {
        let (blk, mut store) = setup(3, 1);
        store.set("att.f2.weight", Tensor::eye(3)).unwrap();
        store.set("att.f2.bias", Tensor::zeros(&[3])).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        let x = cloud(&g, 5, 3, 2);
        let y = blk.self_attend(&b, &x).unwrap();
        let h = blk.f1.forward(&b, &x.features).unwrap();
        let v = blk.fv.forward(&b, &h).unwrap();
        let e0 = store.get("att.pos_enc.bias").unwrap().data().to_vec();
        for i in 0..5 {
            for ch in 0..3 {
                let want = v.data()[i * 3 + ch] + e0[ch] + x.features.data()[i * 3 + ch];
                assert!((y.features.data()[i * 3 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (blk, mut store) = setup(4, 3);
        for p in blk.output_paths() {
            let shape = store.get(&p).unwrap().shape().to_vec();
            store.set(&p, Tensor::zeros(&shape)).unwrap();
        }
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        let s = cloud(&g, 8, 4, 4);
        let t = cloud(&g, 6, 4, 5);
        assert_eq!(blk.self_attend(&b, &s).unwrap().features.data(), s.features.data());
        let (ys, yt) = blk.cross_attend(&b, &s, &t).unwrap();
        assert_eq!(ys.features.data(), s.features.data());
        assert_eq!(yt.features.data(), t.features.data());
    }

    #[test]
    fn translation_invariant() {
        let (blk, store) = setup(4, 3);
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        let s = cloud(&g, 9, 4, 6);
        let t = cloud(&g, 7, 4, 7);
        let shift = |fs: &FeatureSet| FeatureSet {
            positions: fs.positions.iter().map(|p| [p[0] + 3.0, p[1] - 5.0, p[2] + 0.5]).collect(),
            features: fs.features.clone(),
        };
        let (a, _) = blk.cross_attend(&b, &s, &t).unwrap();
        let (c, _) = blk.cross_attend(&b, &shift(&s), &shift(&t)).unwrap();
        assert_eq!(a.features.data(), c.features.data());
    }

    #[test]
    fn cross_attention_symmetric_on_identical_streams() {
        let (blk, store) = setup(4, 3);
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        let s = cloud(&g, 9, 4, 8);
        let t = FeatureSet {
            positions: s.positions.clone(),
            features: g.leaf(s.features.value().clone()),
        };
        let (ys, yt) = blk.cross_attend(&b, &s, &t).unwrap();
        assert_eq!(ys.features.data(), yt.features.data());
        assert_eq!(ys.features.data(), blk.self_attend(&b, &s).unwrap().features.data());
    }

    #[test]
    fn perturbation_stays_local() {
        let (blk, store) = setup(4, 2);
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        let s = cloud(&g, 12, 4, 9);
        let t = cloud(&g, 10, 4, 10);
        let base = blk.trace(&b, &s, &t).unwrap();
        let mut data = t.features.value().clone();
        data.data_mut()[3 * 4] += 0.5;
        let t2 = FeatureSet {
            positions: t.positions.clone(),
            features: g.leaf(data),
        };
        let moved = blk.forward(&b, &s, &t2).unwrap();
        for i in 0..12 {
            let uses = base.neighbors[i * 2..i * 2 + 2].contains(&3);
            let changed = base.output.value().row(i) != moved.features.value().row(i);
            assert_eq!(uses, changed, "row {i}");
        }
    }

    #[test]
    fn k_larger_than_source_rejected() {
        let (blk, store) = setup(4, 5);
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        let s = cloud(&g, 8, 4, 1);
        let t = cloud(&g, 3, 4, 2);
        assert!(blk.forward(&b, &s, &t).is_err());
    }
}
