//! Parameter storage with a fixed, name-addressed layout.

use oasis_core::{Error, Result, Scalar, SeededRng, Tensor};

use crate::config::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub attn_gain: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub wg: Option<usize>,
    pub w1: usize,
    pub w2: usize,
}

/// Positions of each parameter inside [`Params::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub tok_emb: usize,
    pub pos_emb: Option<usize>,
    pub layers: Vec<LayerSlots>,
    /// Logits for target layers `2..=L+1`; entry `k` has `k + 2` values.
    pub depth_logits: Vec<usize>,
    pub beta_raw: usize,
    pub final_gain: usize,
    pub unembed: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let (v, d, h) = (cfg.vocab, cfg.d_model, cfg.hidden());
        let tok_emb = add("tok_emb".into(), vec![v, d]);
        let pos_emb = cfg.positional.then(|| add("pos_emb".into(), vec![cfg.seq_len, d]));
        let layers = (1..=cfg.n_layers)
            .map(|l| LayerSlots {
                attn_gain: add(format!("layer{l}.attn_gain"), vec![d]),
                wq: add(format!("layer{l}.wq"), vec![d, d]),
                wk: add(format!("layer{l}.wk"), vec![d, d]),
                wv: add(format!("layer{l}.wv"), vec![d, d]),
                wo: add(format!("layer{l}.wo"), vec![d, d]),
                wg: cfg.gated.then(|| add(format!("layer{l}.wg"), vec![d, d])),
                w1: add(format!("layer{l}.w1"), vec![d, h]),
                w2: add(format!("layer{l}.w2"), vec![h, d]),
            })
            .collect();
        let depth_logits = (2..=cfg.n_layers + 1)
            .map(|t| add(format!("depth{t}.logits"), vec![t]))
            .collect();
        let n_beta = if cfg.per_layer_beta { cfg.n_layers } else { 1 };
        let beta_raw = add("beta_raw".into(), vec![n_beta]);
        let final_gain = add("final_gain".into(), vec![d]);
        let unembed = add("unembed".into(), vec![d, v]);
        Self {
            names,
            shapes,
            tok_emb,
            pos_emb,
            layers,
            depth_logits,
            beta_raw,
            final_gain,
            unembed,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Matrices that act as linear maps on activations.
    pub fn linear_weights(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo]);
            out.extend(l.wg);
            out.extend([l.w1, l.w2]);
        }
        out.push(self.unembed);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<S: Scalar = f64> {
    pub layout: Layout,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    /// Seeded initialization. Embeddings are standard normal, linear maps
    /// `N(0, 1/fan_in)`, gains one, gates and depth logits zero.
    pub fn init(cfg: &ModelConfig, rng: &SeededRng) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let rng = rng.fork("init");
        let gates: Vec<usize> = layout.layers.iter().filter_map(|l| l.wg).collect();
        let gains: Vec<usize> = layout
            .layers
            .iter()
            .map(|l| l.attn_gain)
            .chain([layout.final_gain])
            .collect();
        let mut tensors = Vec::with_capacity(layout.len());
        for (i, (name, shape)) in layout.names.iter().zip(&layout.shapes).enumerate() {
            let mut r = rng.fork(name);
            let t = if i == layout.tok_emb || Some(i) == layout.pos_emb {
                r.gaussian_tensor(shape, 0.0, 1.0)
            } else if gains.contains(&i) {
                Tensor::full(shape, S::one())
            } else if gates.contains(&i) || layout.depth_logits.contains(&i) {
                Tensor::zeros(shape)
            } else if i == layout.beta_raw {
                Tensor::full(shape, S::of(cfg.beta_raw_init))
            } else {
                r.gaussian_tensor(shape, 0.0, 1.0 / (shape[0] as f64).sqrt())
            };
            tensors.push(t);
        }
        Ok(Self { layout, tensors })
    }

    /// Every parameter zero (gains included).
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let tensors = layout.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { layout, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.layout.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.layout.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Checks shapes against the layout and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        if self.tensors.len() != self.layout.len() {
            return Err(Error::Dimension(format!(
                "{} tensors for {} parameter slots",
                self.tensors.len(),
                self.layout.len()
            )));
        }
        for ((t, s), n) in self.tensors.iter().zip(&self.layout.shapes).zip(&self.layout.names) {
            if t.shape() != s.as_slice() {
                return Err(Error::Dimension(format!("{n} has shape {:?}, expected {s:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("{n} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Zero tensors with matching shapes.
    pub fn zeros_like(&self) -> Vec<Tensor<S>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_names_are_unique_and_ordered() {
        let cfg = ModelConfig {
            gated: true,
            n_layers: 2,
            ..Default::default()
        };
        let l = Layout::new(&cfg);
        let mut sorted = l.names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), l.len());
        assert_eq!(l.names[0], "tok_emb");
        assert_eq!(l.names.last().unwrap(), "unembed");
        assert_eq!(l.shapes[l.depth_logits[1]], vec![3]);
        assert_eq!(l.linear_weights().len(), 2 * 7 + 1);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a: Params = Params::init(&cfg, &SeededRng::new(5)).unwrap();
        let b: Params = Params::init(&cfg, &SeededRng::new(5)).unwrap();
        let c: Params = Params::init(&cfg, &SeededRng::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
        assert_eq!(a.get("beta_raw").unwrap().data(), &[-5.0]);
        assert!(a.get("depth3.logits").unwrap().data().iter().all(|&x| x == 0.0));
    }
}
