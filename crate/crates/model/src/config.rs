use oasis_core::{EmbeddingNull, Error, NormalizerSpec, NullTarget, Result, RouterMode};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    pub seq_len: usize,
    pub normalizer: NormalizerSpec,
    pub router_mode: RouterMode,
    pub gated: bool,
    pub null_target: NullTarget,
    /// Learned absolute position embeddings added to the token embeddings.
    pub positional: bool,
    pub embedding_null: EmbeddingNull,
    /// One coupling per target layer instead of a shared one.
    pub per_layer_beta: bool,
    pub beta_raw_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            n_heads: 4,
            n_layers: 4,
            mlp_ratio: 4,
            seq_len: 32,
            normalizer: NormalizerSpec::softmax(),
            router_mode: RouterMode::Vanilla,
            gated: false,
            null_target: NullTarget::PreviousState,
            positional: false,
            embedding_null: EmbeddingNull::ZeroEvidence,
            per_layer_beta: false,
            beta_raw_init: oasis_core::depth::DEFAULT_BETA_RAW,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2 for next-token loss".into()));
        }
        if !self.beta_raw_init.is_finite() {
            return Err(Error::Config("beta_raw_init must be finite".into()));
        }
        self.normalizer.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Short label such as `softmax1/oasis/gated`.
    pub fn variant_label(&self) -> String {
        let mut s = format!("{}/{}", self.normalizer.kind.name(), self.router_mode.name());
        if self.gated {
            s.push_str("/gated");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Capture a trace on a fixed probe batch every this many steps.
    pub trace_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            trace_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("eps and grad_clip must be positive".into()));
        }
        if self.trace_every == Some(0) {
            return Err(Error::Config("trace_every must be positive".into()));
        }
        Ok(())
    }
}
