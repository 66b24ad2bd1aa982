//! Experiment configuration: a sectioned `key = value` file parsed as TOML.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use oasis_core::metrics::OutlierSource;
use oasis_core::normalize::{NormalizerKind, NormalizerSpec};
use oasis_core::{EmbeddingNull, Granularity, NullTarget, QuantSpec, RouterMode};
use oasis_model::tasks::Task;
use oasis_model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    pub seq_len: usize,
    pub normalizer: String,
    pub clip_gamma: f64,
    pub clip_zeta: f64,
    pub router_mode: String,
    pub gated: bool,
    pub null_target: String,
    pub positional: bool,
    pub embedding_null: String,
    pub per_layer_beta: bool,
    pub beta_raw_init: f64,
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        Self {
            vocab: c.vocab,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_layers: c.n_layers,
            mlp_ratio: c.mlp_ratio,
            seq_len: c.seq_len,
            normalizer: c.normalizer.kind.name().into(),
            clip_gamma: c.normalizer.gamma,
            clip_zeta: c.normalizer.zeta,
            router_mode: c.router_mode.name().into(),
            gated: c.gated,
            null_target: c.null_target.name().into(),
            positional: c.positional,
            embedding_null: c.embedding_null.name().into(),
            per_layer_beta: c.per_layer_beta,
            beta_raw_init: c.beta_raw_init,
        }
    }
}

/// Experiments default to learned positions; the tasks need them.
impl Default for ModelSection {
    fn default() -> Self {
        Self::from(&ModelConfig {
            positional: true,
            ..ModelConfig::default()
        })
    }
}

fn parse_normalizer(name: &str, gamma: f64, zeta: f64) -> Result<NormalizerSpec> {
    let kind = NormalizerKind::parse(name).ok_or_else(|| {
        anyhow!("unknown normalizer '{name}' (softmax, softmax1, clipped, sparsemax, entmax15)")
    })?;
    let spec = match kind {
        NormalizerKind::ClippedSoftmax => NormalizerSpec::clipped(gamma, zeta)?,
        k => NormalizerSpec::new(k),
    };
    Ok(spec)
}

impl ModelSection {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            mlp_ratio: self.mlp_ratio,
            seq_len: self.seq_len,
            normalizer: parse_normalizer(&self.normalizer, self.clip_gamma, self.clip_zeta)?,
            router_mode: RouterMode::parse(&self.router_mode)
                .ok_or_else(|| anyhow!("unknown router_mode '{}' (vanilla, aos, oasis)", self.router_mode))?,
            gated: self.gated,
            null_target: NullTarget::parse(&self.null_target)
                .ok_or_else(|| anyhow!("unknown null_target '{}' (zero, previous)", self.null_target))?,
            positional: self.positional,
            embedding_null: EmbeddingNull::parse(&self.embedding_null).ok_or_else(|| {
                anyhow!("unknown embedding_null '{}' (zero_evidence, exclude)", self.embedding_null)
            })?,
            per_layer_beta: self.per_layer_beta,
            beta_raw_init: self.beta_raw_init,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task: String,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            task: Task::NoisyCopy.name().into(),
            steps: t.steps,
            batch: t.batch,
            lr: EXPERIMENT_LR,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_clip: t.grad_clip,
        }
    }
}

/// Learning rate of the bundled experiment; the library default is lower.
pub const EXPERIMENT_LR: f64 = 1e-2;

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> Result<TrainConfig> {
        let t = TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
            seed,
            trace_every: None,
        };
        t.validate()?;
        if t.steps == 0 {
            bail!("steps must be at least 1");
        }
        Ok(t)
    }

    pub fn task(&self) -> Result<Task> {
        Task::parse(&self.task).ok_or_else(|| anyhow!("unknown task '{}' (copy, noisy_copy, char_lm)", self.task))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixSection {
    /// Entries `normalizer/router_mode[/gated]`; empty means the `[model]`
    /// section alone.
    pub variants: Vec<String>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            variants: vec!["softmax/vanilla".into(), "softmax1/aos".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub specs: Vec<String>,
    pub granularity: String,
    pub eval_sequences: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            specs: vec!["W8A8".into(), "W4A4".into()],
            granularity: "tensor".into(),
            eval_sequences: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub sink_set: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub outlier_source: String,
    pub probe_sequences: usize,
    /// Irrelevant positions for the pathology score. Absent means the
    /// distractor positions for `noisy_copy` and none otherwise.
    pub irrelevant: Option<Vec<usize>>,
    pub heatmaps: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            sink_set: vec![0],
            lambda1: 1.0,
            lambda2: 1.0,
            outlier_source: "residual".into(),
            probe_sequences: 16,
            irrelevant: None,
            heatmaps: true,
        }
    }
}

/// The file as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    pub out_dir: String,
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub matrix: MatrixSection,
    pub quant: QuantSection,
    pub metrics: MetricsSection,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            out_dir: "oasis-out".into(),
            seeds: vec![0, 1, 2, 3, 4],
            model: ModelSection::default(),
            train: TrainSection::default(),
            matrix: MatrixSection::default(),
            quant: QuantSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub normalizer: NormalizerSpec,
    pub router_mode: RouterMode,
    pub gated: bool,
}

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            normalizer: self.normalizer,
            router_mode: self.router_mode,
            gated: self.gated,
            ..*base
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsOptions {
    pub sink_set: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub outlier_source: OutlierSource,
    pub probe_sequences: usize,
    pub irrelevant: Option<Vec<usize>>,
    pub heatmaps: bool,
}

/// Validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub model: ModelConfig,
    pub task: Task,
    pub train: TrainSection,
    pub variants: Vec<Variant>,
    pub quant: Vec<QuantSpec>,
    pub eval_sequences: usize,
    pub metrics: MetricsOptions,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// 1-based line of `key` inside `[section]` (or at top level), if present.
fn line_of(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            continue;
        }
        let k = t.split('=').next().unwrap_or("").trim();
        if k == key && current.as_deref() == section {
            return Some(i + 1);
        }
    }
    None
}

struct Anchor<'a> {
    text: &'a str,
    origin: &'a str,
}

impl Anchor<'_> {
    fn at<T>(&self, section: Option<&str>, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| {
            let loc = match line_of(self.text, section, key) {
                Some(n) => format!("{}:{n}", self.origin),
                None => self.origin.to_string(),
            };
            let name = match section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            anyhow!("{loc}: {name}: {e:#}")
        })
    }
}

fn parse_variant(s: &str, base: &ModelConfig) -> Result<Variant> {
    let parts: Vec<&str> = s.split('/').collect();
    let (norm, mode, gated) = match parts.as_slice() {
        [n, m] => (*n, *m, false),
        [n, m, "gated"] => (*n, *m, true),
        _ => bail!("variant '{s}' is not normalizer/router_mode[/gated]"),
    };
    let v = Variant {
        normalizer: parse_normalizer(norm, base.normalizer.gamma, base.normalizer.zeta)?,
        router_mode: RouterMode::parse(mode).ok_or_else(|| anyhow!("unknown router_mode '{mode}' in '{s}'"))?,
        gated,
    };
    v.apply(base).validate()?;
    Ok(v)
}

/// `W8A8`-style label.
pub fn parse_quant(label: &str, granularity: Granularity) -> Result<QuantSpec> {
    let rest = label
        .strip_prefix('W')
        .ok_or_else(|| anyhow!("quant spec '{label}' is not of the form W<bits>A<bits>"))?;
    let (w, a) = rest
        .split_once('A')
        .ok_or_else(|| anyhow!("quant spec '{label}' is not of the form W<bits>A<bits>"))?;
    let w: u32 = w.parse().with_context(|| format!("weight bits in '{label}'"))?;
    let a: u32 = a.parse().with_context(|| format!("activation bits in '{label}'"))?;
    Ok(QuantSpec::new(w, a, granularity)?)
}

impl ExperimentConfig {
    pub fn from_raw(raw: RawConfig, text: &str, origin: &str) -> Result<Self> {
        let an = Anchor { text, origin };
        let model = an.at(Some("model"), model_key(&raw.model), raw.model.to_config())?;
        let task = an.at(Some("train"), "task", raw.train.task())?;
        an.at(Some("train"), train_key(&raw.train), raw.train.to_config(0).map(|_| ()))?;
        an.at(
            Some("train"),
            "task",
            if model.vocab < task.min_vocab() {
                Err(anyhow!("task {} needs vocab >= {}", task.name(), task.min_vocab()))
            } else {
                Ok(())
            },
        )?;
        let variants = if raw.matrix.variants.is_empty() {
            vec![Variant {
                normalizer: model.normalizer,
                router_mode: model.router_mode,
                gated: model.gated,
            }]
        } else {
            an.at(
                Some("matrix"),
                "variants",
                raw.matrix.variants.iter().map(|s| parse_variant(s, &model)).collect(),
            )?
        };
        let granularity = an.at(
            Some("quant"),
            "granularity",
            Granularity::parse(&raw.quant.granularity)
                .ok_or_else(|| anyhow!("unknown granularity '{}' (tensor, channel)", raw.quant.granularity)),
        )?;
        let quant = an.at(
            Some("quant"),
            "specs",
            raw.quant.specs.iter().map(|s| parse_quant(s, granularity)).collect(),
        )?;
        an.at(
            Some("quant"),
            "eval_sequences",
            if raw.quant.eval_sequences == 0 { Err(anyhow!("must be positive")) } else { Ok(()) },
        )?;
        let m = &raw.metrics;
        let outlier_source = an.at(
            Some("metrics"),
            "outlier_source",
            OutlierSource::parse(&m.outlier_source)
                .ok_or_else(|| anyhow!("unknown outlier_source '{}' (residual, block, both)", m.outlier_source)),
        )?;
        let positions_ok = |xs: &[usize]| -> Result<()> {
            match xs.iter().find(|&&j| j >= model.seq_len) {
                Some(j) => Err(anyhow!("position {j} outside seq_len {}", model.seq_len)),
                None => Ok(()),
            }
        };
        an.at(Some("metrics"), "sink_set", positions_ok(&m.sink_set))?;
        if let Some(irr) = &m.irrelevant {
            an.at(Some("metrics"), "irrelevant", positions_ok(irr))?;
        }
        for (key, v) in [("lambda1", m.lambda1), ("lambda2", m.lambda2)] {
            an.at(
                Some("metrics"),
                key,
                if v >= 0.0 && v.is_finite() { Ok(()) } else { Err(anyhow!("must be a finite nonnegative number")) },
            )?;
        }
        an.at(
            Some("metrics"),
            "probe_sequences",
            if m.probe_sequences == 0 { Err(anyhow!("must be positive")) } else { Ok(()) },
        )?;
        an.at(
            None,
            "seeds",
            if raw.seeds.is_empty() { Err(anyhow!("at least one seed is required")) } else { Ok(()) },
        )?;
        let metrics = MetricsOptions {
            sink_set: m.sink_set.clone(),
            lambda1: m.lambda1,
            lambda2: m.lambda2,
            outlier_source,
            probe_sequences: m.probe_sequences,
            irrelevant: m.irrelevant.clone(),
            heatmaps: m.heatmaps,
        };
        Ok(Self {
            model,
            task,
            train: raw.train.clone(),
            variants,
            quant,
            eval_sequences: raw.quant.eval_sequences,
            metrics,
            seeds: raw.seeds.clone(),
            out_dir: PathBuf::from(&raw.out_dir),
            raw,
        })
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            match line {
                Some(n) => anyhow!("{origin}:{n}: {}", e.message()),
                None => anyhow!("{origin}: {}", e.message()),
            }
        })?;
        Self::from_raw(raw, text, origin)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn default_experiment() -> Self {
        Self::from_raw(RawConfig::default(), "", "<default>").expect("default config is valid")
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self.raw.seeds = vec![seed];
        self
    }

    pub fn with_out_dir(mut self, dir: PathBuf) -> Self {
        self.raw.out_dir = dir.display().to_string();
        self.out_dir = dir;
        self
    }

    /// Seed-major run matrix.
    pub fn runs(&self) -> Vec<(u64, Variant)> {
        self.seeds
            .iter()
            .flat_map(|&s| self.variants.iter().map(move |&v| (s, v)))
            .collect()
    }
}

/// Key blamed for an invalid `[model]` section: the first one whose value
/// differs from the default, falling back to `normalizer`.
fn model_key(m: &ModelSection) -> &'static str {
    let d = ModelSection::default();
    let pairs: [(&'static str, bool); 7] = [
        ("vocab", m.vocab != d.vocab),
        ("d_model", m.d_model != d.d_model),
        ("n_heads", m.n_heads != d.n_heads),
        ("n_layers", m.n_layers != d.n_layers),
        ("mlp_ratio", m.mlp_ratio != d.mlp_ratio),
        ("seq_len", m.seq_len != d.seq_len),
        ("router_mode", RouterMode::parse(&m.router_mode).is_none()),
    ];
    if NormalizerKind::parse(&m.normalizer).is_none() {
        return "normalizer";
    }
    if NullTarget::parse(&m.null_target).is_none() {
        return "null_target";
    }
    if EmbeddingNull::parse(&m.embedding_null).is_none() {
        return "embedding_null";
    }
    pairs.iter().rev().find(|(_, changed)| *changed).map_or("normalizer", |(k, _)| k)
}

fn train_key(t: &TrainSection) -> &'static str {
    if !(t.lr > 0.0) {
        "lr"
    } else if t.batch == 0 {
        "batch"
    } else if t.steps == 0 {
        "steps"
    } else if !(0.0..1.0).contains(&t.beta1) {
        "beta1"
    } else if !(0.0..1.0).contains(&t.beta2) {
        "beta2"
    } else if !(t.eps > 0.0) {
        "eps"
    } else {
        "grad_clip"
    }
}
