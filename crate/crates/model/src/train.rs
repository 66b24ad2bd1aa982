//! Adam training loop with deterministic batching.

use oasis_core::{Error, Result, Scalar, SeededRng, SequenceTrace, Tensor};

use crate::config::{ModelConfig, TrainConfig};
use crate::forward::{forward, loss_and_grads};
use crate::params::Params;
use crate::tasks::Task;

/// Consecutive steps above the divergence threshold that abort a run.
pub const DIVERGENCE_PATIENCE: usize = 50;
/// Loss multiple of the initial loss counted as diverging.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

pub struct Adam<S: Scalar = f64> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &Params<S>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update. Gradients are rescaled first so their global norm is at
    /// most `grad_clip`. Returns the norm before clipping.
    pub fn step(&mut self, params: &mut Params<S>, grads: &[Tensor<S>], cfg: &TrainConfig) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let (lr, eps, clip) = (S::of(cfg.lr), S::of(cfg.eps), S::of(clip));
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g * clip;
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        norm
    }
}

pub struct TrainResult<S: Scalar = f64> {
    pub params: Params<S>,
    pub loss_curve: Vec<f64>,
    /// `(step, traces of the probe batch)` captured before that step's update.
    pub traces: Vec<(usize, Vec<SequenceTrace<S>>)>,
}

/// Initializes parameters from `tcfg.seed` and trains.
pub fn train<S: Scalar>(cfg: &ModelConfig, tcfg: &TrainConfig, task: Task) -> Result<TrainResult<S>> {
    let root = SeededRng::new(tcfg.seed);
    let params = Params::init(cfg, &root)?;
    train_from(cfg, tcfg, task, params)
}

/// Trains given starting parameters. Batches come from the `data` fork of
/// the seed, the probe batch from the `probe` fork.
pub fn train_from<S: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    task: Task,
    mut params: Params<S>,
) -> Result<TrainResult<S>> {
    cfg.validate()?;
    tcfg.validate()?;
    let root = SeededRng::new(tcfg.seed);
    let mut data = root.fork("data");
    let probe = task.batch(&mut root.fork("probe"), cfg.vocab, cfg.seq_len, tcfg.batch)?;
    let mut adam = Adam::new(&params);
    let mut loss_curve = Vec::with_capacity(tcfg.steps);
    let mut traces = Vec::new();
    let mut initial = None;
    let mut over = 0;
    for step in 0..tcfg.steps {
        if tcfg.trace_every.is_some_and(|k| step % k == 0) {
            traces.push((step, capture(cfg, &params, &probe)?));
        }
        let batch = task.batch(&mut data, cfg.vocab, cfg.seq_len, tcfg.batch)?;
        let (loss, grads) = loss_and_grads(cfg, &params, &batch).map_err(|e| match e {
            Error::Numeric(m) => Error::Training(format!("step {step}: {m}")),
            other => other,
        })?;
        let loss = loss.as_f64();
        let first = *initial.get_or_insert(loss);
        over = if loss > DIVERGENCE_FACTOR * first { over + 1 } else { 0 };
        loss_curve.push(loss);
        if over >= DIVERGENCE_PATIENCE {
            return Err(Error::Training(format!(
                "diverged: loss above {DIVERGENCE_FACTOR}x the initial {first:.4} for {DIVERGENCE_PATIENCE} steps (step {step}, loss {loss:.4})"
            )));
        }
        adam.step(&mut params, &grads, tcfg);
    }
    Ok(TrainResult {
        params,
        loss_curve,
        traces,
    })
}

/// Traces of `batch` under `params`.
pub fn capture<S: Scalar>(cfg: &ModelConfig, params: &Params<S>, batch: &[Vec<usize>]) -> Result<Vec<SequenceTrace<S>>> {
    Ok(forward(cfg, params, batch, true)?.1.unwrap_or_default())
}
