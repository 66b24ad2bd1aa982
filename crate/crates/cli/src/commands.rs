use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use oasis_core::attention::{attention_csv, attention_pgm};
use oasis_core::depth::{depth_trace_rows, DEPTH_TRACE_HEADER};
use oasis_core::metrics::{
    outlier_stats, pathology_csv_row, pathology_score, sink_masses, PathologyVariant, PATHOLOGY_HEADER,
};
use oasis_core::{QuantSpec, RouterMode, RunTrace, SeededRng, SequenceTrace, Tensor};
use oasis_model::checkpoint::{content_hash, load, save};
use oasis_model::tasks::Task;
use oasis_model::train::capture;
use oasis_model::{eval_quantized, perplexity, train, ModelConfig, ParamsF64};
use oasis_theory::{run_suite, summary_csv, CheckReport, Suite};
use rayon::prelude::*;

use crate::artifacts::*;
use crate::config::{ExperimentConfig, MetricsOptions, ModelSection, RawConfig};
use crate::exit::Failure;

/// Evaluation sequences for a run come from this fork of its seed.
pub const EVAL_FORK: &str = "eval";
/// Probe sequences for `analyze`.
pub const ANALYSIS_FORK: &str = "analysis";

fn eval_set(task: Task, cfg: &ModelConfig, seed: u64, n: usize) -> Result<Vec<Vec<usize>>> {
    Ok(task.batch(&mut SeededRng::new(seed).fork(EVAL_FORK), cfg.vocab, cfg.seq_len, n)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

fn train_one(cfg: &ExperimentConfig, seed: u64, index: usize) -> Result<TrainedRun> {
    let variant = cfg.variants[index];
    let model = variant.apply(&cfg.model);
    let label = model.variant_label();
    let name = run_name(seed, &label);
    let tcfg = cfg.train.to_config(seed)?;
    let result = train::<f64>(&model, &tcfg, cfg.task).with_context(|| format!("run {name}"))?;
    let eval = eval_set(cfg.task, &model, seed, cfg.eval_sequences)?;
    let manifest = RunManifest {
        run: name.clone(),
        seed,
        variant_index: index,
        variant: label,
        param_hash: content_hash(&result.params),
        eval_sequences: cfg.eval_sequences,
        metrics: FinalMetrics {
            initial_loss: result.loss_curve[0],
            final_loss: *result.loss_curve.last().expect("at least one step"),
            eval_perplexity: perplexity(&model, &result.params, &eval)?,
        },
        model: ModelSection::from(&model),
        train: cfg.train.clone(),
    };
    let dir = cfg.out_dir.join(RUNS_DIR).join(&name);
    save(&dir.join(CHECKPOINT_DIR), &result.params)?;
    write_file(&dir.join(LOSS_FILE), loss_csv(&result.loss_curve).as_bytes())?;
    manifest.write(&dir)?;
    Ok(TrainedRun { dir, manifest })
}

fn prepare_out_dir(dir: &Path) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("output directory {} is not writable", dir.display()))
        .map_err(Failure::config)?;
    let probe = dir.join(".write-check");
    std::fs::write(&probe, b"")
        .with_context(|| format!("output directory {} is not writable", dir.display()))
        .map_err(Failure::config)?;
    std::fs::remove_file(&probe).ok();
    Ok(())
}

/// Trains every `(seed, variant)` pair in parallel and writes one run
/// directory each. Failed runs are reported after the others finish.
pub fn cmd_train(cfg: &ExperimentConfig) -> std::result::Result<Vec<TrainedRun>, Failure> {
    prepare_out_dir(&cfg.out_dir)?;
    // Saved without the output location so the directory can move.
    let mut saved = cfg.raw.clone();
    saved.out_dir = ".".into();
    let raw = toml::to_string(&saved).map_err(|e| Failure::runtime(anyhow!(e)))?;
    write_file(&cfg.out_dir.join(EXPERIMENT_FILE), raw.as_bytes()).map_err(Failure::config)?;
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.variants.len()).map(move |i| (s, i)))
        .collect();
    let results: Vec<Result<TrainedRun>> = jobs
        .par_iter()
        .map(|&(seed, i)| {
            let r = train_one(cfg, seed, i);
            if let Ok(run) = &r {
                eprintln!(
                    "trained {} final loss {:.4}",
                    run.manifest.run, run.manifest.metrics.final_loss
                );
            }
            r
        })
        .collect();
    let mut index = String::from("run,normalizer,router_mode,gated,seed,final_loss,eval_perplexity,param_hash\n");
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(run) => {
                let m = &run.manifest;
                writeln!(
                    index,
                    "{},{},{},{},{},{:.16e},{:.16e},{}",
                    m.run,
                    m.model.normalizer,
                    m.model.router_mode,
                    m.model.gated,
                    m.seed,
                    m.metrics.final_loss,
                    m.metrics.eval_perplexity,
                    m.param_hash
                )
                .unwrap();
                runs.push(run);
            }
            Err(e) => errors.push(format!("{e:#}")),
        }
    }
    write_file(&cfg.out_dir.join(RUN_INDEX), index.as_bytes()).map_err(Failure::runtime)?;
    if errors.is_empty() {
        Ok(runs)
    } else {
        Err(Failure::runtime(anyhow!("{} run(s) failed:\n  {}", errors.len(), errors.join("\n  "))))
    }
}

/// A run directory with a readable manifest and checkpoint.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub model: ModelConfig,
    pub task: Task,
    pub params: ParamsF64,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = RunManifest::read(dir)?;
    let model = manifest.model.to_config()?;
    let task = manifest.train.task()?;
    let params = load(&dir.join(CHECKPOINT_DIR), &model)
        .with_context(|| format!("loading checkpoint of {}", dir.display()))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        model,
        task,
        params,
    })
}

/// Loadable runs ordered by `(seed, variant_index)`, with warnings for the
/// rest. No loadable run is a missing-artifacts failure.
pub fn load_runs(out: &Path) -> std::result::Result<Vec<LoadedRun>, Failure> {
    let dirs = run_dirs(out);
    let mut runs = Vec::new();
    for d in &dirs {
        match load_run(d) {
            Ok(r) => runs.push(r),
            Err(e) => eprintln!("warning: skipping {}: {e:#}", d.display()),
        }
    }
    if runs.is_empty() {
        return Err(Failure::missing(anyhow!(
            "no analyzable runs under {} (expected {}/<run>/{} and {}/)",
            out.display(),
            RUNS_DIR,
            MANIFEST_FILE,
            CHECKPOINT_DIR
        )));
    }
    runs.sort_by(|a, b| {
        (a.manifest.seed, a.manifest.variant_index, &a.manifest.run).cmp(&(
            b.manifest.seed,
            b.manifest.variant_index,
            &b.manifest.run,
        ))
    });
    Ok(runs)
}

/// Per-run metrics computed by `analyze`, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct RunAnalysis {
    pub run: String,
    pub variant: String,
    pub variant_index: usize,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
}

impl RunAnalysis {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }
}

fn mean_tensor(ts: &[Tensor]) -> Tensor {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = acc.add(t).expect("equal shapes");
    }
    acc.scale(1.0 / ts.len() as f64)
}

fn irrelevant_positions(run: &LoadedRun, opts: &MetricsOptions, tokens: &[usize]) -> Vec<usize> {
    match &opts.irrelevant {
        Some(xs) => xs.clone(),
        None => (0..tokens.len())
            .filter(|&j| run.task.is_distractor(run.model.vocab, tokens[j]))
            .collect(),
    }
}

/// Largest change in depth weights when the same parameters are routed
/// without the null coupling.
pub fn coupling_effect(run: &LoadedRun, probe: &[Vec<usize>], traced: &[SequenceTrace]) -> Result<f64> {
    let aos = ModelConfig {
        router_mode: RouterMode::AoS,
        ..run.model
    };
    let plain = capture(&aos, &run.params, probe)?;
    let mut worst = 0.0_f64;
    for (a, b) in traced.iter().zip(&plain) {
        for (wa, wb) in a.depth.iter().zip(&b.depth) {
            for i in 0..wa.branches() {
                for t in 0..a.tokens() {
                    worst = worst.max((wa.alpha_at(i, t) - wb.alpha_at(i, t)).abs());
                }
            }
        }
    }
    Ok(worst)
}

pub fn analyze_run(run: &LoadedRun, opts: &MetricsOptions) -> Result<RunAnalysis> {
    let seed = run.manifest.seed;
    let cfg = &run.model;
    let probe = run.task.batch(
        &mut SeededRng::new(seed).fork(ANALYSIS_FORK),
        cfg.vocab,
        cfg.seq_len,
        opts.probe_sequences,
    )?;
    let traces = capture(cfg, &run.params, &probe)?;
    let out = run.dir.join(ANALYSIS_DIR);

    let trace = RunTrace {
        sequences: traces.clone(),
        loss_curve: Vec::new(),
    };
    let outliers = outlier_stats(&trace, opts.outlier_source)?;
    write_file(&out.join("outliers.csv"), outliers.to_csv().as_bytes())?;

    let reports = traces
        .iter()
        .map(|s| sink_masses(s, &opts.sink_set))
        .collect::<oasis_core::Result<Vec<_>>>()?;
    let mut mean_report = reports[0].clone();
    mean_report.sigma = mean_tensor(&reports.iter().map(|r| r.sigma.clone()).collect::<Vec<_>>());
    mean_report.total = mean_tensor(&reports.iter().map(|r| r.total.clone()).collect::<Vec<_>>());
    write_file(&out.join("sinks.csv"), mean_report.sigma_csv().as_bytes())?;
    write_file(&out.join("sinks_total.csv"), mean_report.total_csv().as_bytes())?;

    let first = &traces[0];
    let irrelevant = irrelevant_positions(run, opts, &probe[0]);
    let mut pathology = format!("{PATHOLOGY_HEADER}\n");
    for t in 0..first.tokens() {
        let n_t: Vec<usize> = irrelevant.iter().copied().filter(|&j| j <= t).collect();
        for variant in [PathologyVariant::AttnResidual, PathologyVariant::Vanilla] {
            let s = pathology_score(first, t, &n_t, opts.lambda1, opts.lambda2, variant)?;
            pathology.push_str(&pathology_csv_row(t, &s, variant));
        }
    }
    write_file(&out.join("pathology.csv"), pathology.as_bytes())?;

    let mut depth = format!("{DEPTH_TRACE_HEADER}\n");
    for (e, w) in first.depth.iter().enumerate() {
        depth.push_str(&depth_trace_rows(e + 2, w, first.tokens()));
    }
    write_file(&out.join("depth.csv"), depth.as_bytes())?;

    if opts.heatmaps {
        for (l, att) in first.attention.iter().enumerate() {
            for h in 0..cfg.n_heads {
                let stem = out.join("attention").join(format!("layer{}_head{h}", l + 1));
                write_file(&stem.with_extension("pgm"), &attention_pgm(&att.weights, h))?;
                write_file(&stem.with_extension("csv"), attention_csv(&att.weights, h).as_bytes())?;
            }
        }
    }

    let n = reports.len() as f64;
    let mut metrics = vec![
        ("final_loss".to_string(), run.manifest.metrics.final_loss),
        ("eval_perplexity".to_string(), run.manifest.metrics.eval_perplexity),
        ("sink_mass_total".to_string(), reports.iter().map(|r| r.mean_total()).sum::<f64>() / n),
        ("sink_mass_branch".to_string(), reports.iter().map(|r| r.mean_sigma()).sum::<f64>() / n),
        ("avg_kurtosis".to_string(), outliers.avg_kurtosis),
        ("max_inf_norm".to_string(), outliers.max_inf_norm),
    ];
    if cfg.router_mode == RouterMode::Oasis {
        metrics.push(("coupling_effect".to_string(), coupling_effect(run, &probe, &traces)?));
    }
    let mut table = String::from("metric,value\n");
    for (k, v) in &metrics {
        writeln!(table, "{k},{v:.16e}").unwrap();
    }
    write_file(&out.join("metrics.csv"), table.as_bytes())?;
    Ok(RunAnalysis {
        run: run.manifest.run.clone(),
        variant: run.manifest.variant.clone(),
        variant_index: run.manifest.variant_index,
        seed,
        metrics,
    })
}

/// `metric,variant,value` with values averaged over seeds; one row per
/// metric and variant.
pub fn comparison_csv(analyses: &[RunAnalysis]) -> String {
    let mut variants: Vec<(usize, String)> = analyses.iter().map(|a| (a.variant_index, a.variant.clone())).collect();
    variants.sort();
    variants.dedup();
    let mut metric_names: Vec<String> = Vec::new();
    for a in analyses {
        for (k, _) in &a.metrics {
            if !metric_names.contains(k) {
                metric_names.push(k.clone());
            }
        }
    }
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for a in analyses {
        for (k, v) in &a.metrics {
            let e = sums.entry((k.clone(), a.variant.clone())).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let mut s = String::from("metric,variant,value\n");
    for m in &metric_names {
        for (_, v) in &variants {
            if let Some(&(sum, n)) = sums.get(&(m.clone(), v.clone())) {
                writeln!(s, "{m},{v},{:.16e}", sum / n as f64).unwrap();
            }
        }
    }
    s
}

pub fn cmd_analyze(out: &Path, opts: &MetricsOptions) -> std::result::Result<Vec<RunAnalysis>, Failure> {
    let runs = load_runs(out)?;
    let results: Vec<Result<RunAnalysis>> = runs.par_iter().map(|r| analyze_run(r, opts)).collect();
    let mut analyses = Vec::new();
    for (run, r) in runs.iter().zip(results) {
        match r {
            Ok(a) => analyses.push(a),
            Err(e) => eprintln!("warning: could not analyze {}: {e:#}", run.dir.display()),
        }
    }
    if analyses.is_empty() {
        return Err(Failure::missing(anyhow!("nothing analyzable under {}", out.display())));
    }
    write_file(&out.join(COMPARISON_FILE), comparison_csv(&analyses).as_bytes()).map_err(Failure::runtime)?;
    Ok(analyses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantRow {
    pub run: String,
    pub normalizer: String,
    pub router_mode: String,
    pub seed: u64,
    pub spec: QuantSpec,
    pub ppl_fp: f64,
    pub ppl_quant: f64,
    pub ratio: f64,
}

pub const QUANT_HEADER: &str = "normalizer,router_mode,seed,bits_w,bits_a,ppl_fp,ppl_quant,ratio";

pub fn quant_csv(rows: &[QuantRow]) -> String {
    let mut s = format!("{QUANT_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.16e},{:.16e},{:.16e}",
            r.normalizer, r.router_mode, r.seed, r.spec.weight_bits, r.spec.act_bits, r.ppl_fp, r.ppl_quant, r.ratio
        )
        .unwrap();
    }
    s
}

/// Every loadable run under every spec, on the run's evaluation set.
pub fn cmd_quant(out: &Path, specs: &[QuantSpec]) -> std::result::Result<Vec<QuantRow>, Failure> {
    if specs.is_empty() {
        return Err(Failure::config(anyhow!("no quantization specs given")));
    }
    let runs = load_runs(out)?;
    let rows: Vec<Vec<QuantRow>> = runs
        .par_iter()
        .map(|r| -> Result<Vec<QuantRow>> {
            let eval = eval_set(r.task, &r.model, r.manifest.seed, r.manifest.eval_sequences)?;
            specs
                .iter()
                .map(|spec| {
                    let q = eval_quantized(&r.model, &r.params, spec, &eval)?;
                    Ok(QuantRow {
                        run: r.manifest.run.clone(),
                        normalizer: r.manifest.model.normalizer.clone(),
                        router_mode: r.manifest.model.router_mode.clone(),
                        seed: r.manifest.seed,
                        spec: *spec,
                        ppl_fp: q.ppl_fp,
                        ppl_quant: q.ppl_quant,
                        ratio: q.ratio,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()
        .map_err(Failure::runtime)?;
    let rows: Vec<QuantRow> = rows.into_iter().flatten().collect();
    write_file(&out.join(QUANT_FILE), quant_csv(&rows).as_bytes()).map_err(Failure::runtime)?;
    Ok(rows)
}

/// Runs the named suites, writes `<out>/theory/<suite>.csv` for each and
/// `summary.csv`. Any violation is a failure after all files are written.
pub fn cmd_theory(out: &Path, suites: &[Suite], n: usize, seed: u64) -> std::result::Result<Vec<CheckReport>, Failure> {
    prepare_out_dir(out)?;
    let dir = out.join(THEORY_DIR);
    let mut reports = Vec::new();
    for &s in suites {
        let r = run_suite(s, n, seed).map_err(|e| Failure::runtime(anyhow!(e)))?;
        println!(
            "{}: {} instances, {} violations, {} inconclusive, worst margin {:.3e} ({:.2?})",
            r.suite, r.instances_tested, r.violations, r.inconclusive, r.worst_margin, r.runtime
        );
        write_file(&dir.join(format!("{}.csv", s.name())), r.to_csv().as_bytes()).map_err(Failure::runtime)?;
        reports.push(r);
    }
    write_file(&dir.join("summary.csv"), summary_csv(&reports).as_bytes()).map_err(Failure::runtime)?;
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    if violations > 0 {
        return Err(Failure::violations(anyhow!("{violations} bound violation(s)")));
    }
    Ok(reports)
}

/// Metric options from an explicit config, else the experiment file saved
/// by `train`, else defaults.
pub fn metrics_for(out: &Path, explicit: Option<&ExperimentConfig>) -> Result<ExperimentConfig> {
    if let Some(c) = explicit {
        return Ok(c.clone());
    }
    let path = out.join(EXPERIMENT_FILE);
    if path.exists() {
        return ExperimentConfig::load(&path);
    }
    ExperimentConfig::from_raw(RawConfig::default(), "", "<default>")
}
