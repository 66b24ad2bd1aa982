use oasis_core::depth::{depth_weights, mix, BranchNullStats, DepthRouterState};
use oasis_core::{attend, AttentionConfig, AttentionParams, NormalizerSpec, NullTarget, RouterMode, SeededRng, Tensor};
use oasis_model::checkpoint::{content_hash, load, save};
use oasis_model::params::Params;
use oasis_model::tasks::Task;
use oasis_model::*;

fn small(normalizer: NormalizerSpec, mode: RouterMode, gated: bool) -> ModelConfig {
    ModelConfig {
        vocab: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        mlp_ratio: 2,
        seq_len: 4,
        normalizer,
        router_mode: mode,
        gated,
        ..Default::default()
    }
}

fn all_small() -> Vec<ModelConfig> {
    let mut out = vec![];
    for n in [NormalizerSpec::softmax(), NormalizerSpec::softmax1()] {
        for m in RouterMode::ALL {
            for g in [false, true] {
                out.push(small(n, m, g));
            }
        }
    }
    out
}

fn batch(cfg: &ModelConfig, seed: u64, n: usize) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| (0..cfg.seq_len).map(|_| rng.below(cfg.vocab)).collect())
        .collect()
}

/// Randomized parameters with nonzero gates, depth logits and coupling so
/// that every path carries gradient.
fn lively(cfg: &ModelConfig, seed: u64) -> Params {
    let mut p: Params = Params::init(cfg, &SeededRng::new(seed)).unwrap();
    let mut rng = SeededRng::new(seed ^ 0xabc);
    for i in p.layout.depth_logits.clone() {
        for x in p.tensors[i].data_mut() {
            *x = rng.gaussian();
        }
    }
    for l in p.layout.layers.clone() {
        if let Some(wg) = l.wg {
            p.tensors[wg] = rng.gaussian_tensor(&[cfg.d_model, cfg.d_model], 0.0, 0.5);
        }
        for x in p.tensors[l.attn_gain].data_mut() {
            *x = 1.0 + 0.3 * rng.gaussian();
        }
    }
    let b = p.layout.beta_raw;
    p.tensors[b].data_mut()[0] = 0.5;
    p
}

#[test]
fn zero_parameters_give_uniform_loss() {
    for cfg in all_small() {
        let p: ParamsF64 = Params::zeros(&cfg).unwrap();
        let b = batch(&cfg, 1, 3);
        let (loss, _) = loss_and_grads(&cfg, &p, &b).unwrap();
        assert!((loss - (cfg.vocab as f64).ln()).abs() < 1e-9);
        let (logits, _) = forward(&cfg, &p, &b, false).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));
        let ppl = perplexity(&cfg, &p, &b).unwrap();
        assert!((ppl - cfg.vocab as f64).abs() < 1e-6);
    }
}

#[test]
fn capture_does_not_change_logits() {
    let cfg = small(NormalizerSpec::softmax1(), RouterMode::Oasis, true);
    let p = lively(&cfg, 2);
    let b = batch(&cfg, 3, 4);
    let (a, none) = forward(&cfg, &p, &b, false).unwrap();
    let (c, traces) = forward(&cfg, &p, &b, true).unwrap();
    assert!(none.is_none());
    assert_eq!(a, c);
    assert_eq!(traces.unwrap().len(), 4);
}

fn rms(x: &Tensor, gain: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let ms = x.row(i).iter().map(|v| v * v).sum::<f64>() / x.cols() as f64;
        let inv = 1.0 / (ms + oasis_model::tape::RMS_EPS).sqrt();
        for (o, g) in out.row_mut(i).iter_mut().zip(gain.data()) {
            *o *= inv * g;
        }
    }
    out
}

#[test]
fn traced_attention_and_depth_match_core() {
    for cfg in all_small() {
        let p = lively(&cfg, 4);
        let b = batch(&cfg, 5, 1);
        let (_, traces) = forward(&cfg, &p, &b, true).unwrap();
        let tr = &traces.unwrap()[0];
        let lay = &p.layout;
        let acfg = AttentionConfig::new(cfg.d_model, cfg.n_heads, cfg.normalizer, cfg.gated).unwrap();
        let mut router: DepthRouterState = DepthRouterState::new(cfg.router_mode, cfg.n_layers + 1);
        for (k, &i) in lay.depth_logits.iter().enumerate() {
            router.base_logits[k + 1] = p.tensors[i].data().to_vec();
        }
        router.beta_raw = p.tensors[lay.beta_raw].data().to_vec();
        for (l, slots) in lay.layers.iter().enumerate() {
            let x = rms(&tr.hidden[l], &p.tensors[slots.attn_gain]);
            let ap = AttentionParams {
                wq: p.tensors[slots.wq].clone(),
                wk: p.tensors[slots.wk].clone(),
                wv: p.tensors[slots.wv].clone(),
                wo: p.tensors[slots.wo].clone(),
                wg: slots.wg.map(|i| p.tensors[i].clone()),
            };
            let core = attend(&acfg, &x, &ap).unwrap();
            let got = &tr.attention[l];
            for (a, b) in [
                (&core.context, &got.context),
                (&core.weights, &got.weights),
                (&core.null_mass, &got.null_mass),
                (&core.head_context, &got.head_context),
            ] {
                assert_eq!(a.shape(), b.shape());
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() < 1e-12, "{u} vs {v}");
                }
            }

            let heads: Vec<Tensor> = tr.attention[..=l].iter().map(|a| a.null_mass.clone()).collect();
            let stats = BranchNullStats::from_heads(&heads, cfg.seq_len, cfg.embedding_null).unwrap();
            let w = depth_weights(&router, l + 2, Some(&stats)).unwrap();
            for t in 0..cfg.seq_len {
                for i in 0..l + 2 {
                    assert!((w.alpha_at(i, t) - tr.depth[l].alpha_at(i, t)).abs() < 1e-12);
                }
                assert!((w.null_at(t) - tr.depth[l].null_at(t)).abs() < 1e-12);
            }
            let target = if cfg.router_mode == RouterMode::Vanilla { NullTarget::Zero } else { cfg.null_target };
            let h = mix(&w, &tr.hidden[0], &tr.block_outputs[..=l], &tr.hidden[l], target).unwrap();
            for (u, v) in h.data().iter().zip(tr.hidden[l + 1].data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_layer_vanilla_mixes_two_branches() {
    let cfg = ModelConfig {
        n_layers: 1,
        ..small(NormalizerSpec::softmax(), RouterMode::Vanilla, false)
    };
    let mut p = lively(&cfg, 6);
    let i = p.layout.depth_logits[0];
    p.tensors[i] = Tensor::vector(vec![0.3, -0.4]);
    let (_, tr) = forward(&cfg, &p, &batch(&cfg, 7, 1), true).unwrap();
    let tr = &tr.unwrap()[0];
    let (e0, e1) = (0.3_f64.exp(), (-0.4_f64).exp());
    let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let expect = tr.hidden[0].scale(a0).add(&tr.block_outputs[0].scale(a1)).unwrap();
    for (u, v) in expect.data().iter().zip(tr.hidden[1].data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

fn rel_close(a: f64, n: f64) -> bool {
    (a - n).abs() <= 1e-5 * a.abs().max(n.abs()) + 1e-9
}

#[test]
fn gradients_match_finite_differences() {
    let h = 1e-4;
    for (k, cfg) in all_small().into_iter().enumerate() {
        let p = lively(&cfg, 10 + k as u64);
        let b = batch(&cfg, 20 + k as u64, 2);
        let (_, grads) = loss_and_grads(&cfg, &p, &b).unwrap();
        let mut rng = SeededRng::new(30 + k as u64);
        // Every parameter tensor at least once, then random coordinates.
        let mut picks: Vec<(usize, usize)> = (0..p.tensors.len()).map(|i| (i, rng.below(p.tensors[i].len()))).collect();
        while picks.len() < 40 {
            let i = rng.below(p.tensors.len());
            picks.push((i, rng.below(p.tensors[i].len())));
        }
        for (i, j) in picks {
            let mut plus = p.clone();
            plus.tensors[i].data_mut()[j] += h;
            let mut minus = p.clone();
            minus.tensors[i].data_mut()[j] -= h;
            let lp = batch_loss(&cfg, &plus, &b, ForwardOptions::default()).unwrap();
            let lm = batch_loss(&cfg, &minus, &b, ForwardOptions::default()).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let a = grads[i].data()[j];
            assert!(
                rel_close(a, fd),
                "{} {}[{j}]: analytic {a} fd {fd}",
                cfg.variant_label(),
                p.layout.names[i]
            );
        }
    }
}

#[test]
fn beta_receives_gradient_only_under_oasis() {
    for cfg in all_small() {
        let p = lively(&cfg, 40);
        let (_, g) = loss_and_grads(&cfg, &p, &batch(&cfg, 41, 2)).unwrap();
        let gb = g[p.layout.beta_raw].data()[0];
        if cfg.router_mode == RouterMode::Oasis && cfg.normalizer.has_null() {
            assert!(gb != 0.0);
        } else {
            assert_eq!(gb, 0.0);
        }
    }
}

#[test]
fn duplicate_examples_do_not_change_gradient() {
    let cfg = small(NormalizerSpec::softmax1(), RouterMode::Oasis, true);
    let p = lively(&cfg, 42);
    let one = batch(&cfg, 43, 1);
    let two = vec![one[0].clone(), one[0].clone()];
    let (la, ga) = loss_and_grads(&cfg, &p, &one).unwrap();
    let (lb, gb) = loss_and_grads(&cfg, &p, &two).unwrap();
    assert!((la - lb).abs() < 1e-15);
    for (a, b) in ga.iter().zip(&gb) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
}

#[test]
fn oasis_with_vanishing_coupling_matches_aos() {
    let aos = small(NormalizerSpec::softmax1(), RouterMode::AoS, false);
    let oasis = ModelConfig {
        router_mode: RouterMode::Oasis,
        ..aos
    };
    let mut p = lively(&aos, 44);
    let bi = p.layout.beta_raw;
    p.tensors[bi].data_mut()[0] = -60.0;
    let b = batch(&aos, 45, 3);
    let (la, _) = forward(&aos, &p, &b, false).unwrap();
    let (lo, _) = forward(&oasis, &p, &b, false).unwrap();
    for (x, y) in la.data().iter().zip(lo.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn bad_tokens_and_mismatched_params() {
    let cfg = small(NormalizerSpec::softmax(), RouterMode::Vanilla, false);
    let p = lively(&cfg, 46);
    assert!(forward(&cfg, &p, &[vec![0, 1, 11, 2]], false).is_err());
    assert!(forward(&cfg, &p, &[vec![0; 5]], false).is_err());
    let other = ModelConfig { gated: true, ..cfg };
    assert!(forward(&other, &p, &[vec![0; 4]], false).is_err());
}

fn tiny_train() -> (ModelConfig, TrainConfig) {
    let cfg = ModelConfig {
        vocab: 16,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        seq_len: 12,
        normalizer: NormalizerSpec::softmax1(),
        router_mode: RouterMode::Oasis,
        ..Default::default()
    };
    let t = TrainConfig {
        steps: 30,
        batch: 4,
        lr: 1e-2,
        seed: 9,
        trace_every: Some(10),
        ..Default::default()
    };
    (cfg, t)
}

#[test]
fn training_is_deterministic() {
    let (cfg, t) = tiny_train();
    let a = train::<f64>(&cfg, &t, Task::Copy).unwrap();
    let b = train::<f64>(&cfg, &t, Task::Copy).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.params, b.params);
    assert_eq!(a.traces.len(), 3);
    assert!(a.loss_curve.last().unwrap() < &a.loss_curve[0]);
}

#[test]
fn zero_steps_leave_params_unchanged() {
    let (cfg, t) = tiny_train();
    let t = TrainConfig { steps: 0, ..t };
    let start: Params = Params::init(&cfg, &SeededRng::new(t.seed)).unwrap();
    let r = train::<f64>(&cfg, &t, Task::Copy).unwrap();
    assert_eq!(r.params, start);
    assert!(r.loss_curve.is_empty());
}

#[test]
fn divergence_is_reported() {
    let (cfg, t) = tiny_train();
    let t = TrainConfig {
        lr: 1e4,
        grad_clip: 1e6,
        steps: 400,
        trace_every: None,
        ..t
    };
    match train::<f64>(&cfg, &t, Task::NoisyCopy) {
        Err(oasis_core::Error::Training(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(r) => panic!("no failure reported, final loss {:?}", r.loss_curve.last()),
    }
}

#[test]
fn trained_model_beats_untrained_on_held_out_data() {
    let (cfg, t) = tiny_train();
    let t = TrainConfig { steps: 60, ..t };
    let r = train::<f64>(&cfg, &t, Task::Copy).unwrap();
    let eval = Task::Copy.batch(&mut SeededRng::new(99), cfg.vocab, cfg.seq_len, 8).unwrap();
    let start: Params = Params::init(&cfg, &SeededRng::new(t.seed)).unwrap();
    let trained = perplexity(&cfg, &r.params, &eval).unwrap();
    assert!(trained < perplexity(&cfg, &start, &eval).unwrap());
    let loss = batch_loss(&cfg, &r.params, &eval, ForwardOptions::default()).unwrap();
    assert!((trained - loss.exp()).abs() < 1e-12 * trained);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small(NormalizerSpec::softmax1(), RouterMode::Oasis, true);
    let p = lively(&cfg, 47);
    let dir = std::env::temp_dir().join(format!("oasis-ckpt-{}", std::process::id()));
    save(&dir, &p).unwrap();
    let q: Params = load(&dir, &cfg).unwrap();
    assert_eq!(p, q);
    assert_eq!(content_hash(&p), content_hash(&q));
    assert_eq!(content_hash(&p).len(), 64);
    let other = ModelConfig { gated: false, ..cfg };
    assert!(load::<f64>(&dir, &other).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn quantized_eval_is_deterministic_and_sane() {
    let (cfg, t) = tiny_train();
    let r = train::<f64>(&cfg, &TrainConfig { trace_every: None, ..t }, Task::Copy).unwrap();
    let eval = Task::Copy.batch(&mut SeededRng::new(5), cfg.vocab, cfg.seq_len, 4).unwrap();
    let spec = oasis_core::QuantSpec::new(8, 8, oasis_core::Granularity::PerTensor).unwrap();
    let a = eval_quantized(&cfg, &r.params, &spec, &eval).unwrap();
    let b = eval_quantized(&cfg, &r.params, &spec, &eval).unwrap();
    assert_eq!(a, b);
    assert!(a.ratio > 1.0 - 1e-3 && a.ratio < 1.5, "{}", a.ratio);
}

#[test]
fn f32_forward_tracks_f64() {
    let cfg = small(NormalizerSpec::softmax1(), RouterMode::Oasis, false);
    let p = lively(&cfg, 48);
    let p32 = Params::<f32> {
        layout: p.layout.clone(),
        tensors: p.tensors.iter().map(|t| t.cast()).collect(),
    };
    let b = batch(&cfg, 49, 2);
    let l64 = batch_loss(&cfg, &p, &b, ForwardOptions::default()).unwrap();
    let l32 = batch_loss(&cfg, &p32, &b, ForwardOptions::default()).unwrap();
    assert!((l64 - l32 as f64).abs() < 1e-4);
}

#[test]
fn copy_task_is_learned_with_positions() {
    let cfg = ModelConfig {
        positional: true,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        lr: 1e-2,
        seed: 5,
        ..Default::default()
    };
    let r = train::<f64>(&cfg, &tcfg, Task::Copy).unwrap();
    let (first, last) = (r.loss_curve[0], *r.loss_curve.last().unwrap());
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}
