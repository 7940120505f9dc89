// SPDX-License-Identifier: MIT OR Apache-2.0

use super::forward::loss_only;
use super::generate::Decoder;
use super::*;
use crate::synthgen::Corpus;
use proptest::prelude::*;

fn micro_config(n_layers: usize, context_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ff: 16,
        context_len,
        seed: 3,
    }
}

/// Initialised weights pushed away from the near-zero regime so every
/// parameter has a visible gradient.
fn lively(cfg: &ModelConfig) -> ModelWeights {
    let mut w = ModelWeights::init(cfg).unwrap();
    for (k, (_, matrix, t)) in w.tensors_mut().into_iter().enumerate() {
        for (i, x) in t.iter_mut().enumerate() {
            if matrix {
                *x *= 15.0;
            } else {
                *x = 1.0 + 0.3 * ((i * 7 + k * 3) as f64).sin();
            }
        }
    }
    w
}

fn tokens(n: usize, vocab: usize, salt: usize) -> Vec<u32> {
    (0..n).map(|i| ((i * 7 + salt * 3 + i * i) % vocab) as u32).collect()
}

fn unit(d: usize, salt: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|i| (i as f64 * 1.3 + salt).sin()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn gradients_match_central_differences() {
    // Window shorter than the sequence so the sliding band is exercised too.
    for ctx in [16, 4] {
        let cfg = micro_config(2, ctx);
        let w = lively(&cfg);
        let (batch, seq) = (2, 6);
        let inputs = tokens(batch * seq, cfg.vocab_size, 1);
        let targets = tokens(batch * seq, cfg.vocab_size, 5);
        let (_, g) = loss_and_grad(&w, &inputs, &targets, batch, seq);
        let h = 1e-3;
        let names: Vec<String> = w.tensors().into_iter().map(|(n, _, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let analytic = g.tensors()[ti].2.clone();
            let mut numeric = vec![0.0; analytic.len()];
            for i in 0..analytic.len() {
                let mut wp = w.clone();
                wp.tensors_mut()[ti].2[i] += h;
                let mut wm = w.clone();
                wm.tensors_mut()[ti].2[i] -= h;
                numeric[i] = (loss_only(&wp, &inputs, &targets, batch, seq)
                    - loss_only(&wm, &inputs, &targets, batch, seq))
                    / (2.0 * h);
            }
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().zip(&numeric).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
            assert!(scale > 1e-8, "{name}: vanishing gradient");
            let rel = diff / scale;
            assert!(rel < 1e-3, "{name} (ctx {ctx}): relative error {rel:.2e}");
        }
    }
}

#[test]
fn logits_are_causal() {
    let cfg = micro_config(2, 16);
    let w = lively(&cfg);
    let a = tokens(10, cfg.vocab_size, 0);
    let mut b = a.clone();
    for t in b.iter_mut().skip(6) {
        *t = (*t + 3) % cfg.vocab_size as u32;
    }
    let (la, _) = forward(&w, &a, None).unwrap();
    let (lb, _) = forward(&w, &b, None).unwrap();
    let v = cfg.vocab_size;
    for i in 0..6 * v {
        assert!((la[i] - lb[i]).abs() < 1e-12);
    }
    assert!((6 * v..10 * v).any(|i| (la[i] - lb[i]).abs() > 1e-6));
}

#[test]
fn probability_rows_sum_to_one() {
    let cfg = micro_config(2, 16);
    let w = lively(&cfg);
    let (mut logits, _) = forward(&w, &tokens(9, cfg.vocab_size, 2), None).unwrap();
    for row in logits.chunks_exact_mut(cfg.vocab_size) {
        ops::softmax_in_place(row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_strength_is_bit_exact() {
    let cfg = micro_config(2, 16);
    let w = lively(&cfg);
    let toks = tokens(9, cfg.vocab_size, 4);
    let base = forward(&w, &toks, None).unwrap();
    for layer in 0..=cfg.n_layers {
        let s = SteerSpec::new(layer, unit(cfg.d_model, 0.2), 0.0).unwrap();
        assert_eq!(forward(&w, &toks, Some(&s)).unwrap(), base);
    }
}

#[test]
fn injection_is_additive_and_local() {
    let cfg = micro_config(2, 16);
    let w = lively(&cfg);
    let toks = tokens(7, cfg.vocab_size, 6);
    let (_, base) = forward(&w, &toks, None).unwrap();
    let u = unit(cfg.d_model, 0.9);
    for layer in 0..=cfg.n_layers {
        for s in [2.5, -2.5] {
            let spec = SteerSpec::new(layer, u.clone(), s).unwrap();
            let (_, tr) = forward(&w, &toks, Some(&spec)).unwrap();
            for l in 0..layer {
                assert_eq!(tr.layers[l], base.layers[l], "layer {l} below injection changed");
            }
            for pos in 0..toks.len() {
                for (j, (a, b)) in tr.at(layer, pos).iter().zip(base.at(layer, pos)).enumerate() {
                    assert!((a - b - s * u[j]).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn final_layer_readout_is_monotone() {
    let cfg = micro_config(2, 16);
    let mut w = lively(&cfg);
    w.final_norm.iter_mut().for_each(|g| *g = 1.0);
    let toks = tokens(5, cfg.vocab_size, 8);
    let d = cfg.d_model;
    for target in [0usize, 4, 9] {
        let row = &w.tok_emb[target * d..(target + 1) * d];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = row.iter().map(|x| x / n).collect();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=20 {
            let s = -10.0 + k as f64;
            let spec = SteerSpec::new(cfg.n_layers, u.clone(), s).unwrap();
            let (logits, _) = forward(&w, &toks, Some(&spec)).unwrap();
            let l = logits[4 * cfg.vocab_size + target];
            assert!(l > prev, "logit fell at strength {s}");
            prev = l;
        }
    }
}

#[test]
fn cached_decoding_matches_batched_scoring() {
    // Sequence longer than the window: both paths slide.
    let cfg = micro_config(2, 5);
    let w = lively(&cfg);
    let toks = tokens(13, cfg.vocab_size, 9);
    let scored = score(&w, &toks, None).unwrap();
    assert!(scored.truncated);
    let mut dec = Decoder::new(&w, None);
    for t in 0..toks.len() - 1 {
        let logits = dec.step(toks[t]);
        let nll = ops::log_sum_exp(&logits) - logits[toks[t + 1] as usize];
        assert!((nll - scored.nll[t]).abs() < 1e-9, "position {t}");
    }
    assert!(dec.truncated);
}

#[test]
fn forward_rejects_bad_input() {
    let cfg = micro_config(1, 4);
    let w = ModelWeights::init(&cfg).unwrap();
    assert!(forward(&w, &[1, 2, 11], None).is_err());
    assert!(forward(&w, &[1, 2, 3, 4, 5], None).is_err());
    assert!(SteerSpec::new(0, vec![1.0, 1.0], 1.0).is_err());
    let bad_layer = SteerSpec { layer: 2, direction: unit(8, 0.0), strength: 1.0 };
    assert!(forward(&w, &[1], Some(&bad_layer)).is_err());
    assert!(generate(&w, &[], 3, 1.0, 0, None).is_err());
    assert!(generate(&w, &[1], 0, 1.0, 0, None).is_err());
    assert!(ModelConfig { n_heads: 3, ..cfg }.validate().is_err());
}

#[test]
fn greedy_decoding_ignores_seed() {
    let cfg = micro_config(2, 8);
    let w = lively(&cfg);
    let a = generate(&w, &[1, 2], 12, 0.0, 1, None).unwrap();
    let b = generate(&w, &[1, 2], 12, 0.0, 99, None).unwrap();
    assert_eq!(a, b);
    assert!(a.truncated);
    let c = generate(&w, &[1, 2], 12, 1.0, 5, None).unwrap();
    assert_eq!(c, generate(&w, &[1, 2], 12, 1.0, 5, None).unwrap());
}

#[test]
fn steered_generation_controls() {
    let cfg = micro_config(2, 16);
    let w = lively(&cfg);
    let u = unit(cfg.d_model, 1.7);
    let base = generate(&w, &[3, 4], 10, 1.0, 11, None).unwrap();
    let zero = SteerSpec::new(1, u.clone(), 0.0).unwrap();
    assert_eq!(generate(&w, &[3, 4], 10, 1.0, 11, Some(&zero)).unwrap(), base);
    let neg_u: Vec<f64> = u.iter().map(|x| -x).collect();
    for s in [0.5, 3.0] {
        let p = SteerSpec::new(1, u.clone(), s).unwrap();
        let q = SteerSpec::new(1, neg_u.clone(), -s).unwrap();
        assert_eq!(
            generate(&w, &[3, 4], 10, 1.0, 11, Some(&p)).unwrap(),
            generate(&w, &[3, 4], 10, 1.0, 11, Some(&q)).unwrap()
        );
    }
}

#[test]
fn perplexity_matches_brute_force_nll() {
    let cfg = micro_config(2, 16);
    let w = lively(&cfg);
    let toks = tokens(12, cfg.vocab_size, 3);
    let (logits, _) = forward(&w, &toks, None).unwrap();
    let v = cfg.vocab_size;
    let mut total = 0.0;
    for t in 1..toks.len() {
        let row = &logits[(t - 1) * v..t * v];
        let z: f64 = row.iter().map(|l| l.exp()).sum();
        total += -(row[toks[t] as usize].exp() / z).ln();
    }
    let oracle = (total / (toks.len() - 1) as f64).exp();
    assert!((perplexity(&w, &toks).unwrap() - oracle).abs() < 1e-9 * oracle);
}

#[test]
fn nll_is_additive_over_parts() {
    let cfg = micro_config(2, 6);
    let w = lively(&cfg);
    let toks = tokens(20, cfg.vocab_size, 1);
    let s = score(&w, &toks, None).unwrap();
    let whole = s.mean_nll_from(1);
    let parts = [(1usize, 7usize), (7, 12), (12, 20)];
    let weighted: f64 = parts
        .iter()
        .map(|&(a, b)| {
            let part = &s.nll[a - 1..b - 1];
            part.iter().sum::<f64>() / part.len() as f64 * part.len() as f64
        })
        .sum::<f64>()
        / 19.0;
    assert!((whole - weighted).abs() < 1e-9);
}

#[test]
fn untrained_perplexity_is_near_vocab_size() {
    let cfg = ModelConfig::default();
    let w = ModelWeights::init(&cfg).unwrap();
    let toks = tokens(120, cfg.vocab_size, 2);
    let ppl = perplexity(&w, &toks).unwrap();
    let v = cfg.vocab_size as f64;
    assert!((ppl - v).abs() < 0.2 * v, "ppl {ppl}");
}

#[test]
fn archive_round_trip() {
    let cfg = micro_config(2, 8);
    let w = lively(&cfg);
    let mut rounded = w.clone();
    rounded.round_to_f32();
    let dir = std::env::temp_dir().join(format!("neuraxis-archive-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("w.bin");
    w.save(&path).unwrap();
    let back = ModelWeights::load(&path).unwrap();
    assert_eq!(back, rounded);
    let bytes = std::fs::read(&path).unwrap();
    assert!(ModelWeights::from_archive_bytes(&bytes[..bytes.len() - 4]).is_err());
    assert!(ModelWeights::from_archive_bytes(&bytes[..5]).is_err());
    std::fs::remove_dir_all(&dir).ok();
}

fn cyclic_corpus(period: u32, n_seq: usize, len: usize) -> Corpus {
    let sequences = (0..n_seq)
        .map(|s| (0..len).map(|i| ((i + s) as u32) % period).collect())
        .collect();
    Corpus { sequences, empty: false }
}

#[test]
fn memorises_a_cyclic_corpus() {
    let corpus = cyclic_corpus(3, 400, 128);
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        context_len: 32,
        seed: 1,
    };
    let spec = TrainSpec { steps: 300, batch_size: 4, lr: 3e-2, warmup_steps: 10, ..TrainSpec::default() };
    let (w, report) = train_toy_lm(&corpus, &cfg, &spec).unwrap();
    assert!(report.val_perplexity < 1.1, "val ppl {}", report.val_perplexity);
    assert!(report.val_perplexity < report.unigram_perplexity);
    let seq: Vec<u32> = (0..30).map(|i| i % 3).collect();
    assert!(perplexity(&w, &seq).unwrap() < 1.1);
    // Uniform-random tokens cannot beat the vocabulary bound under a peaked model.
    let noise: Vec<u32> = (0..300).map(|i| ((i * 2_654_435_761u64 as usize) >> 7) as u32 % 8).collect();
    assert!(perplexity(&w, &noise).unwrap() >= 8.0);
}

#[test]
fn training_is_deterministic() {
    let corpus = cyclic_corpus(5, 400, 128);
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        context_len: 16,
        seed: 2,
    };
    let spec = TrainSpec { steps: 5, batch_size: 2, ..TrainSpec::default() };
    let a = train_toy_lm(&corpus, &cfg, &spec).unwrap();
    let b = train_toy_lm(&corpus, &cfg, &spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn divergence_returns_last_finite_weights() {
    let corpus = cyclic_corpus(5, 400, 128);
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        context_len: 16,
        seed: 2,
    };
    let spec = TrainSpec { steps: 10, batch_size: 2, lr: 1e308, warmup_steps: 0, grad_clip: 0.0, ..TrainSpec::default() };
    match train_toy_lm(&corpus, &cfg, &spec) {
        Err(Error::Diverged { last_finite, .. }) => assert!(last_finite.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r)),
    }
}

#[test]
fn training_rejects_small_corpus() {
    let corpus = cyclic_corpus(3, 10, 128);
    assert!(train_toy_lm(&corpus, &ModelConfig::default(), &TrainSpec::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn steering_never_touches_earlier_layers(
        layer in 0usize..=2,
        strength in -8.0f64..8.0,
        salt in 0.0f64..6.0,
        len in 1usize..10,
    ) {
        let cfg = micro_config(2, 16);
        let w = lively(&cfg);
        let toks = tokens(len, cfg.vocab_size, 7);
        let (_, base) = forward(&w, &toks, None).unwrap();
        let spec = SteerSpec::new(layer, unit(cfg.d_model, salt), strength).unwrap();
        let (_, tr) = forward(&w, &toks, Some(&spec)).unwrap();
        for l in 0..layer {
            prop_assert_eq!(&tr.layers[l], &base.layers[l]);
        }
        prop_assert!(tr.layers.iter().flatten().all(|x| x.is_finite()));
    }
}
