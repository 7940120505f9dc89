// SPDX-License-Identifier: MIT OR Apache-2.0

//! Property tests of cross-module invariants through the public API.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use neuraxis::axes::{fit_ica_matrix, match_axes, IcaConfig};
use neuraxis::harness::{evaluate, GenerationRecord, Metric, Target, TextMetrics};
use neuraxis::rng::rng;
use neuraxis::signal::{connectivity_windows, edge_pca, fit_edge_pca, EdgeSequence, Method, PhaseSeries, WindowSpec};
use neuraxis::stats::{perm_test, ridge_solve, PermStat};
use neuraxis::steermodel::{forward, generate, ModelConfig, ModelWeights, SteerSpec};
use neuraxis::synthgen::{gen_lexicon, gen_recording, gen_word_stream, plant_truth, SynthSpec};

fn gauss(r: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, r)
}

fn wrap(p: f64) -> f64 {
    let w = (p + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    if w == -std::f64::consts::PI { std::f64::consts::PI } else { w }
}

fn phases(n_ch: usize, n: usize, seed: u64) -> PhaseSeries {
    let mut r = rng(seed);
    let base: Vec<f64> = (0..n).map(|t| 0.1 * t as f64).collect();
    let m = DMatrix::from_fn(n_ch, n, |c, t| wrap(base[t] + c as f64 * 0.3 + 0.8 * gauss(&mut r)));
    PhaseSeries { phases: m, band: (4.0, 8.0), sfreq: 50.0 }
}

fn model(seed: u64) -> ModelWeights {
    ModelWeights::init(&ModelConfig {
        vocab_size: 17,
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        d_ff: 16,
        context_len: 12,
        seed,
    })
    .unwrap()
}

fn unit_vec(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let v: Vec<f64> = (0..d).map(|_| gauss(&mut r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plv_bounded_symmetric_and_shift_invariant(seed in 0u64..10_000, shift in -3.0f64..3.0) {
        let ph = phases(4, 400, seed);
        let win = WindowSpec { length_s: 2.0, step_s: 1.0, edge_trim_s: 0.0 };
        let a = connectivity_windows(&ph, &win, Method::Plv).unwrap();
        prop_assert!(a.edges.iter().all(|v| (0.0..=1.0).contains(v)));

        let shifted = PhaseSeries { phases: ph.phases.map(|p| wrap(p + shift)), ..ph.clone() };
        let b = connectivity_windows(&shifted, &win, Method::Plv).unwrap();
        for (x, y) in a.edges.iter().zip(b.edges.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }

        // swapping two channels leaves their edge unchanged
        let mut swapped = ph.phases.clone();
        swapped.swap_rows(0, 1);
        let c = connectivity_windows(&PhaseSeries { phases: swapped, ..ph.clone() }, &win, Method::Plv).unwrap();
        for w in 0..a.edges.nrows() {
            prop_assert!((a.edges[(w, 0)] - c.edges[(w, 0)]).abs() < 1e-12);
        }

        let wp = connectivity_windows(&ph, &win, Method::Wpli).unwrap();
        prop_assert!(wp.edges.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn window_count_formula(dur in 3.0f64..40.0, len in 0.5f64..3.0, frac in 0.1f64..1.0) {
        let sfreq = 100.0;
        let step = (len * frac * sfreq).round().max(1.0) / sfreq;
        let len = (len * sfreq).round() / sfreq;
        let n = (dur * sfreq).round() as usize;
        let win = WindowSpec { length_s: len, step_s: step, edge_trim_s: 0.0 };
        let (starts, _) = win.starts(n, sfreq).unwrap();
        let expect = ((n as f64 / sfreq - len) / step + 1e-9).floor() as usize + 1;
        prop_assert_eq!(starts.len(), expect);
        prop_assert!(starts.windows(2).all(|s| s[1] - s[0] == (step * sfreq).round() as usize));
    }

    #[test]
    fn edge_pca_transform_is_affine(seed in 0u64..10_000, a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let seq = |r: &mut rand_pcg::Pcg64| EdgeSequence {
            window_times: (0..30).map(|t| t as f64).collect(),
            edges: DMatrix::from_fn(30, 6, |_, _| gauss(r)),
            method: Method::Plv,
            n_channels: 4,
        };
        let seqs = vec![seq(&mut r), seq(&mut r)];
        let basis = fit_edge_pca(&seqs, 3).unwrap();
        let x = DMatrix::from_fn(5, 6, |_, _| gauss(&mut r));
        let y = DMatrix::from_fn(5, 6, |_, _| gauss(&mut r));
        let mix = &x * a + &y * (1.0 - a);
        let lhs = basis.transform(&mix);
        let rhs = basis.transform(&x) * a + basis.transform(&y) * (1.0 - a);
        prop_assert!((lhs - rhs).amax() < 1e-10);
        // orthonormal rows
        let g = &basis.basis * basis.basis.transpose();
        prop_assert!((g - DMatrix::identity(3, 3)).amax() < 1e-8);
        let states = edge_pca(&seqs, 3, Some(&basis)).unwrap();
        prop_assert!(states[0].window_times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn ridge_satisfies_normal_equations(seed in 0u64..10_000, log_alpha in -2.0f64..4.0) {
        let alpha = 10f64.powf(log_alpha);
        let mut r = rng(seed);
        let x = DMatrix::from_fn(40, 5, |_, j| gauss(&mut r) * (j + 1) as f64 + j as f64);
        let y = DMatrix::from_fn(40, 2, |_, _| gauss(&mut r));
        let fit = ridge_solve(&x, &y, alpha, false).unwrap();
        let mean_x = DVector::from_fn(5, |j, _| x.column(j).mean());
        let mean_y = DVector::from_fn(2, |j, _| y.column(j).mean());
        let mut xc = x.clone();
        let mut yc = y.clone();
        for mut row in xc.row_iter_mut() { row -= mean_x.transpose(); }
        for mut row in yc.row_iter_mut() { row -= mean_y.transpose(); }
        let lhs = (xc.transpose() * &xc + DMatrix::identity(5, 5) * alpha) * &fit.weights;
        let rhs = xc.transpose() * &yc;
        prop_assert!((&lhs - &rhs).norm() / rhs.norm().max(1e-300) < 1e-8);
    }

    #[test]
    fn perm_p_is_add_one_smoothed(seed in 0u64..10_000, shift in 0.0f64..3.0, n_perm in 100usize..400) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..12).map(|_| gauss(&mut r) + shift).collect();
        let b: Vec<f64> = (0..9).map(|_| gauss(&mut r)).collect();
        let res = perm_test(&a, &b, PermStat::CohenD, n_perm, seed).unwrap();
        prop_assert!(res.p > 0.0 && res.p <= 1.0);
        let k = (res.p * (n_perm + 1) as f64).round();
        prop_assert!((res.p - k / (n_perm + 1) as f64).abs() < 1e-12);
        prop_assert_eq!(res, perm_test(&a, &b, PermStat::CohenD, n_perm, seed).unwrap());
    }

    #[test]
    fn logits_ignore_future_tokens(seed in 0u64..1000, t in 0usize..7, tok in 0u32..17) {
        let w = model(seed);
        let mut r = rng(seed + 1);
        let toks: Vec<u32> = (0..8).map(|_| r.random_range(0..17)).collect();
        let mut alt = toks.clone();
        alt[t + 1] = tok;
        let (a, _) = forward(&w, &toks, None).unwrap();
        let (b, _) = forward(&w, &alt, None).unwrap();
        let v = 17;
        prop_assert_eq!(&a[..(t + 1) * v], &b[..(t + 1) * v]);
    }

    #[test]
    fn steering_leaves_earlier_layers_bit_identical(seed in 0u64..1000, layer in 0usize..4, s in -8.0f64..8.0) {
        let w = model(seed);
        let toks: Vec<u32> = (0..6).map(|i| (i * 5 % 17) as u32).collect();
        let steer = SteerSpec::new(layer, unit_vec(8, seed), s).unwrap();
        let (_, base) = forward(&w, &toks, None).unwrap();
        let (_, st) = forward(&w, &toks, Some(&steer)).unwrap();
        for l in 0..layer {
            prop_assert_eq!(&base.layers[l], &st.layers[l]);
        }
    }

    #[test]
    fn negated_direction_and_strength_generate_identically(seed in 0u64..1000, s in -6.0f64..6.0, layer in 0usize..4) {
        let w = model(seed);
        let dir = unit_vec(8, seed ^ 0x55);
        let neg: Vec<f64> = dir.iter().map(|x| -x).collect();
        let a = generate(&w, &[1, 2, 3], 10, 1.0, seed, Some(&SteerSpec::new(layer, dir, s).unwrap())).unwrap();
        let b = generate(&w, &[1, 2, 3], 10, 1.0, seed, Some(&SteerSpec::new(layer, neg, -s).unwrap())).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn evaluate_ignores_record_order(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut recs = Vec::new();
        for p in 0..5 {
            for &s in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
                for k in 0..2 {
                    let v = 0.3 * s + gauss(&mut r);
                    recs.push(GenerationRecord {
                        prompt_id: p,
                        strength: s,
                        sample_id: k,
                        tokens: vec![],
                        adapter_scores: vec![v],
                        ppl: 10.0 + r.random::<f64>(),
                        metrics: TextMetrics { logfreq_mean: v, function_ratio: 0.5, animate_rate: 0.1, noun_ratio: 0.2, n_labeled: 3 },
                        truncated: false,
                    });
                }
            }
        }
        let t = Target::Metric(Metric::LogfreqMean);
        let a = evaluate(&recs, t, 200, 3).unwrap();
        let mut shuffled = recs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        prop_assert_eq!(a, evaluate(&shuffled, t, 200, 3).unwrap());
    }

    #[test]
    fn ica_scores_are_white_and_self_match(seed in 0u64..200) {
        let mut r = rng(seed);
        let n = 400;
        let src = DMatrix::from_fn(n, 3, |_, _| {
            let u: f64 = r.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        });
        let mix = DMatrix::from_fn(3, 6, |_, _| gauss(&mut r));
        let x = src * mix;
        let ids: Vec<u32> = (0..n as u32).collect();
        let basis = fit_ica_matrix(&x, &ids, &IcaConfig { n_axes: 3, seed, ..IcaConfig::default() }).unwrap();
        let s = &basis.scores;
        let cov = {
            let mut c = s.clone();
            for mut col in c.column_iter_mut() {
                let m = col.mean();
                col.add_scalar_mut(-m);
            }
            c.transpose() * &c / n as f64
        };
        prop_assert!((cov - DMatrix::identity(3, 3)).amax() < 1e-6);
        let again = fit_ica_matrix(&x, &ids, &IcaConfig { n_axes: 3, seed, ..IcaConfig::default() }).unwrap();
        prop_assert_eq!(&basis.scores, &again.scores);
        let m = match_axes(s, s).unwrap();
        for (i, p) in m.pairs.iter().enumerate() {
            prop_assert_eq!((p.a, p.b), (i, i));
            prop_assert!((p.r - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn synthetic_data_is_a_pure_function_of_spec_and_seed() {
    let spec = SynthSpec { n_subjects: 2, n_runs: 1, duration_s: 20.0, vocab_size: 60, ..SynthSpec::default() };
    let make = |spec: &SynthSpec| {
        let lex = gen_lexicon(spec).unwrap();
        let truth = plant_truth(spec, &lex).unwrap();
        let ev = gen_word_stream(spec, &lex, 0).unwrap();
        let rec = gen_recording(spec, &truth, &ev, 1, 0).unwrap();
        (ev, rec)
    };
    let (e1, r1) = make(&spec);
    let (e2, r2) = make(&spec);
    assert_eq!(e1, e2);
    assert_eq!(r1, r2);
    assert!(e1.windows(2).all(|w| w[0].onset <= w[1].onset));
    assert!(e1.iter().all(|e| e.onset < e.offset && (e.word_id as usize) < spec.vocab_size));
    let (e3, r3) = make(&SynthSpec { seed: spec.seed + 1, ..spec.clone() });
    assert!(e3 != e1 || r3 != r1);
}
