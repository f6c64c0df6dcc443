use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use sinklab::data::{default_spec, estimate_bigram, sample_batch, stationary, Variant};
use sinklab::model::{init_model, ModelConfig, ModelState};
use sinklab::optim::{adam_step, AdamConfig, AdamState, Optimizer, OptimizerConfig};
use sinklab::theory::{
    closed_gradients, flow_integrate, gradient_fd_error, projected_min_eigenvalue, random_instance, simplified_loss,
    stable_gram, FlowConfig, FlowMode,
};
use sinklab::Graph64;

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Bb), Just(Variant::BbNoBos), Just(Variant::Bs)]
}

/// A corpus over `k` letters where every letter occurs, long enough to estimate from.
fn corpus() -> impl Strategy<Value = (Vec<u8>, usize)> {
    (3usize..10).prop_flat_map(|k| {
        (prop::collection::vec(0..k as u8, 10 * k * k..10 * k * k + 400), Just(k)).prop_map(|(mut body, k)| {
            body.extend(0..k as u8);
            (body.into_iter().map(|b| b'a' + b).collect(), k)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn estimated_chain_is_stochastic_with_fixed_point((text, k) in corpus(), smoothing in 0.05f64..2.0) {
        let spec = estimate_bigram(&text, k, smoothing).unwrap();
        let v = spec.vocab_size();
        for r in 0..v {
            assert_abs_diff_eq!(spec.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let pi = spec.pi();
        assert_abs_diff_eq!(pi.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for j in 0..v {
            let next: f64 = (0..v).map(|i| pi[i] * spec.row(i)[j]).sum();
            assert_abs_diff_eq!(next, pi[j], epsilon = 1e-10);
        }
        assert_eq!(stationary(spec.transition(), v).unwrap(), pi.to_vec());
    }

    #[test]
    fn sampled_batches_obey_the_task(seed in any::<u64>(), var in variant(), b in 1usize..5, n in 2usize..80) {
        let spec = default_spec();
        let batch = sample_batch(&spec, b, n, var, seed).unwrap();
        prop_assert_eq!(&batch, &sample_batch(&spec, b, n, var, seed).unwrap());
        let first = usize::from(var.has_bos());
        for bi in 0..b {
            let row = batch.row(bi);
            prop_assert_eq!(row.len(), n + 1);
            prop_assert_eq!(row[0] == spec.bos_id(), var.has_bos());
            prop_assert!(row[first..].iter().all(|&t| t < spec.vocab_size()));
            prop_assert!(!spec.is_trigger(row[first]));
            for i in first + 1..n {
                let copies = spec.is_trigger(row[i]);
                prop_assert_eq!(batch.is_trigger_output(bi, i), copies);
                if copies && var != Variant::Bs {
                    prop_assert_eq!(row[i + 1], row[i - 1]);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_is_causal_and_normalized(l in 1usize..12, vals in prop::collection::vec(-30.0f64..30.0, 288)) {
        let mut g = Graph64::new();
        let x = g.constant(vals[..2 * l * l].to_vec(), &[2, l, l]).unwrap();
        let y = g.masked_softmax_rows(x).unwrap();
        let a = g.value(y);
        for r in 0..2 * l {
            let i = r % l;
            let row = &a[r * l..(r + 1) * l];
            prop_assert!(row[i + 1..].iter().all(|&w| w == 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(d in 2usize..40, scale in 30.0f64..100.0, vals in prop::collection::vec(-1.0f64..1.0, 80)) {
        let row: Vec<f64> = vals[..d].iter().map(|v| v * scale).collect();
        let m = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        // The output variance is var / (var + eps); non-degenerate here means eps / var < 1e-6.
        prop_assume!(var > 10.0);
        let mut g = Graph64::new();
        let x = g.constant(row, &[1, d]).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        let out = g.value(y);
        let mean = out.iter().sum::<f64>() / d as f64;
        let v = out.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((v - 1.0).abs() < 1e-6, "variance {v}");
    }

    #[test]
    fn adam_equalizes_update_magnitudes(signs in prop::collection::vec(any::<bool>(), 2..20), mags in prop::collection::vec(1e-6f64..1e3, 1..15)) {
        let n = signs.len();
        let mut p = vec![0.0; n];
        let mut s = AdamState::new(n, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        for c in mags {
            let g: Vec<f64> = signs.iter().map(|&pos| if pos { c } else { -c }).collect();
            let before = p.clone();
            adam_step(&mut p, &g, &mut s).unwrap();
            let step0 = (p[0] - before[0]).abs();
            for i in 1..n {
                prop_assert_eq!((p[i] - before[i]).abs(), step0);
            }
        }
    }

    #[test]
    fn optimizer_replay_is_bitwise(grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..20), sgd in any::<bool>()) {
        let cfg = if sgd { OptimizerConfig::sgd() } else { OptimizerConfig::adam() };
        let run = || {
            let mut p = vec![0.5, -0.25, 1.0, 2.0, -3.0, 0.0];
            let mut opt = Optimizer::new(&cfg, 6);
            for g in &grads {
                opt.step(&mut p, g).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn tiny_model(seed: u64) -> ModelState<f64> {
    let cfg = ModelConfig { d_model: 8, d_mlp: 16, init_std: 0.3, seed, ..ModelConfig::new("attn+mlp", 65, 33) };
    init_model(&cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn changing_a_token_leaves_earlier_logits_alone(seed in any::<u64>(), j in 1usize..20) {
        let spec = default_spec();
        let m = tiny_model(seed);
        let batch = sample_batch(&spec, 1, 20, Variant::Bb, seed).unwrap();
        let base = m.forward(&batch, true).unwrap().capture.unwrap().logits;
        let mut toks = batch.tokens().to_vec();
        toks[j] = (toks[j] + 1) % 64;
        let moved = m.forward(&batch.with_tokens(toks).unwrap(), true).unwrap().capture.unwrap().logits;
        prop_assert_eq!(&base[..j * 65], &moved[..j * 65]);
    }

    #[test]
    fn probing_is_read_only(seed in any::<u64>()) {
        let spec = default_spec();
        let m = tiny_model(seed);
        let before = m.flat();
        let batch = sample_batch(&spec, 2, 16, Variant::Bb, seed).unwrap();
        let plain = m.forward(&batch, false).unwrap().loss;
        let probed = sinklab::optim::probe(&m, &batch, &spec, 0, None, 0.1).unwrap();
        prop_assert_eq!(plain.to_bits(), probed.eval_loss.to_bits());
        prop_assert_eq!(m.forward(&batch, false).unwrap().loss.to_bits(), plain.to_bits());
        prop_assert!(m.flat().iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn closed_gradients_are_negative_loss_gradients(seed in any::<u64>(), vi in 0usize..3) {
        let v = [3, 8, 64][vi];
        let sp = random_instance(v, seed);
        prop_assert!(gradient_fd_error(&sp, 2 * v, 1e-4, seed) < 1e-6);
    }

    #[test]
    fn stable_phase_is_stationary_with_psd_hessian(seed in any::<u64>(), a in -3.0f64..6.0, c in -5.0f64..5.0) {
        let mut sp = random_instance(8, seed);
        sp.set_stable_phase(a, c);
        let (da, db) = closed_gradients(&sp);
        let norm = da.iter().chain(&db).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm < 1e-10, "gradient norm {norm}");
        prop_assert!(simplified_loss(&sp) < 1e-12);
        let g = stable_gram(&sp);
        prop_assert!(g.symmetric_eigenvalues().min() >= -1e-10);
        prop_assert!(projected_min_eigenvalue(&g) > 0.0);
    }

    #[test]
    fn flow_loss_never_increases(seed in any::<u64>(), mode in prop_oneof![Just(FlowMode::Joint), Just(FlowMode::FixAlpha), Just(FlowMode::FixBeta)]) {
        let sp = random_instance(8, seed);
        let cfg = FlowConfig { mode, t_end: 50.0, snapshots: 40, ..FlowConfig::default() };
        let traj = flow_integrate(&sp, &cfg).unwrap();
        prop_assert!(traj.loss_increases(5e-6).is_empty());
    }
}
