use pgat::autodiff::{grad_check, GradCheckMode, Tape, Tensor};
use pgat::losses::{
    consistency_loss, consistency_value, group_loss, prompt_quality, quality_weights, ConsNorm, ConsistencyKind,
};
use pgat::model::{aggregate_candidates, Model, ModelConfig};
use pgat::synth::{generate_scene, target_mask, SceneSpec};
use pgat::text::{build_prompt_group, shuffle_group, Task, TemplateBank, TextEncoder, TierPolicy, NUM_CLASSES};
use proptest::prelude::*;

fn losses() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..5.0, 2..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_sum_to_one_and_are_anti_monotone(l in losses(), tau in 0.05f64..5.0) {
        let w = quality_weights(&l, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for i in 0..l.len() {
            for j in 0..l.len() {
                if l[i] < l[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn weights_shift_invariant(l in losses(), tau in 0.05f64..5.0, c in -10.0f64..10.0) {
        let a = quality_weights(&l, tau).unwrap();
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let b = quality_weights(&shifted, tau).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn group_loss_is_scaled_negative_variance(l in losses(), tau in 0.05f64..5.0) {
        let (_, qt) = prompt_quality(&l).unwrap();
        prop_assert!(qt.iter().sum::<f64>().abs() <= 1e-9);
        let w = quality_weights(&l, tau).unwrap();
        let g = group_loss(&qt, &w).unwrap();
        let closed = -qt.iter().map(|q| q * q).sum::<f64>() / tau;
        prop_assert!((g - closed).abs() <= 1e-9);
        prop_assert!(g <= 1e-12);
    }

    #[test]
    fn tau_scaling(l in losses(), tau in 0.1f64..3.0, c in 0.5f64..4.0) {
        let (_, qt) = prompt_quality(&l).unwrap();
        let g1 = group_loss(&qt, &quality_weights(&l, tau).unwrap()).unwrap();
        let g2 = group_loss(&qt, &quality_weights(&l, tau * c).unwrap()).unwrap();
        prop_assert!((g2 - g1 / c).abs() <= 1e-9);
        let argmax = |w: Vec<f64>| w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmax(quality_weights(&l, tau).unwrap()), argmax(quality_weights(&l, tau * c).unwrap()));
    }

    #[test]
    fn consistency_non_negative(zs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..5)) {
        for kind in [ConsistencyKind::StopGradReference, ConsistencyKind::FullPairwise] {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<_> = zs.iter().map(|z| tape.var(Tensor::from_f64(vec![2, 2], z).unwrap())).collect();
            let c = consistency_loss(&mut tape, &vars, ConsNorm::MeanPerPixel, kind).unwrap();
            prop_assert!(tape.item(c) >= 0.0);
            prop_assert!((tape.item(c) - consistency_value(&zs, ConsNorm::MeanPerPixel, kind)).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_product_gradients(a in prop::collection::vec(-2.0f64..2.0, 3), b in prop::collection::vec(-2.0f64..2.0, 3)) {
        let err = grad_check(
            |t: &mut Tape<f64>, x| {
                let s = t.softmax(x[0])?;
                let p = t.mul(s, x[1])?;
                let e = t.exp(p)?;
                t.sum(e)
            },
            &[Tensor::from_f64(vec![3], &a).unwrap(), Tensor::from_f64(vec![3], &b).unwrap()],
            1e-5,
            GradCheckMode::Plain,
        ).unwrap();
        prop_assert!(err <= 1e-5);
    }

    #[test]
    fn union_monotonicity(seed in 0u64..10_000) {
        let scene = generate_scene(&SceneSpec::with_size(32).with_seed(seed), "s").unwrap();
        let t1 = target_mask(&scene, Task::T1, None).unwrap();
        let mut total = 0;
        for c in 0..NUM_CLASSES {
            let t2 = target_mask(&scene, Task::T2, Some(c)).unwrap();
            prop_assert!(t2.bits.iter().zip(&t1.bits).all(|(a, b)| a <= b));
            total += t2.popcount();
        }
        prop_assert!(total >= t1.popcount());
    }
}

#[test]
fn shuffle_is_uniform_over_permutations() {
    let g = build_prompt_group(&TemplateBank::default(), "s", Task::T1, None, 3, TierPolicy::Mixed, 0).unwrap();
    let mut counts = std::collections::HashMap::new();
    let n = 10_000;
    for seed in 0..n {
        let s = shuffle_group(&g, seed);
        assert_eq!(s.mask_id, g.mask_id);
        let key: Vec<String> = s.prompts.iter().map(|p| p.text.clone()).collect();
        *counts.entry(key).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = n as f64 / 6.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 5 degrees of freedom, 99.9th percentile
    assert!(chi2 < 20.52, "chi-square {chi2}");
    for &c in counts.values() {
        assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() <= 0.02);
    }
}

#[test]
fn gradients_reach_image_encoder_and_decoder_only() {
    let model = Model::new(ModelConfig {
        channels: 4,
        ..ModelConfig::with_size(16)
    })
    .unwrap();
    let enc = TextEncoder::new();
    let mut tape = Tape::<f64>::new();
    let b = model.bind(&mut tape);
    let image: Vec<f64> = (0..256).map(|i| (i % 7) as f64 / 7.0).collect();
    let outs = model
        .forward_group(&mut tape, &b, &image, &["nuclei", "all nuclei"], &enc)
        .unwrap();
    let s0 = tape.sum(outs[0].z).unwrap();
    let s1 = tape.sum(outs[1].z).unwrap();
    let s = tape.add(s0, s1).unwrap();
    let g = tape.backward(s).unwrap();
    let norm = |name: &str| {
        let i = model.param_index(name).unwrap();
        g.param(pgat::autodiff::ParamId(i))
            .map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f64>())
    };
    assert!(norm("enc0.w") > 0.0);
    assert!(norm("dec1.w") > 0.0);
    assert!(norm("film.scale.w") > 0.0);
    // the text projection is frozen and never registered as a parameter
    assert_eq!(g.params().len(), model.params.len());
}

#[test]
fn full_selection_permutation_invariant() {
    let vals: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0 + i as f64 * 0.01).collect();
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(vec![3, 2, 2], &vals).unwrap());
    let (za, _) = aggregate_candidates(&mut tape, a, &[0.1, 0.2, 0.3], 3).unwrap();
    let mut perm = vals[8..].to_vec();
    perm.extend_from_slice(&vals[..8]);
    let b = tape.constant(Tensor::from_f64(vec![3, 2, 2], &perm).unwrap());
    let (zb, _) = aggregate_candidates(&mut tape, b, &[0.3, 0.1, 0.2], 3).unwrap();
    assert_eq!(tape.value(za), tape.value(zb));
}
