use jepo_core::estimators::{
    jepo_grad_multi, jepo_grad_single, leave_one_out_means, ControlVariate, SampleBatch,
};
use jepo_core::numerics::{derive_rng, log_sum_exp};
use jepo_core::policy::{PolicyParams, PolicyShape};
use jepo_core::tasks::{make_semi_verifiable_task, make_verifiable_task, TaskSizes};
use jepo_core::trainer::{normalize_advantages, rl_advantages};
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = PolicyShape> {
    (2usize..=4, 1usize..=3, 0usize..=3, 1usize..=3, 1usize..=3)
        .prop_map(|(v, k, lc, la, p)| PolicyShape::new(v, k, lc, la, p).expect("valid shape"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(shape in shape_strategy(), seed in any::<u64>(), scale in 0.0f64..50.0) {
        let mut rng = derive_rng(seed, &[]);
        let mut p = PolicyParams::random(shape, scale, &mut rng);
        p.logits_mut()[0] = 1e-300;
        p.logits_mut()[1] = -123456.789012345;
        let back = PolicyParams::from_json(&p.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.shape(), p.shape());
        for (a, b) in back.logits().iter().zip(p.logits()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cot_distribution_normalizes(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = derive_rng(seed, &[]);
        let p = PolicyParams::random(shape, 2.0, &mut rng);
        let lps: Vec<f64> = shape.cot_space().iter().map(|c| p.logprob_cot(0, c).unwrap()).collect();
        prop_assert!((log_sum_exp(&lps).exp() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sampled_generations_are_well_formed(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = derive_rng(seed, &[]);
        let p = PolicyParams::random(shape, 2.0, &mut rng);
        for _ in 0..8 {
            let g = p.sample_generation(0, &mut rng).unwrap();
            prop_assert_eq!(*g.cot.last().unwrap(), shape.vocab.eoc());
            prop_assert_eq!(*g.answer.last().unwrap(), shape.vocab.eoa());
            prop_assert!(g.cot.len() <= shape.max_cot_len + 1);
            prop_assert!(g.answer.len() <= shape.max_ans_len + 1);
            prop_assert_eq!(g.format_valid, shape.is_format_valid(&g.cot));
            let lp = p.logprob_generation(0, &g.cot, &g.answer).unwrap();
            prop_assert!((lp - g.logp()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_advantages_are_clipped_and_sign_preserving(
        adv in prop::collection::vec(-1e3f64..1e3, 1..16),
        lo in -3.0f64..-0.1,
        hi in 0.1f64..3.0,
    ) {
        let out = normalize_advantages(&adv, lo, hi).unwrap();
        prop_assert_eq!(out.len(), adv.len());
        for (a, o) in adv.iter().zip(&out) {
            prop_assert!(*o >= lo && *o <= hi);
            prop_assert!(a * o >= 0.0);
        }
    }

    #[test]
    fn rl_advantages_are_clipped(rewards in prop::collection::vec(prop::bool::ANY, 2..12)) {
        let r: Vec<f64> = rewards.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        let out = rl_advantages(&r, -1.0, 1.0).unwrap();
        prop_assert!(out.iter().all(|v| v.abs() <= 1.0));
        if r.iter().all(|v| *v == r[0]) {
            prop_assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn leave_one_out_means_exclude_self(values in prop::collection::vec(-1e3f64..1e3, 2..12)) {
        let n = values.len() as f64;
        let total: f64 = values.iter().sum();
        for (v, b) in values.iter().zip(leave_one_out_means(&values)) {
            prop_assert!((b - (total - v) / (n - 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn estimators_are_pure_and_parts_sum(seed in any::<u64>(), n in 1usize..6) {
        let shape = PolicyShape::new(3, 2, 3, 2, 1).unwrap();
        let mut rng = derive_rng(seed, &[]);
        let p = PolicyParams::random(shape, 1.0, &mut rng);
        let a = shape.answer_space()[seed as usize % 13].clone();
        let draw = |s: u64| {
            let mut r = derive_rng(s, &[7]);
            let gens = (0..n).map(|_| p.sample_generation(0, &mut r).unwrap()).collect();
            SampleBatch::new(&p, 0, a.clone(), gens).unwrap()
        };
        let (b1, b2) = (draw(seed), draw(seed));
        for g in [
            (jepo_grad_single(&p, &b1, ControlVariate::LeaveOneOut).unwrap(), jepo_grad_single(&p, &b2, ControlVariate::LeaveOneOut).unwrap()),
            (jepo_grad_multi(&p, &b1, ControlVariate::LeaveOneOut).unwrap(), jepo_grad_multi(&p, &b2, ControlVariate::LeaveOneOut).unwrap()),
        ] {
            prop_assert!(g.0.total().iter().zip(g.1.total()).all(|(x, y)| x.to_bits() == y.to_bits()));
            let mut sum = vec![0.0; p.num_params()];
            for term in g.0.terms() {
                for (s, v) in sum.iter_mut().zip(g.0.part(term).unwrap()) {
                    *s += v;
                }
            }
            prop_assert!(sum.iter().zip(g.0.total()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn combined_score_is_max_of_train_and_eval(seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let task = make_semi_verifiable_task(seed, TaskSizes::default(), frac).unwrap();
        let shape = task.policy_shape().unwrap();
        for p in task.prompts.iter().copied().take(4) {
            for a in shape.answer_space().iter().step_by(7) {
                let rt = task.train_score(p, a).unwrap().unwrap_or(0.0);
                let re = task.eval_score(p, a).unwrap();
                let combined = rt + re * if rt == 0.0 { 1.0 } else { 0.0 };
                prop_assert_eq!(combined, rt.max(re));
                prop_assert!(combined >= rt);
            }
        }
    }

    #[test]
    fn task_generation_is_pure(seed in any::<u64>()) {
        let a = make_verifiable_task(seed, TaskSizes::default()).unwrap();
        let b = make_verifiable_task(seed, TaskSizes::default()).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
