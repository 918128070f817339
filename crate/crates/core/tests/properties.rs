use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rlmec::align::{align, edit_distance, error_token_set, token_weights};
use rlmec::codec::{format_locating_prompt, format_policy_prompt, format_rewrite_prompt, Vocab};
use rlmec::reward::{clip_reward, RewardVector, Sign};
use rlmec::synth::{
    gen_problem, grade, locate_first_error, oracle_rewrite, random_corruption, render_solution, Family, Op, Problem,
    Propagation, StepSolution,
};

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::ArithSeen), Just(Family::ArithUnseen)]
}

fn problem() -> impl Strategy<Value = Problem> {
    (family(), 2usize..=6, any::<u64>()).prop_map(|(f, d, s)| gen_problem(f, d, s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn answers_are_mod_100_and_ground_truth_grades(p in problem()) {
        prop_assert!(p.answer < 100);
        prop_assert!(p.operands.iter().all(|&v| v < 100));
        prop_assert_eq!(p.operators.len(), p.depth);
        let sol = render_solution(&p);
        prop_assert!(grade(&p, &sol));
        prop_assert_eq!(locate_first_error(&p, &sol), None);
        prop_assert_eq!(StepSolution::parse_text(&sol.render()).render(), sol.render());
    }

    #[test]
    fn questions_parse_back(p in problem()) {
        let q = Problem::from_question(p.id.clone(), p.family, &p.question).unwrap();
        prop_assert_eq!(q, p);
    }

    #[test]
    fn corruption_is_caught_at_or_before_its_step(p in problem(), seed in any::<u64>(), local in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prop = if local { Propagation::LocalOnly } else { Propagation::Propagate };
        if let Some((c, bad)) = random_corruption(&p, &mut rng, prop, None) {
            prop_assert!(!grade(&p, &bad));
            let k = locate_first_error(&p, &bad).unwrap();
            prop_assert_eq!(k, c.step_index);
            let v = oracle_rewrite(&p, &bad);
            prop_assert_eq!(v.first_error_step, Some(k));
            prop_assert!(grade(&p, &v.rewritten));
        }
    }

    #[test]
    fn codec_round_trips_prompts(p in problem(), seed in any::<u64>()) {
        let v = Vocab::default();
        let sol = render_solution(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_corruption(&p, &mut rng, Propagation::Propagate, None).map(|x| x.1).unwrap_or(sol.clone());
        for text in [
            format_policy_prompt(&p),
            format_locating_prompt(&p, &sol, &pred),
            format_rewrite_prompt(&p, &sol, &pred),
            sol.render(),
        ] {
            let ids = v.encode(&text).unwrap();
            prop_assert!(ids.iter().all(|&i| (i as usize) < v.size()));
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in prop::collection::vec(0u8..4, 0..10),
                                 b in prop::collection::vec(0u8..4, 0..10),
                                 c in prop::collection::vec(0u8..4, 0..10)) {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab, edit_distance(&b, &a));
        prop_assert!(ab <= edit_distance(&a, &c) + edit_distance(&c, &b));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(ab >= a.len().abs_diff(b.len()) && ab <= a.len().max(b.len()));
    }

    #[test]
    fn scripts_replay_and_cost_the_distance(a in prop::collection::vec(0u8..3, 0..12),
                                            b in prop::collection::vec(0u8..3, 0..12)) {
        let s = align(&a, &b);
        prop_assert_eq!(s.replay(&a, &b), Some(b.clone()));
        prop_assert_eq!(s.cost(), edit_distance(&a, &b));
        let errs = error_token_set(&a, &b);
        prop_assert!(errs.iter().all(|&j| j < b.len()));
        prop_assert!(errs.len() <= s.cost());
        let w = token_weights(b.len(), &errs, 1.0, 0.1).unwrap();
        prop_assert_eq!(w.weights.iter().filter(|&&x| x == 1.0).count(), errs.len());
    }

    #[test]
    fn rewards_stay_in_bounds(p in -0.5f64..1.5, probs in prop::collection::vec(0.0f64..=1.0, 0..30)) {
        for sign in [Sign::Negative, Sign::Positive] {
            let (lo, hi) = sign.bounds();
            let r = clip_reward(p, sign);
            prop_assert!(lo <= r && r <= hi);
            let rv = RewardVector::from_probs(probs.clone(), sign);
            prop_assert!(rv.check_bounds().is_ok());
            let u = RewardVector::uniform(probs.len(), sign);
            let extreme = if sign == Sign::Negative { lo } else { hi };
            prop_assert!(u.rewards.iter().all(|&x| x == extreme));
        }
    }

    #[test]
    fn ops_are_mod_100(a in 0u32..100, b in 0u32..100) {
        for op in [Op::Add, Op::Sub, Op::Mul] {
            prop_assert!(op.apply(a, b) < 100);
        }
    }
}
