use goalcons::evaluation::{in_top_k, multiview_aggregate, topk_classmean_recall, Prediction};
use goalcons::hierarchy::{marginalize_action_distribution, CountMatrix, GoalLevel};
use goalcons::losses::{consistency_loss_ce, remap_to_goal, softmax, total_loss, ConditionalTable};
use goalcons::model::ForwardOutput;
use goalcons::{build_cooccurrence, derive_conditional, forward, init_params, FeatureSequence, LabelSpace, LossConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn space(actions: usize, goals: &[usize]) -> LabelSpace {
    LabelSpace {
        num_fine_actions: actions,
        goal_levels: goals
            .iter()
            .enumerate()
            .map(|(i, &n)| GoalLevel {
                name: format!("level{i}"),
                num_goals: n,
            })
            .collect(),
        action_to_verb: (0..actions).collect(),
        action_to_noun: (0..actions).collect(),
        num_verbs: actions,
        num_nouns: actions,
    }
}

/// Random column-stochastic `goals × actions` table from raw weights.
fn column_stochastic(goals: usize, actions: usize, raw: &[f64]) -> Vec<f64> {
    let mut t = raw[..goals * actions].to_vec();
    for c in 0..actions {
        let s: f64 = (0..goals).map(|l| t[l * actions + c]).sum();
        for l in 0..goals {
            t[l * actions + c] /= s;
        }
    }
    t
}

fn dims_and_weights(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(l, c)| (Just(l), Just(c), prop::collection::vec(0.01f64..1.0, l * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conditional_columns_are_distributions(
        (goals, actions, raw) in (1usize..8, 1usize..8)
            .prop_flat_map(|(l, c)| (Just(l), Just(c), prop::collection::vec(0u64..6, l * c))),
        eps in prop_oneof![Just(0.0), 1e-9f64..1.0],
    ) {
        let counts = CountMatrix::from_counts(goals, actions, raw.clone()).unwrap();
        let has_zero_column = (0..actions).any(|c| counts.column_total(c) == 0);
        let model = match derive_conditional(&counts, eps) {
            Ok(m) => m,
            Err(_) => {
                prop_assert!(counts.total() == 0 || (eps == 0.0 && has_zero_column));
                return Ok(());
            }
        };
        for c in 0..actions {
            let col = model.conditional_column(c);
            prop_assert!(col.iter().all(|&v| v >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cooccurrence_counts_ignore_record_order(
        pairs in prop::collection::vec((0usize..5, 0usize..3), 1..60),
        seed in any::<u64>(),
    ) {
        let space = space(5, &[3]);
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = build_cooccurrence(&pairs, &space, 0).unwrap();
        let b = build_cooccurrence(&shuffled, &space, 0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn remap_stays_on_the_simplex((goals, actions, raw) in dims_and_weights(64), logits in prop::collection::vec(-8.0f64..8.0, 64)) {
        let table = column_stochastic(goals, actions, &raw);
        let probs = softmax(&logits[..actions]);
        let g = remap_to_goal(&probs, ConditionalTable::new(&table, goals, actions).unwrap()).unwrap();
        prop_assert!(g.iter().all(|&v| v >= 0.0));
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn consistency_ce_is_invariant_under_action_permutation(
        (goals, actions, raw) in dims_and_weights(12),
        logits in prop::collection::vec(-6.0f64..6.0, 12),
        goal_pick in any::<prop::sample::Index>(),
        perm_keys in prop::collection::vec(any::<u32>(), 12),
    ) {
        let table = column_stochastic(goals, actions, &raw);
        let logits = &logits[..actions];
        let goal = goal_pick.index(goals);
        let mut perm: Vec<usize> = (0..actions).collect();
        perm.sort_by_key(|&i| (perm_keys[i], i));

        let permuted_logits: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
        let mut permuted_table = vec![0.0; goals * actions];
        for l in 0..goals {
            for (j, &i) in perm.iter().enumerate() {
                permuted_table[l * actions + j] = table[l * actions + i];
            }
        }
        let (a, ga) = consistency_loss_ce(logits, ConditionalTable::new(&table, goals, actions).unwrap(), goal, 1e-12).unwrap();
        let (b, gb) = consistency_loss_ce(&permuted_logits, ConditionalTable::new(&permuted_table, goals, actions).unwrap(), goal, 1e-12).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((gb[j] - ga[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn raising_the_best_aligned_logit_never_raises_consistency_loss(
        (goals, actions, raw) in dims_and_weights(10),
        logits in prop::collection::vec(-6.0f64..6.0, 10),
        goal_pick in any::<prop::sample::Index>(),
        bump in 1e-3f64..5.0,
    ) {
        let table = column_stochastic(goals, actions, &raw);
        let goal = goal_pick.index(goals);
        let row = &table[goal * actions..(goal + 1) * actions];
        let best = (0..actions).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let t = ConditionalTable::new(&table, goals, actions).unwrap();
        let mut raised = logits[..actions].to_vec();
        let (before, _) = consistency_loss_ce(&raised, t, goal, 1e-12).unwrap();
        raised[best] += bump;
        let (after, _) = consistency_loss_ce(&raised, t, goal, 1e-12).unwrap();
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn zero_lambda_total_is_fine_plus_goal(
        fine in prop::collection::vec(-5.0f64..5.0, 6),
        goal in prop::collection::vec(-5.0f64..5.0, 3),
        raw in prop::collection::vec(0u64..5, 18),
        fine_label in 0usize..6,
        goal_label in 0usize..3,
    ) {
        let counts = CountMatrix::from_counts(3, 6, raw).unwrap();
        prop_assume!(counts.total() > 0);
        let hierarchy = vec![derive_conditional(&counts, 1e-6).unwrap()];
        let out = ForwardOutput { fine_logits: fine, goal_logits: vec![goal], hidden: vec![] };
        let base = LossConfig { use_consistency: false, ..LossConfig::default() };
        let zero = LossConfig { lambda_cons: 0.0, ..LossConfig::default() };
        let a = total_loss(&out, fine_label, &[goal_label], &[], &base).unwrap();
        let b = total_loss(&out, fine_label, &[goal_label], &hierarchy, &zero).unwrap();
        prop_assert_eq!(a.total, b.total);
        prop_assert_eq!(a.total, a.fine_ce + a.goal_ce[0]);
        prop_assert_eq!(a.grad_fine_logits, b.grad_fine_logits);
    }

    #[test]
    fn recall_ignores_sample_order(
        samples in prop::collection::vec((prop::collection::vec(0u8..4, 6), 0usize..6), 1..40),
        k in 1usize..6,
        rotate in any::<prop::sample::Index>(),
    ) {
        let preds: Vec<Vec<f64>> = samples.iter().map(|s| s.0.iter().map(|&v| v as f64).collect()).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.1).collect();
        let a = topk_classmean_recall(&preds, &labels, k, 6).unwrap();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.rotate_left(rotate.index(preds.len()));
        order.reverse();
        let p2: Vec<Vec<f64>> = order.iter().map(|&i| preds[i].clone()).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let b = topk_classmean_recall(&p2, &l2, k, 6).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn identical_views_give_per_sequence_recall(
        sequences in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 5), 0usize..5), 1..20),
        views in 1usize..4,
        k in 1usize..5,
    ) {
        let mut preds = Vec::new();
        for (i, (raw, label)) in sequences.iter().enumerate() {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let probs: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / 5.0) / total).collect();
            for v in 0..views {
                preds.push(Prediction {
                    probs: probs.clone(),
                    sequence_id: format!("s{i}"),
                    view_id: format!("view{v}"),
                    fine_label: *label,
                    verb_label: *label,
                    noun_label: *label,
                    is_unseen: false,
                    is_tail: false,
                });
            }
        }
        let merged = multiview_aggregate(&preds).unwrap();
        let one_per_sequence: Vec<&Prediction> = preds.iter().filter(|p| p.view_id == "view0").collect();
        let a = topk_classmean_recall(
            &merged.iter().map(|p| p.probs.clone()).collect::<Vec<_>>(),
            &merged.iter().map(|p| p.fine_label).collect::<Vec<_>>(),
            k,
            5,
        ).unwrap();
        let b = topk_classmean_recall(
            &one_per_sequence.iter().map(|p| p.probs.clone()).collect::<Vec<_>>(),
            &one_per_sequence.iter().map(|p| p.fine_label).collect::<Vec<_>>(),
            k,
            5,
        ).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Marginalising keeps a hit whenever the true action holds the majority
    /// of the mass: its verb then outweighs every other verb.
    #[test]
    fn marginalising_keeps_majority_hits(
        raw in prop::collection::vec(0.0f64..1.0, 8),
        verbs in prop::collection::vec(0usize..3, 8),
        label in 0usize..8,
        k in 1usize..4,
    ) {
        let rest: f64 = raw.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, v)| v).sum::<f64>() + 1e-9;
        let mut probs: Vec<f64> = raw.iter().map(|v| 0.45 * v / rest).collect();
        probs[label] = 0.55;
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        prop_assume!(in_top_k(&probs, label, k));
        let verb_probs = marginalize_action_distribution(&probs, &verbs, 3).unwrap();
        prop_assert!((verb_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(in_top_k(&verb_probs, verbs[label], k));
    }

    #[test]
    fn forward_ignores_snippet_order_and_duplication(
        raw in prop::collection::vec(-2.0f64..2.0, 4 * 6),
        seed in any::<u64>(),
        shift in 1usize..4,
    ) {
        let space = space(5, &[3, 2]);
        let params = init_params(&space, 6, 7, seed).unwrap();
        let seq = FeatureSequence::new(4, 6, raw.clone()).unwrap();
        let mut rotated = raw.clone();
        rotated.rotate_left(6 * shift);
        let doubled: Vec<f64> = raw.iter().chain(raw.iter()).copied().collect();
        let a = forward(&params, &seq).unwrap();
        let b = forward(&params, &FeatureSequence::new(4, 6, rotated).unwrap()).unwrap();
        let c = forward(&params, &FeatureSequence::new(8, 6, doubled).unwrap()).unwrap();
        for other in [&b, &c] {
            for (x, y) in a.fine_logits.iter().zip(&other.fine_logits) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (gx, gy) in a.goal_logits.iter().zip(&other.goal_logits) {
                for (x, y) in gx.iter().zip(gy) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
        prop_assert_eq!(forward(&params, &seq).unwrap(), a);
    }
}
