use std::collections::BTreeSet;

use proptest::prelude::*;

use goal_align::align::SceneGroupedBatches;
use goal_align::checkpoint;
use goal_align::config::Config;
use goal_align::eval::retrieval_from_embeddings;
use goal_align::optim::lr_at;
use goal_align::params::ParamStore;
use goal_align::policy::{sample_goal, Origin};
use goal_align::rng::SeedRng;
use goal_align::sim::{generate_datasets, reset, Action, DataConfig, Dataset, SceneSpec, NUM_TYPES};
use goal_align::tensor::Tensor;

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f32>(), n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

fn one_hot_rows(n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|i| {
            let mut v = vec![0.0; d];
            v[i % d] = 1.0;
            v
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoints_round_trip_bitwise(
        entries in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z_]{1,6}){0,2}", tensor(), 0..6)
    ) {
        let mut ps = ParamStore::new();
        for (k, t) in entries {
            ps.insert(k, t).unwrap();
        }
        let bytes = checkpoint::to_bytes(&ps).unwrap();
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
        for ((a, ta), (b, tb)) in ps.iter().zip(back.iter()) {
            prop_assert_eq!(a, b);
            prop_assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn truncated_checkpoints_are_rejected(t in tensor(), cut in 1usize..16) {
        let mut ps = ParamStore::new();
        ps.insert("w", t).unwrap();
        let bytes = checkpoint::to_bytes(&ps).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(checkpoint::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn config_text_round_trips(steps in 1usize..100_000, lr in 1e-6f64..1.0, batch in 1usize..512, seeds in prop::collection::vec(0u64..100, 1..5)) {
        let mut cfg = Config::default();
        cfg.align.steps = steps;
        cfg.align.lr = lr;
        cfg.align.batch = batch * 2;
        cfg.ablation.seeds = seeds;
        let back = Config::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn perfect_embeddings_retrieve_everything(batches in 1usize..6, batch in 2usize..32, k in 1usize..6) {
        let z = one_hot_rows(batches * batch, batch);
        let r = retrieval_from_embeddings(&z, &z, k, batch).unwrap();
        prop_assert_eq!(r.per_batch.len(), batches);
        prop_assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn identical_goals_never_count(batch in 2usize..32) {
        // Every rival ties, and ties rank ahead of the query.
        let lang = vec![vec![1.0, 0.0]; batch];
        let r = retrieval_from_embeddings(&lang, &lang, 1, batch).unwrap();
        prop_assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn schedule_stays_in_range(step in 0i64..20_000, peak in 1e-6f64..1.0, warmup in 1u64..1000, decay in 1u64..10_000) {
        let lr = lr_at(step, peak, warmup, decay).unwrap();
        prop_assert!((0.0..=peak).contains(&lr));
        if step as u64 >= warmup + decay {
            prop_assert_eq!(lr, 0.0);
        }
        if step > 0 && (step as u64) <= warmup {
            prop_assert!(lr_at(step - 1, peak, warmup, decay).unwrap() < lr);
        }
    }

    #[test]
    fn sim_steps_stay_on_the_board(
        seed in any::<u64>(),
        actions in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0, -1.0f32..1.0), 1..60)
    ) {
        let mut rng = SeedRng::new(seed);
        let mut s = reset(&SceneSpec::sample(&mut rng), seed).unwrap();
        let n = s.scene.objects.len();
        for (dx, dy, grip) in actions {
            s = s.step(Action::new(dx, dy, grip));
            prop_assert!(s.scene.in_bounds(s.gripper_cell()));
            prop_assert_eq!(s.scene.objects.len(), n);
            for o in &s.scene.objects {
                prop_assert!(s.scene.in_bounds(o.pos));
                prop_assert!((o.type_id as usize) < NUM_TYPES);
            }
            if let Some(h) = s.held {
                prop_assert_eq!(s.scene.objects[h].pos, s.gripper_cell());
            }
        }
    }

    #[test]
    fn grouped_batches_cover_each_epoch_once(n in 8usize..200, half in 1usize..4, seed in any::<u64>()) {
        let batch = 2 * half;
        let mut it = SceneGroupedBatches::new(n, batch, SeedRng::new(seed)).unwrap();
        let mut shuffled = Vec::new();
        let mut sequential = Vec::new();
        for _ in 0..n {
            let b = it.next().unwrap();
            prop_assert_eq!(b.len(), batch);
            shuffled.extend_from_slice(&b[..half]);
            sequential.extend_from_slice(&b[half..]);
        }
        // `n` batches of `half` walk exactly `half` full permutations.
        for epoch in shuffled.chunks(n) {
            prop_assert_eq!(epoch.iter().copied().collect::<BTreeSet<_>>().len(), n);
        }
        for (i, &j) in sequential.iter().enumerate() {
            prop_assert_eq!(j, i % n);
        }
    }

    #[test]
    fn goals_lie_ahead_of_the_transition(horizon in 1usize..80, frac in 0.0f64..1.0, seed in any::<u64>(), labeled in any::<bool>()) {
        let t = ((horizon as f64 * frac) as usize).min(horizon - 1);
        let origin = if labeled { Origin::Labeled } else { Origin::Unlabeled };
        let d = sample_goal(horizon, t, origin, &mut SeedRng::new(seed));
        prop_assert!(d.goal_index > t && d.goal_index <= horizon);
        if labeled {
            prop_assert!(d.final_branch);
            prop_assert_eq!(d.goal_index, horizon);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn datasets_round_trip_through_bytes(seed in any::<u64>(), n in 1usize..12) {
        let d = generate_datasets(
            &DataConfig { n_labeled: n, n_unlabeled: n, n_eval: n, per_scene: 2, ..DataConfig::default() },
            seed,
        ).unwrap();
        for ds in [&d.labeled, &d.unlabeled, &d.eval] {
            let (bin, index) = ds.to_bytes();
            let back = Dataset::from_bytes(&bin, &index).unwrap();
            prop_assert_eq!(&back, ds);
            prop_assert_eq!(back.to_bytes(), (bin, index));
        }
    }
}
