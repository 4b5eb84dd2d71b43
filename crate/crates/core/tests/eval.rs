use goal_align::config::Config;
use goal_align::encoders::{init_encoders, surgery};
use goal_align::eval::ablation::{run_ablation, Variant};
use goal_align::eval::{
    retrieval_from_embeddings, Controller, rollout_eval, two_proportion_z, ExpertController, PolicyController,
};
use goal_align::policy::init_policy;
use goal_align::rng::SeedRng;
use goal_align::sim::{HeldOut, EVAL_HORIZON};

fn unit_rows(n: usize, d: usize, rng: &mut SeedRng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

#[test]
fn random_embeddings_retrieve_at_chance() {
    let mut rng = SeedRng::new(0);
    let (batch, k) = (256, 5);
    let n = batch * 40;
    let lang = unit_rows(n, 32, &mut rng);
    let goal = unit_rows(n, 32, &mut rng);
    let r = retrieval_from_embeddings(&lang, &goal, k, batch).unwrap();
    let p = k as f64 / batch as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((r.mean - p).abs() < 3.0 * se, "{} vs {p}", r.mean);
    assert!(r.per_batch.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(retrieval_from_embeddings(&lang[..10], &goal[..10], 1, 64).is_err());
}

#[test]
fn expert_is_perfect_and_untrained_policy_is_not() {
    let tasks = HeldOut::default().tasks();
    let mut expert = ExpertController::default();
    let e = rollout_eval(&mut expert, &tasks, 10, EVAL_HORIZON, 0).unwrap();
    assert_eq!(e.rate, 1.0);
    assert!(e.per_task.iter().all(|t| t.trials == 10));

    let mut ps = surgery(&init_encoders(&mut SeedRng::new(0)).unwrap()).unwrap();
    init_policy(&mut ps, &mut SeedRng::new(1)).unwrap();
    let mut policy = PolicyController::new(&ps);
    let r = rollout_eval(&mut policy, &tasks[..1], 20, EVAL_HORIZON, 0).unwrap();
    // Indistinguishable from zero: one-sided test against a 0 baseline.
    let (_, p) = two_proportion_z(r.successes, r.trials, 0, r.trials);
    assert!(p > 0.05 || r.successes <= 1, "{} of {}", r.successes, r.trials);
    assert_eq!(r.per_task[0].trials, 20);
}

#[test]
fn unknown_words_become_recorded_failures() {
    let mut ps = surgery(&init_encoders(&mut SeedRng::new(0)).unwrap()).unwrap();
    init_policy(&mut ps, &mut SeedRng::new(1)).unwrap();
    let mut policy = PolicyController::new(&ps);
    let start = goal_align::sim::reset(&goal_align::sim::SceneSpec::new(vec![0, 1]), 0).unwrap();
    let task = goal_align::sim::TaskSpec::PlaceOn { subject: 0, target: 1 };
    let reasons = policy
        .begin(&[start.clone(), start], &[task, task], &["put the zebra on the pan".into(), "put the pepper on the pan".into()])
        .unwrap();
    assert!(reasons[0].as_deref().unwrap().contains("zebra"));
    assert!(reasons[1].is_none());
}

#[test]
fn ablation_emits_one_row_per_enabled_variant() {
    let cfg = Config::parse(
        "data.n_labeled = 64\n\
         data.n_unlabeled = 32\n\
         data.n_eval = 64\n\
         pretrain.n_scenes = 64\n\
         pretrain.steps = 2\n\
         align.steps = 2\n\
         policy.steps = 2\n\
         eval.trials = 1\n\
         eval.in_distribution_tasks = 1\n\
         eval.in_distribution_trials = 1\n\
         ablation.variants = LCBC,GRIF-labeled-only,No-Start\n\
         ablation.sweep = 64\n\
         ablation.seeds = 4\n",
    )
    .unwrap();
    let r = run_ablation(&cfg, 2, &|_| {}).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.rows[0].variant, Variant::Lcbc);
    assert!(r.rows.iter().all(|x| x.outcome.is_ok()));
    assert_eq!(r.sweep.len(), 1);
    assert!(!Variant::Lcbc.recipe().unlabeled && !Variant::GrifLabeledOnly.recipe().unlabeled);
}
