use goal_align::encoders::{embed_images, embed_texts, init_encoders, pretrain_clip_style, PretrainConfig};
use goal_align::eval::retrieval_from_embeddings;
use goal_align::optim::Schedule;
use goal_align::rng::SeedRng;
use goal_align::sim::generate_caption_scenes;

#[test]
fn distinct_instructions_embed_differently() {
    let ps = init_encoders(&mut SeedRng::new(3)).unwrap();
    let z = embed_texts(&ps, &["put the pepper on the pan", "move the knife left"]).unwrap();
    let cos: f32 = z[0].iter().zip(&z[1]).map(|(a, b)| a * b).sum();
    assert!(cos < 1.0 - 1e-4, "{cos}");
}

#[test]
fn caption_pretraining_grounds_renders() {
    let scenes = generate_caption_scenes(4000, 0).unwrap();
    let cfg = PretrainConfig {
        steps: 1500,
        schedule: Schedule {
            peak: 1e-3,
            warmup: 100,
            decay: 1500,
        },
        ..PretrainConfig::default()
    };
    let (ps, log) = pretrain_clip_style(&scenes, &cfg, 0).unwrap();
    let uniform = 2.0 * (cfg.batch.min(scenes.len()) as f32).ln();
    assert!((log[0].loss - uniform).abs() < 0.5, "initial {} vs {uniform}", log[0].loss);

    // Fresh scenes, batches of 64.
    let test = generate_caption_scenes(1024, 99).unwrap();
    let captions: Vec<&str> = test.iter().map(|s| s.caption.as_str()).collect();
    let renders: Vec<Vec<f32>> = test.iter().map(|s| s.state.render_vec()).collect();
    let rr: Vec<&[f32]> = renders.iter().map(Vec::as_slice).collect();
    let lang = embed_texts(&ps, &captions).unwrap();
    let img = embed_images(&ps, &rr).unwrap();
    for z in lang.iter().chain(&img) {
        let n: f32 = z.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    let top1 = retrieval_from_embeddings(&lang, &img, 1, 64).unwrap().mean;
    assert!(top1 > 50.0 / 64.0, "top-1 {top1}");
}
