//! Caption/render pretraining of the text and image encoders, then the
//! surgery that turns the image encoder into a two-image transition
//! encoder. Checks that the surgered encoder on `(x, x)` matches the image
//! encoder on `x`, and saves the result.

use goal_align::checkpoint;
use goal_align::encoders::{embed_images, embed_transitions, pretrain_clip_style, surgery, PretrainConfig};
use goal_align::optim::Schedule;
use goal_align::sim::generate_caption_scenes;

fn main() -> goal_align::Result<()> {
    let scenes = generate_caption_scenes(1000, 0)?;
    let cfg = PretrainConfig {
        steps: 400,
        schedule: Schedule {
            peak: 1e-3,
            warmup: 50,
            decay: 400,
        },
        ..PretrainConfig::default()
    };
    let (pre, log) = pretrain_clip_style(&scenes, &cfg, 0)?;
    for l in log.iter().step_by(100) {
        println!("step {:>3}  loss {:.3}  batch top-1 {:.2}", l.step, l.loss, l.top1);
    }
    let post = surgery(&pre)?;
    let x: Vec<Vec<f32>> = scenes.iter().take(8).map(|s| s.state.render_vec()).collect();
    let xs: Vec<&[f32]> = x.iter().map(Vec::as_slice).collect();
    let a = embed_transitions(&post, &xs, &xs)?;
    let b = embed_images(&pre, &xs)?;
    let gap = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0f32, f32::max);
    println!("max |h(x, x) - f(x)| after surgery: {gap:.2e}");
    let path = std::env::temp_dir().join("goal-align-encoders.ckpt");
    checkpoint::save(&post, &path)?;
    println!("saved {} tensors to {}", post.len(), path.display());
    Ok(())
}
