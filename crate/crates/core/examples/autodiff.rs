//! Fit a two-layer network to a toy regression target with the tape
//! autodiff and Adam, printing the loss as it falls.

use goal_align::autodiff::Graph;
use goal_align::optim::Adam;
use goal_align::params::{init_linear, linear, ParamStore};
use goal_align::rng::SeedRng;
use goal_align::Tensor;

fn main() -> goal_align::Result<()> {
    let mut rng = SeedRng::new(0);
    let mut ps = ParamStore::new();
    init_linear(&mut ps, &mut rng, "net.l1", 2, 32, 1.0)?;
    init_linear(&mut ps, &mut rng, "net.l2", 32, 1, 1.0)?;
    let xs: Vec<f32> = (0..256).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
    let ys: Vec<f32> = xs.chunks(2).map(|p| (3.0 * p[0]).sin() * p[1]).collect();
    let x = Tensor::new(vec![128, 2], xs)?;
    let y = Tensor::new(vec![128, 1], ys)?;
    let mut opt = Adam::default();
    for step in 0..=2000 {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, |_| true)?;
        let xv = g.constant(x.clone())?;
        let h = linear(&mut g, &p, "net.l1", xv)?;
        let h = g.tanh(h)?;
        let out = linear(&mut g, &p, "net.l2", h)?;
        let yv = g.constant(y.clone())?;
        let d = g.sub(out, yv)?;
        let sq = g.mul(d, d)?;
        let loss = g.mean(sq)?;
        if step % 400 == 0 {
            println!("step {step:>4}  mse {:.5}", g.value(loss)[0]);
        }
        let grads = g.backward(loss)?;
        opt.step(&mut ps, p.collect_grads(&grads), |_| 1e-2)?;
    }
    Ok(())
}
