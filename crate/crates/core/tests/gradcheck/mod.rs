//! Central finite-difference checks of every autodiff op in f64.

use goal_align::align::infonce_task_loss;
use goal_align::autodiff::{Graph, Var};
use goal_align::rng::SeedRng;
use goal_align::{Result, Tensor};

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

const EPS: f64 = 1e-6;

fn dim(rng: &mut SeedRng) -> usize {
    1 + rng.below(4)
}

/// Values bounded away from zero so `relu` never sits on its kink.
fn tensor(rng: &mut SeedRng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform_range(0.1, 1.5);
            if rng.bernoulli(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn case(op: &str, rng: &mut SeedRng) -> (Vec<Tensor<f64>>, Build) {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    match op {
        "matmul" => (
            vec![tensor(rng, vec![m, k]), tensor(rng, vec![k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        "transpose" => (vec![tensor(rng, vec![m, n])], Box::new(|g, v| g.transpose(v[0]))),
        "add" => (
            vec![tensor(rng, vec![m, n]), tensor(rng, vec![m, n])],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        "sub" => (
            vec![tensor(rng, vec![m, n]), tensor(rng, vec![m, n])],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        "mul" => (
            vec![tensor(rng, vec![m, n]), tensor(rng, vec![m, n])],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        "add_row" => (
            vec![tensor(rng, vec![m, n]), tensor(rng, vec![n])],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        "scale" => {
            let c = rng.uniform_range(-2.0, 2.0);
            (vec![tensor(rng, vec![m, n])], Box::new(move |g, v| g.scale(v[0], c)))
        }
        "relu" => (vec![tensor(rng, vec![m, n])], Box::new(|g, v| g.relu(v[0]))),
        "tanh" => (vec![tensor(rng, vec![m, n])], Box::new(|g, v| g.tanh(v[0]))),
        "mean_axis" => {
            let axis = rng.below(3);
            (
                vec![tensor(rng, vec![m, k, n])],
                Box::new(move |g, v| g.mean_axis(v[0], axis)),
            )
        }
        "sum" => (vec![tensor(rng, vec![m, n])], Box::new(|g, v| g.sum(v[0]))),
        "mean" => (vec![tensor(rng, vec![m, n])], Box::new(|g, v| g.mean(v[0]))),
        "concat" => {
            let axis = rng.below(2);
            let shapes = if axis == 0 {
                [vec![m, n], vec![k, n]]
            } else {
                [vec![m, n], vec![m, k]]
            };
            (
                shapes.into_iter().map(|s| tensor(rng, s)).collect(),
                Box::new(move |g, v| g.concat(v, axis)),
            )
        }
        "reshape" => (
            vec![tensor(rng, vec![m, k, n])],
            Box::new(move |g, v| g.reshape(v[0], &[m * k, n])),
        ),
        "scale_shift" => (
            (0..3).map(|_| tensor(rng, vec![m, n])).collect(),
            Box::new(|g, v| g.scale_shift(v[0], v[1], v[2])),
        ),
        "l2_normalize" => (vec![tensor(rng, vec![m, n + 1])], Box::new(|g, v| g.l2_normalize(v[0]))),
        "cosine" => (
            vec![tensor(rng, vec![m, k + 1]), tensor(rng, vec![n, k + 1])],
            Box::new(|g, v| g.cosine(v[0], v[1])),
        ),
        "log_softmax" => (vec![tensor(rng, vec![m, n + 1])], Box::new(|g, v| g.log_softmax(v[0]))),
        "gather_rows" => {
            let idx: Vec<usize> = (0..k + 2).map(|_| rng.below(m)).collect();
            (
                vec![tensor(rng, vec![m, n])],
                Box::new(move |g, v| g.gather_rows(v[0], &idx)),
            )
        }
        "infonce" => {
            let tau = rng.uniform_range(0.05, 1.0);
            let rows = m + 1;
            (
                vec![tensor(rng, vec![rows, n + 1]), tensor(rng, vec![rows, n + 1])],
                Box::new(move |g, v| {
                    let a = g.l2_normalize(v[0])?;
                    let b = g.l2_normalize(v[1])?;
                    Ok(infonce_task_loss(g, a, b, tau)?.total)
                }),
            )
        }
        _ => unreachable!("unknown op {op}"),
    }
}

pub const OPS: [&str; 20] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "relu",
    "tanh",
    "mean_axis",
    "sum",
    "mean",
    "concat",
    "reshape",
    "scale_shift",
    "l2_normalize",
    "cosine",
    "log_softmax",
    "gather_rows",
    "infonce",
];

/// `sum(w * op(inputs))` for fixed random weights `w`.
fn loss(build: &Build, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, rng: &mut SeedRng)
    -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let w = weights.get_or_insert_with(|| tensor(rng, g.shape(out).to_vec()));
    let w = g.constant(w.clone())?;
    let prod = g.mul(out, w)?;
    let l = g.sum(prod)?;
    Ok((g, vars, l))
}

/// Worst relative error of one op over `cases` random instances.
pub fn check_op(op: &str, cases: usize, seed: u64) -> f64 {
    let root = SeedRng::new(seed).named(op);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = root.child(c as u64);
        let (inputs, build) = case(op, &mut rng);
        let mut w = None;
        let (g, vars, l) = loss(&build, &inputs, &mut w, &mut rng).unwrap();
        let grads = g.backward(l).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
            for j in 0..input.numel() {
                let mut at = |delta: f64| {
                    let mut xs = inputs.clone();
                    xs[i].data_mut()[j] += delta;
                    let (g, _, l) = loss(&build, &xs, &mut w, &mut rng).unwrap();
                    g.value(l)[0]
                };
                let numeric = (at(EPS) - at(-EPS)) / (2.0 * EPS);
                let a = analytic[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
    }
    worst
}

pub fn run_all(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    OPS.iter().map(|&op| (op, check_op(op, cases, seed))).collect()
}
