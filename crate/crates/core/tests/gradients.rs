//! Finite-difference checks of every differentiable operation.

use arvo_core::autodiff::gradcheck::grad_check;
use arvo_core::flow::{warp_var, FlowField};
use arvo_core::{Graph, ParamStore, ParamVars, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;
const SEEDS: [u64; 3] = [0, 1, 2];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (name, shape) in entries {
        p.insert(*name, random(shape, &mut rng));
    }
    p
}

/// Contracts `y` with fixed random weights so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random(g.shape(y), &mut rng));
    let m = g.mul(y, w)?;
    g.sum(m)
}

fn check<F>(what: &str, entries: &[(&str, &[usize])], f: F)
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var> + Copy,
{
    for seed in SEEDS {
        let p = store(entries, seed);
        let report = grad_check(
            |g: &mut Graph<f64>, v: &ParamVars| {
                let y = f(g, v)?;
                project(g, y, seed)
            },
            &p,
            STEP,
        )
        .unwrap();
        assert!(report.max_rel_error <= TOL, "{what} seed {seed}: {report:?}");
    }
}

#[test]
fn elementwise_ops() {
    let s: &[usize] = &[2, 3];
    check("add", &[("a", s), ("b", s)], |g, v| g.add(v.get("a")?, v.get("b")?));
    check("sub", &[("a", s), ("b", s)], |g, v| g.sub(v.get("a")?, v.get("b")?));
    check("mul", &[("a", s), ("b", s)], |g, v| g.mul(v.get("a")?, v.get("b")?));
    check("affine", &[("a", s)], |g, v| g.affine(v.get("a")?, 1.7, -0.3));
    check("leaky_relu", &[("a", s)], |g, v| g.leaky_relu(v.get("a")?, 0.1));
    check("sigmoid", &[("a", s)], |g, v| g.sigmoid(v.get("a")?));
    check("exp", &[("a", s)], |g, v| g.exp(v.get("a")?));
    check("ln", &[("a", s)], |g, v| {
        let e = g.exp(v.get("a")?)?;
        g.ln(e, 1e-8)
    });
    check("abs", &[("a", s)], |g, v| g.abs(v.get("a")?));
}

#[test]
fn reductions_and_layout() {
    check("sum_axes", &[("a", &[2, 3, 4])], |g, v| g.sum_axes(v.get("a")?, &[0, 2]));
    check("mean_axes", &[("a", &[2, 3, 4])], |g, v| g.mean_axes(v.get("a")?, &[1]));
    check("mean", &[("a", &[2, 3, 4])], |g, v| g.mean(v.get("a")?));
    check("concat", &[("a", &[2, 1, 3]), ("b", &[2, 2, 3])], |g, v| g.concat(&[v.get("a")?, v.get("b")?], 1));
    check("reshape", &[("a", &[2, 6])], |g, v| g.reshape(v.get("a")?, &[3, 4]));
    check("transpose", &[("a", &[2, 3, 4])], |g, v| g.transpose_last2(v.get("a")?));
    check("matmul", &[("a", &[2, 3, 4]), ("b", &[2, 4, 5])], |g, v| g.matmul(v.get("a")?, v.get("b")?));
}

#[test]
fn convolutions() {
    check("conv2d", &[("x", &[2, 3, 6, 6]), ("w", &[4, 3, 3, 3]), ("b", &[4])], |g, v| {
        g.conv2d(v.get("x")?, v.get("w")?, v.get("b")?, 1, 1)
    });
    check("conv2d strided", &[("x", &[2, 2, 8, 8]), ("w", &[3, 2, 3, 3]), ("b", &[3])], |g, v| {
        g.conv2d(v.get("x")?, v.get("w")?, v.get("b")?, 2, 1)
    });
    check("conv2d pointwise", &[("x", &[2, 3, 4, 4]), ("w", &[2, 3, 1, 1]), ("b", &[2])], |g, v| {
        g.conv2d(v.get("x")?, v.get("w")?, v.get("b")?, 1, 0)
    });
    check("conv_transpose2d", &[("x", &[2, 3, 4, 4]), ("w", &[3, 2, 4, 4]), ("b", &[2])], |g, v| {
        g.conv_transpose2d(v.get("x")?, v.get("w")?, v.get("b")?, 2, 1)
    });
    check("conv3d", &[("x", &[1, 2, 3, 6, 6]), ("w", &[3, 2, 3, 3, 3]), ("b", &[3])], |g, v| {
        g.conv3d(v.get("x")?, v.get("w")?, v.get("b")?, [1, 2, 2], [1, 1, 1])
    });
}

#[test]
fn pooling_and_correlation() {
    check("max_pool2d", &[("x", &[2, 2, 4, 4])], |g, v| g.max_pool2d(v.get("x")?, 2, 2));
    check("correlation", &[("r", &[2, 3, 4, 4]), ("n", &[2, 3, 2, 2])], |g, v| g.correlation(v.get("r")?, v.get("n")?));
    check("exp_shift_max", &[("x", &[3, 5])], |g, v| g.exp_shift_max(v.get("x")?));
    check("row_normalize", &[("x", &[3, 5])], |g, v| {
        let e = g.exp(v.get("x")?)?;
        g.row_normalize(e)
    });
}

#[test]
fn warp_image_gradient() {
    let mut flow = FlowField::zeros(5, 6);
    for (i, (x, y)) in flow.u_x.iter_mut().zip(flow.u_y.iter_mut()).enumerate() {
        *x = ((i * 7) % 11) as f32 * 0.37 - 1.5;
        *y = ((i * 3) % 5) as f32 * 0.41 - 0.8;
    }
    let flow = &flow;
    check("warp", &[("x", &[2, 3, 5, 6])], move |g, v| warp_var(g, v.get("x")?, &[flow, flow]));
}
