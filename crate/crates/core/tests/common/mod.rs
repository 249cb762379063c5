//! Central finite-difference oracle shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use ftkit_core::autodiff::{Graph, Var};
use ftkit_core::error::Result;
use ftkit_core::rng::SplitMix64;
use ftkit_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative error; keeps near-zero gradients from
/// turning rounding noise into huge ratios.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds the graph on fresh leaves and returns the scalar loss var.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).data()[0]
}

pub fn analytic(inputs: &[Tensor<f64>], build: &Build) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| t.zeros_like()))
        .collect()
}

pub fn numeric(inputs: &[Tensor<f64>], build: &Build) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = inputs[k].zeros_like();
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let plus = eval(&work, build);
            work[k].data_mut()[i] = x0 - FD_STEP;
            let minus = eval(&work, build);
            work[k].data_mut()[i] = x0;
            grad.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    out
}

/// Largest relative error between analytic and numeric gradients over every input.
pub fn max_grad_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let a = analytic(inputs, build);
    let n = numeric(inputs, build);
    a.iter()
        .zip(&n)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| rel_err(x, y)))
        .fold(0.0, f64::max)
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights,
/// so every output element contributes a distinct coefficient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = SplitMix64::new(seed);
    let r = g.constant(uniform(&mut rng, &shape));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Values in [-1, 1] that are pairwise at least `2/(n+1)` apart, shuffled.
pub fn distinct_values(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| -1.0 + 2.0 * (i as f64 + 0.5 + 0.3 * rng.uniform(-1.0, 1.0)) / n as f64)
        .collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Per-op results for the gradient-correctness criterion.
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn ok(&self) -> bool {
        self.max_err < self.tol
    }
}

fn run(op: &'static str, tol: f64, instances: usize, mut one: impl FnMut(u64) -> f64) -> OpCheck {
    let max_err = (0..instances as u64).map(&mut one).fold(0.0, f64::max);
    OpCheck {
        op,
        instances,
        max_err,
        tol,
    }
}

/// Runs every differentiable op through the oracle on `instances` random cases.
pub fn check_all_ops(instances: usize) -> Vec<OpCheck> {
    let mut checks = Vec::new();

    checks.push(run("matmul", 1e-6, instances, |s| {
        let mut rng = SplitMix64::new(100 + s);
        let ins = [uniform(&mut rng, &[4, 5]), uniform(&mut rng, &[5, 3])];
        max_grad_error(&ins, &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        })
    }));

    checks.push(run("linear", 1e-6, instances, |s| {
        let mut rng = SplitMix64::new(200 + s);
        let ins = [
            uniform(&mut rng, &[3, 6]),
            uniform(&mut rng, &[4, 6]),
            uniform(&mut rng, &[4]),
        ];
        max_grad_error(&ins, &|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, s)
        })
    }));

    checks.push(run("conv2d", 1e-6, instances, |s| {
        let mut rng = SplitMix64::new(300 + s);
        // cycle through stride/padding combinations
        let (stride, pad) = [(1, 0), (1, 1), (2, 1), (2, 0)][s as usize % 4];
        let ins = [
            uniform(&mut rng, &[1, 2, 6, 6]),
            uniform(&mut rng, &[3, 2, 3, 3]),
            uniform(&mut rng, &[3]),
        ];
        max_grad_error(&ins, &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, s)
        })
    }));

    checks.push(run("relu", 1e-6, instances, |s| {
        let mut rng = SplitMix64::new(400 + s);
        // keep inputs away from the kink at 0
        let x = uniform(&mut rng, &[5, 7]).map(|v| if v.abs() < 0.01 { v + 0.05 } else { v });
        max_grad_error(&[x], &|g, v| {
            let y = g.relu(v[0]);
            project(g, y, s)
        })
    }));

    checks.push(run("maxpool2d", 1e-6, instances, |s| {
        let mut rng = SplitMix64::new(500 + s);
        let (k, stride, pad) = [(2, 2, 0), (3, 2, 1), (2, 1, 0)][s as usize % 3];
        let x = distinct_values(&mut rng, &[1, 2, 4, 4]);
        max_grad_error(&[x], &|g, v| {
            let y = g.maxpool2d(v[0], k, stride, pad)?;
            project(g, y, s)
        })
    }));

    checks.push(run("batchnorm2d", 1e-5, instances, |s| {
        let mut rng = SplitMix64::new(600 + s);
        let ins = [
            uniform(&mut rng, &[2, 3, 4, 4]),
            uniform(&mut rng, &[3]),
            uniform(&mut rng, &[3]),
        ];
        max_grad_error(&ins, &|g, v| {
            let (y, _) = g.batchnorm2d_batch(v[0], v[1], v[2], 1e-5)?;
            project(g, y, s)
        })
    }));

    checks.push(run("log_softmax+nll", 1e-6, instances, |s| {
        let mut rng = SplitMix64::new(700 + s);
        let logits = uniform(&mut rng, &[4, 10]);
        let targets: Vec<usize> = (0..4).map(|_| rng.below(10) as usize).collect();
        max_grad_error(&[logits], &|g, v| {
            let lp = g.log_softmax(v[0])?;
            g.nll_loss(lp, &targets)
        })
    }));

    checks
}
