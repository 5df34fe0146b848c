//! Central finite-difference checks of the tape's backward pass.
//!
//! Each check builds a scalar from some inputs, back-propagates once, then
//! perturbs every input element by `±h` and compares. Perturbations that move
//! the computation onto a different piece of a piecewise function (a relu or
//! max flipping) are skipped rather than counted, since the derivative is not
//! defined across the kink.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::fusion::{compute_losses, AwfState, Fuser};
use crate::model::{Model, ModelConfig};
use crate::params::NormMode;
use crate::tape::{BnMode, OpKind, RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= REL_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d f / d inputs` by central differences.
pub fn check<F>(name: &str, inputs: &[Tensor], fault: Option<OpKind>, f: F) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok((out.item(), tape.kink_signature()))
    };

    let tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let signature = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data[j];
            work[i].data[j] = orig + FD_STEP;
            let (plus, sig_plus) = eval(&work)?;
            work[i].data[j] = orig - FD_STEP;
            let (minus, sig_minus) = eval(&work)?;
            work[i].data[j] = orig;
            if sig_plus != signature || sig_minus != signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[i][j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `sum(w * x)` for a fixed random `w`, turning any tensor into a scalar
/// whose gradient exercises every output element.
pub(crate) fn project<'t>(x: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random_tensor(&mut rng, &x.shape(), 1.0);
    let w = x.tape().constant(w);
    Ok(x.mul(w)?.sum())
}

/// Finite-difference checks over every differentiable tape operation.
pub fn op_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = seed;

    let x = random_tensor(&mut rng, &[2, 3, 5, 5], 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], 0.5);
    let b = random_tensor(&mut rng, &[4], 0.5);
    out.push(check("conv2d", &[x, w, b], fault, |t, v| {
        project(t.conv2d(v[0], v[1], v[2])?, s)
    })?);

    let x = random_tensor(&mut rng, &[3, 2, 3, 3], 2.0);
    let g = random_tensor(&mut rng, &[2], 1.5);
    let bt = random_tensor(&mut rng, &[2], 1.0);
    out.push(check("batchnorm2d", &[x.clone(), g.clone(), bt.clone()], fault, |t, v| {
        project(t.batch_norm(v[0], v[1], v[2], BnMode::Train(None))?, s)
    })?);
    let stats = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.7, 0.6],
        tracked: 1,
    };
    out.push(check("batchnorm2d_eval", &[x, g, bt], fault, |t, v| {
        project(t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&stats))?, s)
    })?);

    let x = random_tensor(&mut rng, &[4, 5], 1.0);
    out.push(check("relu", &[x], fault, |t, v| project(t.relu(v[0]), s))?);

    let a = random_tensor(&mut rng, &[3, 4], 1.0);
    let b = random_tensor(&mut rng, &[3, 4], 1.0);
    out.push(check("elementwise_mul", &[a.clone(), b.clone()], fault, |t, v| {
        project(t.mul(v[0], v[1])?, s)
    })?);
    out.push(check("add_sub_scale", &[a.clone(), b.clone()], fault, |t, v| {
        let y = t.add(v[0], v[1])?;
        let z = t.sub(y, t.scale(v[1], 0.3))?;
        project(z, s)
    })?);
    out.push(check("max", &[a, b], fault, |t, v| project(t.max(v[0], v[1])?, s))?);

    let p1 = random_tensor(&mut rng, &[2, 2, 3, 3], 1.0);
    let p2 = random_tensor(&mut rng, &[2, 3, 3, 3], 1.0);
    out.push(check("concat_channels", &[p1, p2], fault, |t, v| {
        project(t.concat_channels(&[v[0], v[1]])?, s)
    })?);

    let x = random_tensor(&mut rng, &[2, 3, 4, 4], 1.0);
    out.push(check("global_avg_pool", &[x], fault, |t, v| {
        project(t.global_avg_pool(v[0])?, s)
    })?);

    let x = random_tensor(&mut rng, &[3, 5], 1.0);
    let w = random_tensor(&mut rng, &[4, 5], 1.0);
    let b = random_tensor(&mut rng, &[4], 1.0);
    out.push(check("linear", &[x, w, b], fault, |t, v| {
        project(t.linear(v[0], v[1], Some(v[2]))?, s)
    })?);

    let x = random_tensor(&mut rng, &[3, 5], 2.0);
    out.push(check("softmax", std::slice::from_ref(&x), fault, |t, v| {
        project(t.softmax(v[0])?, s)
    })?);
    out.push(check("cross_entropy", &[x], fault, |t, v| {
        let p = t.softmax(v[0])?;
        t.cross_entropy(p, &[1, 4, 0])
    })?);

    let x = random_tensor(&mut rng, &[2, 3, 2], 1.0);
    out.push(check("l2_norm", &[x], fault, |t, v| Ok(t.l2_norm(v[0])))?);

    let x = random_tensor(&mut rng, &[2, 3, 2, 2], 1.0);
    let y = random_tensor(&mut rng, &[2, 3, 2, 2], 1.0);
    out.push(check("channel_outer", &[x, y], fault, |t, v| {
        project(t.channel_outer(v[0], v[1])?, s)
    })?);

    let x = random_tensor(&mut rng, &[2, 3, 2, 2], 1.0);
    let y = random_tensor(&mut rng, &[2, 3, 2, 2], 1.0);
    let w = random_tensor(&mut rng, &[4, 9, 1, 1], 0.5);
    let b = random_tensor(&mut rng, &[4], 0.5);
    out.push(check("pair_project", &[x, y, w, b], fault, |t, v| {
        project(t.pair_project(v[0], v[1], v[2], v[3])?, s)
    })?);

    let x = random_tensor(&mut rng, &[5, 3], 1.0);
    let nb = Rc::new(vec![vec![1, 2], vec![0], vec![0, 3], vec![2], vec![]]);
    out.push(check("neighbor_mean", &[x], fault, |t, v| {
        project(t.neighbor_mean(v[0], nb.clone())?, s)
    })?);

    let x = random_tensor(&mut rng, &[3, 4], 1.0);
    out.push(check("sum_mean", &[x], fault, |t, v| {
        let a = t.mean(v[0]);
        let b = t.sum(t.relu(v[0]));
        t.add(a, b)
    })?);

    Ok(out)
}

/// Checks the gradient of the full training objective with respect to
/// every parameter of a tiny two-band network: 8 samples of 5x5 patches,
/// 3 classes, `m = 4`, batch-statistics normalization and a fixed ring
/// graph for the topology branch.
pub fn pipeline_check(seed: u64, fault: Option<OpKind>) -> Result<CheckReport> {
    const NODES: usize = 8;
    const PATCH: usize = 5;
    let config = ModelConfig {
        patch: PATCH,
        ..ModelConfig::new(2, 3, 4)
    };
    let model = Model::new(config, 3.0, seed)?;
    let awf = AwfState::with_alpha(vec![0.35, 0.65], 3.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let patches: Vec<Tensor> = (0..2)
        .map(|_| random_tensor(&mut rng, &[NODES, 9, PATCH, PATCH], 1.0))
        .collect();
    let labels: Vec<usize> = (0..NODES).map(|i| i % 3).collect();
    let ring: Vec<Vec<usize>> = (0..NODES)
        .map(|v| {
            let mut nb = vec![(v + 1) % NODES, (v + NODES - 1) % NODES];
            nb.sort_unstable();
            nb
        })
        .collect();
    let ring = Rc::new(ring);
    let params: Vec<Tensor> = model.store.tensors().to_vec();
    check("pipeline", &params, fault, |t, p| {
        let xs: Vec<Var<'_>> = patches.iter().map(|x| t.constant(x.clone())).collect();
        let sem = model.semantic.forward(t, p, &xs, &mut NormMode::Batch)?;
        let topo = model
            .topo
            .as_ref()
            .ok_or_else(|| contract("pipeline_check", "model has no topology branch"))?;
        let tpc = (0..2)
            .map(|b| Ok(topo.tpc_forward(t, p, b, ring.clone(), sem.pooled[b])?.probs))
            .collect::<Result<Vec<_>>>()?;
        let obj = compute_losses(t, &sem.probs, Some(&tpc), &labels, &Fuser::Awf(&awf), 0.1)?;
        Ok(obj.total)
    })
}

/// Every op check followed by the pipeline check.
pub fn full_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut out = op_suite(seed, fault)?;
    out.push(pipeline_check(seed, fault)?);
    Ok(out)
}
