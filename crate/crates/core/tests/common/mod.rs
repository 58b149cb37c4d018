//! Shared helpers for the integration tests: a central finite-difference
//! gradient oracle and small deterministic fixtures.

#![allow(dead_code)]

use agfnet_core::tensor::{Tape, Tensor, Var};
use agfnet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_shape_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, for kinked functions such as relu.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_shape_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `|a − n| / max(|a|, |n|, 1e-3)`: relative error with a floor so that
/// near-zero gradients are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Worst relative error between tape gradients and central differences of
/// the scalar `f` with respect to every entry of every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let empty = agfnet_core::ParamStore::new();
    grad_check_with(&empty, inputs, |ctx, v| f(ctx.tape(), v))
}

/// [`grad_check`] for functions that also read parameters from `store`.
pub fn grad_check_with<F>(store: &agfnet_core::ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&agfnet_core::params::Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    use agfnet_core::params::Ctx;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&ctx, &vars).expect("forward pass");
    let grads = tape.backward(loss).expect("backward pass");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).unwrap()))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        let vars: Vec<Var<f64>> = xs.iter().map(|t| tape.var(t.clone())).collect();
        f(&ctx, &vars).expect("perturbed forward").value().item()
    };
    let (mut worst, mut skipped, mut probed) = (0.0f64, 0, 0);
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let at = |h: f64| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += h;
                eval(&xs)
            };
            probed += 1;
            match central(at(FD_STEP), at(-FD_STEP), at(FD_STEP / 2.0), at(-FD_STEP / 2.0)) {
                Some(numeric) => worst = worst.max(rel_err(analytic[k].data()[i], numeric)),
                None => skipped += 1,
            }
        }
    }
    finish(worst, skipped, probed)
}

/// Fraction of probed entries that may be skipped as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.03;

/// Central difference at `FD_STEP` from evaluations at `±h` and `±h/2`, or
/// `None` when the two step sizes disagree: for smooth functions they match
/// to `O(h²)`, so a mismatch means a kink (relu boundary) inside the stencil.
pub fn central(up: f64, down: f64, up_half: f64, down_half: f64) -> Option<f64> {
    let c = (up - down) / (2.0 * FD_STEP);
    let c_half = (up_half - down_half) / FD_STEP;
    if (c - c_half).abs() > 0.5 * FD_TOL * c.abs().max(c_half.abs()).max(1e-3) {
        None
    } else {
        Some(c)
    }
}

fn finish(worst: f64, skipped: usize, probed: usize) -> f64 {
    assert!(
        skipped as f64 <= MAX_KINK_FRACTION * probed as f64,
        "{skipped} of {probed} probes straddled a kink"
    );
    worst
}

/// Reduces any output to a scalar by a fixed random weighting, so every
/// output entry contributes a distinct coefficient.
pub fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let v = out.value();
    let mut r = rng(seed);
    let w = Tensor::new(v.shape().to_vec(), (0..v.len()).map(|_| r.random_range(-1.0..1.0)).collect())?;
    Ok(out.mul(tape.constant(w))?.sum()?)
}

pub fn labels(n: usize) -> Vec<String> {
    agfnet_core::fusion::default_anatomy_labels().into_iter().take(n).collect()
}

/// Like [`grad_check`] but over the entries of a parameter store, visiting
/// at most `per_param` entries of each tensor.
pub fn param_grad_check<F>(store: &agfnet_core::ParamStore<f64>, per_param: usize, f: F) -> f64
where
    F: for<'t> Fn(&agfnet_core::params::Ctx<'t, f64>) -> Result<Var<'t, f64>>,
{
    use agfnet_core::params::Ctx;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, true);
    let loss = f(&ctx).expect("forward pass");
    let mut grads = tape.backward(loss).expect("backward pass");
    let analytic = ctx.param_grads(&mut grads);

    let eval = |s: &agfnet_core::ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s, false);
        f(&ctx).expect("perturbed forward").value().item()
    };
    let (mut worst, mut skipped, mut probed) = (0.0f64, 0, 0);
    let mut work = store.clone();
    for (id, _, t) in store.iter() {
        let stride = (t.len() / per_param.max(1)).max(1);
        for i in (0..t.len()).step_by(stride) {
            let base = t.data()[i];
            let mut at = |h: f64| {
                work.get_mut(id).data_mut()[i] = base + h;
                let v = eval(&work);
                work.get_mut(id).data_mut()[i] = base;
                v
            };
            probed += 1;
            let (up, down) = (at(FD_STEP), at(-FD_STEP));
            let (up_half, down_half) = (at(FD_STEP / 2.0), at(-FD_STEP / 2.0));
            let Some(numeric) = central(up, down, up_half, down_half) else {
                skipped += 1;
                continue;
            };
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let e = rel_err(a, numeric);
            if e > FD_TOL {
                eprintln!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", store.name(id));
            }
            worst = worst.max(e);
        }
    }
    finish(worst, skipped, probed)
}
