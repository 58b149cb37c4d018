//! Finite-difference checks for every differentiable operation, shared by
//! the gradient tests and the acceptance run.

use agfnet_core::attention::{AttentionParams, EncoderLayer};
use agfnet_core::captioning::{Decoder, DecoderConfig, RelationalMemory, Vocabulary};
use agfnet_core::fusion::{Ablation, BundleVars};
use agfnet_core::layers::{FeedForward, LayerNorm, Linear};
use agfnet_core::model::{ModelConfig, ReportModel};
use agfnet_core::params::Init;
use agfnet_core::tensor::{Tensor, Var};
use agfnet_core::{ParamStore, Result};
use crate::common::*;
use rand::Rng;

const INSTANCES: u64 = 10;

fn shape(r: &mut rand_chacha::ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..5), r.random_range(1..6))
}

fn check_unary(name: &str, away_from_zero: bool, f: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>) {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (m, n) = shape(&mut r);
        let x = if away_from_zero { random_away_from_zero(&mut r, m, n) } else { random(&mut r, m, n) };
        let err = grad_check(&[x], |t, v| project(t, f(v[0])?, seed));
        assert!(err < FD_TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

fn check_binary(name: &str, f: for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>) {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (m, n) = shape(&mut r);
        let inputs = [random(&mut r, m, n), random(&mut r, m, n)];
        let err = grad_check(&inputs, |t, v| project(t, f(v[0], v[1])?, seed));
        assert!(err < FD_TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

pub fn elementwise_ops() {
    check_binary("add", |a, b| Ok(a.add(b)?));
    check_binary("sub", |a, b| Ok(a.sub(b)?));
    check_binary("mul", |a, b| Ok(a.mul(b)?));
    check_unary("scale", false, |a| Ok(a.scale(-1.7)?));
    check_unary("relu", true, |a| Ok(a.relu()?));
    check_unary("tanh", false, |a| Ok(a.tanh()?));
    check_unary("sigmoid", false, |a| Ok(a.sigmoid()?));
    check_unary("transpose", false, |a| Ok(a.transpose()?));
    check_unary("sum", false, |a| Ok(a.sum()?));
    check_unary("mean_rows", false, |a| Ok(a.mean_rows()?));
}

pub fn matmul() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (m, k) = shape(&mut r);
        let n = r.random_range(1..6);
        let inputs = [random(&mut r, m, k), random(&mut r, k, n)];
        let err = grad_check(&inputs, |t, v| project(t, v[0].matmul(v[1])?, seed));
        assert!(err < FD_TOL, "matmul instance {seed}: {err:e}");
    }
}

pub fn row_broadcasts() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (m, n) = shape(&mut r);
        let inputs = [random(&mut r, m, n), random(&mut r, 1, n)];
        let err = grad_check(&inputs, |t, v| project(t, v[0].add_row(v[1])?, seed));
        assert!(err < FD_TOL, "add_row instance {seed}: {err:e}");
        let err = grad_check(&inputs, |t, v| project(t, v[0].mul_row(v[1])?, seed));
        assert!(err < FD_TOL, "mul_row instance {seed}: {err:e}");
    }
}

pub fn softmax_and_normalisation() {
    check_unary("softmax_rows", false, |a| Ok(a.softmax_rows()?));
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        let x = random(&mut r, n, n);
        let err = grad_check(&[x], |t, v| project(t, v[0].causal_softmax_rows()?, seed));
        assert!(err < FD_TOL, "causal softmax instance {seed}: {err:e}");
    }
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let m = r.random_range(1..5);
        let n = r.random_range(2..7);
        let inputs = [random(&mut r, m, n), random(&mut r, 1, n), random(&mut r, 1, n)];
        let err = grad_check(&inputs, |t, v| project(t, v[0].layer_norm(v[1], v[2], 1e-5)?, seed));
        assert!(err < FD_TOL, "layer_norm instance {seed}: {err:e}");
    }
}

pub fn slicing_and_concatenation() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let m = r.random_range(2..6);
        let n = r.random_range(2..6);
        let x = random(&mut r, m, n);
        let (rs, cs) = (r.random_range(0..m), r.random_range(0..n));
        let err = grad_check(&[x.clone()], |t, v| project(t, v[0].slice_rows(rs, m - rs)?, seed));
        assert!(err < FD_TOL, "slice_rows {seed}: {err:e}");
        let err = grad_check(&[x.clone()], |t, v| project(t, v[0].slice_cols(cs, n - cs)?, seed));
        assert!(err < FD_TOL, "slice_cols {seed}: {err:e}");
        let err = grad_check(&[x.clone()], |t, v| project(t, v[0].reshape(vec![1, m * n])?, seed));
        assert!(err < FD_TOL, "reshape {seed}: {err:e}");

        let extra = r.random_range(1..4);
        let y = random(&mut r, extra, n);
        let err = grad_check(&[x.clone(), y], |t, v| project(t, t.concat_rows(&[v[0], v[1], v[0]])?, seed));
        assert!(err < FD_TOL, "concat_rows {seed}: {err:e}");
        let extra = r.random_range(1..4);
        let z = random(&mut r, m, extra);
        let err = grad_check(&[x, z], |t, v| project(t, t.concat_cols(&[v[1], v[0]])?, seed));
        assert!(err < FD_TOL, "concat_cols {seed}: {err:e}");
    }
}

pub fn embedding_and_cross_entropy() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (vocab, d) = (r.random_range(2..7), r.random_range(1..5));
        let table = random(&mut r, vocab, d);
        let ids: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..vocab)).collect();
        let err = grad_check(&[table], |t, v| project(t, v[0].embedding(&ids)?, seed));
        assert!(err < FD_TOL, "embedding {seed}: {err:e}");

        let rows = r.random_range(2..6);
        let logits = random(&mut r, rows, vocab).map(|x| 3.0 * x);
        let mut targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..vocab)).collect();
        targets[0] = 1 % vocab;
        let pad = 0;
        if targets.iter().all(|&t| t == pad) {
            targets[0] = 1;
        }
        let err = grad_check(&[logits], |_, v| Ok(v[0].cross_entropy(&targets, pad)?));
        assert!(err < FD_TOL, "cross_entropy {seed}: {err:e}");
    }
}

fn store_check<F>(name: &str, build: F)
where
    F: Fn(&mut ParamStore<f64>, &mut Init, &mut rand_chacha::ChaCha8Rng) -> Box<dyn for<'t> Fn(&agfnet_core::params::Ctx<'t, f64>) -> Result<Var<'t, f64>>>,
{
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let f = build(&mut store, &mut init, &mut r);
        // Non-trivial gains and biases.
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let noise = random(&mut r, 1, store.get(id).len());
            for (v, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
                *v += 0.3 * n;
            }
        }
        let err = param_grad_check(&store, 12, |ctx| f(ctx));
        assert!(err < FD_TOL, "{name} instance {seed}: parameter gradient error {err:e}");
    }
}

pub fn layers_parameter_gradients() {
    store_check("linear", |s, init, r| {
        let lin = Linear::new(s, init, "lin", 3, 4, true).unwrap();
        let x = random(r, 2, 3);
        Box::new(move |ctx| project(ctx.tape(), lin.forward(ctx, ctx.constant(x.clone()))?, 1))
    });
    store_check("layer_norm", |s, _, r| {
        let ln = LayerNorm::new(s, "ln", 5).unwrap();
        let x = random(r, 3, 5);
        Box::new(move |ctx| project(ctx.tape(), ln.forward(ctx, ctx.constant(x.clone()))?, 2))
    });
    store_check("feed_forward", |s, init, r| {
        let ff = FeedForward::new(s, init, "ff", 4).unwrap();
        let x = random(r, 3, 4);
        Box::new(move |ctx| project(ctx.tape(), ff.forward(ctx, ctx.constant(x.clone()))?, 3))
    });
}

pub fn attention_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let heads = [1, 2, 4][seed as usize % 3];
        let att = AttentionParams::new(&mut store, &mut init, "att", 4, heads).unwrap();
        let (q, n) = (r.random_range(1..4), r.random_range(1..6));
        let inputs = [random(&mut r, q, 4), random(&mut r, n, 4), random(&mut r, n, 4)];
        let causal = q == n && seed % 2 == 0;
        let err = grad_check_with(&store, &inputs, |ctx, v| {
            project(ctx.tape(), att.forward(ctx, v[0], v[1], v[2], causal)?.output, seed)
        });
        assert!(err < FD_TOL, "mha inputs {seed}: {err:e}");
        let (qi, ki, vi) = (inputs[0].clone(), inputs[1].clone(), inputs[2].clone());
        let err = param_grad_check(&store, 16, |ctx| {
            let (a, b, c) = (ctx.constant(qi.clone()), ctx.constant(ki.clone()), ctx.constant(vi.clone()));
            project(ctx.tape(), att.forward(ctx, a, b, c, causal)?.output, seed)
        });
        assert!(err < FD_TOL, "mha params {seed}: {err:e}");
    }
}

pub fn encoder_layer_gradients() {
    store_check("encoder_layer", |s, init, r| {
        let layer = EncoderLayer::new(s, init, "enc", 4, 2).unwrap();
        let x = random(r, 3, 4);
        Box::new(move |ctx| project(ctx.tape(), layer.forward(ctx, ctx.constant(x.clone()))?, 4))
    });
}

pub fn relational_memory_gradients() {
    store_check("memory_update", |s, init, r| {
        let mem = RelationalMemory::new(s, init, "mem", 3, 4, 2).unwrap();
        let xs = random(r, 2, 4);
        Box::new(move |ctx| {
            let mut m = mem.initial(ctx)?;
            let e = ctx.constant(xs.clone());
            for t in 0..2 {
                m = mem.update(ctx, m, e.slice_rows(t, 1)?)?.memory;
            }
            project(ctx.tape(), m, 5)
        })
    });
}

pub fn decoder_gradients() {
    store_check("decoder", |s, init, r| {
        let dec = Decoder::new(
            s,
            init,
            DecoderConfig {
                vocab_size: 6,
                d_model: 4,
                n_heads: 2,
                layers: 1,
                memory_slots: 2,
                max_len: 5,
            },
        )
        .unwrap();
        let context = random(r, 3, 4);
        let ids: Vec<u32> = vec![1, 4, 5, 3];
        let targets = vec![4, 5, 3, 2];
        Box::new(move |ctx| Ok(dec.forward(ctx, &ids, ctx.constant(context.clone()))?.cross_entropy(&targets, 0)?))
    });
}

fn tiny_model(ablation: Ablation) -> (ReportModel, ParamStore<f64>) {
    let config = ModelConfig {
        d_feature: 8,
        d_model: 8,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        memory_slots: 2,
        max_len: 12,
        ablation,
    };
    let vocab = Vocabulary::from_corpus(["opacity in the trachea .", "no pneumothorax , or pleural effusion ."]);
    let (model, mut params) = ReportModel::new::<f64>(config, vocab, labels(3), 7).unwrap();
    let mut r = rng(9);
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let noise = random(&mut r, 1, params.get(id).len());
        for (v, n) in params.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += 0.1 * n;
        }
    }
    (model, params)
}

pub fn end_to_end_loss_gradient_wrt_region_features() {
    let anatomy = labels(3);
    for ablation in [Ablation::Full, Ablation::NoGlobal, Ablation::NoSagate] {
        let (model, params) = tiny_model(ablation);
        let seq = model.vocab.encode("opacity in the trachea .");
        let mut r = rng(11);
        let inputs = [random(&mut r, 3, 8), random(&mut r, 1, 8), random(&mut r, 1, 8)];
        let err = grad_check_with(&params, &inputs, |ctx, v| {
            let bundle = BundleVars {
                regions: v[0],
                frontal: v[1],
                lateral: v[2],
                anatomy_labels: &anatomy,
            };
            model.loss_vars(ctx, bundle, &seq)
        });
        assert!(err < FD_TOL, "{ablation:?}: dLoss/dV error {err:e}");
    }
}

pub fn end_to_end_loss_gradient_wrt_parameters() {
    let (model, params) = tiny_model(Ablation::Full);
    let mut r = rng(12);
    let bundle = agfnet_core::fusion::FeatureBundle::new(
        random(&mut r, 3, 8),
        random(&mut r, 1, 8),
        random(&mut r, 1, 8),
        labels(3),
    )
    .unwrap();
    let seq = model.vocab.encode("no pneumothorax , or pleural effusion .");
    let err = param_grad_check(&params, 3, |ctx| model.loss(ctx, &bundle, &seq));
    assert!(err < FD_TOL, "model parameter gradient error {err:e}");
}

pub fn gradient_oracle_detects_wrong_gradients_and_kinks() {
    let x = Tensor::from_rows(&[[0.5, -0.7]]).unwrap();
    assert!(grad_check(&[x], |_, v| Ok(v[0].relu()?.sum()?)) < FD_TOL);
    assert!(rel_err(1.0, 1.01) > FD_TOL);
    // relu just left of its kink: the two step sizes disagree.
    let relu = |x: f64| x.max(0.0);
    let x0 = -0.3 * FD_STEP;
    let probe = |f: &dyn Fn(f64) -> f64, x: f64| {
        central(f(x + FD_STEP), f(x - FD_STEP), f(x + FD_STEP / 2.0), f(x - FD_STEP / 2.0))
    };
    assert_eq!(probe(&relu, x0), None);
    assert!((probe(&relu, 0.5).unwrap() - 1.0).abs() < 1e-9);
    let c = probe(&|x| x * x * x, 1.0).unwrap();
    assert!((c - 3.0).abs() < 1e-7);
}

#[allow(dead_code)]
pub const CASES: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("matmul", matmul),
    ("row_broadcasts", row_broadcasts),
    ("softmax_and_normalisation", softmax_and_normalisation),
    ("slicing_and_concatenation", slicing_and_concatenation),
    ("embedding_and_cross_entropy", embedding_and_cross_entropy),
    ("layers_parameter_gradients", layers_parameter_gradients),
    ("attention_gradients", attention_gradients),
    ("encoder_layer_gradients", encoder_layer_gradients),
    ("relational_memory_gradients", relational_memory_gradients),
    ("decoder_gradients", decoder_gradients),
    ("end_to_end_loss_gradient_wrt_region_features", end_to_end_loss_gradient_wrt_region_features),
    ("end_to_end_loss_gradient_wrt_parameters", end_to_end_loss_gradient_wrt_parameters),
    ("gradient_oracle_detects_wrong_gradients_and_kinks", gradient_oracle_detects_wrong_gradients_and_kinks),
];
