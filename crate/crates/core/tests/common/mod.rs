//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use asyndgan_core::autodiff::{grad_check, Graph, OpKind, Tensor, Var};
use asyndgan_core::gan::{d_loss, g_loss_from_node, one_hot, GLossVariant};
use asyndgan_core::metrics::{BinaryMask, InstanceMask};
use asyndgan_core::nn::{DiscriminatorNet, Mlp, MlpShape};
use asyndgan_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-6;

/// Values in `±[0.1, 2]`, keeping clear of the kinks in relu-like ops.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
}

/// Every op kind with the input shapes it is checked at.
pub fn op_kinds() -> Vec<(OpKind, Vec<Vec<usize>>)> {
    let m = vec![3, 4];
    vec![
        (OpKind::Add, vec![m.clone(), m.clone()]),
        (OpKind::Sub, vec![m.clone(), m.clone()]),
        (OpKind::Mul, vec![m.clone(), m.clone()]),
        (OpKind::MatMul, vec![m.clone(), vec![4, 2]]),
        (OpKind::Linear, vec![m.clone(), vec![2, 4], vec![2]]),
        (OpKind::Mean, vec![m.clone()]),
        (OpKind::Scale(-1.7), vec![m.clone()]),
        (OpKind::Concat, vec![m.clone(), vec![3, 2]]),
        (OpKind::Relu, vec![m.clone()]),
        (OpKind::LeakyRelu(0.2), vec![m.clone()]),
        (OpKind::Sigmoid, vec![m.clone()]),
        (OpKind::Log, vec![m.clone()]),
        (OpKind::LogSigmoid, vec![m.clone()]),
        (OpKind::Dropout { rate: 0.3, seed: 11 }, vec![m]),
    ]
}

/// Largest grad_check error of `kind` over each of its inputs, at points
/// drawn from `seed`. Non-scalar outputs are reduced by a fixed random
/// weighting so every output element contributes.
pub fn op_grad_error(kind: &OpKind, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |s: &[usize], rng: &mut ChaCha8Rng| {
        if matches!(kind, OpKind::Log) {
            positive(s, rng)
        } else {
            away_from_zero(s, rng)
        }
    };
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| draw(s, &mut rng)).collect();
    let mut worst: f64 = 0.0;
    for slot in 0..inputs.len() {
        let probe = |g: &mut Graph<f64>, leaf: Var| -> Result<Var> {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == slot { leaf } else { g.constant(t.clone()) })
                .collect();
            let out = g.apply(kind, &vars)?;
            let shape = g.value(out).shape().to_vec();
            let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
            let weights = away_from_zero(&shape, &mut wrng);
            let w = g.constant(weights);
            let weighted = g.mul(out, w)?;
            g.mean(weighted)
        };
        worst = worst.max(grad_check(probe, &inputs[slot], GRAD_EPS)?);
    }
    Ok(worst)
}

fn small_d(seed: u64) -> DiscriminatorNet<f64> {
    let mut d = DiscriminatorNet::<f64>::new(3, &[8, 8]).unwrap();
    d.mlp.init_params(seed);
    d
}

/// grad_check errors for the full losses: d_loss and both g_loss variants
/// with respect to the fake batch and to the discriminator's first weight,
/// and the generator-through-discriminator objective with respect to the
/// generator's first weight.
pub fn loss_grad_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let m = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = small_d(seed);
    let real = away_from_zero(&[m, 1], &mut rng);
    let fake = away_from_zero(&[m, 1], &mut rng);
    let xs: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
    let aux: Tensor<f64> = one_hot(&xs, 3)?;
    let w0 = d.mlp.layers()[0].weight.clone();
    let mut out = Vec::new();

    out.push((
        "d_loss wrt fake",
        grad_check(
            |g, leaf| {
                let p = d.mlp.bind(g, false);
                let r = g.constant(real.clone());
                let x = g.constant(aux.clone());
                d_loss(g, &d, &p, r, leaf, x)
            },
            &fake,
            GRAD_EPS,
        )?,
    ));
    out.push((
        "d_loss wrt discriminator weight",
        grad_check(
            |g, leaf| {
                let mut p = d.mlp.bind(g, false);
                p.set(0, leaf);
                let r = g.constant(real.clone());
                let f = g.constant(fake.clone());
                let x = g.constant(aux.clone());
                d_loss(g, &d, &p, r, f, x)
            },
            &w0,
            GRAD_EPS,
        )?,
    ));
    for (name, variant) in [
        ("g_loss (saturating) wrt fake", GLossVariant::Saturating),
        ("g_loss (non-saturating) wrt fake", GLossVariant::NonSaturating),
    ] {
        out.push((
            name,
            grad_check(
                |g, leaf| {
                    let p = d.mlp.bind(g, false);
                    let x = g.constant(aux.clone());
                    g_loss_from_node(g, &d, &p, leaf, x, variant)
                },
                &fake,
                GRAD_EPS,
            )?,
        ));
    }
    out.push((
        "g_loss wrt discriminator weight",
        grad_check(
            |g, leaf| {
                let mut p = d.mlp.bind(g, false);
                p.set(0, leaf);
                let f = g.constant(fake.clone());
                let x = g.constant(aux.clone());
                g_loss_from_node(g, &d, &p, f, x, GLossVariant::Saturating)
            },
            &w0,
            GRAD_EPS,
        )?,
    ));

    let mut gen = Mlp::<f64>::new(MlpShape {
        widths: vec![3, 8, 8, 1],
        leaky_slope: 0.2,
        dropout: 0.5,
    })?;
    gen.init_params(seed.wrapping_add(100));
    let gw0 = gen.layers()[0].weight.clone();
    out.push((
        "generator objective wrt generator weight",
        grad_check(
            |g, leaf| {
                let mut gp = gen.bind(g, false);
                gp.set(0, leaf);
                let x = g.constant(aux.clone());
                let mut noise = ChaCha8Rng::seed_from_u64(seed);
                let fake = gen.forward(g, &gp, x, &mut noise)?;
                let dp = d.mlp.bind(g, false);
                g_loss_from_node(g, &d, &dp, fake, x, GLossVariant::Saturating)
            },
            &gw0,
            GRAD_EPS,
        )?,
    ));
    Ok(out)
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

/// A filled axis-aligned rectangle labeled `id` on an otherwise empty mask.
pub fn rect_instance(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize, id: u32) -> InstanceMask {
    let mut labels = vec![0; h * w];
    for r in r0..(r0 + rh).min(h) {
        for c in c0..(c0 + rw).min(w) {
            labels[r * w + c] = id;
        }
    }
    InstanceMask::new(h, w, labels).unwrap()
}
