#![allow(dead_code)]

use ndarray::{Array4, Array5};
use pdo3d_nn::Layer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random5(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array5::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

pub fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between backprop and central differences of
/// `sum(r * layer(x))` over every parameter and `n_inputs` input entries.
pub fn layer_grad_check(layer: &mut dyn Layer, x: &Array5<f64>, eps: f64, n_inputs: usize, seed: u64) -> f64 {
    let y = layer.forward(x, true).unwrap();
    let r = random5(y.dim(), seed);
    layer.zero_grad();
    let gin = layer.backward(&r).unwrap();
    let grads = layer.grads().to_vec();
    let loss = |layer: &mut dyn Layer, x: &Array5<f64>| (&layer.forward(x, true).unwrap() * &r).sum();
    let mut worst = 0.0f64;
    let p0 = layer.params().to_vec();
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += eps;
        layer.params_mut().copy_from_slice(&p);
        let lp = loss(layer, x);
        p[i] -= 2.0 * eps;
        layer.params_mut().copy_from_slice(&p);
        let lm = loss(layer, x);
        layer.params_mut().copy_from_slice(&p0);
        worst = worst.max(rel_err(grads[i], (lp - lm) / (2.0 * eps), 1e-6));
    }
    let n = x.len();
    for k in 0..n_inputs.min(n) {
        let idx = (k * 7919) % n;
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        let lp = loss(layer, &xp);
        xp.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
        let lm = loss(layer, &xp);
        worst = worst.max(rel_err(gin.as_slice().unwrap()[idx], (lp - lm) / (2.0 * eps), 1e-6));
    }
    worst
}
