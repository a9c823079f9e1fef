mod common;

use common::{layer_grad_check, random5};
use ndarray::Array5;
use pdo3d_core::{Group, GroupSpec};
use pdo3d_nn::layers::{
    AvgPool, Dense, EquivConv, FieldBatchNorm, Gate, GlobalAvgPool, NormRelu, Relu, ScaleBatchNorm,
};
use pdo3d_nn::{FieldType, Layer, Padding, SchemeSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn cube() -> Group {
    Group::build(GroupSpec::O).unwrap()
}

fn so3() -> Group {
    Group::build(GroupSpec::SO3).unwrap()
}

#[test]
fn conv_gradients_fd_and_gaussian() {
    let o = cube();
    let fin = FieldType::parse(&o, "sum:trivial+quotient:V").unwrap();
    let fout = FieldType::parse(&o, "sum:quotient:V+trivial").unwrap();
    let schemes = [
        SchemeSpec::Fd,
        SchemeSpec::Gaussian {
            k: 5,
            sigma: 1.0,
            corrected: true,
        },
    ];
    for (scheme, pad) in schemes.into_iter().zip([Padding::Same, Padding::Valid]) {
        let mut c = EquivConv::new(&fin, &fout, scheme.build().unwrap(), pad).unwrap();
        c.init_he(&mut ChaCha8Rng::seed_from_u64(1));
        let x = random5((2, 7, 6, 6, 6), 2);
        let err = layer_grad_check(&mut c, &x, 1e-4, 40, 3);
        assert!(err < TOL, "{scheme:?}: {err}");
    }
}

#[test]
fn conv_gradient_is_linear_in_upstream() {
    let o = cube();
    let f = FieldType::parse(&o, "quotient:T").unwrap();
    let mut c = EquivConv::new(&f, &f, SchemeSpec::Fd.build().unwrap(), Padding::Same).unwrap();
    c.init_he(&mut ChaCha8Rng::seed_from_u64(4));
    let x = random5((1, 2, 4, 4, 4), 5);
    c.forward(&x, true).unwrap();
    let (g1, g2) = (random5((1, 2, 4, 4, 4), 6), random5((1, 2, 4, 4, 4), 7));
    let grad_of = |c: &mut EquivConv, g: &Array5<f64>| {
        c.zero_grad();
        let gx = c.backward(g).unwrap();
        (gx, c.grads().to_vec())
    };
    let (a, ga) = grad_of(&mut c, &g1);
    let (b, gb) = grad_of(&mut c, &g2);
    let (s, gs) = grad_of(&mut c, &(&g1 * 2.0 + &g2));
    assert!((&s - &(&a * 2.0 + &b)).iter().all(|d| d.abs() < 1e-12));
    assert!(gs
        .iter()
        .zip(ga.iter().zip(&gb))
        .all(|(s, (a, b))| (s - 2.0 * a - b).abs() < 1e-12));
    let (z, gz) = grad_of(&mut c, &Array5::zeros((1, 2, 4, 4, 4)));
    assert!(z.iter().all(|&v| v == 0.0) && gz.iter().all(|&v| v == 0.0));
}

#[test]
fn normalization_gradients() {
    let o = cube();
    let f = FieldType::parse(&o, "sum:quotient:V+trivialx2").unwrap();
    let mut bn = FieldBatchNorm::new(&f).unwrap();
    bn.params_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, p)| *p += 0.2 * i as f64);
    let x = random5((2, 8, 3, 3, 3), 8) * 2.0 + 0.5;
    assert!(layer_grad_check(&mut bn, &x, 1e-4, 60, 9) < TOL);

    let g = so3();
    let f = FieldType::parse(&g, "sum:irrep:1+irrep:2").unwrap();
    let mut sbn = ScaleBatchNorm::new(&f);
    assert!(layer_grad_check(&mut sbn, &random5((2, 8, 3, 3, 3), 10), 1e-4, 60, 11) < TOL);
}

#[test]
fn nonlinearity_gradients() {
    let g = so3();
    let f = FieldType::parse(&g, "sum:irrep:0x3+irrep:1+irrep:2").unwrap();
    let mut gate = Gate::new(&f, 1).unwrap();
    assert!(layer_grad_check(&mut gate, &random5((2, 11, 3, 3, 3), 12), 1e-4, 80, 13) < TOL);

    let fv = FieldType::parse(&g, "sum:irrep:1x2").unwrap();
    let mut nr = NormRelu::new(&fv);
    nr.params_mut().copy_from_slice(&[0.2, 0.4]);
    assert!(layer_grad_check(&mut nr, &(random5((2, 6, 3, 3, 3), 14) * 2.0), 1e-6, 80, 15) < TOL);

    let o = cube();
    let fr = FieldType::parse(&o, "regular").unwrap();
    let mut relu = Relu::new(&fr).unwrap();
    assert!(layer_grad_check(&mut relu, &random5((1, 24, 2, 2, 2), 16), 1e-6, 80, 17) < TOL);
}

#[test]
fn pooling_and_dense_gradients() {
    let o = cube();
    let f = FieldType::parse(&o, "sum:trivialx3").unwrap();
    let x = random5((2, 3, 4, 4, 4), 18);
    assert!(layer_grad_check(&mut AvgPool::new(&f, 2).unwrap(), &x, 1e-4, 40, 19) < TOL);
    assert!(layer_grad_check(&mut GlobalAvgPool::new(&f), &x, 1e-4, 40, 20) < TOL);
    let mut d = Dense::new(&f, 4).unwrap();
    d.init_xavier(&mut ChaCha8Rng::seed_from_u64(21));
    assert!(layer_grad_check(&mut d, &random5((3, 3, 1, 1, 1), 22), 1e-4, 9, 23) < TOL);
    assert!(Dense::new(&FieldType::parse(&o, "regular").unwrap(), 2).is_err());
}
