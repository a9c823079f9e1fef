mod common;

use common::{random4, random5};
use ndarray::{s, Array5, Axis};
use pdo3d_core::{Group, GroupSpec};
use pdo3d_nn::equiv::{cubic_rotations, rotate_array, rotate_batch};
use pdo3d_nn::layers::{AvgPool, EquivConv, FieldBatchNorm, Gate, GlobalAvgPool, NormRelu, Relu, ScaleBatchNorm};
use pdo3d_nn::{FieldType, Layer, Padding, SchemeSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cube() -> Group {
    Group::build(GroupSpec::O).unwrap()
}

fn so3() -> Group {
    Group::build(GroupSpec::SO3).unwrap()
}

fn fd_conv(fin: &FieldType, fout: &FieldType) -> EquivConv {
    EquivConv::new(fin, fout, SchemeSpec::Fd.build().unwrap(), Padding::Same).unwrap()
}

#[test]
fn zero_coefficients_give_zero_output() {
    let o = cube();
    let f = FieldType::parse(&o, "regular").unwrap();
    let mut c = fd_conv(&FieldType::parse(&o, "trivial").unwrap(), &f);
    let y = c.forward(&random5((1, 1, 5, 5, 5), 1), false).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn identity_coefficient_passes_input_through() {
    let t = FieldType::parse(&cube(), "trivial").unwrap();
    let mut c = fd_conv(&t, &t);
    assert_eq!(c.basis().dims(), (1, 0, 1));
    let mut coeffs = vec![0.0; 2];
    let b0 = c.basis().element(0).b0[(0, 0)];
    coeffs[0] = 1.0 / b0;
    c.set_coefficients(&coeffs).unwrap();
    let x = random5((2, 1, 4, 5, 6), 2);
    let y = c.forward(&x, false).unwrap();
    assert!((&y - &x).iter().all(|d| d.abs() < 1e-15));
}

#[test]
fn conv_rejects_wrong_field() {
    let o = cube();
    let t = FieldType::parse(&o, "trivial").unwrap();
    let mut c = fd_conv(&t, &t);
    assert!(c.forward(&random5((1, 2, 4, 4, 4), 3), false).is_err());
}

#[test]
fn he_init_is_seeded_and_hits_target_variance() {
    let o = cube();
    let fin = FieldType::parse(&o, "regular").unwrap();
    let fout = FieldType::parse(&o, "sum:regular+quotient:V").unwrap();
    let mut c = fd_conv(&fin, &fout);
    c.init_he(&mut ChaCha8Rng::seed_from_u64(5));
    let a = c.coefficients().to_vec();
    c.init_he(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, c.coefficients());

    // Monte Carlo: per-channel variance on white unit-variance input
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut total = 0.0;
    let trials = 100;
    for t in 0..trials {
        c.init_he(&mut rng);
        let x = random5((1, 24, 7, 7, 7), 100 + t) * 3f64.sqrt();
        let y = c.forward(&x, false).unwrap();
        total += y.slice(s![.., .., 3, 3, 3]).mapv(|v| v * v).mean().unwrap();
    }
    let var = total / trials as f64;
    assert!(var > 1.0 && var < 4.0, "pre-activation variance {var}, target 2");
}

#[test]
fn empty_basis_gives_no_coefficients() {
    // D1 -> D0 over SO(3) has no zeroth- or second-order intertwiner; only
    // the divergence survives, and D1 -> D3 does not even have that.
    let g = so3();
    let c = fd_conv(
        &FieldType::parse(&g, "irrep:1").unwrap(),
        &FieldType::parse(&g, "irrep:0").unwrap(),
    );
    assert_eq!(c.basis().dims(), (0, 1, 0));
    let c = fd_conv(
        &FieldType::parse(&g, "irrep:1").unwrap(),
        &FieldType::parse(&g, "irrep:4").unwrap(),
    );
    assert!(c.coefficients().is_empty());
}

#[test]
fn relu_admissibility() {
    let g = so3();
    assert!(Relu::new(&FieldType::parse(&g, "irrep:1").unwrap()).is_err());
    let o = cube();
    let f = FieldType::parse(&o, "sum:regular+quotient:T").unwrap();
    let mut r = Relu::new(&f).unwrap();
    let y = r
        .forward(&(random5((1, 26, 3, 3, 3), 7).mapv(|v| -v.abs() - 0.1)), false)
        .unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn relu_and_field_bn_commute_with_cubic_action() {
    let f = FieldType::parse(&cube(), "sum:regular+quotient:V+trivial").unwrap();
    let x = random5((3, 31, 4, 4, 4), 8);
    let mut relu = Relu::new(&f).unwrap();
    let mut bn = FieldBatchNorm::new(&f).unwrap();
    bn.params_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, p)| *p = 0.3 + 0.1 * i as f64);
    for rot in cubic_rotations() {
        let gx = rotate_batch(&x, &f, &rot).unwrap();
        assert_eq!(
            relu.forward(&gx, false).unwrap(),
            rotate_batch(&relu.forward(&x, false).unwrap(), &f, &rot).unwrap()
        );
        let a = bn.forward(&gx, true).unwrap();
        let b = rotate_batch(&bn.forward(&x, true).unwrap(), &f, &rot).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn field_bn_statistics() {
    let f = FieldType::parse(&cube(), "sum:quotient:Vx2").unwrap();
    let mut bn = FieldBatchNorm::new(&f).unwrap();
    bn.params_mut().copy_from_slice(&[2.0, 0.5, -1.0, 3.0]);
    let y = bn.forward(&(random5((4, 12, 3, 3, 3), 9) * 5.0 + 1.0), true).unwrap();
    for (k, (gamma, beta)) in [(2.0, -1.0), (0.5, 3.0)].into_iter().enumerate() {
        let b = y.slice(s![.., 6 * k..6 * k + 6, .., .., ..]);
        let m = b.mean().unwrap();
        let v = b.mapv(|x| (x - m) * (x - m)).mean().unwrap();
        assert!((m - beta).abs() < 1e-12);
        assert!((v - gamma * gamma).abs() < 1e-3);
    }
    let c = bn.forward(&Array5::from_elem((2, 12, 2, 2, 2), 4.0), true).unwrap();
    assert!(c
        .slice(s![.., ..6, .., .., ..])
        .iter()
        .all(|&v| (v + 1.0).abs() < 1e-12));
    let g = so3();
    assert!(FieldBatchNorm::new(&FieldType::parse(&g, "irrep:1").unwrap()).is_err());
}

#[test]
fn scale_bn_normalizes_rms_and_ignores_scale() {
    let f = FieldType::parse(&so3(), "sum:irrep:1x2+irrep:2").unwrap();
    let mut bn = ScaleBatchNorm::new(&f);
    let x = random5((2, 11, 4, 4, 4), 10);
    let y = bn.forward(&x, true).unwrap();
    for (a, b) in [(0, 3), (3, 6), (6, 11)] {
        let rms = y.slice(s![.., a..b, .., .., ..]).mapv(|v| v * v).sum() / (2.0 * 64.0);
        assert!((rms - 1.0).abs() < 1e-3);
    }
    let y2 = bn.forward(&(&x * 7.5), true).unwrap();
    assert!((&y - &y2).iter().all(|d| d.abs() < 1e-5));
}

#[test]
fn norm_relu_limits() {
    let f = FieldType::parse(&so3(), "sum:irrep:1x2").unwrap();
    let mut nr = NormRelu::new(&f);
    let x = random5((1, 6, 3, 3, 3), 11);
    assert!((&nr.forward(&x, false).unwrap() - &x).iter().all(|d| d.abs() < 1e-15));
    nr.params_mut().copy_from_slice(&[10.0, 10.0]);
    assert!(nr.forward(&x, false).unwrap().iter().all(|&v| v == 0.0));
    assert!(NormRelu::new(&f)
        .forward(&Array5::zeros((1, 6, 2, 2, 2)), false)
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn gate_limits_and_count_mismatch() {
    let g = so3();
    let f = FieldType::parse(&g, "sum:irrep:0x3+irrep:1+irrep:2").unwrap();
    // one scalar, two gates, two gated fields
    let mut gate = Gate::new(&f, 1).unwrap();
    assert_eq!(gate.out_field().channels(), 1 + 3 + 5);
    let mut x = random5((1, 11, 2, 2, 2), 12);
    x.slice_mut(s![.., 1, .., .., ..]).fill(1e3);
    x.slice_mut(s![.., 2, .., .., ..]).fill(-1e3);
    let y = gate.forward(&x, false).unwrap();
    assert!(
        (&y.slice(s![.., 1..4, .., .., ..]) - &x.slice(s![.., 3..6, .., .., ..]))
            .iter()
            .all(|d| d.abs() < 1e-12)
    );
    assert!(y.slice(s![.., 4.., .., .., ..]).iter().all(|v| v.abs() < 1e-300));
    assert!(Gate::new(&FieldType::parse(&g, "sum:irrep:0x2+irrep:1").unwrap(), 0).is_err());
    let gated = FieldType::parse(&g, "sum:irrep:1x2").unwrap();
    assert!(Gate::gate_fields(&random5((1, 6, 2, 2, 2), 1), &gated, &random5((1, 3, 2, 2, 2), 2)).is_err());
}

#[test]
fn gate_commutes_with_cubic_rotations_on_irreps() {
    let g = so3();
    let f = FieldType::parse(&g, "sum:irrep:0x4+irrep:1+irrep:2+irrep:1").unwrap();
    let mut gate = Gate::new(&f, 1).unwrap();
    let x = random4((15, 4, 4, 4), 13);
    let y = gate
        .forward(&x.clone().insert_axis(Axis(0)), false)
        .unwrap()
        .index_axis_move(Axis(0), 0);
    for rot in cubic_rotations() {
        let gx = rotate_array(x.view(), &f, &rot).unwrap().insert_axis(Axis(0));
        let lhs = gate.forward(&gx, false).unwrap().index_axis_move(Axis(0), 0);
        let rhs = rotate_array(y.view(), gate.out_field(), &rot).unwrap();
        assert!((&lhs - &rhs).iter().all(|d| d.abs() < 1e-6));
    }
}

#[test]
fn pooling() {
    let f = FieldType::parse(&cube(), "regular").unwrap();
    let c = Array5::from_elem((2, 24, 4, 4, 4), 1.5);
    let mut p = AvgPool::new(&f, 2).unwrap();
    assert!(p.forward(&c, false).unwrap().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    let x = random5((1, 24, 4, 4, 4), 14);
    assert_eq!(AvgPool::new(&f, 1).unwrap().forward(&x, false).unwrap(), x);
    assert!(AvgPool::new(&f, 3).unwrap().forward(&x, false).is_err());

    let mut gp = GlobalAvgPool::new(&f);
    let base = gp.forward(&x, false).unwrap().index_axis_move(Axis(0), 0);
    for rot in cubic_rotations() {
        let moved = rotate_batch(&x, &f, &rot).unwrap();
        let pooled = gp.forward(&moved, false).unwrap().index_axis_move(Axis(0), 0);
        let expect = rotate_array(base.view(), &f, &rot).unwrap();
        assert!((&pooled - &expect).iter().all(|d| d.abs() < 1e-15));
    }
}
