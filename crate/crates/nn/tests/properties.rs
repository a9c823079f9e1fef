mod common;

use std::sync::OnceLock;

use common::{random4, random5};
use nalgebra::{DMatrix, DVector};
use ndarray::Array5;
use pdo3d_core::group::random_rotation;
use pdo3d_core::{Group, GroupSpec};
use pdo3d_nn::equiv::{cubic_rotations, rotate_array, VoxelRotation};
use pdo3d_nn::layers::{EquivConv, Gate, NormRelu};
use pdo3d_nn::{FieldType, Layer, Padding, SchemeSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cube() -> &'static Group {
    static G: OnceLock<Group> = OnceLock::new();
    G.get_or_init(|| Group::build(GroupSpec::O).unwrap())
}

fn so3() -> &'static Group {
    static G: OnceLock<Group> = OnceLock::new();
    G.get_or_init(|| Group::build(GroupSpec::SO3).unwrap())
}

/// `rho(g)` applied to the channels of a single-voxel batch.
fn act(x: &Array5<f64>, rho: &DMatrix<f64>) -> Array5<f64> {
    let mut y = x.clone();
    for n in 0..x.dim().0 {
        let v = DVector::from_iterator(x.dim().1, (0..x.dim().1).map(|c| x[[n, c, 0, 0, 0]]));
        let w = rho * v;
        for c in 0..x.dim().1 {
            y[[n, c, 0, 0, 0]] = w[c];
        }
    }
    y
}

fn max_diff(a: &Array5<f64>, b: &Array5<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_rotation_is_a_group_action(a in 0usize..24, b in 0usize..24, seed in any::<u64>()) {
        let field = FieldType::parse(cube(), "regular").unwrap();
        let rots = cubic_rotations();
        let x = random4((24, 5, 5, 5), seed);
        let ab = VoxelRotation::exact(rots[a].rotation().compose(rots[b].rotation())).unwrap();
        let lhs = rotate_array(x.view(), &field, &ab).unwrap();
        let inner = rotate_array(x.view(), &field, &rots[b]).unwrap();
        let rhs = rotate_array(inner.view(), &field, &rots[a]).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn norm_nonlinearities_commute_with_irrep_actions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_rotation(&mut rng);
        let field = FieldType::parse(so3(), "sum:irrep:0+irrep:1x2+irrep:2").unwrap();
        let rho = field.rep().eval(&g).unwrap();
        let x = random5((3, field.channels(), 1, 1, 1), seed);
        let mut nr = NormRelu::new(&field);
        for b in nr.params_mut() {
            *b = -0.3;
        }
        let d = max_diff(&nr.forward(&act(&x, &rho), false).unwrap(), &act(&nr.forward(&x, false).unwrap(), &rho));
        prop_assert!(d < 1e-12, "norm-ReLU {d:e}");

        let gated = FieldType::parse(so3(), "sum:irrep:1+irrep:2").unwrap();
        let gate_in = FieldType::parse(so3(), "sum:irrep:0x3+irrep:1+irrep:2").unwrap();
        let mut gate = Gate::new(&gate_in, 1).unwrap();
        let rho_in = gate_in.rep().eval(&g).unwrap();
        let rho_out = gate.out_field().rep().eval(&g).unwrap();
        prop_assert_eq!(gate.out_field().channels(), 1 + gated.channels());
        let x = random5((2, gate_in.channels(), 1, 1, 1), seed ^ 1);
        let d = max_diff(&gate.forward(&act(&x, &rho_in), false).unwrap(), &act(&gate.forward(&x, false).unwrap(), &rho_out));
        prop_assert!(d < 1e-12, "gate {d:e}");
    }

    #[test]
    fn convolution_is_linear(a in -3.0f64..3.0, seed in any::<u64>()) {
        let fin = FieldType::parse(cube(), "quotient:V").unwrap();
        let fout = FieldType::parse(cube(), "regular").unwrap();
        let mut conv = EquivConv::new(&fin, &fout, SchemeSpec::Fd.build().unwrap(), Padding::Same).unwrap();
        conv.init_he(&mut ChaCha8Rng::seed_from_u64(seed));
        let x = random5((1, 6, 4, 4, 4), seed);
        let y = random5((1, 6, 4, 4, 4), seed ^ 7);
        let lhs = conv.forward(&(&x * a + &y), false).unwrap();
        let rhs = conv.forward(&x, false).unwrap() * a + conv.forward(&y, false).unwrap();
        prop_assert!(max_diff(&lhs, &rhs) < 1e-11);
    }
}
