//! The field action `f -> rho(g) f(g^{-1} x)` on voxel grids and
//! equivariance error measurements.

use nalgebra::{DMatrix, Vector3};
use ndarray::{s, Array4, Array5, ArrayView4, Axis};
use pdo3d_core::group::random_rotation;
use pdo3d_core::Rotation3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::field::{FieldTensor, FieldType};
use crate::layers::Layer;
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Index permutation about the grid center; `g` must permute axes.
    ExactCubic,
    /// Trilinear resampling about the volume center, zero outside.
    Trilinear,
}

#[derive(Clone, Debug)]
pub struct VoxelRotation {
    g: Rotation3,
    mode: RotationMode,
    perm: Option<([usize; 3], [i8; 3])>,
}

impl VoxelRotation {
    pub fn new(g: Rotation3, mode: RotationMode) -> Result<Self> {
        let perm = g.as_signed_permutation(1e-9);
        if mode == RotationMode::ExactCubic && perm.is_none() {
            return Err(NnError::Invalid(format!(
                "exact cubic mode needs a signed permutation matrix, got {:?}",
                g.row_major()
            )));
        }
        Ok(VoxelRotation { g, mode, perm })
    }

    pub fn exact(g: Rotation3) -> Result<Self> {
        Self::new(g, RotationMode::ExactCubic)
    }

    pub fn trilinear(g: Rotation3) -> Self {
        Self::new(g, RotationMode::Trilinear).expect("trilinear accepts any rotation")
    }

    pub fn rotation(&self) -> &Rotation3 {
        &self.g
    }

    pub fn mode(&self) -> RotationMode {
        self.mode
    }

    /// `x(g^{-1} p)` channel by channel, without mixing channels.
    pub fn resample(&self, x: ArrayView4<f64>) -> Result<Array4<f64>> {
        match self.mode {
            RotationMode::ExactCubic => self.resample_exact(x),
            RotationMode::Trilinear => Ok(self.resample_trilinear(x)),
        }
    }

    fn resample_exact(&self, x: ArrayView4<f64>) -> Result<Array4<f64>> {
        let sh = x.shape();
        let n = sh[1];
        if sh[2] != n || sh[3] != n {
            return Err(NnError::Shape(format!(
                "exact rotation needs a cubic grid, got {:?}",
                &sh[1..]
            )));
        }
        let (perm, sign) = self.perm.expect("checked at construction");
        // Doubled centered coordinates P = 2p - (n - 1) are integers; the
        // source of output voxel p is g^T P, i.e. coordinate perm[r] of the
        // source is sign[r] * P_r.
        let m = (n - 1) as i64;
        let src = |p: [usize; 3]| {
            let mut q = [0usize; 3];
            for r in 0..3 {
                let pr = 2 * p[r] as i64 - m;
                q[perm[r]] = ((sign[r] as i64 * pr + m) / 2) as usize;
            }
            q
        };
        Ok(Array4::from_shape_fn(x.raw_dim(), |(c, a, b, d)| {
            let [i, j, k] = src([a, b, d]);
            x[[c, i, j, k]]
        }))
    }

    fn resample_trilinear(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let sh = x.shape();
        let dims = [sh[1], sh[2], sh[3]];
        let center = Vector3::new(
            (dims[0] - 1) as f64 / 2.0,
            (dims[1] - 1) as f64 / 2.0,
            (dims[2] - 1) as f64 / 2.0,
        );
        let ginv = self.g.matrix().transpose();
        let mut out = Array4::zeros(x.raw_dim());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for d in 0..dims[2] {
                    let p = Vector3::new(a as f64, b as f64, d as f64) - center;
                    let q = ginv * p + center;
                    // corner weights; snap to the grid first so exact
                    // lattice points carry no interpolation error
                    let q = q.map(|v| if (v - v.round()).abs() < 1e-9 { v.round() } else { v });
                    let base = q.map(f64::floor);
                    let frac = q - base;
                    for corner in 0..8 {
                        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                        let mut w = 1.0;
                        let mut idx = [0usize; 3];
                        let mut inside = true;
                        for ax in 0..3 {
                            let t = if off[ax] == 1 { frac[ax] } else { 1.0 - frac[ax] };
                            w *= t;
                            let i = base[ax] as i64 + off[ax] as i64;
                            if i < 0 || i >= dims[ax] as i64 {
                                inside = false;
                            } else {
                                idx[ax] = i as usize;
                            }
                        }
                        if w == 0.0 || !inside {
                            continue;
                        }
                        for c in 0..sh[0] {
                            out[[c, a, b, d]] += w * x[[c, idx[0], idx[1], idx[2]]];
                        }
                    }
                }
            }
        }
        out
    }
}

/// `out[c] = sum_c' rho[c, c'] x[c']`, skipping zero entries.
fn mix_channels(x: &Array4<f64>, rho: &DMatrix<f64>) -> Array4<f64> {
    let mut out = Array4::zeros(x.raw_dim());
    for c in 0..rho.nrows() {
        let mut oc = out.index_axis_mut(Axis(0), c);
        for cp in 0..rho.ncols() {
            let r = rho[(c, cp)];
            if r == 1.0 {
                oc += &x.index_axis(Axis(0), cp);
            } else if r != 0.0 {
                oc.scaled_add(r, &x.index_axis(Axis(0), cp));
            }
        }
    }
    out
}

/// `rho(g) x(g^{-1} p)` for one `C x D x H x W` map of field `field`.
pub fn rotate_array(x: ArrayView4<f64>, field: &FieldType, rot: &VoxelRotation) -> Result<Array4<f64>> {
    if x.shape()[0] != field.channels() {
        return Err(NnError::Shape(format!("{} channels for field {}", x.shape()[0], field)));
    }
    let rho = field.rep().eval(&rot.g)?;
    Ok(mix_channels(&rot.resample(x)?, &rho))
}

pub fn rotate_voxels(t: &FieldTensor, rot: &VoxelRotation) -> Result<FieldTensor> {
    let data = rotate_array(t.data().view(), t.field(), rot)?;
    FieldTensor::new(t.field().clone(), data)
}

/// [`rotate_array`] applied to every element of a batch.
pub fn rotate_batch(x: &Array5<f64>, field: &FieldType, rot: &VoxelRotation) -> Result<Array5<f64>> {
    let mut out = Array5::zeros(x.raw_dim());
    for n in 0..x.shape()[0] {
        out.index_axis_mut(Axis(0), n)
            .assign(&rotate_array(x.index_axis(Axis(0), n), field, rot)?);
    }
    Ok(out)
}

/// All 24 rotations of the cube as exact voxel rotations.
pub fn cubic_rotations() -> Vec<VoxelRotation> {
    let o = pdo3d_core::FiniteRotationGroup::build(pdo3d_core::GroupSpec::O).expect("cube group");
    o.elements()
        .iter()
        .map(|g| VoxelRotation::exact(*g).expect("cube elements permute axes"))
        .collect()
}

/// `n` Haar-random rotations in trilinear mode.
pub fn random_rotations<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<VoxelRotation> {
    (0..n).map(|_| VoxelRotation::trilinear(random_rotation(rng))).collect()
}

/// One measured sample; `error` is `None` when the reference output has
/// zero norm and the relative error is undefined.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivSample {
    pub rotation_id: usize,
    pub input_id: usize,
    pub error: Option<f64>,
}

/// `mean`, `std` and count over the defined errors.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorSummary {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub n: usize,
    pub undefined: usize,
}

pub fn summarize(samples: &[EquivSample]) -> ErrorSummary {
    let vals: Vec<f64> = samples.iter().filter_map(|s| s.error).collect();
    let n = vals.len();
    let mean = if n > 0 {
        vals.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let var = if n > 0 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let max = vals.iter().cloned().fold(0.0, f64::max);
    ErrorSummary {
        mean,
        std: var.sqrt(),
        max,
        n,
        undefined: samples.len() - n,
    }
}

fn crop(x: &Array4<f64>, margin: usize) -> ndarray::ArrayView4<'_, f64> {
    let sh = x.shape();
    let m = margin.min(sh[1] / 2).min(sh[2] / 2).min(sh[3] / 2);
    x.slice(s![.., m..sh[1] - m, m..sh[2] - m, m..sh[3] - m])
}

fn rel_error(diff_norm: f64, ref_norm: f64) -> Option<f64> {
    (ref_norm > 0.0 && ref_norm.is_finite()).then(|| diff_norm / ref_norm)
}

fn l2(x: ndarray::ArrayView4<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `|pi'(g) L(f) - L(pi(g) f)| / |L(f)|` on the interior crop, for every
/// rotation paired with every input (rotation-major). The layer runs in
/// inference mode.
pub fn layer_equivariance_error(
    layer: &mut dyn Layer,
    rotations: &[VoxelRotation],
    inputs: &[Array4<f64>],
    margin: usize,
) -> Result<Vec<EquivSample>> {
    let fin = layer.in_field().clone();
    let fout = layer.out_field().clone();
    let mut out = Vec::with_capacity(rotations.len() * inputs.len());
    let run = |layer: &mut dyn Layer, x: &Array4<f64>| -> Result<Array4<f64>> {
        let y = layer.forward(&x.clone().insert_axis(Axis(0)), false)?;
        Ok(y.index_axis_move(Axis(0), 0))
    };
    let base: Vec<Array4<f64>> = inputs.iter().map(|x| run(layer, x)).collect::<Result<_>>()?;
    for (r, rot) in rotations.iter().enumerate() {
        for (i, x) in inputs.iter().enumerate() {
            let lhs = rotate_array(base[i].view(), &fout, rot)?;
            let rhs = run(layer, &rotate_array(x.view(), &fin, rot)?)?;
            let diff = &lhs - &rhs;
            out.push(EquivSample {
                rotation_id: r,
                input_id: i,
                error: rel_error(l2(crop(&diff, margin)), l2(crop(&base[i], margin))),
            });
        }
    }
    Ok(out)
}

/// `|Phi(pi(g_i) I_i) - Phi(I_i)| / |Phi(I_i)|` for paired rotations and
/// inputs; `inputs.len()` must equal `rotations.len()` or be 1 (one input
/// shared by every rotation). The model must end in pooled scalars.
pub fn model_equivariance_error(
    model: &mut Model,
    rotations: &[VoxelRotation],
    inputs: &[Array4<f64>],
) -> Result<Vec<EquivSample>> {
    if !model.has_invariant_output() {
        return Err(NnError::Field(format!(
            "model output ({} at spatial {:?}) is not a pooled scalar field",
            model.out_field(),
            model.out_spatial()
        )));
    }
    if !(inputs.len() == rotations.len() || inputs.len() == 1) {
        return Err(NnError::Invalid(format!(
            "{} inputs for {} rotations",
            inputs.len(),
            rotations.len()
        )));
    }
    let fin = model.in_field().clone();
    let mut out = Vec::with_capacity(rotations.len());
    let mut cache: Option<Array4<f64>> = None;
    for (r, rot) in rotations.iter().enumerate() {
        let i = if inputs.len() == 1 { 0 } else { r };
        let x = &inputs[i];
        let base = match (&cache, inputs.len()) {
            (Some(b), 1) => b.clone(),
            _ => {
                let b = model
                    .forward(&x.clone().insert_axis(Axis(0)), false)?
                    .index_axis_move(Axis(0), 0);
                cache = Some(b.clone());
                b
            }
        };
        let moved = rotate_array(x.view(), &fin, rot)?.insert_axis(Axis(0));
        let y = model.forward(&moved, false)?.index_axis_move(Axis(0), 0);
        out.push(EquivSample {
            rotation_id: r,
            input_id: i,
            error: rel_error(l2((&y - &base).view()), l2(base.view())),
        });
    }
    Ok(out)
}

/// Radial window: 1 inside radius `r0`, cosine taper to 0 at `r1`,
/// measured from the grid center.
pub fn ball_window(n: usize, r0: f64, r1: f64) -> Array4<f64> {
    let c = (n - 1) as f64 / 2.0;
    Array4::from_shape_fn((1, n, n, n), |(_, a, b, d)| {
        let r = ((a as f64 - c).powi(2) + (b as f64 - c).powi(2) + (d as f64 - c).powi(2)).sqrt();
        if r <= r0 {
            1.0
        } else if r >= r1 {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * (r - r0) / (r1 - r0)).cos())
        }
    })
}

/// Separable Gaussian blur of each channel, zero boundary, kernel
/// truncated at `3 sigma` and normalized.
pub fn gaussian_blur(x: &Array4<f64>, sigma: f64) -> Array4<f64> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut kern: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|k| *k /= total);
    let mut cur = x.clone();
    for axis in 1..4 {
        let n = cur.shape()[axis] as i64;
        let mut next = Array4::zeros(cur.raw_dim());
        for (idx, v) in next.indexed_iter_mut() {
            let p = [idx.0, idx.1, idx.2, idx.3];
            let mut acc = 0.0;
            for (t, k) in (-r..=r).zip(&kern) {
                let q = p[axis] as i64 + t;
                if q >= 0 && q < n {
                    let mut src = p;
                    src[axis] = q as usize;
                    acc += k * cur[src];
                }
            }
            *v = acc;
        }
        cur = next;
    }
    cur
}

/// White Gaussian noise on one channel, optionally blurred, inside a
/// tapered ball so rotations about the center lose nothing at the corners.
pub fn windowed_noise<R: Rng + ?Sized>(n: usize, blur_sigma: f64, r0: f64, r1: f64, rng: &mut R) -> Array4<f64> {
    let noise = Array4::from_shape_simple_fn((1, n, n, n), || StandardNormal.sample(rng));
    let smooth = gaussian_blur(&noise, blur_sigma);
    smooth * ball_window(n, r0, r1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdo3d_core::{Group, GroupSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_action_composes_bit_for_bit() {
        let o = Group::build(GroupSpec::O).unwrap();
        let field = FieldType::parse(&o, "sum:trivial+regular+quotient:V").unwrap();
        let x = random((31, 5, 5, 5), 1);
        let rots = cubic_rotations();
        for g in &rots {
            for h in rots.iter().step_by(5) {
                let gh = VoxelRotation::exact(g.rotation().compose(h.rotation())).unwrap();
                let seq = rotate_array(rotate_array(x.view(), &field, h).unwrap().view(), &field, g).unwrap();
                let once = rotate_array(x.view(), &field, &gh).unwrap();
                assert_eq!(seq, once);
            }
        }
    }

    #[test]
    fn identity_is_identity_in_both_modes() {
        let x = random((1, 6, 6, 6), 2);
        let t = FieldType::parse(&Group::build(GroupSpec::SO3).unwrap(), "trivial").unwrap();
        for rot in [
            VoxelRotation::exact(Rotation3::identity()).unwrap(),
            VoxelRotation::trilinear(Rotation3::identity()),
        ] {
            assert_eq!(rotate_array(x.view(), &t, &rot).unwrap(), x);
        }
    }

    #[test]
    fn trilinear_agrees_with_exact_on_cubic_rotations() {
        let x = random((1, 6, 6, 6), 3);
        let t = FieldType::parse(&Group::build(GroupSpec::O).unwrap(), "trivial").unwrap();
        for rot in cubic_rotations() {
            let tri = VoxelRotation::trilinear(*rot.rotation());
            let a = rotate_array(x.view(), &t, &rot).unwrap();
            let b = rotate_array(x.view(), &t, &tri).unwrap();
            assert!((&a - &b).iter().all(|d| d.abs() < 1e-15));
        }
    }

    #[test]
    fn exact_mode_rejects_generic_rotation() {
        assert!(VoxelRotation::exact(pdo3d_core::group::rot_z(0.3)).is_err());
    }

    #[test]
    fn trilinear_constant_stays_constant_inside() {
        let x = Array4::from_elem((1, 12, 12, 12), 2.5);
        let t = FieldType::parse(&Group::build(GroupSpec::SO3).unwrap(), "trivial").unwrap();
        let rot = VoxelRotation::trilinear(pdo3d_core::group::rot_z(0.7) * pdo3d_core::group::rot_y(0.4));
        let y = rotate_array(x.view(), &t, &rot).unwrap();
        // the rotated cube covers the inscribed ball
        let c = 5.5;
        for ((_, a, b, d), v) in y.indexed_iter() {
            let r = ((a as f64 - c).powi(2) + (b as f64 - c).powi(2) + (d as f64 - c).powi(2)).sqrt();
            if r < 4.5 {
                assert!((v - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_preserves_mass_away_from_boundary() {
        let mut x = Array4::zeros((1, 15, 15, 15));
        x[[0, 7, 7, 7]] = 1.0;
        let y = gaussian_blur(&x, 1.5);
        assert!((y.sum() - 1.0).abs() < 1e-12);
        assert!((y[[0, 7, 7, 6]] - y[[0, 6, 7, 7]]).abs() < 1e-15);
    }
}
