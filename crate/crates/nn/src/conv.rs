//! Dense 3D cross-correlation on batches `(N, C, D, H, W)`.
//!
//! `out[n, o, p] = sum_{i, t} w[o, i, t] * x[n, i, p + t - r]` for "same"
//! padding (`r` the stencil radius, zero outside the volume) and
//! `x[n, i, p + t]` for "valid".

use ndarray::{Array5, ArrayView5};
use pdo3d_core::DiscreteFilter;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

impl Padding {
    fn shift(self, k: usize) -> i64 {
        match self {
            Padding::Same => (k / 2) as i64,
            Padding::Valid => 0,
        }
    }

    pub fn output_size(self, n: usize, k: usize) -> Option<usize> {
        match self {
            Padding::Same => Some(n),
            Padding::Valid => n.checked_sub(k - 1).filter(|&m| m > 0),
        }
    }
}

/// Which taps a filter bank may use; conv loops skip the rest.
pub fn full_mask(k: usize) -> Vec<bool> {
    vec![true; k * k * k]
}

struct Geometry {
    k: usize,
    shift: i64,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn new(x: [usize; 3], k: usize, pad: Padding) -> Result<Self> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = pad.output_size(x[a], k).ok_or_else(|| {
                NnError::Shape(format!("input extent {} too small for a {k}-wide valid filter", x[a]))
            })?;
        }
        Ok(Geometry {
            k,
            shift: pad.shift(k),
            inp: x,
            out,
        })
    }

    /// Output range along one axis whose input `p + t - shift` is inside.
    fn range(&self, axis: usize, t: usize) -> (usize, usize, i64) {
        let off = t as i64 - self.shift;
        let lo = (-off).max(0) as usize;
        let hi = (self.inp[axis] as i64 - off).min(self.out[axis] as i64).max(0) as usize;
        (lo, hi.max(lo), off)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        let k = self.k;
        (0..k * k * k).map(move |t| (t, [t / (k * k), (t / k) % k, t % k]))
    }
}

fn spatial(s: &[usize]) -> [usize; 3] {
    [s[2], s[3], s[4]]
}

fn check(x: &ArrayView5<f64>, f: &DiscreteFilter) -> Result<()> {
    if x.shape()[1] != f.k_in {
        return Err(NnError::Shape(format!(
            "filter expects {} input channels, got {}",
            f.k_in,
            x.shape()[1]
        )));
    }
    if f.weights.len() != f.k_out * f.k_in * f.taps() {
        return Err(NnError::Shape("filter weight count inconsistent with its shape".into()));
    }
    Ok(())
}

/// Adds `w * x[plane shifted by (oa, ob, oc)]` into `out` over the valid box.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate(
    out: &mut [f64],
    x: &[f64],
    w: f64,
    g: &Geometry,
    ra: (usize, usize, i64),
    rb: (usize, usize, i64),
    rc: (usize, usize, i64),
) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    for a in ra.0..ra.1 {
        let ia = (a as i64 + ra.2) as usize;
        for b in rb.0..rb.1 {
            let ib = (b as i64 + rb.2) as usize;
            let orow = &mut out[(a * oh + b) * ow + rc.0..(a * oh + b) * ow + rc.1];
            let start = (ia * ih + ib) * iw + (rc.0 as i64 + rc.2) as usize;
            let irow = &x[start..start + orow.len()];
            for (o, i) in orow.iter_mut().zip(irow) {
                *o += w * i;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn correlate(
    gout: &[f64],
    x: &[f64],
    g: &Geometry,
    ra: (usize, usize, i64),
    rb: (usize, usize, i64),
    rc: (usize, usize, i64),
) -> f64 {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut acc = 0.0;
    for a in ra.0..ra.1 {
        let ia = (a as i64 + ra.2) as usize;
        for b in rb.0..rb.1 {
            let ib = (b as i64 + rb.2) as usize;
            let orow = &gout[(a * oh + b) * ow + rc.0..(a * oh + b) * ow + rc.1];
            let start = (ia * ih + ib) * iw + (rc.0 as i64 + rc.2) as usize;
            let irow = &x[start..start + orow.len()];
            acc += orow.iter().zip(irow).map(|(o, i)| o * i).sum::<f64>();
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter(
    gin: &mut [f64],
    gout: &[f64],
    w: f64,
    g: &Geometry,
    ra: (usize, usize, i64),
    rb: (usize, usize, i64),
    rc: (usize, usize, i64),
) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    for a in ra.0..ra.1 {
        let ia = (a as i64 + ra.2) as usize;
        for b in rb.0..rb.1 {
            let ib = (b as i64 + rb.2) as usize;
            let orow = &gout[(a * oh + b) * ow + rc.0..(a * oh + b) * ow + rc.1];
            let start = (ia * ih + ib) * iw + (rc.0 as i64 + rc.2) as usize;
            let irow = &mut gin[start..start + orow.len()];
            for (i, o) in irow.iter_mut().zip(orow) {
                *i += w * o;
            }
        }
    }
}

/// Forward cross-correlation. Zero weights are skipped.
pub fn conv3d(x: ArrayView5<f64>, f: &DiscreteFilter, pad: Padding) -> Result<Array5<f64>> {
    check(&x, f)?;
    let x = x.as_standard_layout();
    let n = x.shape()[0];
    let g = Geometry::new(spatial(x.shape()), f.k, pad)?;
    let [od, oh, ow] = g.out;
    let [id, ih, iw] = g.inp;
    let vin = id * ih * iw;
    let vout = od * oh * ow;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array5::zeros((n, f.k_out, od, oh, ow));
    let os = out.as_slice_mut().expect("fresh array");
    let taps: Vec<_> = g
        .taps()
        .map(|(t, [a, b, c])| (t, g.range(0, a), g.range(1, b), g.range(2, c)))
        .collect();
    for s in 0..n {
        for o in 0..f.k_out {
            let ob = &mut os[(s * f.k_out + o) * vout..(s * f.k_out + o + 1) * vout];
            for i in 0..f.k_in {
                let xb = &xs[(s * f.k_in + i) * vin..(s * f.k_in + i + 1) * vin];
                let w = f.tap(o, i);
                for &(t, ra, rb, rc) in &taps {
                    if w[t] != 0.0 {
                        accumulate(ob, xb, w[t], &g, ra, rb, rc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Input gradient and weight gradient of [`conv3d`] for upstream `gout`.
/// Weight gradients are only formed for taps with `mask[t]`; the rest stay
/// zero.
pub fn conv3d_backward(
    x: ArrayView5<f64>,
    f: &DiscreteFilter,
    gout: ArrayView5<f64>,
    pad: Padding,
    mask: &[bool],
    need_input_grad: bool,
) -> Result<(Option<Array5<f64>>, Vec<f64>)> {
    check(&x, f)?;
    let x = x.as_standard_layout();
    let gout = gout.as_standard_layout();
    let n = x.shape()[0];
    let g = Geometry::new(spatial(x.shape()), f.k, pad)?;
    if gout.shape() != [n, f.k_out, g.out[0], g.out[1], g.out[2]] {
        return Err(NnError::Shape(format!(
            "upstream gradient has shape {:?}",
            gout.shape()
        )));
    }
    let vin = g.inp.iter().product::<usize>();
    let vout = g.out.iter().product::<usize>();
    let xs = x.as_slice().expect("standard layout");
    let gs = gout.as_slice().expect("standard layout");
    let taps: Vec<_> = g
        .taps()
        .map(|(t, [a, b, c])| (t, g.range(0, a), g.range(1, b), g.range(2, c)))
        .collect();
    let mut gw = vec![0.0; f.weights.len()];
    let mut gin = need_input_grad.then(|| Array5::zeros(x.raw_dim()));
    let nt = f.taps();
    for s in 0..n {
        for o in 0..f.k_out {
            let gb = &gs[(s * f.k_out + o) * vout..(s * f.k_out + o + 1) * vout];
            for i in 0..f.k_in {
                let xb = &xs[(s * f.k_in + i) * vin..(s * f.k_in + i + 1) * vin];
                let w = f.tap(o, i);
                let gwt = &mut gw[(o * f.k_in + i) * nt..(o * f.k_in + i + 1) * nt];
                for &(t, ra, rb, rc) in &taps {
                    if mask[t] {
                        gwt[t] += correlate(gb, xb, &g, ra, rb, rc);
                    }
                }
                if let Some(gin) = gin.as_mut() {
                    let gi = gin.as_slice_mut().expect("fresh array");
                    let gib = &mut gi[(s * f.k_in + i) * vin..(s * f.k_in + i + 1) * vin];
                    for &(t, ra, rb, rc) in &taps {
                        if w[t] != 0.0 {
                            scatter(gib, gb, w[t], &g, ra, rb, rc);
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn random_filter(ko: usize, ki: usize, k: usize, seed: u64) -> DiscreteFilter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = DiscreteFilter::zeros(ko, ki, k, "test");
        f.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        f
    }

    /// Direct quadruple loop, bounds checked per tap.
    fn naive(x: &Array5<f64>, f: &DiscreteFilter, pad: Padding) -> Array5<f64> {
        let s = x.shape();
        let k = f.k as i64;
        let sh = pad.shift(f.k);
        let od: Vec<usize> = (2..5).map(|a| pad.output_size(s[a], f.k).unwrap()).collect();
        let mut out = Array5::zeros((s[0], f.k_out, od[0], od[1], od[2]));
        for ((n, o, a, b, c), v) in out.indexed_iter_mut() {
            for i in 0..f.k_in {
                for t in 0..(k * k * k) {
                    let (ta, tb, tc) = (t / (k * k), (t / k) % k, t % k);
                    let (p, q, r) = (a as i64 + ta - sh, b as i64 + tb - sh, c as i64 + tc - sh);
                    if p >= 0 && q >= 0 && r >= 0 && (p as usize) < s[2] && (q as usize) < s[3] && (r as usize) < s[4] {
                        *v += f.tap(o, i)[t as usize] * x[[n, i, p as usize, q as usize, r as usize]];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loop() {
        for pad in [Padding::Same, Padding::Valid] {
            for k in [1, 3, 5] {
                let x = random((2, 3, 6, 7, 5), 1);
                let f = random_filter(2, 3, k, 2);
                let fast = conv3d(x.view(), &f, pad).unwrap();
                let slow = naive(&x, &f, pad);
                assert_eq!(fast.shape(), slow.shape());
                assert!((&fast - &slow).iter().all(|d| d.abs() < 1e-12), "{pad:?} k={k}");
            }
        }
    }

    #[test]
    fn delta_filter_is_identity() {
        let x = random((1, 2, 4, 4, 4), 3);
        let mut f = DiscreteFilter::zeros(2, 2, 3, "delta");
        f.tap_mut(0, 0)[13] = 1.0;
        f.tap_mut(1, 1)[13] = 1.0;
        assert_eq!(conv3d(x.view(), &f, Padding::Same).unwrap(), x);
    }

    #[test]
    fn seven_point_laplacian_on_square_ramp() {
        let n = 8;
        let x = Array5::from_shape_fn((1, 1, n, n, n), |(_, _, a, _, _)| (a as f64).powi(2));
        let mut f = DiscreteFilter::zeros(1, 1, 3, "lap");
        let w = f.tap_mut(0, 0);
        w[13] = -6.0;
        for t in [4, 10, 12, 14, 16, 22] {
            w[t] = 1.0;
        }
        let y = conv3d(x.view(), &f, Padding::Valid).unwrap();
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x), g> = <x, gin> = <w, gw> for every padding
        for pad in [Padding::Same, Padding::Valid] {
            let x = random((2, 2, 5, 6, 4), 4);
            let f = random_filter(3, 2, 3, 5);
            let y = conv3d(x.view(), &f, pad).unwrap();
            let g = random(y.dim(), 6);
            let (gin, gw) = conv3d_backward(x.view(), &f, g.view(), pad, &full_mask(3), true).unwrap();
            let lhs: f64 = (&y * &g).sum();
            let via_x: f64 = (&x * &gin.unwrap()).sum();
            let via_w: f64 = f.weights.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = random((1, 2, 4, 4, 4), 7);
        let f = random_filter(1, 3, 3, 8);
        assert!(conv3d(x.view(), &f, Padding::Same).is_err());
        assert!(conv3d(random((1, 3, 2, 4, 4), 7).view(), &f, Padding::Valid).is_err());
    }
}
