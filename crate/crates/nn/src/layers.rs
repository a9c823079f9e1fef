//! Layers with analytic backward passes.
//!
//! Every layer caches what it needs from its last training-mode forward
//! call; `backward` consumes that cache, accumulates parameter gradients and
//! returns the input gradient.

use ndarray::{s, Array5, Axis, Zip};
use pdo3d_core::basis::solve_basis_blockwise;
use pdo3d_core::discretize::discretize;
use pdo3d_core::{BlockwiseBasis, DiscreteFilter, StencilScheme};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::conv::{conv3d, conv3d_backward, Padding};
use crate::error::{NnError, Result};
use crate::field::FieldType;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub trait Layer {
    fn name(&self) -> &'static str;
    fn in_field(&self) -> &FieldType;
    fn out_field(&self) -> &FieldType;

    /// Output spatial size for an input of size `s`.
    fn out_spatial(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        Ok(s)
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>>;

    /// Input gradient for upstream `g`; parameter gradients are added to
    /// the layer's gradient buffer.
    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>>;

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn grads(&self) -> &[f64] {
        &[]
    }

    fn zero_grad(&mut self) {}

    /// Non-learned state needed at inference (running statistics).
    fn buffers(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_buffers(&mut self, _b: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Weight of the current batch in running-statistic updates.
    fn set_stat_momentum(&mut self, _m: f64) {}

    /// Caches derived state for inference; parameter writes undo it.
    fn freeze(&mut self) {}
}

fn check_channels(x: &Array5<f64>, field: &FieldType, what: &str) -> Result<()> {
    if x.ndim() != 5 || x.shape()[1] != field.channels() {
        return Err(NnError::Field(format!(
            "{what} expects {} channels ({}), got shape {:?}",
            field.channels(),
            field,
            x.shape()
        )));
    }
    Ok(())
}

fn no_cache(name: &str) -> NnError {
    NnError::Invalid(format!("{name}: backward called without a training-mode forward"))
}

/// Steerable PDO convolution: `W = sum_j c_j * discretize(basis_j)`.
pub struct EquivConv {
    in_field: FieldType,
    out_field: FieldType,
    basis: BlockwiseBasis,
    scheme: StencilScheme,
    pad: Padding,
    /// Discretized pair-basis elements, `[pair][local index]`, each
    /// `K'_f x K_f x taps`.
    local: Vec<Vec<Vec<f64>>>,
    /// `(block, local index)` per coefficient.
    coeff_map: Vec<(usize, usize)>,
    mask: Vec<bool>,
    coeffs: Vec<f64>,
    grads: Vec<f64>,
    cache: Option<Array5<f64>>,
    frozen: Option<DiscreteFilter>,
}

impl EquivConv {
    pub fn new(in_field: &FieldType, out_field: &FieldType, scheme: StencilScheme, pad: Padding) -> Result<Self> {
        if !in_field.group().same_as(out_field.group()) {
            return Err(NnError::Field(format!(
                "conv between fields of different groups: {} vs {}",
                in_field, out_field
            )));
        }
        let basis = solve_basis_blockwise(in_field.rep(), out_field.rep(), pdo3d_core::basis::DEFAULT_REL_TOL)?;
        let local: Vec<Vec<Vec<f64>>> = basis
            .pairs()
            .iter()
            .map(|p| {
                (0..p.len())
                    .map(|j| discretize(&p.element(j), &scheme).weights)
                    .collect()
            })
            .collect();
        let coeff_map = (0..basis.len())
            .map(|j| {
                let (d, blk, i) = basis.locate(j);
                let pair = &basis.pairs()[basis.blocks()[blk].pair];
                let before: usize = (0..d).map(|e| pair.order(e).len()).sum();
                (blk, before + i)
            })
            .collect();
        let taps = scheme.k().pow(3);
        let mask = (0..taps)
            .map(|t| scheme.stencils().iter().any(|st| st.weights()[t] != 0.0))
            .collect();
        let n = basis.len();
        Ok(EquivConv {
            in_field: in_field.clone(),
            out_field: out_field.clone(),
            basis,
            scheme,
            pad,
            local,
            coeff_map,
            mask,
            coeffs: vec![0.0; n],
            grads: vec![0.0; n],
            cache: None,
            frozen: None,
        })
    }

    pub fn basis(&self) -> &BlockwiseBasis {
        &self.basis
    }

    pub fn scheme(&self) -> &StencilScheme {
        &self.scheme
    }

    pub fn padding(&self) -> Padding {
        self.pad
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn set_coefficients(&mut self, c: &[f64]) -> Result<()> {
        if c.len() != self.coeffs.len() {
            return Err(NnError::Shape(format!(
                "{} coefficients for a basis of {}",
                c.len(),
                self.coeffs.len()
            )));
        }
        self.coeffs.copy_from_slice(c);
        self.frozen = None;
        Ok(())
    }

    fn pair_dims(&self, blk: usize) -> (usize, usize) {
        let p = &self.basis.pairs()[self.basis.blocks()[blk].pair];
        (p.rho_out().dim(), p.rho_in().dim())
    }

    /// Generalized He initialization. Each output factor instance `q` gets
    /// coefficient variance `2 K'_q / sum_j |F_j|^2`, the sum running over
    /// the discretized basis filters feeding `q`; on white unit-variance
    /// input every output channel then has expected variance 2.
    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut energy = std::collections::HashMap::<usize, f64>::new();
        for &(blk, li) in &self.coeff_map {
            let b = &self.basis.blocks()[blk];
            let e: f64 = self.local[b.pair][li].iter().map(|w| w * w).sum();
            *energy.entry(b.out_offset).or_default() += e;
        }
        for j in 0..self.coeffs.len() {
            let (blk, _) = self.coeff_map[j];
            let out_offset = self.basis.blocks()[blk].out_offset;
            let (kpf, _) = self.pair_dims(blk);
            let e = energy[&out_offset];
            let std = if e > 0.0 { (2.0 * kpf as f64 / e).sqrt() } else { 0.0 };
            self.coeffs[j] = Normal::new(0.0, std).expect("finite std").sample(rng);
        }
        self.frozen = None;
    }

    /// The full filter bank for the current coefficients.
    pub fn materialize(&self) -> DiscreteFilter {
        if let Some(f) = &self.frozen {
            return f.clone();
        }
        let (ko, ki) = (self.out_field.channels(), self.in_field.channels());
        let taps = self.scheme.k().pow(3);
        let mut f = DiscreteFilter::zeros(ko, ki, self.scheme.k(), &self.scheme.id());
        for (j, &(blk, li)) in self.coeff_map.iter().enumerate() {
            let c = self.coeffs[j];
            if c == 0.0 {
                continue;
            }
            let b = &self.basis.blocks()[blk];
            let (kpf, kf) = self.pair_dims(blk);
            let l = &self.local[b.pair][li];
            for o in 0..kpf {
                for i in 0..kf {
                    let src = &l[(o * kf + i) * taps..(o * kf + i + 1) * taps];
                    let dst = f.tap_mut(b.out_offset + o, b.in_offset + i);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += c * s;
                    }
                }
            }
        }
        f
    }
}

impl Layer for EquivConv {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn in_field(&self) -> &FieldType {
        &self.in_field
    }

    fn out_field(&self) -> &FieldType {
        &self.out_field
    }

    fn out_spatial(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        let k = self.scheme.k();
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = self
                .pad
                .output_size(s[a], k)
                .ok_or_else(|| NnError::Shape(format!("extent {} too small for a valid {k}-wide conv", s[a])))?;
        }
        Ok(o)
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.in_field, "conv")?;
        let w = self.materialize();
        let y = conv3d(x.view(), &w, self.pad)?;
        self.cache = train.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let x = self.cache.as_ref().ok_or_else(|| no_cache("conv"))?;
        let w = self.materialize();
        let (gin, gw) = conv3d_backward(x.view(), &w, g.view(), self.pad, &self.mask, true)?;
        let taps = self.scheme.k().pow(3);
        let ki = self.in_field.channels();
        for (j, &(blk, li)) in self.coeff_map.iter().enumerate() {
            let b = &self.basis.blocks()[blk];
            let (kpf, kf) = self.pair_dims(blk);
            let l = &self.local[b.pair][li];
            let mut acc = 0.0;
            for o in 0..kpf {
                for i in 0..kf {
                    let src = &l[(o * kf + i) * taps..(o * kf + i + 1) * taps];
                    let start = ((b.out_offset + o) * ki + b.in_offset + i) * taps;
                    acc += src
                        .iter()
                        .zip(&gw[start..start + taps])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
            self.grads[j] += acc;
        }
        Ok(gin.expect("input gradient requested"))
    }

    fn params(&self) -> &[f64] {
        &self.coeffs
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.frozen = None;
        &mut self.coeffs
    }

    fn grads(&self) -> &[f64] {
        &self.grads
    }

    fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    fn freeze(&mut self) {
        self.frozen = None;
        self.frozen = Some(self.materialize());
    }
}

/// Pointwise `max(0, x)`; only for fields whose representations are
/// permutation matrices.
pub struct Relu {
    field: FieldType,
    mask: Option<Array5<bool>>,
}

impl Relu {
    pub fn new(field: &FieldType) -> Result<Self> {
        if !field.is_permutation() {
            return Err(NnError::Admissibility {
                op: "pointwise ReLU",
                field: field.to_string(),
                reason: "only permutation representations commute with pointwise maps",
            });
        }
        Ok(Relu {
            field: field.clone(),
            mask: None,
        })
    }
}

impl Layer for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn in_field(&self) -> &FieldType {
        &self.field
    }

    fn out_field(&self) -> &FieldType {
        &self.field
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.field, "relu")?;
        self.mask = train.then(|| x.mapv(|v| v > 0.0));
        Ok(x.mapv(relu))
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let m = self.mask.as_ref().ok_or_else(|| no_cache("relu"))?;
        Ok(Zip::from(g).and(m).map_collect(|&g, &m| if m { g } else { 0.0 }))
    }
}

/// Channel ranges of the factor instances of a field.
fn instance_ranges(field: &FieldType) -> Vec<(usize, usize)> {
    field.instances().iter().map(|i| (i.offset, i.offset + i.dim)).collect()
}

/// Batch normalization with statistics pooled over each factor instance
/// (all its channels, the batch and space) and one scale and bias per
/// instance.
pub struct FieldBatchNorm {
    field: FieldType,
    ranges: Vec<(usize, usize)>,
    /// `gamma` for every instance, then `beta`.
    params: Vec<f64>,
    grads: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    cache: Option<(Array5<f64>, Vec<f64>)>,
}

impl FieldBatchNorm {
    pub fn new(field: &FieldType) -> Result<Self> {
        if !field.is_permutation() {
            return Err(NnError::Admissibility {
                op: "field batch norm",
                field: field.to_string(),
                reason: "subtracting a mean is only equivariant for permutation fields; use scale batch norm",
            });
        }
        let ranges = instance_ranges(field);
        let q = ranges.len();
        let mut params = vec![1.0; q];
        params.extend(std::iter::repeat_n(0.0, q));
        Ok(FieldBatchNorm {
            field: field.clone(),
            ranges,
            params,
            grads: vec![0.0; 2 * q],
            running_mean: vec![0.0; q],
            running_var: vec![1.0; q],
            momentum: BN_MOMENTUM,
            cache: None,
        })
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }
}

impl Layer for FieldBatchNorm {
    fn name(&self) -> &'static str {
        "field_bn"
    }

    fn in_field(&self) -> &FieldType {
        &self.field
    }

    fn out_field(&self) -> &FieldType {
        &self.field
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.field, "field batch norm")?;
        let q = self.ranges.len();
        let mut y = x.clone();
        let mut xhat = train.then(|| Array5::zeros(x.raw_dim()));
        let mut inv_std = vec![0.0; q];
        for (k, &(a, b)) in self.ranges.iter().enumerate() {
            let block = x.slice(s![.., a..b, .., .., ..]);
            let (mean, var) = if train {
                let m = block.mean().unwrap_or(0.0);
                let v = block.mapv(|v| (v - m) * (v - m)).mean().unwrap_or(0.0);
                self.running_mean[k] = (1.0 - self.momentum) * self.running_mean[k] + self.momentum * m;
                self.running_var[k] = (1.0 - self.momentum) * self.running_var[k] + self.momentum * v;
                (m, v)
            } else {
                (self.running_mean[k], self.running_var[k])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[k] = is;
            let (gamma, beta) = (self.params[k], self.params[q + k]);
            let mut out = y.slice_mut(s![.., a..b, .., .., ..]);
            out.mapv_inplace(|v| (v - mean) * is);
            if let Some(h) = xhat.as_mut() {
                h.slice_mut(s![.., a..b, .., .., ..]).assign(&out);
            }
            out.mapv_inplace(|v| gamma * v + beta);
        }
        self.cache = xhat.map(|h| (h, inv_std));
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let (xhat, inv_std) = self.cache.as_ref().ok_or_else(|| no_cache("field batch norm"))?;
        let q = self.ranges.len();
        let mut gin = Array5::zeros(g.raw_dim());
        for (k, &(a, b)) in self.ranges.iter().enumerate() {
            let gb = g.slice(s![.., a..b, .., .., ..]);
            let hb = xhat.slice(s![.., a..b, .., .., ..]);
            let m = gb.len() as f64;
            let sum_g = gb.sum();
            let sum_gh = (&gb * &hb).sum();
            self.grads[k] += sum_gh;
            self.grads[q + k] += sum_g;
            let scale = self.params[k] * inv_std[k];
            let out = Zip::from(&gb)
                .and(&hb)
                .map_collect(|&g, &h| scale * (g - sum_g / m - h * sum_gh / m));
            gin.slice_mut(s![.., a..b, .., .., ..]).assign(&out);
        }
        Ok(gin)
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn grads(&self) -> &[f64] {
        &self.grads
    }

    fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    fn buffers(&self) -> Vec<f64> {
        [self.running_mean.as_slice(), self.running_var.as_slice()].concat()
    }

    fn set_buffers(&mut self, b: &[f64]) -> Result<()> {
        let q = self.ranges.len();
        if b.len() != 2 * q {
            return Err(NnError::Shape(format!(
                "field batch norm expects {} buffers, got {}",
                2 * q,
                b.len()
            )));
        }
        self.running_mean.copy_from_slice(&b[..q]);
        self.running_var.copy_from_slice(&b[q..]);
        Ok(())
    }

    fn set_stat_momentum(&mut self, m: f64) {
        self.momentum = m;
    }
}

/// Squared norm of each factor instance at every voxel: `(N, Q, D, H, W)`.
fn instance_sq_norms(x: &Array5<f64>, ranges: &[(usize, usize)]) -> Array5<f64> {
    let sh = x.shape();
    let mut out = Array5::zeros((sh[0], ranges.len(), sh[2], sh[3], sh[4]));
    for (k, &(a, b)) in ranges.iter().enumerate() {
        let mut o = out.index_axis_mut(Axis(1), k);
        for c in a..b {
            let xc = x.index_axis(Axis(1), c);
            Zip::from(&mut o).and(&xc).for_each(|o, &v| *o += v * v);
        }
    }
    out
}

/// Divides every factor instance by its root-mean-square norm over batch
/// and space. No learned parameters.
pub struct ScaleBatchNorm {
    field: FieldType,
    ranges: Vec<(usize, usize)>,
    running: Vec<f64>,
    momentum: f64,
    cache: Option<(Array5<f64>, Vec<f64>)>,
}

impl ScaleBatchNorm {
    pub fn new(field: &FieldType) -> Self {
        let ranges = instance_ranges(field);
        let q = ranges.len();
        ScaleBatchNorm {
            field: field.clone(),
            ranges,
            running: vec![1.0; q],
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }
}

impl Layer for ScaleBatchNorm {
    fn name(&self) -> &'static str {
        "scale_bn"
    }

    fn in_field(&self) -> &FieldType {
        &self.field
    }

    fn out_field(&self) -> &FieldType {
        &self.field
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.field, "scale batch norm")?;
        let sq = instance_sq_norms(x, &self.ranges);
        let mut y = x.clone();
        let mut ms = vec![0.0; self.ranges.len()];
        for (k, &(a, b)) in self.ranges.iter().enumerate() {
            let m = if train {
                let m = sq.index_axis(Axis(1), k).mean().unwrap_or(0.0);
                self.running[k] = (1.0 - self.momentum) * self.running[k] + self.momentum * m;
                m
            } else {
                self.running[k]
            };
            ms[k] = m;
            let inv = 1.0 / (m + BN_EPS).sqrt();
            y.slice_mut(s![.., a..b, .., .., ..]).mapv_inplace(|v| v * inv);
        }
        self.cache = train.then(|| (x.clone(), ms));
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        // y = x (m + eps)^{-1/2}, m = (1/M) sum over batch and voxels of |x|^2
        let (x, ms) = self.cache.as_ref().ok_or_else(|| no_cache("scale batch norm"))?;
        let sh = x.shape();
        let count = (sh[0] * sh[2] * sh[3] * sh[4]) as f64;
        let mut gin = Array5::zeros(g.raw_dim());
        for (k, &(a, b)) in self.ranges.iter().enumerate() {
            let xb = x.slice(s![.., a..b, .., .., ..]);
            let gb = g.slice(s![.., a..b, .., .., ..]);
            let d = ms[k] + BN_EPS;
            let dot = (&xb * &gb).sum();
            let c = dot / (count * d.powf(1.5));
            let out = Zip::from(&gb).and(&xb).map_collect(|&g, &x| g / d.sqrt() - x * c);
            gin.slice_mut(s![.., a..b, .., .., ..]).assign(&out);
        }
        Ok(gin)
    }

    fn buffers(&self) -> Vec<f64> {
        self.running.clone()
    }

    fn set_buffers(&mut self, b: &[f64]) -> Result<()> {
        if b.len() != self.running.len() {
            return Err(NnError::Shape("scale batch norm buffer count".into()));
        }
        self.running.copy_from_slice(b);
        Ok(())
    }

    fn set_stat_momentum(&mut self, m: f64) {
        self.momentum = m;
    }
}

/// `f -> ReLU(|f| - b) f / |f|` per factor instance and voxel, with a
/// learned bias `b` per instance.
pub struct NormRelu {
    field: FieldType,
    ranges: Vec<(usize, usize)>,
    bias: Vec<f64>,
    grads: Vec<f64>,
    cache: Option<Array5<f64>>,
}

impl NormRelu {
    pub fn new(field: &FieldType) -> Self {
        let ranges = instance_ranges(field);
        let q = ranges.len();
        NormRelu {
            field: field.clone(),
            ranges,
            bias: vec![0.0; q],
            grads: vec![0.0; q],
            cache: None,
        }
    }
}

impl Layer for NormRelu {
    fn name(&self) -> &'static str {
        "norm_relu"
    }

    fn in_field(&self) -> &FieldType {
        &self.field
    }

    fn out_field(&self) -> &FieldType {
        &self.field
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.field, "norm ReLU")?;
        let norms = instance_sq_norms(x, &self.ranges).mapv(f64::sqrt);
        let mut y = x.clone();
        for (k, &(a, b)) in self.ranges.iter().enumerate() {
            let nk = norms.index_axis(Axis(1), k);
            let bias = self.bias[k];
            for c in a..b {
                let mut yc = y.index_axis_mut(Axis(1), c);
                Zip::from(&mut yc).and(&nk).for_each(|v, &n| {
                    *v = if n > 0.0 && n > bias {
                        *v * (1.0 - bias / n)
                    } else {
                        0.0
                    };
                });
            }
        }
        self.cache = train.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        // for |f| > b: y = (1 - b/|f|) f, dy = (1 - b/n) dx + (b/n^3)(f.dx) f, dy/db = -f/n
        let x = self.cache.as_ref().ok_or_else(|| no_cache("norm ReLU"))?;
        let norms = instance_sq_norms(x, &self.ranges).mapv(f64::sqrt);
        let mut gin = Array5::zeros(g.raw_dim());
        let sh = x.shape();
        for (k, &(a, b)) in self.ranges.iter().enumerate() {
            let bias = self.bias[k];
            for n in 0..sh[0] {
                for i in 0..sh[2] {
                    for j in 0..sh[3] {
                        for l in 0..sh[4] {
                            let nv = norms[[n, k, i, j, l]];
                            if !(nv > 0.0 && nv > bias) {
                                continue;
                            }
                            let dot: f64 = (a..b).map(|c| x[[n, c, i, j, l]] * g[[n, c, i, j, l]]).sum();
                            self.grads[k] -= dot / nv;
                            for c in a..b {
                                gin[[n, c, i, j, l]] = (1.0 - bias / nv) * g[[n, c, i, j, l]]
                                    + bias / (nv * nv * nv) * dot * x[[n, c, i, j, l]];
                            }
                        }
                    }
                }
            }
        }
        Ok(gin)
    }

    fn params(&self) -> &[f64] {
        &self.bias
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn grads(&self) -> &[f64] {
        &self.grads
    }

    fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `max(0, v)` that lets NaN through so the divergence guard sees it.
fn relu(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Gated nonlinearity. Input instances are `[S scalars][G gates][G gated
/// fields]`; scalars go through ReLU, each gated field is multiplied by the
/// sigmoid of its gate, and the gates are consumed.
pub struct Gate {
    in_field: FieldType,
    out_field: FieldType,
    n_scalars: usize,
    /// `(gate channel, gated channel range)` per gated instance.
    gated: Vec<(usize, (usize, usize))>,
    /// Output channel offset of the first gated field.
    out_gated_offset: usize,
    in_gated_offset: usize,
    cache: Option<Array5<f64>>,
}

impl Gate {
    pub fn new(in_field: &FieldType, n_scalars: usize) -> Result<Self> {
        let inst = in_field.instances();
        let rest = inst.len().checked_sub(n_scalars).ok_or_else(|| {
            NnError::Field(format!(
                "gate: {n_scalars} scalars requested but field {in_field} has {} instances",
                inst.len()
            ))
        })?;
        if rest % 2 != 0 {
            return Err(NnError::Field(format!(
                "gate: gate count does not match gated field count in {in_field}"
            )));
        }
        let g = rest / 2;
        if let Some(bad) = inst[..n_scalars + g].iter().position(|i| !i.is_trivial()) {
            return Err(NnError::Field(format!(
                "gate: instance {bad} of {in_field} must be a scalar ({} scalars and {g} gates expected first)",
                n_scalars
            )));
        }
        let gated: Vec<_> = (0..g)
            .map(|k| {
                let f = &inst[n_scalars + g + k];
                (n_scalars + k, (f.offset, f.offset + f.dim))
            })
            .collect();
        let kept: Vec<_> = inst[..n_scalars]
            .iter()
            .chain(&inst[n_scalars + g..])
            .cloned()
            .collect();
        let out_field = FieldType::from_instances(in_field.group(), &kept)?;
        let in_gated_offset = if g > 0 { gated[0].1 .0 } else { in_field.channels() };
        Ok(Gate {
            in_field: in_field.clone(),
            out_field,
            n_scalars,
            gated,
            out_gated_offset: n_scalars,
            in_gated_offset,
            cache: None,
        })
    }

    /// Applies the gate to separately held features and gate logits.
    pub fn gate_fields(features: &Array5<f64>, field: &FieldType, gates: &Array5<f64>) -> Result<Array5<f64>> {
        let inst = field.instances();
        if gates.shape()[1] != inst.len() {
            return Err(NnError::Field(format!(
                "{} gates for {} gated instances",
                gates.shape()[1],
                inst.len()
            )));
        }
        let mut y = features.clone();
        for (k, f) in inst.iter().enumerate() {
            let s = gates.index_axis(Axis(1), k).mapv(sigmoid);
            for c in f.offset..f.offset + f.dim {
                let mut yc = y.index_axis_mut(Axis(1), c);
                Zip::from(&mut yc).and(&s).for_each(|v, &s| *v *= s);
            }
        }
        Ok(y)
    }
}

impl Layer for Gate {
    fn name(&self) -> &'static str {
        "gate"
    }

    fn in_field(&self) -> &FieldType {
        &self.in_field
    }

    fn out_field(&self) -> &FieldType {
        &self.out_field
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.in_field, "gate")?;
        let sh = x.shape();
        let mut y = Array5::zeros((sh[0], self.out_field.channels(), sh[2], sh[3], sh[4]));
        let s = self.n_scalars;
        y.slice_mut(s![.., ..s, .., .., ..])
            .assign(&x.slice(s![.., ..s, .., .., ..]).mapv(relu));
        for &(gc, (a, b)) in &self.gated {
            let gate = x.index_axis(Axis(1), gc).mapv(sigmoid);
            for c in a..b {
                let oc = c - self.in_gated_offset + self.out_gated_offset;
                let mut yc = y.index_axis_mut(Axis(1), oc);
                Zip::from(&mut yc)
                    .and(&x.index_axis(Axis(1), c))
                    .and(&gate)
                    .for_each(|o, &v, &g| *o = v * g);
            }
        }
        self.cache = train.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let x = self.cache.as_ref().ok_or_else(|| no_cache("gate"))?;
        let mut gin = Array5::zeros(x.raw_dim());
        let s = self.n_scalars;
        let xs = x.slice(s![.., ..s, .., .., ..]);
        let gs = g.slice(s![.., ..s, .., .., ..]);
        gin.slice_mut(s![.., ..s, .., .., ..])
            .assign(
                &Zip::from(&gs)
                    .and(&xs)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }),
            );
        for &(gc, (a, b)) in &self.gated {
            let sg = x.index_axis(Axis(1), gc).mapv(sigmoid);
            let mut dgate = sg.mapv(|_| 0.0);
            for c in a..b {
                let oc = c - self.in_gated_offset + self.out_gated_offset;
                let gy = g.index_axis(Axis(1), oc);
                let xc = x.index_axis(Axis(1), c);
                Zip::from(&mut dgate)
                    .and(&gy)
                    .and(&xc)
                    .for_each(|d, &gy, &xc| *d += gy * xc);
                let mut gc_in = gin.index_axis_mut(Axis(1), c);
                Zip::from(&mut gc_in)
                    .and(&gy)
                    .and(&sg)
                    .for_each(|o, &gy, &s| *o = gy * s);
            }
            let mut gg = gin.index_axis_mut(Axis(1), gc);
            Zip::from(&mut gg)
                .and(&dgate)
                .and(&sg)
                .for_each(|o, &d, &s| *o = d * s * (1.0 - s));
        }
        Ok(gin)
    }
}

/// Block-mean downsampling by an integer factor.
pub struct AvgPool {
    field: FieldType,
    factor: usize,
    in_shape: Option<Vec<usize>>,
}

impl AvgPool {
    pub fn new(field: &FieldType, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(NnError::Invalid("pooling factor must be positive".into()));
        }
        Ok(AvgPool {
            field: field.clone(),
            factor,
            in_shape: None,
        })
    }
}

impl Layer for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn in_field(&self) -> &FieldType {
        &self.field
    }

    fn out_field(&self) -> &FieldType {
        &self.field
    }

    fn out_spatial(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        if s.iter().any(|&n| n % self.factor != 0) {
            return Err(NnError::Shape(format!(
                "spatial size {s:?} not divisible by pooling factor {}",
                self.factor
            )));
        }
        Ok(s.map(|n| n / self.factor))
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.field, "avg pool")?;
        let sh = x.shape().to_vec();
        let [d, h, w] = self.out_spatial([sh[2], sh[3], sh[4]])?;
        let f = self.factor;
        let scale = 1.0 / (f * f * f) as f64;
        let y = Array5::from_shape_fn((sh[0], sh[1], d, h, w), |(n, c, i, j, k)| {
            x.slice(s![n, c, i * f..(i + 1) * f, j * f..(j + 1) * f, k * f..(k + 1) * f])
                .sum()
                * scale
        });
        self.in_shape = train.then_some(sh);
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let sh = self.in_shape.as_ref().ok_or_else(|| no_cache("avg pool"))?;
        let f = self.factor;
        let scale = 1.0 / (f * f * f) as f64;
        Ok(Array5::from_shape_fn(
            (sh[0], sh[1], sh[2], sh[3], sh[4]),
            |(n, c, i, j, k)| g[[n, c, i / f, j / f, k / f]] * scale,
        ))
    }
}

/// Mean over all voxels, keeping a `1 x 1 x 1` spatial extent.
pub struct GlobalAvgPool {
    field: FieldType,
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new(field: &FieldType) -> Self {
        GlobalAvgPool {
            field: field.clone(),
            in_shape: None,
        }
    }
}

impl Layer for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_pool"
    }

    fn in_field(&self) -> &FieldType {
        &self.field
    }

    fn out_field(&self) -> &FieldType {
        &self.field
    }

    fn out_spatial(&self, _s: [usize; 3]) -> Result<[usize; 3]> {
        Ok([1, 1, 1])
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.field, "global pool")?;
        let sh = x.shape().to_vec();
        let v = (sh[2] * sh[3] * sh[4]) as f64;
        let y = Array5::from_shape_fn((sh[0], sh[1], 1, 1, 1), |(n, c, ..)| {
            x.slice(s![n, c, .., .., ..]).sum() / v
        });
        self.in_shape = train.then_some(sh);
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let sh = self.in_shape.as_ref().ok_or_else(|| no_cache("global pool"))?;
        let v = (sh[2] * sh[3] * sh[4]) as f64;
        Ok(Array5::from_shape_fn(
            (sh[0], sh[1], sh[2], sh[3], sh[4]),
            |(n, c, ..)| g[[n, c, 0, 0, 0]] / v,
        ))
    }
}

/// Fully connected head on globally pooled scalars.
pub struct Dense {
    in_field: FieldType,
    out_field: FieldType,
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in` weights, then `n_out` biases.
    params: Vec<f64>,
    grads: Vec<f64>,
    cache: Option<Array5<f64>>,
}

impl Dense {
    pub fn new(in_field: &FieldType, n_out: usize) -> Result<Self> {
        if !in_field.is_trivial() {
            return Err(NnError::Admissibility {
                op: "dense layer",
                field: in_field.to_string(),
                reason: "mixing channels freely is only invariant on scalar inputs",
            });
        }
        let n_in = in_field.channels();
        let out_field = FieldType::scalars(in_field.group(), n_out)?;
        let n = n_out * (n_in + 1);
        Ok(Dense {
            in_field: in_field.clone(),
            out_field,
            n_in,
            n_out,
            params: vec![0.0; n],
            grads: vec![0.0; n],
            cache: None,
        })
    }

    /// Xavier (Glorot) uniform weights, zero biases.
    pub fn init_xavier<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let a = (6.0 / (self.n_in + self.n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let nw = self.n_in * self.n_out;
        self.params[..nw].iter_mut().for_each(|w| *w = dist.sample(rng));
        self.params[nw..].iter_mut().for_each(|b| *b = 0.0);
    }
}

impl Layer for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn in_field(&self) -> &FieldType {
        &self.in_field
    }

    fn out_field(&self) -> &FieldType {
        &self.out_field
    }

    fn out_spatial(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        if s != [1, 1, 1] {
            return Err(NnError::Shape(format!(
                "dense layer needs pooled input, got spatial size {s:?}"
            )));
        }
        Ok(s)
    }

    fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        check_channels(x, &self.in_field, "dense")?;
        let sh = x.shape();
        if sh[2..] != [1, 1, 1] {
            return Err(NnError::Shape(format!("dense layer needs pooled input, got {sh:?}")));
        }
        let nw = self.n_in * self.n_out;
        let y = Array5::from_shape_fn((sh[0], self.n_out, 1, 1, 1), |(n, o, ..)| {
            self.params[nw + o]
                + (0..self.n_in)
                    .map(|i| self.params[o * self.n_in + i] * x[[n, i, 0, 0, 0]])
                    .sum::<f64>()
        });
        self.cache = train.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let x = self.cache.as_ref().ok_or_else(|| no_cache("dense"))?;
        let nw = self.n_in * self.n_out;
        let n = x.shape()[0];
        for s in 0..n {
            for o in 0..self.n_out {
                let go = g[[s, o, 0, 0, 0]];
                self.grads[nw + o] += go;
                for i in 0..self.n_in {
                    self.grads[o * self.n_in + i] += go * x[[s, i, 0, 0, 0]];
                }
            }
        }
        Ok(Array5::from_shape_fn(x.raw_dim(), |(s, i, ..)| {
            (0..self.n_out)
                .map(|o| self.params[o * self.n_in + i] * g[[s, o, 0, 0, 0]])
                .sum()
        }))
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn grads(&self) -> &[f64] {
        &self.grads
    }

    fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }
}
