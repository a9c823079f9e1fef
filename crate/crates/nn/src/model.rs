//! Declarative model descriptions and the sequential model built from them.

use ndarray::Array5;
use pdo3d_core::discretize::{fd_stencils, gaussian_stencils_with};
use pdo3d_core::{Group, GroupSpec, StencilScheme};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::error::{NnError, Result};
use crate::field::FieldType;
use crate::layers::{
    AvgPool, Dense, EquivConv, FieldBatchNorm, Gate, GlobalAvgPool, Layer, NormRelu, Relu, ScaleBatchNorm, BN_MOMENTUM,
};

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SchemeSpec {
    /// Central differences on a unit grid (`3 x 3 x 3`).
    Fd,
    Gaussian {
        k: usize,
        sigma: f64,
        #[serde(default = "yes")]
        corrected: bool,
    },
}

impl SchemeSpec {
    pub fn build(&self) -> Result<StencilScheme> {
        Ok(match *self {
            SchemeSpec::Fd => fd_stencils([1.0; 3])?,
            SchemeSpec::Gaussian { k, sigma, corrected } => gaussian_stencils_with(k, sigma, corrected)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out: String,
        scheme: SchemeSpec,
        #[serde(default)]
        padding: Padding,
    },
    Relu,
    FieldBn,
    ScaleBn,
    NormRelu,
    Gate {
        scalars: usize,
    },
    AvgPool {
        factor: usize,
    },
    GlobalPool,
    Dense {
        out: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub group: GroupSpec,
    pub input_field: String,
    pub input_size: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// A built layer stack with its field types and spatial sizes.
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    in_field: FieldType,
    layers: Vec<Box<dyn Layer>>,
    /// Spatial size entering each layer, plus the output size last.
    sizes: Vec<[usize; 3]>,
}

impl Model {
    /// Builds and initializes the layers (He for convolutions, Xavier for
    /// dense layers) from one seeded stream.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let group = Group::build(spec.group)?;
        let in_field = FieldType::parse(&group, &spec.input_field)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field = in_field.clone();
        let mut size = spec.input_size;
        if size.contains(&0) {
            return Err(NnError::Spec(format!("input size {size:?} has a zero extent")));
        }
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        let mut sizes = vec![size];
        let mut pooled = false;
        for (idx, ls) in spec.layers.iter().enumerate() {
            let ctx = |e: NnError| NnError::Spec(format!("layer {idx} ({ls:?}): {e}"));
            if pooled && !matches!(ls, LayerSpec::Dense { .. }) {
                return Err(ctx(NnError::Spec("only dense layers may follow global pooling".into())));
            }
            let layer: Box<dyn Layer> = match ls {
                LayerSpec::Conv { out, scheme, padding } => {
                    let out = FieldType::parse(&group, out).map_err(ctx)?;
                    let mut c = EquivConv::new(&field, &out, scheme.build().map_err(ctx)?, *padding).map_err(ctx)?;
                    c.init_he(&mut rng);
                    Box::new(c)
                }
                LayerSpec::Relu => Box::new(Relu::new(&field).map_err(ctx)?),
                LayerSpec::FieldBn => Box::new(FieldBatchNorm::new(&field).map_err(ctx)?),
                LayerSpec::ScaleBn => Box::new(ScaleBatchNorm::new(&field)),
                LayerSpec::NormRelu => Box::new(NormRelu::new(&field)),
                LayerSpec::Gate { scalars } => Box::new(Gate::new(&field, *scalars).map_err(ctx)?),
                LayerSpec::AvgPool { factor } => Box::new(AvgPool::new(&field, *factor).map_err(ctx)?),
                LayerSpec::GlobalPool => {
                    pooled = true;
                    Box::new(GlobalAvgPool::new(&field))
                }
                LayerSpec::Dense { out } => {
                    if !pooled {
                        return Err(ctx(NnError::Spec(
                            "dense layers need a global pooling layer before them".into(),
                        )));
                    }
                    let mut d = Dense::new(&field, *out).map_err(ctx)?;
                    d.init_xavier(&mut rng);
                    Box::new(d)
                }
            };
            size = layer.out_spatial(size).map_err(ctx)?;
            field = layer.out_field().clone();
            sizes.push(size);
            layers.push(layer);
        }
        Ok(Model {
            spec: spec.clone(),
            seed,
            in_field,
            layers,
            sizes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_field(&self) -> &FieldType {
        &self.in_field
    }

    pub fn out_field(&self) -> &FieldType {
        self.layers.last().map_or(&self.in_field, |l| l.out_field())
    }

    pub fn out_spatial(&self) -> [usize; 3] {
        *self.sizes.last().expect("input size recorded")
    }

    /// Spatial size entering each layer, then the output size.
    pub fn sizes(&self) -> &[[usize; 3]] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    /// True when the output is a scalar field pooled to one voxel.
    pub fn has_invariant_output(&self) -> bool {
        self.out_spatial() == [1, 1, 1] && self.out_field().is_trivial()
    }

    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Result<Array5<f64>> {
        let sh = x.shape();
        if sh.len() != 5 || [sh[2], sh[3], sh[4]] != self.spec.input_size || sh[1] != self.in_field.channels() {
            return Err(NnError::Shape(format!(
                "model expects (N, {}, {:?}), got {:?}",
                self.in_field.channels(),
                self.spec.input_size,
                sh
            )));
        }
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur, train)?;
        }
        Ok(cur)
    }

    /// Backpropagates `g` through the last training-mode forward pass and
    /// returns the input gradient.
    pub fn backward(&mut self, g: &Array5<f64>) -> Result<Array5<f64>> {
        let mut cur = g.clone();
        for l in self.layers.iter_mut().rev() {
            cur = l.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.params().len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().iter().copied()).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(NnError::Shape(format!(
                "{} parameters for a model with {}",
                p.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let dst = l.params_mut();
            let n = dst.len();
            dst.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn grads(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.grads().iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grad());
    }

    pub fn buffers(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn set_buffers(&mut self, b: &[f64]) -> Result<()> {
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.buffers().len();
            if off + n > b.len() {
                return Err(NnError::Shape("too few buffer values".into()));
            }
            l.set_buffers(&b[off..off + n])?;
            off += n;
        }
        if off != b.len() {
            return Err(NnError::Shape("too many buffer values".into()));
        }
        Ok(())
    }

    /// Sets running normalization statistics to those of `x` under the
    /// current parameters.
    pub fn recalibrate(&mut self, x: &Array5<f64>) -> Result<()> {
        self.layers.iter_mut().for_each(|l| l.set_stat_momentum(1.0));
        let r = self.forward(x, true);
        self.layers.iter_mut().for_each(|l| l.set_stat_momentum(BN_MOMENTUM));
        r.map(|_| ())
    }

    /// Caches materialized filters for inference.
    pub fn freeze(&mut self) {
        self.layers.iter_mut().for_each(|l| l.freeze());
    }

    /// Per-layer summary: name, output field, output size, parameter count.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.layers
                .iter()
                .zip(&self.sizes[1..])
                .map(|(l, s)| {
                    serde_json::json!({
                        "layer": l.name(),
                        "field": l.out_field().to_string(),
                        "channels": l.out_field().channels(),
                        "size": s,
                        "params": l.params().len(),
                    })
                })
                .collect(),
        )
    }
}

/// The 3D Tetris classifier: two conv/BN/ReLU/pool stages of `n_fields`
/// copies of `features`, a conv to 16 scalars, global pooling and a dense
/// head over the 8 classes.
pub fn tetris_model_spec(
    group: GroupSpec,
    features: &str,
    n_fields: usize,
    grid: usize,
    scheme: SchemeSpec,
) -> ModelSpec {
    let hidden = if n_fields == 1 {
        features.to_string()
    } else {
        format!("sum:{features}x{n_fields}")
    };
    let conv = |out: &str| LayerSpec::Conv {
        out: out.to_string(),
        scheme,
        padding: Padding::Same,
    };
    ModelSpec {
        group,
        input_field: "trivial".into(),
        input_size: [grid; 3],
        layers: vec![
            conv(&hidden),
            LayerSpec::FieldBn,
            LayerSpec::Relu,
            LayerSpec::AvgPool { factor: 2 },
            conv(&hidden),
            LayerSpec::FieldBn,
            LayerSpec::Relu,
            LayerSpec::AvgPool { factor: 2 },
            conv("sum:trivialx16"),
            LayerSpec::FieldBn,
            LayerSpec::Relu,
            LayerSpec::GlobalPool,
            LayerSpec::Dense {
                out: crate::tetris::N_CLASSES,
            },
        ],
    }
}

/// Number of copies of a basic field giving a hidden width of about 48
/// channels, so the three Tetris variants have comparable cost.
pub fn tetris_field_count(group: &Group, features: &str) -> Result<usize> {
    let dim = FieldType::parse(group, features)?.channels();
    Ok((48 / dim).max(1))
}

/// Gated SO(3)-steerable stack for the discretization comparison: three
/// convolutions with hidden fields `D0 x 2 + D1 x 2 + D2 x 2` (plus the
/// four gate scalars), two scalar outputs and global pooling.
pub fn so3_stack_spec(size: usize, scheme: SchemeSpec) -> ModelSpec {
    let hidden = "sum:irrep:0x2+irrep:0x4+irrep:1x2+irrep:2x2";
    let conv = |out: &str| LayerSpec::Conv {
        out: out.to_string(),
        scheme,
        padding: Padding::Same,
    };
    ModelSpec {
        group: GroupSpec::SO3,
        input_field: "trivial".into(),
        input_size: [size; 3],
        layers: vec![
            conv(hidden),
            LayerSpec::Gate { scalars: 2 },
            conv(hidden),
            LayerSpec::Gate { scalars: 2 },
            conv("sum:irrep:0x2"),
            LayerSpec::GlobalPool,
        ],
    }
}

/// Finite-group stack for the exactness check: the Tetris architecture
/// with regular features and without the dense head, so the output is the
/// pooled scalar field.
pub fn cubic_stack_spec(group: GroupSpec, size: usize, n_fields: usize, scheme: SchemeSpec) -> ModelSpec {
    let mut spec = tetris_model_spec(group, "regular", n_fields, size, scheme);
    spec.layers.pop();
    spec
}
