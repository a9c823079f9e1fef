//! Equivariance sweeps over freshly initialized models: the measurement
//! behind the `equiv` command.

use ndarray::Array4;
use pdo3d_core::{FiniteRotationGroup, GroupSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::equiv::{
    gaussian_blur, layer_equivariance_error, model_equivariance_error, random_rotations, summarize, windowed_noise,
    EquivSample, ErrorSummary, RotationMode, VoxelRotation,
};
use crate::error::{NnError, Result};
use crate::model::{cubic_stack_spec, so3_stack_spec, Model, SchemeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// White noise blurred with a Gaussian.
    Smooth,
    /// White noise.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Invariant model output against rotated input.
    Model,
    /// Commutation residual of the first convolution on the interior crop.
    Layer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub group: GroupSpec,
    pub scheme: SchemeSpec,
    pub mode: RotationMode,
    pub n: usize,
    pub size: usize,
    pub inputs: Vec<InputKind>,
    pub level: Level,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl SweepConfig {
    /// The exact cubic check: all 24 rotations, 16^3 raw inputs.
    pub fn cubic(group: GroupSpec, scheme: SchemeSpec, seed: u64) -> Self {
        SweepConfig {
            group,
            scheme,
            mode: RotationMode::ExactCubic,
            n: 24,
            size: 16,
            inputs: vec![InputKind::Raw],
            level: Level::Model,
            blur_sigma: 2.0,
            seed,
        }
    }

    /// The SO(3) discretization comparison: 100 Haar-random rotations of
    /// smooth 24^3 inputs.
    pub fn so3(scheme: SchemeSpec, seed: u64) -> Self {
        SweepConfig {
            group: GroupSpec::SO3,
            scheme,
            mode: RotationMode::Trilinear,
            n: 100,
            size: 24,
            inputs: vec![InputKind::Smooth],
            level: Level::Model,
            blur_sigma: 2.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub scheme: String,
    pub kernel_size: usize,
    pub sigma: Option<f64>,
    pub input: InputKind,
    pub rotation_id: usize,
    pub error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<(InputKind, ErrorSummary)>,
}

impl SweepReport {
    pub fn summary(&self, kind: InputKind) -> Option<&ErrorSummary> {
        self.summaries.iter().find(|(k, _)| *k == kind).map(|(_, s)| s)
    }
}

/// Tapered-ball radii for interpolated rotations: the window ends at
/// `3n/8` so that features spreading through three convolutions stay
/// clear of the zero-padded boundary.
fn window(size: usize) -> (f64, f64) {
    let r1 = 0.375 * size as f64;
    ((r1 - 3.0).max(0.0), r1)
}

fn input<R: Rng + ?Sized>(kind: InputKind, cfg: &SweepConfig, rng: &mut R) -> Array4<f64> {
    let blur = if kind == InputKind::Smooth { cfg.blur_sigma } else { 0.0 };
    match cfg.mode {
        RotationMode::Trilinear => {
            let (r0, r1) = window(cfg.size);
            windowed_noise(cfg.size, blur, r0, r1, rng)
        }
        RotationMode::ExactCubic => {
            let n = cfg.size;
            let noise = Array4::from_shape_simple_fn((1, n, n, n), || StandardNormal.sample(rng));
            gaussian_blur(&noise, blur)
        }
    }
}

fn rotations<R: Rng + ?Sized>(cfg: &SweepConfig, rng: &mut R) -> Result<Vec<VoxelRotation>> {
    match cfg.mode {
        RotationMode::Trilinear => {
            if cfg.group != GroupSpec::SO3 {
                return Err(NnError::Invalid(format!(
                    "interpolated random rotations are not elements of {}; use the cubic mode",
                    cfg.group
                )));
            }
            Ok(random_rotations(cfg.n, rng))
        }
        RotationMode::ExactCubic => {
            let spec = if cfg.group == GroupSpec::SO3 {
                GroupSpec::O
            } else {
                cfg.group
            };
            let g = FiniteRotationGroup::build(spec)?;
            let exact: Vec<VoxelRotation> = g
                .elements()
                .iter()
                .filter_map(|e| VoxelRotation::exact(*e).ok())
                .collect();
            Ok((0..cfg.n).map(|i| exact[i % exact.len()].clone()).collect())
        }
    }
}

fn model_spec(cfg: &SweepConfig) -> crate::model::ModelSpec {
    if cfg.group == GroupSpec::SO3 {
        so3_stack_spec(cfg.size, cfg.scheme)
    } else {
        cubic_stack_spec(cfg.group, cfg.size, 1, cfg.scheme)
    }
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let scheme = cfg.scheme.build()?;
    let (k, sigma) = match cfg.scheme {
        SchemeSpec::Fd => (3, None),
        SchemeSpec::Gaussian { k, sigma, .. } => (k, Some(sigma)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rots = rotations(cfg, &mut rng)?;
    let mut model = Model::build(&model_spec(cfg), cfg.seed)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &kind in &cfg.inputs {
        let inputs: Vec<Array4<f64>> = (0..rots.len()).map(|_| input(kind, cfg, &mut rng)).collect();
        let samples: Vec<EquivSample> = match cfg.level {
            Level::Model => model_equivariance_error(&mut model, &rots, &inputs)?,
            Level::Layer => {
                let margin = k.div_ceil(2);
                let layer = model.layers_mut()[0].as_mut();
                let mut out = Vec::with_capacity(rots.len());
                for (i, (rot, x)) in rots.iter().zip(&inputs).enumerate() {
                    let mut s =
                        layer_equivariance_error(layer, std::slice::from_ref(rot), std::slice::from_ref(x), margin)?;
                    s[0].rotation_id = i;
                    s[0].input_id = i;
                    out.push(s.remove(0));
                }
                out
            }
        };
        summaries.push((kind, summarize(&samples)));
        rows.extend(samples.iter().map(|s| SweepRow {
            scheme: scheme.id(),
            kernel_size: k,
            sigma,
            input: kind,
            rotation_id: s.rotation_id,
            error: s.error,
        }));
    }
    Ok(SweepReport {
        config: cfg.clone(),
        rows,
        summaries,
    })
}
