//! Field types: a representation read as a stack of channels, plus dense
//! field-typed tensors.

use std::fmt;
use std::sync::Arc;

use ndarray::Array4;
use pdo3d_core::{Group, RepKind, RepSpec, Representation};

use crate::error::{NnError, Result};

/// One factor instance of a field: `dim` consecutive channels starting at
/// `offset`.
#[derive(Clone, Debug)]
pub struct FieldInstance {
    pub offset: usize,
    pub dim: usize,
    pub rep: Arc<Representation>,
}

impl FieldInstance {
    pub fn is_trivial(&self) -> bool {
        matches!(self.rep.kind(), RepKind::Trivial | RepKind::Irrep(0))
    }

    pub fn channels(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim
    }
}

#[derive(Clone, Debug)]
pub struct FieldType {
    spec: RepSpec,
    rep: Representation,
    instances: Vec<FieldInstance>,
}

impl FieldType {
    pub fn new(group: &Group, spec: RepSpec) -> Result<Self> {
        let rep = spec.build(group)?;
        Ok(Self::from_parts(spec, rep))
    }

    pub fn parse(group: &Group, s: &str) -> Result<Self> {
        Self::new(group, s.parse()?)
    }

    /// Wraps an existing representation; it must have a describable kind.
    pub fn from_rep(rep: Representation) -> Result<Self> {
        let spec = rep
            .kind()
            .to_spec()
            .ok_or_else(|| NnError::Field(format!("representation {} has no field description", rep.kind())))?;
        Ok(Self::from_parts(spec, rep))
    }

    fn from_parts(spec: RepSpec, rep: Representation) -> Self {
        let instances = rep
            .factor_instances()
            .into_iter()
            .map(|(r, offset)| FieldInstance {
                offset,
                dim: r.dim(),
                rep: r,
            })
            .collect();
        FieldType { spec, rep, instances }
    }

    /// `n` scalar fields.
    pub fn scalars(group: &Group, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(NnError::Field("a field needs at least one channel".into()));
        }
        Self::new(group, RepSpec::Sum(vec![(RepSpec::Trivial, n)]))
    }

    /// Concatenation of fields (channels of `self` first).
    pub fn concat(&self, other: &FieldType) -> Result<Self> {
        let mut parts = Vec::new();
        for f in [self, other] {
            match &f.spec {
                RepSpec::Sum(p) => parts.extend(p.iter().cloned()),
                s => parts.push((s.clone(), 1)),
            }
        }
        Self::new(self.group(), RepSpec::Sum(parts))
    }

    /// Field made of the given instances, in order.
    pub fn from_instances(group: &Group, instances: &[FieldInstance]) -> Result<Self> {
        let mut parts: Vec<(RepSpec, usize)> = Vec::new();
        for inst in instances {
            let s = inst
                .rep
                .kind()
                .to_spec()
                .ok_or_else(|| NnError::Field(format!("factor {} has no field description", inst.rep.kind())))?;
            match parts.last_mut() {
                Some((last, m)) if *last == s => *m += 1,
                _ => parts.push((s, 1)),
            }
        }
        if parts.is_empty() {
            return Err(NnError::Field("a field needs at least one channel".into()));
        }
        Self::new(group, RepSpec::Sum(parts))
    }

    pub fn spec(&self) -> &RepSpec {
        &self.spec
    }

    pub fn rep(&self) -> &Representation {
        &self.rep
    }

    pub fn group(&self) -> &Group {
        self.rep.group()
    }

    pub fn channels(&self) -> usize {
        self.rep.dim()
    }

    pub fn instances(&self) -> &[FieldInstance] {
        &self.instances
    }

    /// `(kind, multiplicity)` runs of the field.
    pub fn factors(&self) -> Vec<(RepKind, usize)> {
        self.rep
            .parts()
            .into_iter()
            .map(|(r, m)| (r.kind().clone(), m))
            .collect()
    }

    pub fn is_permutation(&self) -> bool {
        self.rep.is_permutation()
    }

    pub fn is_trivial(&self) -> bool {
        self.instances.iter().all(FieldInstance::is_trivial)
    }

    pub fn same_as(&self, other: &FieldType) -> bool {
        self.group().same_as(other.group()) && self.factors() == other.factors()
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.spec)
    }
}

/// A single feature map `C x D x H x W` tagged with its field type.
#[derive(Clone, Debug)]
pub struct FieldTensor {
    field: FieldType,
    data: Array4<f64>,
}

impl FieldTensor {
    pub fn new(field: FieldType, data: Array4<f64>) -> Result<Self> {
        if data.shape()[0] != field.channels() {
            return Err(NnError::Shape(format!(
                "field {} has {} channels, tensor has {}",
                field,
                field.channels(),
                data.shape()[0]
            )));
        }
        Ok(FieldTensor { field, data })
    }

    pub fn zeros(field: FieldType, spatial: [usize; 3]) -> Self {
        let c = field.channels();
        FieldTensor {
            field,
            data: Array4::zeros((c, spatial[0], spatial[1], spatial[2])),
        }
    }

    pub fn field(&self) -> &FieldType {
        &self.field
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}
