//! Named parameter storage and flattened gradient vectors.
//!
//! Parameters live in a [`ParamSet`] in a fixed canonical order (the order in
//! which they were registered). Each parameter carries a [`Partition`] label;
//! gradient vectors are always flattened over exactly one partition so the
//! task-weighting code can compare and combine them element by element.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::TensorValue;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Shared,
    MainHead,
    AuxHead,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Shared, Partition::MainHead, Partition::AuxHead];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Shared => "shared",
            Partition::MainHead => "main_head",
            Partition::AuxHead => "aux_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub value: TensorValue,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        partition: Partition,
        value: TensorValue,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Param {
            name,
            partition,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &TensorValue {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorValue {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&TensorValue> {
        self.id(name).map(|id| self.value(id))
    }

    /// Parameters in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, partition: Partition) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(move |(_, p)| p.partition == partition)
            .map(|(id, _)| id)
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn layout(&self, partition: Partition) -> Arc<GradLayout> {
        let entries = self
            .iter()
            .filter(|(_, p)| p.partition == partition)
            .map(|(id, p)| LayoutEntry {
                id,
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect::<Vec<_>>();
        let len = entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        Arc::new(GradLayout {
            partition: Some(partition),
            entries,
            len,
        })
    }
}

/// Per-parameter gradients produced by one backward pass, aligned with a
/// [`ParamSet`]'s canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<TensorValue>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(_, p)| Some(TensorValue::zeros(p.value.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&TensorValue> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn set(&mut self, id: ParamId, grad: TensorValue) {
        self.grads[id.0] = Some(grad);
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &TensorValue) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub id: ParamId,
    pub name: String,
    pub shape: Vec<usize>,
}

/// Describes which parameters, in which order, a [`GradVector`] spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradLayout {
    pub partition: Option<Partition>,
    pub entries: Vec<LayoutEntry>,
    pub len: usize,
}

impl GradLayout {
    /// A layout with no parameter backing, for raw vectors.
    pub fn flat(len: usize) -> Arc<Self> {
        Arc::new(Self {
            partition: None,
            entries: Vec::new(),
            len,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    values: Vec<f64>,
    layout: Arc<GradLayout>,
}

impl GradVector {
    pub fn new(values: Vec<f64>, layout: Arc<GradLayout>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::usage(format!(
                "gradient vector of length {} does not fit layout of length {}",
                values.len(),
                layout.len
            )));
        }
        Ok(Self { values, layout })
    }

    /// A vector with an ad-hoc flat layout.
    pub fn from_raw(values: Vec<f64>) -> Self {
        let layout = GradLayout::flat(values.len());
        Self { values, layout }
    }

    pub fn zeros(layout: Arc<GradLayout>) -> Self {
        Self {
            values: vec![0.0; layout.len],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<GradLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &GradVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    fn check_layout(&self, other: &GradVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "gradient layouts differ (lengths {} and {})",
                self.len(),
                other.len()
            )))
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &GradVector) -> Result<GradVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(GradVector {
            values,
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn scaled(&self, scale: f64) -> GradVector {
        GradVector {
            values: self.values.iter().map(|v| v * scale).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    /// Splits the vector into one slice per parameter of the layout.
    pub fn segments(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        let mut offset = 0;
        self.layout.entries.iter().map(move |e| {
            let n: usize = e.shape.iter().product();
            let seg = &self.values[offset..offset + n];
            offset += n;
            (e.id, seg)
        })
    }

    /// Inverse of [`flatten_grads`]: writes each segment back as a tensor.
    pub fn unflatten(&self) -> Result<Vec<(ParamId, TensorValue)>> {
        let layout = Arc::clone(&self.layout);
        self.segments()
            .zip(&layout.entries)
            .map(|((id, seg), e)| Ok((id, TensorValue::new(e.shape.clone(), seg.to_vec())?)))
            .collect()
    }
}

/// Concatenates the gradients of every parameter in `partition`, in canonical order.
pub fn flatten_grads(
    params: &ParamSet,
    grads: &ParamGrads,
    partition: Partition,
) -> Result<GradVector> {
    let layout = params.layout(partition);
    let mut values = Vec::with_capacity(layout.len);
    for e in &layout.entries {
        let g = grads.get(e.id).ok_or_else(|| {
            Error::Internal(format!("no gradient recorded for parameter {:?}", e.name))
        })?;
        if g.shape() != e.shape.as_slice() {
            return Err(Error::Internal(format!(
                "gradient for {:?} has shape {:?}, parameter has {:?}",
                e.name,
                g.shape(),
                e.shape
            )));
        }
        values.extend_from_slice(g.data());
    }
    GradVector::new(values, layout)
}

/// Inner product in ascending index order.
pub fn grad_dot(a: &GradVector, b: &GradVector) -> Result<f64> {
    a.check_layout(b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .fold(0.0, |acc, (x, y)| acc + x * y))
}

pub fn grad_norm(a: &GradVector) -> f64 {
    a.values.iter().fold(0.0, |acc, x| acc + x * x).sqrt()
}
