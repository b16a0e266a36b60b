use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::TensorValue;
use crate::error::{Error, Result};

/// One grayscale image in a bag, plus free-form tags describing where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Instance {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::data(format!(
                "instance of {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }
}

/// A labelled set of instances. Instance order carries no meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: u64,
    pub instances: Vec<Instance>,
    pub label: usize,
    pub aux_labels: Vec<usize>,
}

impl Bag {
    pub fn new(
        id: u64,
        instances: Vec<Instance>,
        label: usize,
        aux_labels: Vec<usize>,
    ) -> Result<Self> {
        let bag = Self {
            id,
            instances,
            label,
            aux_labels,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::usage(format!("bag {} has no instances", self.id)));
        }
        if self.aux_labels.len() != self.instances.len() {
            return Err(Error::data(format!(
                "bag {}: {} aux labels for {} instances",
                self.id,
                self.aux_labels.len(),
                self.instances.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Stacks the instances into an `(N, 1, H, W)` tensor.
    pub fn to_tensor(&self, height: usize, width: usize) -> Result<TensorValue> {
        let mut data = Vec::with_capacity(self.len() * height * width);
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.height != height || inst.width != width {
                return Err(Error::config(format!(
                    "bag {} instance {i} is {}x{}, model expects {height}x{width}",
                    self.id, inst.height, inst.width
                )));
            }
            data.extend_from_slice(&inst.pixels);
        }
        TensorValue::new(vec![self.len(), 1, height, width], data)
    }

    /// The same bag with instances (and their aux labels) reordered so that
    /// position `i` holds the former instance `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Bag {
        Bag {
            id: self.id,
            instances: perm.iter().map(|&i| self.instances[i].clone()).collect(),
            label: self.label,
            aux_labels: perm.iter().map(|&i| self.aux_labels[i]).collect(),
        }
    }
}
