use serde::{Deserialize, Serialize};

use crate::error::{AktError, Result};
use crate::numerics::tensor::{Tensor, TensorRecord};
use crate::scalar::Scalar;

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Flat registry of every trainable tensor. Each scalar lives in exactly one
/// entry, so the optimizer touches it exactly once per step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn to_records(&self) -> Vec<NamedTensorRecord> {
        self.params
            .iter()
            .map(|p| NamedTensorRecord { name: p.name.clone(), tensor: TensorRecord::from(&p.value) })
            .collect()
    }

    /// Overwrite values from records. Names and shapes must line up one to one.
    pub fn load_records(&mut self, records: &[NamedTensorRecord]) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(AktError::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for (p, r) in self.params.iter_mut().zip(records) {
            if p.name != r.name || p.value.shape() != r.tensor.shape.as_slice() {
                return Err(AktError::Data(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    r.name,
                    r.tensor.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = r.tensor.to_tensor()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedTensorRecord {
    pub name: String,
    #[serde(flatten)]
    pub tensor: TensorRecord,
}
