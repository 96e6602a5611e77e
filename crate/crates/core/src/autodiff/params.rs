//! Named parameter tensors and their serialized archive format.

use serde::{Deserialize, Serialize};

/// Version tag for serialized parameter archives and checkpoints.
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Index of a parameter tensor within a [`Parameters`] set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// The full trainable state of a model, in registration order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Parameters {
    pub tensors: Vec<ParamTensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter {name} shape mismatch");
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// One zeroed buffer per tensor, shaped like the parameters. Used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
