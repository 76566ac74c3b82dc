use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Index of a parameter inside a model's parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
    /// Mask parameters `s`.
    Score,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, role: Role, value: Tensor) -> Self {
        Param {
            name: name.into(),
            role,
            value,
            grad: None,
            trainable: true,
        }
    }
}
