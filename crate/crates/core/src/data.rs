//! Labelled samples and episodes shared by tasks, models and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y }
    }
}

/// One task instance: `n` context pairs plus a query pair drawn from the same
/// distribution. The query label is hidden from the predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub context: Vec<Sample>,
    pub query: Sample,
}

impl Episode {
    pub fn validate(&self, num_classes: usize, input_dim: usize) -> Result<()> {
        for s in self.context.iter().chain(std::iter::once(&self.query)) {
            if s.y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.y,
                    classes: num_classes,
                });
            }
            if s.x.len() != input_dim {
                return Err(Error::InvalidArgument(format!(
                    "input of width {} where {input_dim} expected",
                    s.x.len()
                )));
            }
        }
        Ok(())
    }
}
