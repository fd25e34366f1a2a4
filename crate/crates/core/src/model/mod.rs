//! Differentiable classifiers with access to intermediate activations.
//!
//! Every model exposes a flat parameter vector, a forward pass that returns
//! logits together with the tapped block activations, and a backward pass
//! that accepts upstream gradients on both the logits and the taps. The
//! distillation losses need the second input: the feature-distance term
//! injects gradient directly into the tapped layers.

mod cnn;
mod linear;

pub use cnn::{CnnArchitecture, ConvBlock, SmallCnn};
pub use linear::LinearClassifier;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward-pass mode. None of the shipped architectures carry stochastic
/// layers, so both modes compute the same function; the flag is kept so
/// trainers and attacks state which regime they mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Input dimensions (channels, height, width) of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Shape of one tapped activation layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    /// Position of the layer in the network (block index).
    pub index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerDesc {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.spatial()
    }
}

impl std::fmt::Display for LayerDesc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "layer {} ({}x{}x{})",
            self.index, self.channels, self.height, self.width
        )
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub params: bool,
    pub input: bool,
}

impl GradTargets {
    pub const PARAMS: GradTargets = GradTargets {
        params: true,
        input: false,
    };
    pub const INPUT: GradTargets = GradTargets {
        params: false,
        input: true,
    };
    pub const BOTH: GradTargets = GradTargets {
        params: true,
        input: true,
    };
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<C> {
    /// (batch, classes)
    pub logits: Array2<f64>,
    /// One (batch, channels, height, width) tensor per tapped layer.
    pub taps: Vec<Array4<f64>>,
    pub(crate) cache: C,
}

/// Gradients returned by a backward pass. Fields are empty when the
/// corresponding target was not requested.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Option<Array4<f64>>,
}

/// A differentiable image classifier with intermediate-activation taps.
pub trait Classifier {
    type Cache;

    fn input_shape(&self) -> InputShape;
    fn num_classes(&self) -> usize;
    /// Declared shapes of the tapped layers, in network order.
    fn tap_layers(&self) -> &[LayerDesc];

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn forward(&self, x: &Array4<f64>, mode: Mode) -> Result<ForwardPass<Self::Cache>>;

    /// Backpropagates `grad_logits` (and, if given, per-tap gradients) through
    /// the cached forward pass.
    fn backward(
        &self,
        pass: &ForwardPass<Self::Cache>,
        grad_logits: &Array2<f64>,
        grad_taps: Option<&[Array4<f64>]>,
        targets: GradTargets,
    ) -> Gradients;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Logits only.
    fn logits(&self, x: &Array4<f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self.forward(x, mode)?.logits)
    }
}

/// Checks that a batch matches the model's declared input shape.
pub(crate) fn check_input(shape: InputShape, x: &Array4<f64>) -> Result<()> {
    let (_, c, h, w) = x.dim();
    if (c, h, w) != (shape.channels, shape.height, shape.width) {
        return Err(Error::Shape {
            expected: format!(
                "(batch, {}, {}, {})",
                shape.channels, shape.height, shape.width
            ),
            actual: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

/// Verifies that two tap sets have identical shapes layer by layer.
pub fn check_tap_compat(student: &[LayerDesc], teacher: &[LayerDesc]) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::TapMismatch {
            layer: student.len().min(teacher.len()),
            student: format!("{} taps", student.len()),
            teacher: format!("{} taps", teacher.len()),
        });
    }
    for (i, (s, t)) in student.iter().zip(teacher).enumerate() {
        if (s.channels, s.height, s.width) != (t.channels, t.height, t.width) {
            return Err(Error::TapMismatch {
                layer: i,
                student: s.to_string(),
                teacher: t.to_string(),
            });
        }
    }
    Ok(())
}
