use ndarray::{Array2, Array4};

use super::{check_input, Classifier, ForwardPass, GradTargets, Gradients, InputShape, LayerDesc, Mode};
use crate::error::{Error, Result};

/// Affine classifier `logits = W x + b` on the flattened input.
///
/// Its single tap is the input itself, which keeps the tap contract intact
/// for tests that need a model with a closed-form loss gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    input: InputShape,
    num_classes: usize,
    taps: Vec<LayerDesc>,
    params: Vec<f64>,
}

impl LinearClassifier {
    /// `weights` is row-major (classes x features).
    pub fn new(input: InputShape, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let d = input.numel();
        let k = bias.len();
        if k < 2 || weights.len() != k * d {
            return Err(Error::config(format!(
                "linear classifier needs {k} x {d} weights and at least two classes"
            )));
        }
        let mut params = weights;
        params.extend(bias);
        Ok(Self {
            input,
            num_classes: k,
            taps: vec![LayerDesc {
                index: 0,
                channels: input.channels,
                height: input.height,
                width: input.width,
            }],
            params,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.num_classes * self.input.numel()]
    }
}

impl Classifier for LinearClassifier {
    type Cache = ();

    fn input_shape(&self) -> InputShape {
        self.input
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn tap_layers(&self) -> &[LayerDesc] {
        &self.taps
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &Array4<f64>, _mode: Mode) -> Result<ForwardPass<()>> {
        check_input(self.input, x)?;
        let n = x.dim().0;
        let d = self.input.numel();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let (w, b) = self.params.split_at(self.num_classes * d);
        let logits = Array2::from_shape_fn((n, self.num_classes), |(i, j)| {
            b[j] + w[j * d..(j + 1) * d]
                .iter()
                .zip(&xs[i * d..(i + 1) * d])
                .map(|(a, c)| a * c)
                .sum::<f64>()
        });
        Ok(ForwardPass {
            logits,
            taps: vec![x.to_owned()],
            cache: (),
        })
    }

    fn backward(
        &self,
        pass: &ForwardPass<()>,
        grad_logits: &Array2<f64>,
        grad_taps: Option<&[Array4<f64>]>,
        targets: GradTargets,
    ) -> Gradients {
        let x = &pass.taps[0];
        let (n, c, h, wd) = x.dim();
        let d = self.input.numel();
        let k = self.num_classes;
        let xs = x.as_slice().expect("standard layout");
        let w = &self.params[..k * d];
        let mut params = Vec::new();
        if targets.params {
            params = vec![0.0; self.params.len()];
            for i in 0..n {
                for j in 0..k {
                    let g = grad_logits[[i, j]];
                    for (p, xv) in params[j * d..(j + 1) * d].iter_mut().zip(&xs[i * d..(i + 1) * d]) {
                        *p += g * xv;
                    }
                    params[k * d + j] += g;
                }
            }
        }
        let input = targets.input.then(|| {
            let mut gx = Array4::from_shape_fn((n, c, h, wd), |(i, ch, y, xx)| {
                let f = (ch * h + y) * wd + xx;
                (0..k).map(|j| grad_logits[[i, j]] * w[j * d + f]).sum()
            });
            if let Some(gt) = grad_taps {
                gx += &gt[0];
            }
            gx
        });
        Gradients { params, input }
    }
}
