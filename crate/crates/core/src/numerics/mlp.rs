//! Fully-connected networks with hand-written backpropagation.

use std::fmt;
use std::str::FromStr;

use super::matrix::Matrix;
use super::params::{Gradient, ParamVector, SegmentKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// relu'(0) is taken as 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

/// Architecture of a dense network.
///
/// `widths[0]` is the input width. `activations[l]` follows hidden layer `l`;
/// hidden layers past the end of the list and the output layer are linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("a network needs at least two widths"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        if activations.len() > widths.len() - 2 {
            return Err(Error::invalid(format!(
                "{} activations for {} hidden layers (the output layer is linear)",
                activations.len(),
                widths.len() - 2
            )));
        }
        Ok(Self {
            widths,
            activations,
        })
    }

    /// Single linear layer `input -> output`.
    pub fn linear(input: usize, output: usize) -> Result<Self> {
        Self::new(vec![input, output], Vec::new())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.activations
            .get(layer)
            .copied()
            .unwrap_or(Activation::Identity)
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let layout = params.layout();
        if layout.num_layers() != self.num_layers() {
            return Err(Error::LayoutMismatch(format!(
                "parameters have {} layers, network has {}",
                layout.num_layers(),
                self.num_layers()
            )));
        }
        for (layer, pair) in self.widths.windows(2).enumerate() {
            let w =
                layout
                    .segment(layer, SegmentKind::Weight)
                    .ok_or_else(|| Error::LayerShape {
                        layer,
                        detail: "missing weight segment".into(),
                    })?;
            let b = layout
                .segment(layer, SegmentKind::Bias)
                .ok_or_else(|| Error::LayerShape {
                    layer,
                    detail: "missing bias segment".into(),
                })?;
            if (w.rows, w.cols) != (pair[0], pair[1]) || b.cols != pair[1] {
                return Err(Error::LayerShape {
                    layer,
                    detail: format!(
                        "expected {}x{} weights, found {}x{}",
                        pair[0], pair[1], w.rows, w.cols
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Per-layer intermediate values kept for the backward pass.
struct Trace {
    /// `inputs[l]` is the input to layer `l`; the final entry is the output.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

fn forward_trace(spec: &MlpSpec, params: &ParamVector, input: &Matrix) -> Result<Trace> {
    spec.check_params(params)?;
    if input.cols() != spec.input_width() {
        return Err(Error::LayerShape {
            layer: 0,
            detail: format!(
                "input has {} columns, layer expects {}",
                input.cols(),
                spec.input_width()
            ),
        });
    }
    let layout = params.layout();
    let mut inputs = Vec::with_capacity(spec.num_layers() + 1);
    let mut pre_activations = Vec::with_capacity(spec.num_layers());
    inputs.push(input.clone());
    for layer in 0..spec.num_layers() {
        let w = layout.segment(layer, SegmentKind::Weight).expect("checked");
        let b = layout.segment(layer, SegmentKind::Bias).expect("checked");
        let x = inputs.last().expect("non-empty");
        let mut z = x.matmul_slice(params.segment_values(w), w.cols);
        let bias = params.segment_values(b);
        for row in z.data_mut().chunks_mut(w.cols) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let act = spec.activation(layer);
        let a = z.map(|v| act.apply(v));
        pre_activations.push(z);
        inputs.push(a);
    }
    Ok(Trace {
        inputs,
        pre_activations,
    })
}

/// Applies the network to every row of `input`.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &Matrix) -> Result<Matrix> {
    let mut trace = forward_trace(spec, params, input)?;
    Ok(trace.inputs.pop().expect("output present"))
}

/// Gradient of a scalar loss with respect to the parameters, given the loss
/// gradient with respect to the network output.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &Matrix,
    loss_grad: &Matrix,
) -> Result<Gradient> {
    backward_with_input(spec, params, input, loss_grad).map(|(g, _)| g)
}

/// Like [`backward`] but also returns the loss gradient with respect to the
/// input rows, so networks can be chained.
pub fn backward_with_input(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &Matrix,
    loss_grad: &Matrix,
) -> Result<(Gradient, Matrix)> {
    let trace = forward_trace(spec, params, input)?;
    let out = trace.inputs.last().expect("output present");
    if loss_grad.shape() != out.shape() {
        return Err(Error::Shape(format!(
            "loss gradient is {:?}, network output is {:?}",
            loss_grad.shape(),
            out.shape()
        )));
    }
    let layout = params.layout();
    let mut grad = Gradient::zeros(layout.clone());
    let mut delta = loss_grad.clone();
    for layer in (0..spec.num_layers()).rev() {
        let act = spec.activation(layer);
        let z = &trace.pre_activations[layer];
        let a = &trace.inputs[layer + 1];
        if act != Activation::Identity {
            for ((d, &zv), &av) in delta.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
                *d *= act.derivative(zv, av);
            }
        }
        let w = layout.segment(layer, SegmentKind::Weight).expect("checked");
        let b = layout.segment(layer, SegmentKind::Bias).expect("checked");
        let dw = trace.inputs[layer].t_matmul(&delta);
        grad.values_mut()[w.range()].copy_from_slice(&dw);
        grad.values_mut()[b.range()].copy_from_slice(&delta.col_sums());
        delta = delta.matmul_t_slice(params.segment_values(w), w.rows);
    }
    Ok((grad, delta))
}
