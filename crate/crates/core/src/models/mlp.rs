use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ElemOp, Graph, Matrix, ParamSet, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn op(self) -> Option<ElemOp> {
        match self {
            Activation::Identity => None,
            Activation::Relu => Some(ElemOp::Relu),
            Activation::Sigmoid => Some(ElemOp::Sigmoid),
            Activation::Tanh => Some(ElemOp::Tanh),
        }
    }
}

/// Layer widths from input to output, plus activations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::config(format!(
                "an MLP needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::config(format!("zero-width layer in {widths:?}")));
        }
        Ok(Self {
            widths,
            hidden,
            output,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

/// Fully connected network; parameters alternate weight, bias per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = ParamSet::default();
        for (l, pair) in spec.widths.windows(2).enumerate() {
            params.push_xavier(format!("w{l}"), pair[0], pair[1], rng);
            params.push(format!("b{l}"), Matrix::zeros(1, pair[1]));
        }
        Self { spec, params }
    }

    pub fn layers(&self) -> usize {
        self.spec.widths.len() - 1
    }

    /// Records the forward pass. With `trainable = false` the parameters
    /// enter as constants, so gradients reach `x` but not the weights.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Var> {
        let mut h = x;
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            let (w, b) = if trainable {
                (g.param(2 * l, w), g.param(2 * l + 1, b))
            } else {
                (g.constant(w.clone()), g.constant(b.clone()))
            };
            h = g.linear(h, w, b)?;
            let act = if l == last { self.spec.output } else { self.spec.hidden };
            if let Some(op) = act.op() {
                h = g.elementwise(op, h, None)?;
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.spec.input_width() {
            return Err(Error::Dimension {
                op: "mlp input",
                left: x.shape(),
                right: (x.rows(), self.spec.input_width()),
            });
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, false)?;
        Ok(g.value(out).clone())
    }
}
