use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

use super::{Activation, ParamBundle};
use crate::error::{shape, Error, Result};

/// A contiguous run of layers in a bundle evaluated as one MLP.
///
/// Hidden layers are followed by `activation`; the last layer is linear unless
/// `activate_output` is set (used for a shared trunk whose output feeds heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stack {
    pub first: usize,
    pub len: usize,
    pub activation: Activation,
    pub activate_output: bool,
}

/// Cached per-layer inputs and pre-activations from a batched forward pass.
#[derive(Debug, Clone)]
pub struct StackTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Stack {
    pub fn new(first: usize, len: usize, activation: Activation, activate_output: bool) -> Self {
        Self {
            first,
            len,
            activation,
            activate_output,
        }
    }

    /// The whole bundle as one MLP with a linear output layer.
    pub fn whole(params: &ParamBundle, activation: Activation) -> Self {
        Self::new(0, params.num_layers(), activation, false)
    }

    pub fn in_dim(&self, params: &ParamBundle) -> usize {
        params.layer_shapes()[self.first].0
    }

    pub fn out_dim(&self, params: &ParamBundle) -> usize {
        params.layer_shapes()[self.first + self.len - 1].1
    }

    fn check(&self, params: &ParamBundle, input_cols: usize) -> Result<()> {
        if self.len == 0 || self.first + self.len > params.num_layers() {
            return Err(shape(format!(
                "stack {}..{} outside bundle of {} layers",
                self.first,
                self.first + self.len,
                params.num_layers()
            )));
        }
        let shapes = &params.layer_shapes()[self.first..self.first + self.len];
        if shapes[0].0 != input_cols {
            return Err(shape(format!(
                "input width {input_cols} does not match layer in_dim {}",
                shapes[0].0
            )));
        }
        for (k, pair) in shapes.windows(2).enumerate() {
            if pair[0].1 != pair[1].0 {
                return Err(shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    self.first + k,
                    pair[0].1,
                    self.first + k + 1,
                    pair[1].0
                )));
            }
        }
        Ok(())
    }

    fn activated(&self, local: usize) -> bool {
        local + 1 < self.len || self.activate_output
    }

    /// Batched evaluation (rows are samples) without recording a tape.
    pub fn eval(&self, params: &ParamBundle, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(params, input.ncols())?;
        let mut x = input.to_owned();
        for local in 0..self.len {
            let k = self.first + local;
            let mut z = affine(params, k, x.view());
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: k });
            }
            if self.activated(local) {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: k });
            }
            x = z;
        }
        Ok(x)
    }

    /// Batched evaluation that records what `backward` needs.
    pub fn forward(&self, params: &ParamBundle, input: Array2<f64>) -> Result<(Array2<f64>, StackTape)> {
        self.check(params, input.ncols())?;
        let mut tape = StackTape {
            inputs: Vec::with_capacity(self.len),
            pre: Vec::with_capacity(self.len),
        };
        let mut x = input;
        for local in 0..self.len {
            let k = self.first + local;
            let z = affine(params, k, x.view());
            let out = if self.activated(local) {
                z.mapv(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            if z.iter().chain(out.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: k });
            }
            tape.inputs.push(x);
            tape.pre.push(z);
            x = out;
        }
        Ok((x, tape))
    }

    /// Reverse pass: accumulates parameter gradients into `grads` (a flat
    /// array laid out like the bundle) and returns the gradient with respect
    /// to the stack input.
    pub fn backward(
        &self,
        params: &ParamBundle,
        tape: &StackTape,
        grad_out: Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        assert_eq!(grads.len(), params.len(), "gradient buffer length");
        let mut g = grad_out;
        for local in (0..self.len).rev() {
            let k = self.first + local;
            if self.activated(local) {
                let act = self.activation;
                g.zip_mut_with(&tape.pre[local], |gi, &z| *gi *= act.derivative(z));
            }
            let (i, o) = params.layer_shapes()[k];
            let off = params.layer_offset(k);
            {
                let mut dw = ArrayViewMut2::from_shape((o, i), &mut grads[off..off + i * o]).expect("layout");
                general_mat_mul(1.0, &g.t(), &tape.inputs[local], 1.0, &mut dw);
            }
            for (db, col) in grads[off + i * o..off + i * o + o]
                .iter_mut()
                .zip(g.axis_iter(Axis(1)))
            {
                *db += col.sum();
            }
            g = g.dot(&params.weights(k));
        }
        g
    }
}

fn affine(params: &ParamBundle, k: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = x.dot(&params.weights(k).t());
    z += &params.bias(k);
    z
}

/// Evaluates the whole bundle as an MLP on one input vector.
pub fn mlp_forward(params: &ParamBundle, input: &[f64], activation: Activation) -> Result<Vec<f64>> {
    let stack = Stack::whole(params, activation);
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
    let out = stack.eval(params, x)?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// A scalar loss over a parameter bundle with a reverse-mode gradient.
pub trait Objective {
    fn value_and_grad(&self, params: &ParamBundle) -> Result<(f64, Vec<f64>)>;

    fn value(&self, params: &ParamBundle) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }
}

/// Gradient of `loss` at `params`; rejects non-finite losses.
pub fn grad(params: &ParamBundle, loss: &impl Objective) -> Result<Vec<f64>> {
    let (value, g) = loss.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if g.len() != params.len() {
        return Err(shape("gradient length differs from parameter count"));
    }
    Ok(g)
}

/// Mean over the batch of `‖mlp(x) − y‖²` for the whole bundle.
#[derive(Debug, Clone)]
pub struct SquaredErrorLoss {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub activation: Activation,
}

impl Objective for SquaredErrorLoss {
    fn value_and_grad(&self, params: &ParamBundle) -> Result<(f64, Vec<f64>)> {
        let stack = Stack::whole(params, self.activation);
        let (out, tape) = stack.forward(params, self.inputs.clone())?;
        if out.dim() != self.targets.dim() {
            return Err(shape("target shape differs from network output"));
        }
        let n = self.inputs.nrows().max(1) as f64;
        let diff = &out - &self.targets;
        let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let mut grads = vec![0.0; params.len()];
        stack.backward(params, &tape, diff * (2.0 / n), &mut grads);
        Ok((value, grads))
    }
}
