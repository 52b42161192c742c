//! One evaluation of the training objective and its gradient.

use ndarray::{s, Array2};

use crate::error::{invalid, shape, Error, Result};
use crate::network::ScoreNetwork;
use crate::nn::{Objective, ParamBundle};
use crate::rdc::Quadrature;

/// How the condition term enters the objective.
#[derive(Debug, Clone, PartialEq)]
pub enum CondTerm {
    Off,
    /// The condition head's output is the pseudo-condition estimate.
    Direct,
    /// The estimate is integrated from `head_y` over the quadrature nodes.
    Integral(Quadrature),
}

/// Pre-drawn inputs for one batch; all row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub x0: Array2<f64>,
    pub sigmas: Vec<f64>,
    pub eps: Array2<f64>,
    /// Condition rows fed to the trunk.
    pub cond: Array2<f64>,
    /// Observed label rows the estimate is regressed onto.
    pub targets: Array2<f64>,
    /// Condition input of the head (`Direct`) or integration start (`Integral`).
    pub head_y: Array2<f64>,
    pub cond_term: CondTerm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub demo_loss: f64,
    pub cond_loss: f64,
    pub grads: Vec<f64>,
    /// Per-row pseudo-condition estimates when the condition term is active.
    pub estimates: Option<Array2<f64>>,
}

impl StepInputs {
    pub fn rows(&self) -> usize {
        self.x0.nrows()
    }

    fn check(&self, net: &ScoreNetwork) -> Result<()> {
        let b = self.rows();
        if b == 0 {
            return Err(invalid("empty batch"));
        }
        let (xd, cd) = (net.spec().x_dim, net.spec().cond_dim);
        if self.x0.ncols() != xd || self.eps.dim() != (b, xd) {
            return Err(shape("point and noise rows must have the point width"));
        }
        if self.sigmas.len() != b {
            return Err(shape("one noise level per row required"));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid("noise levels must be positive"));
        }
        for (name, m) in [("condition", &self.cond), ("target", &self.targets), ("head input", &self.head_y)] {
            if m.dim() != (b, cd) {
                return Err(shape(format!("{name} rows must have the condition width")));
            }
        }
        Ok(())
    }
}

/// `L = L_demo + L_cond` and its gradient with respect to every parameter.
///
/// `L_demo` is the weighted denoising loss averaged over rows and `L_cond` the
/// mean squared distance between the pseudo-condition estimates and the
/// targets (zero when the condition term is off).
pub fn loss_step(net: &ScoreNetwork, inputs: &StepInputs) -> Result<StepOutput> {
    inputs.check(net)?;
    let params = net.params();
    let precond = net.precond();
    let b = inputs.rows();
    let bf = b as f64;
    let width = net.spec().trunk_width;
    let cd = net.spec().cond_dim;

    let mut x_t = inputs.x0.clone();
    for ((mut row, e), &s) in x_t.rows_mut().into_iter().zip(inputs.eps.rows()).zip(&inputs.sigmas) {
        row.scaled_add(s, &e);
    }
    let trunk = net.trunk();
    let trunk_in = net.trunk_input(x_t.view(), &inputs.sigmas, inputs.cond.view());
    let (h, trunk_tape) = trunk.forward(params, trunk_in)?;
    let demo = net.demo_head();
    let (f, demo_tape) = demo.forward(params, h.clone())?;

    let mut demo_loss = 0.0;
    let mut g_f = Array2::zeros(f.raw_dim());
    for r in 0..b {
        let s = inputs.sigmas[r];
        let (c_skip, c_out, lambda) = (precond.c_skip(s), precond.c_out(s), precond.loss_weight(s));
        let mut se = 0.0;
        for j in 0..f.ncols() {
            let d = c_skip * x_t[[r, j]] + c_out * f[[r, j]];
            let diff = d - inputs.x0[[r, j]];
            se += diff * diff;
            g_f[[r, j]] = 2.0 * lambda * c_out * diff / bf;
        }
        demo_loss += lambda * se;
    }
    demo_loss /= bf;

    let head = net.cond_head();
    let mut tapes = Vec::new();
    let mut node_weights = Vec::new();
    let estimates = match &inputs.cond_term {
        CondTerm::Off => None,
        CondTerm::Direct => {
            let input = net.head_input(h.view(), inputs.head_y.view(), &inputs.sigmas);
            let (est, tape) = head.forward(params, input)?;
            tapes.push(tape);
            Some(est)
        }
        CondTerm::Integral(quad) => {
            let mut y = inputs.head_y.clone();
            for (node, (&t, w)) in quad.nodes().iter().zip(quad.weights()).enumerate() {
                let input = net.head_input(h.view(), y.view(), &vec![t; b]);
                let (score, tape) = head.forward(params, input).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteNode { node },
                    other => other,
                })?;
                y.scaled_add(-w, &score);
                tapes.push(tape);
                node_weights.push(w);
            }
            Some(y)
        }
    };

    let cond_loss = match &estimates {
        Some(est) => (est - &inputs.targets).mapv(|v| v * v).sum() / bf,
        None => 0.0,
    };
    let loss = demo_loss + cond_loss;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let mut grads = vec![0.0; params.len()];
    let mut g_h = demo.backward(params, &demo_tape, g_f, &mut grads);
    if let Some(est) = &estimates {
        let g_est = (est - &inputs.targets) * (2.0 / bf);
        match &inputs.cond_term {
            CondTerm::Off => unreachable!("estimates imply an active condition term"),
            CondTerm::Direct => {
                let g_in = head.backward(params, &tapes[0], g_est, &mut grads);
                g_h += &g_in.slice(s![.., ..width]);
            }
            CondTerm::Integral(_) => {
                let mut g_y = g_est;
                for (tape, &w) in tapes.iter().zip(&node_weights).rev() {
                    let g_in = head.backward(params, tape, &g_y * -w, &mut grads);
                    g_h += &g_in.slice(s![.., ..width]);
                    g_y += &g_in.slice(s![.., width..width + cd]);
                }
            }
        }
    }
    trunk.backward(params, &trunk_tape, g_h, &mut grads);

    Ok(StepOutput {
        loss,
        demo_loss,
        cond_loss,
        grads,
        estimates,
    })
}

/// [`loss_step`] as an [`Objective`] over the parameters of `net`'s architecture.
pub struct StepObjective<'a> {
    pub net: &'a ScoreNetwork,
    pub inputs: &'a StepInputs,
}

impl StepObjective<'_> {
    fn with_params(&self, params: &ParamBundle) -> Result<ScoreNetwork> {
        ScoreNetwork::from_params(*self.net.spec(), *self.net.precond(), params.clone())
    }
}

impl Objective for StepObjective<'_> {
    fn value_and_grad(&self, params: &ParamBundle) -> Result<(f64, Vec<f64>)> {
        let out = loss_step(&self.with_params(params)?, self.inputs)?;
        Ok((out.loss, out.grads))
    }

    fn value(&self, params: &ParamBundle) -> Result<f64> {
        Ok(loss_step(&self.with_params(params)?, self.inputs)?.loss)
    }
}
