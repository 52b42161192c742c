use std::io::{BufRead, Write};

use super::{parse_num, read_line, ParamBundle};
use crate::error::{invalid, shape, Error, Result};

const OPT_MAGIC: &str = "robust-diffusion-adam v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the number of applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{OPT_MAGIC}")?;
        writeln!(w, "len {} steps {}", self.first_moment.len(), self.step_count)?;
        for v in self.first_moment.iter().chain(&self.second_moment) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let header = read_line(&mut r)?;
        if header != OPT_MAGIC {
            return Err(Error::Parse(format!("unexpected optimizer header `{header}`")));
        }
        let line = read_line(&mut r)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (n, steps) = match fields.as_slice() {
            ["len", n, "steps", s] => (parse_num::<usize>(n)?, parse_num::<u64>(s)?),
            _ => return Err(Error::Parse(format!("bad optimizer line `{line}`"))),
        };
        let mut read = |count: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let first_moment = read(n)?;
        let second_moment = read(n)?;
        Ok(Self {
            first_moment,
            second_moment,
            step_count: steps,
        })
    }
}

/// One bias-corrected Adam update.
///
/// Entries whose gradient is exactly zero keep their value and moments, so a
/// parameter that receives no gradient (a head outside the active loss) is
/// left untouched. On any non-finite gradient nothing is modified.
pub fn adam_step(params: &mut ParamBundle, grads: &[f64], state: &mut OptState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if grads.len() != params.len() {
        return Err(shape(format!(
            "gradient has {} entries, parameters have {}",
            grads.len(),
            params.len()
        )));
    }
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(shape("optimizer moments do not match the parameter count"));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let values = params.values_mut();
    for (((p, &g), m), v) in values
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        if g == 0.0 {
            continue;
        }
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
