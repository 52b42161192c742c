//! Training configuration and its flat `key=value` text form.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::diffusion::{LogNormalSigma, NoiseSchedule, Preconditioning};
use crate::error::{invalid, Error, Result};
use crate::network::NetworkSpec;
use crate::nn::{Activation, AdamConfig};
use crate::pseudo::EarlyStopPolicy;
use crate::rdc::{Quadrature, RdcState};

/// Which parts of the robust objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Conditions on the observed labels.
    Vanilla,
    /// Pseudo conditions predicted directly by the condition head.
    PcOnly,
    /// Pseudo conditions integrated through the reverse-time condition process.
    PcRdc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::PcOnly, Variant::PcRdc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::PcOnly => "pc_only",
            Variant::PcRdc => "pc_rdc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "pc_only" => Ok(Variant::PcOnly),
            "pc_rdc" => Ok(Variant::PcRdc),
            other => Err(invalid(format!("unknown variant `{other}`"))),
        }
    }

    pub fn uses_pseudo(self) -> bool {
        self != Variant::Vanilla
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub total_iters: usize,
    /// Temporal-ensembling momentum.
    pub alpha: f64,
    pub early_stop: EarlyStopPolicy,
    pub cfg_drop_prob: f64,
    /// Guidance scale used when sampling from the trained model.
    pub guidance_w: f64,
    pub schedule: NoiseSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub network: NetworkSpec,
    pub precond: Preconditioning,
    pub train_sigma: LogNormalSigma,
    /// Nodes of the pseudo-condition quadrature.
    pub quad_nodes: usize,
    pub quad_t_min: f64,
    /// Use one node per interval of the schedule grid instead of `quad_nodes`.
    pub full_grid_quadrature: bool,
    pub rdc_mu: f64,
    pub rdc_sigma0: f64,
    /// Iterations between training-log records.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PcRdc,
            batch_size: 512,
            total_iters: 10_000,
            alpha: 0.1,
            early_stop: EarlyStopPolicy { budget_iters: 500 },
            cfg_drop_prob: 0.1,
            guidance_w: 1.0,
            schedule: NoiseSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            network: NetworkSpec::default(),
            precond: Preconditioning::default(),
            train_sigma: LogNormalSigma::default(),
            quad_nodes: 8,
            quad_t_min: 0.002,
            full_grid_quadrature: false,
            rdc_mu: 0.0,
            rdc_sigma0: 1.0,
            log_every: 100,
        }
    }
}

const KEYS: &[&str] = &[
    "variant",
    "batch_size",
    "total_iters",
    "alpha",
    "early_stop_iters",
    "cfg_drop_prob",
    "guidance_w",
    "num_steps",
    "sigma_min",
    "sigma_max",
    "rho",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "num_classes",
    "trunk_width",
    "trunk_depth",
    "head_width",
    "activation",
    "sigma_data",
    "p_mean",
    "p_std",
    "quad_nodes",
    "quad_t_min",
    "full_grid_quadrature",
    "rdc_mu",
    "rdc_sigma0",
    "log_every",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha must lie in [0, 1]"));
        }
        EarlyStopPolicy::new(self.early_stop.budget_iters, self.total_iters)?;
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(invalid("cfg_drop_prob must lie in [0, 1]"));
        }
        if !(self.guidance_w >= 1.0 && self.guidance_w.is_finite()) {
            return Err(invalid("guidance_w must be at least 1"));
        }
        self.schedule.validate()?;
        self.adam.validate()?;
        self.network.validate()?;
        if !(self.precond.sigma_data > 0.0) {
            return Err(invalid("sigma_data must be positive"));
        }
        if !(self.train_sigma.p_std >= 0.0) {
            return Err(invalid("p_std must be non-negative"));
        }
        self.quadrature()?;
        self.rdc_state()?;
        if self.log_every == 0 {
            return Err(invalid("log_every must be at least 1"));
        }
        Ok(())
    }

    pub fn quadrature(&self) -> Result<Quadrature> {
        if self.full_grid_quadrature {
            Quadrature::full_grid(&self.schedule)
        } else {
            Quadrature::for_schedule(&self.schedule, self.quad_t_min, self.quad_nodes)
        }
    }

    pub fn rdc_state(&self) -> Result<RdcState> {
        let mut state = RdcState::new(self.schedule, self.network.cond_dim)?;
        state.mu = vec![self.rdc_mu; self.network.cond_dim];
        state.sigma0 = self.rdc_sigma0;
        state.validate()?;
        Ok(state)
    }

    /// Value of one key in its canonical text form.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "variant" => self.variant.name().to_string(),
            "batch_size" => self.batch_size.to_string(),
            "total_iters" => self.total_iters.to_string(),
            "alpha" => fmt_f(self.alpha),
            "early_stop_iters" => self.early_stop.budget_iters.to_string(),
            "cfg_drop_prob" => fmt_f(self.cfg_drop_prob),
            "guidance_w" => fmt_f(self.guidance_w),
            "num_steps" => self.schedule.num_steps.to_string(),
            "sigma_min" => fmt_f(self.schedule.sigma_min),
            "sigma_max" => fmt_f(self.schedule.sigma_max),
            "rho" => fmt_f(self.schedule.rho),
            "lr" => fmt_f(self.adam.lr),
            "beta1" => fmt_f(self.adam.beta1),
            "beta2" => fmt_f(self.adam.beta2),
            "adam_eps" => fmt_f(self.adam.eps),
            "seed" => self.seed.to_string(),
            "num_classes" => self.network.cond_dim.to_string(),
            "trunk_width" => self.network.trunk_width.to_string(),
            "trunk_depth" => self.network.trunk_depth.to_string(),
            "head_width" => self.network.head_width.to_string(),
            "activation" => self.network.activation.name().to_string(),
            "sigma_data" => fmt_f(self.precond.sigma_data),
            "p_mean" => fmt_f(self.train_sigma.p_mean),
            "p_std" => fmt_f(self.train_sigma.p_std),
            "quad_nodes" => self.quad_nodes.to_string(),
            "quad_t_min" => fmt_f(self.quad_t_min),
            "full_grid_quadrature" => self.full_grid_quadrature.to_string(),
            "rdc_mu" => fmt_f(self.rdc_mu),
            "rdc_sigma0" => fmt_f(self.rdc_sigma0),
            "log_every" => self.log_every.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Sets one key from text. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_iters" => self.total_iters = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "early_stop_iters" => self.early_stop.budget_iters = num(key, value)?,
            "cfg_drop_prob" => self.cfg_drop_prob = num(key, value)?,
            "guidance_w" => self.guidance_w = num(key, value)?,
            "num_steps" => self.schedule.num_steps = num(key, value)?,
            "sigma_min" => self.schedule.sigma_min = num(key, value)?,
            "sigma_max" => self.schedule.sigma_max = num(key, value)?,
            "rho" => self.schedule.rho = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "num_classes" => self.network.cond_dim = num(key, value)?,
            "trunk_width" => self.network.trunk_width = num(key, value)?,
            "trunk_depth" => self.network.trunk_depth = num(key, value)?,
            "head_width" => self.network.head_width = num(key, value)?,
            "activation" => self.network.activation = Activation::parse(value)?,
            "sigma_data" => self.precond.sigma_data = num(key, value)?,
            "p_mean" => self.train_sigma.p_mean = num(key, value)?,
            "p_std" => self.train_sigma.p_std = num(key, value)?,
            "quad_nodes" => self.quad_nodes = num(key, value)?,
            "quad_t_min" => self.quad_t_min = num(key, value)?,
            "full_grid_quadrature" => self.full_grid_quadrature = num(key, value)?,
            "rdc_mu" => self.rdc_mu = num(key, value)?,
            "rdc_sigma0" => self.rdc_sigma0 = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            other => return Err(invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Every key with its value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|k| (*k, self.get(k).expect("listed key")))
            .collect()
    }

    /// One `key=value` line per key.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped; keys this struct does not know are
    /// returned for the caller to handle.
    pub fn apply_text(&mut self, text: &str) -> Result<BTreeMap<String, String>> {
        let mut unknown = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if KEYS.contains(&k) {
                self.set(k, v)?;
            } else {
                unknown.insert(k.to_string(), v.to_string());
            }
        }
        Ok(unknown)
    }

    /// Strict parse: every line must be a known key.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let unknown = cfg.apply_text(text)?;
        if let Some(k) = unknown.keys().next() {
            return Err(invalid(format!("unknown config key `{k}`")));
        }
        Ok(cfg)
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("bad value `{value}` for `{key}`")))
}
