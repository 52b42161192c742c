//! Training state snapshots.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{shape, Error, Result};
use crate::eval::one_hot_queries;
use crate::network::ScoreNetwork;
use crate::nn::{OptState, ParamBundle};
use crate::pseudo::PseudoTable;

use super::TrainConfig;

pub const PARAMS_FILE: &str = "params.bin";
pub const OPT_FILE: &str = "opt.bin";
pub const PSEUDO_FILE: &str = "pseudo.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const META_FILE: &str = "meta.txt";

/// Network parameters, pseudo table, optimizer state and iteration count,
/// tagged with the digest of the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamBundle,
    /// Present for the pseudo-condition variants.
    pub pseudo: Option<PseudoTable>,
    pub opt: OptState,
    pub iter: usize,
    pub config_digest: String,
}

impl Checkpoint {
    /// Freshly initialized state for a dataset of `dataset_len` samples.
    pub fn init(config: &TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        let mut net = ScoreNetwork::new(config.network, config.precond, config.seed)?;
        net.zero_condition_output();
        let params = net.into_params();
        let pseudo = if config.variant.uses_pseudo() {
            Some(PseudoTable::new(dataset_len, config.network.cond_dim)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            opt: OptState::new(params.len()),
            params,
            pseudo,
            iter: 0,
            config_digest: config.digest(),
        })
    }

    /// Sampling condition for each class.
    ///
    /// A model only sees the conditions it was trained on, so each class is
    /// queried with the centroid of its training conditions: the one-hot
    /// label for `vanilla`, the table prototype for the pseudo variants.
    pub fn class_queries(&self) -> Vec<Vec<f64>> {
        match &self.pseudo {
            Some(table) => table.class_prototypes(),
            None => one_hot_queries(self.config.network.cond_dim),
        }
    }

    pub fn network(&self) -> Result<ScoreNetwork> {
        ScoreNetwork::from_params(self.config.network, self.config.precond, self.params.clone())
    }

    pub fn check(&self) -> Result<()> {
        if self.config_digest != self.config.digest() {
            return Err(Error::Parse("checkpoint digest does not match its config".into()));
        }
        if self.params.layer_shapes() != self.config.network.layer_shapes().as_slice() {
            return Err(shape("checkpoint parameters do not match the network spec"));
        }
        if self.opt.first_moment.len() != self.params.len() || self.opt.second_moment.len() != self.params.len() {
            return Err(shape("optimizer state does not match the parameters"));
        }
        if self.pseudo.is_some() != self.config.variant.uses_pseudo() {
            return Err(shape("pseudo table presence does not match the variant"));
        }
        if let Some(t) = &self.pseudo {
            if t.dim() != self.config.network.cond_dim {
                return Err(shape("pseudo table width does not match the condition width"));
            }
        }
        Ok(())
    }

    /// Writes the snapshot files into `dir`, creating it if needed. The
    /// pseudo table file is only written for variants that have one.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
        self.params.write_to(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(OPT_FILE))?);
        self.opt.write_to(&mut w)?;
        w.flush()?;
        if let Some(t) = &self.pseudo {
            let mut w = BufWriter::new(File::create(dir.join(PSEUDO_FILE))?);
            t.write_to(&mut w)?;
            w.flush()?;
        } else if dir.join(PSEUDO_FILE).exists() {
            fs::remove_file(dir.join(PSEUDO_FILE))?;
        }
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        fs::write(
            dir.join(META_FILE),
            format!("iter={}\nconfig_digest={}\n", self.iter, self.config_digest),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainConfig::from_text(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let params = ParamBundle::read_from(BufReader::new(File::open(dir.join(PARAMS_FILE))?))?;
        let opt = OptState::read_from(BufReader::new(File::open(dir.join(OPT_FILE))?))?;
        let pseudo = if config.variant.uses_pseudo() {
            Some(PseudoTable::read_from(BufReader::new(File::open(dir.join(PSEUDO_FILE))?))?)
        } else {
            None
        };
        let meta = fs::read_to_string(dir.join(META_FILE))?;
        let mut iter = None;
        let mut digest = None;
        for line in meta.lines() {
            match line.split_once('=') {
                Some(("iter", v)) => {
                    iter = Some(v.trim().parse().map_err(|_| Error::Parse(format!("bad iteration `{v}`")))?)
                }
                Some(("config_digest", v)) => digest = Some(v.trim().to_string()),
                _ => {}
            }
        }
        let ckpt = Self {
            config,
            params,
            pseudo,
            opt,
            iter: iter.ok_or_else(|| Error::Parse("checkpoint meta lacks the iteration".into()))?,
            config_digest: digest.ok_or_else(|| Error::Parse("checkpoint meta lacks the digest".into()))?,
        };
        ckpt.check()?;
        Ok(ckpt)
    }
}
