use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use robust_diffusion::data::{read_dataset, write_dataset, LabeledSample, NoiseKind, NoiseSpec, PairMap};
use robust_diffusion::eval::{
    class_mae, controllability_acc, fit_centroids, generate_per_class, ResultRecord, RESULTS_HEADER,
};
use robust_diffusion::trainer::{resume, Checkpoint, LogRecord, TrainConfig, Variant};
use robust_diffusion::Error as CoreError;

use crate::{out_root, svg, usage, EvalArgs, GenDataArgs, SampleArgs, TrainArgs};

pub const TRAIN_LOG: &str = "train.log";
pub const SAMPLE_FILE_PREFIX: &str = "class_";

/// Seed of the label-noise draws for a dataset seed. Independent of η, so a
/// sample flipped at a lower rate is also flipped at every higher rate.
pub fn noise_seed(seed: u64) -> u64 {
    seed.wrapping_add(1_000_003)
}

pub(crate) fn make_dataset(
    n_per_class: usize,
    kind: NoiseKind,
    eta: f64,
    pairs: Option<PairMap>,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let clean = robust_diffusion::data::make_toy_dataset(n_per_class, seed)?;
    let spec = NoiseSpec {
        kind,
        eta,
        pair_map: pairs,
        seed: noise_seed(seed),
    };
    let noisy = spec.apply(&clean, 4)?;
    Ok((clean, noisy))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.n_per_class == 0 {
        return Err(usage!("--n-per-class must be at least 1"));
    }
    if !(0.0..=1.0).contains(&a.eta) {
        return Err(usage!("--eta must lie in [0, 1]"));
    }
    let kind = NoiseKind::parse(&a.noise).map_err(|e| usage!("--noise: {e}"))?;
    let pairs = match &a.pairs {
        Some(p) => Some(PairMap::parse(p, 4).map_err(|e| usage!("--pairs: {e}"))?),
        None => None,
    };
    let (_, noisy) = make_dataset(a.n_per_class, kind, a.eta, pairs, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join("data.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    write_dataset(&mut w, &noisy)?;
    w.flush()?;

    let mut clean_counts = [0usize; 4];
    let mut noisy_counts = [0usize; 4];
    for s in &noisy {
        clean_counts[s.clean_class] += 1;
        noisy_counts[s.noisy_class] += 1;
    }
    let flipped = noisy.iter().filter(|s| s.clean_class != s.noisy_class).count();
    println!("wrote {} samples to {}", noisy.len(), out.display());
    println!("clean per class: {clean_counts:?}");
    println!("noisy per class: {noisy_counts:?}");
    println!("flipped: {flipped} ({:.4})", flipped as f64 / noisy.len() as f64);
    Ok(())
}

pub(crate) fn load_dataset(path: &Path) -> Result<Vec<LabeledSample>> {
    let f = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    Ok(read_dataset(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))?)
}

/// Applies `key=value` overrides; unknown keys are usage errors.
pub(crate) fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v).map_err(|e| usage!("--set {kv}: {e}"))?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let unknown = cfg.apply_text(&text).map_err(|e| usage!("{}: {e}", path.display()))?;
        if let Some(k) = unknown.keys().next() {
            return Err(usage!("{}: unknown config key `{k}`", path.display()));
        }
    }
    if let Some(v) = &a.variant {
        cfg.variant = Variant::parse(v).map_err(|e| usage!("--variant: {e}"))?;
    }
    if let Some(n) = a.total_iters {
        cfg.total_iters = n;
    }
    if let Some(n) = a.batch_size {
        cfg.batch_size = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    apply_overrides(&mut cfg, &a.overrides)?;
    if cfg.early_stop.budget_iters > cfg.total_iters && cfg.total_iters > 0 {
        cfg.early_stop.budget_iters = cfg.total_iters;
    }
    cfg.validate().map_err(|e| usage!("invalid configuration: {e}"))?;

    let dataset = load_dataset(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join("train"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (result, _) = train_logged(&cfg, &dataset, &out.join(TRAIN_LOG), |_| {})?;
    match result {
        Ok(ckpt) => {
            ckpt.save(&out)?;
            println!("trained {} iterations; checkpoint in {}", ckpt.iter, out.display());
            Ok(())
        }
        Err(CoreError::Diverged { iter, checkpoint }) => {
            checkpoint.save(&out)?;
            bail!(
                "training diverged at iteration {iter}; last finite checkpoint kept in {}",
                out.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

/// Trains while streaming log records to `log_path`. The inner result
/// carries divergence so the caller can keep the partial checkpoint.
pub(crate) fn train_logged<F>(
    cfg: &TrainConfig,
    dataset: &[LabeledSample],
    log_path: &Path,
    mut on_iter: F,
) -> Result<(std::result::Result<Checkpoint, CoreError>, Vec<LogRecord>)>
where
    F: FnMut(&robust_diffusion::trainer::IterRecord<'_>),
{
    let mut log = BufWriter::new(File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", LogRecord::HEADER)?;
    let mut records = Vec::new();
    let mut io_error = None;
    let clock = Instant::now();
    let start = Checkpoint::init(cfg, dataset.len())?;
    let result = resume(start, dataset, |r| {
        if r.iter % cfg.log_every == 0 || r.iter + 1 == cfg.total_iters {
            let rec = LogRecord {
                iter: r.iter,
                demo_loss: r.demo_loss,
                cond_loss: r.cond_loss,
                wall_secs: clock.elapsed().as_secs_f64(),
            };
            if let Err(e) = writeln!(log, "{}", rec.to_line()) {
                io_error.get_or_insert(e);
            }
            records.push(rec);
        }
        on_iter(r);
    });
    log.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    Ok((result.map(|t| t.checkpoint), records))
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    if a.per_class == 0 {
        return Err(usage!("--per-class must be at least 1"));
    }
    if !a.checkpoint.join(robust_diffusion::trainer::PARAMS_FILE).exists() {
        bail!("no checkpoint found in {}", a.checkpoint.display());
    }
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let w = a.guidance_w.unwrap_or(ckpt.config.guidance_w);
    if !(w >= 1.0) {
        return Err(usage!("--guidance-w must be at least 1"));
    }
    let net = ckpt.network()?;
    let classes = ckpt.config.network.cond_dim;
    let generated = generate_per_class(&net, &ckpt.class_queries(), a.per_class, w, &ckpt.config.schedule, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join("samples"));
    write_samples(&out, &generated)?;
    if let Some(path) = &a.svg {
        write_scatter(path, "generated samples by conditioning class", &generated)?;
    }
    println!("wrote {} samples per class for {classes} classes to {}", a.per_class, out.display());
    Ok(())
}

pub(crate) fn write_samples(dir: &Path, generated: &[Array2<f64>]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (c, pts) in generated.iter().enumerate() {
        let path = dir.join(format!("{SAMPLE_FILE_PREFIX}{c}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "x1,x2")?;
        for row in pts.rows() {
            writeln!(w, "{:?},{:?}", row[0], row[1])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub(crate) fn read_samples(dir: &Path) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::new();
    loop {
        let path = dir.join(format!("{SAMPLE_FILE_PREFIX}{}.csv", out.len()));
        if !path.exists() {
            break;
        }
        let text = fs::read_to_string(&path)?;
        let mut vals = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (x, y) = line
                .split_once(',')
                .with_context(|| format!("bad sample row `{line}` in {}", path.display()))?;
            vals.push(x.trim().parse::<f64>()?);
            vals.push(y.trim().parse::<f64>()?);
        }
        out.push(Array2::from_shape_vec((vals.len() / 2, 2), vals)?);
    }
    if out.is_empty() {
        bail!("no sample files in {}", dir.display());
    }
    Ok(out)
}

pub(crate) fn write_scatter(path: &Path, title: &str, generated: &[Array2<f64>]) -> Result<()> {
    let groups: Vec<(String, Vec<[f64; 2]>)> = generated
        .iter()
        .enumerate()
        .map(|(c, pts)| (format!("class {c}"), pts.rows().into_iter().map(|r| [r[0], r[1]]).collect()))
        .collect();
    write_text(path, &svg::scatter(title, &groups))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let generated = read_samples(&a.samples)?;
    let classes = generated.len();
    let mae = class_mae(&generated, &dataset)?;
    let ctrl = controllability_acc(&generated, &fit_centroids(&dataset, classes)?)?;
    println!("mae={mae:?}");
    println!("controllability={ctrl:?}");
    if let Some(out) = &a.out {
        let (Some(variant), Some(eta), Some(seed)) = (&a.variant, a.eta, a.seed) else {
            return Err(usage!("--out needs --variant, --eta and --seed"));
        };
        let record = ResultRecord {
            variant: Variant::parse(variant).map_err(|e| usage!("--variant: {e}"))?,
            noise: NoiseKind::parse(&a.noise).map_err(|e| usage!("--noise: {e}"))?,
            eta,
            seed,
            mae,
            controllability: ctrl,
        };
        append_record(out, &record)?;
    }
    Ok(())
}

fn append_record(path: &PathBuf, record: &ResultRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(f, "{record}")?;
    Ok(())
}
