//! The noise-rate sweep: every (η, variant, seed) cell is trained, sampled
//! and scored, then aggregated into tables, delta checks and plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use ndarray::Array2;
use robust_diffusion::data::{LabeledSample, NoiseKind};
use robust_diffusion::eval::{
    class_mae, controllability_acc, fit_centroids, generate_per_class, median, one_hot_queries, summarize, write_results,
    write_summary, CentroidClassifier, ResultRecord, SummaryRow,
};
use robust_diffusion::trainer::{TrainConfig, Variant};

use crate::commands::{make_dataset, train_logged, write_samples, write_scatter, write_text};
use crate::{out_root, svg, usage, ReproduceArgs, EXIT_OK, EXIT_RUNTIME, TRAIN_LOG};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DELTAS_FILE: &str = "deltas.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const FAILURES_FILE: &str = "failures.txt";

/// Required MAE improvement of pc_rdc over vanilla at the highest noise rate.
pub const HIGH_NOISE_MAE_MARGIN: f64 = 0.15;
pub const HIGH_NOISE_ETA: f64 = 0.8;
/// Required controllability gain of pc_rdc over vanilla at the curve rate.
pub const CONTROL_MARGIN: f64 = 0.10;
pub const CONTROL_ETA: f64 = 0.4;

/// Everything that determines a sweep's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub etas: Vec<f64>,
    pub variants: Vec<Variant>,
    pub noise: NoiseKind,
    pub n_per_class: usize,
    pub eval_per_class: usize,
    pub curve_eta: f64,
    pub curve_every: usize,
    pub curve_per_class: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            etas: vec![0.2, 0.4, 0.6, 0.8],
            variants: Variant::ALL.to_vec(),
            noise: NoiseKind::Symmetric,
            n_per_class: 2000,
            eval_per_class: 1000,
            curve_eta: CONTROL_ETA,
            curve_every: 500,
            curve_per_class: 250,
        }
    }
}

const SWEEP_KEYS: &[&str] = &[
    "seeds",
    "etas",
    "variants",
    "noise",
    "n_per_class",
    "eval_per_class",
    "curve_eta",
    "curve_every",
    "curve_per_class",
];

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| usage!("bad entry `{s}` for `{key}`")))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(usage!("`{key}` needs at least one entry"));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl SweepSpec {
    /// Sets a sweep key or, failing that, a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let num = |v: &str| v.parse::<usize>().map_err(|_| usage!("bad value `{v}` for `{key}`"));
        match key {
            "seeds" => self.seeds = parse_list(key, value, |s| s.parse().ok())?,
            "etas" => self.etas = parse_list(key, value, |s| s.parse().ok())?,
            "variants" => self.variants = parse_list(key, value, |s| Variant::parse(s).ok())?,
            "noise" => self.noise = NoiseKind::parse(value).map_err(|e| usage!("{e}"))?,
            "n_per_class" => self.n_per_class = num(value)?,
            "eval_per_class" => self.eval_per_class = num(value)?,
            "curve_eta" => self.curve_eta = value.parse().map_err(|_| usage!("bad value `{value}` for `{key}`"))?,
            "curve_every" => self.curve_every = num(value)?,
            "curve_per_class" => self.curve_per_class = num(value)?,
            _ => self.train.set(key, value).map_err(|e| usage!("{e}"))?,
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seeds" => join(&self.seeds),
            "etas" => self.etas.iter().map(|e| format!("{e:?}")).collect::<Vec<_>>().join(","),
            "variants" => join(&self.variants),
            "noise" => self.noise.name().to_string(),
            "n_per_class" => self.n_per_class.to_string(),
            "eval_per_class" => self.eval_per_class.to_string(),
            "curve_eta" => format!("{:?}", self.curve_eta),
            "curve_every" => self.curve_every.to_string(),
            "curve_per_class" => self.curve_per_class.to_string(),
            other => return self.train.get(other),
        })
    }

    /// Applies `key=value` lines; `#` comments and blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage!("line {}: expected key=value", i + 1))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.etas.is_empty() || self.variants.is_empty() {
            return Err(usage!("seeds, etas and variants must be non-empty"));
        }
        if let Some(e) = self.etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(usage!("noise rate {e} outside [0, 1]"));
        }
        if self.n_per_class == 0 || self.eval_per_class == 0 || self.curve_per_class == 0 || self.curve_every == 0 {
            return Err(usage!("sample counts and curve spacing must be positive"));
        }
        self.train.validate().map_err(|e| usage!("invalid training config: {e}"))?;
        Ok(())
    }

    /// Sweep keys first, then every training key except the per-cell ones.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in SWEEP_KEYS {
            out.push_str(&format!("{k}={}\n", self.get(k).expect("sweep key")));
        }
        for (k, v) in self.train.to_pairs() {
            if k != "variant" && k != "seed" {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    /// Cells ordered by η, then variant, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &eta in &self.etas {
            for &variant in &self.variants {
                for &seed in &self.seeds {
                    cells.push(Cell { eta, variant, seed });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub eta: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self, noise: NoiseKind) -> String {
        format!("{}_eta{:?}_{}_seed{}", noise.name(), self.eta, self.variant, self.seed)
    }
}

/// Manifest: the command, where it wrote, which config it read and the full
/// resolved sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub spec: SweepSpec,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("command={}\n", self.command);
        out.push_str(&format!(
            "config_path={}\n",
            self.config_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        ));
        out.push_str(&format!("out_dir={}\n", self.out_dir.display()));
        out.push_str(&self.spec.to_text());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut command = None;
        let mut config_path = None;
        let mut out_dir = None;
        let mut spec = SweepSpec::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage!("manifest line {}: expected key=value", i + 1))?;
            match k.trim() {
                "command" => command = Some(v.trim().to_string()),
                "config_path" => config_path = Some(v.trim()).filter(|s| !s.is_empty()).map(PathBuf::from),
                "out_dir" => out_dir = Some(PathBuf::from(v.trim())),
                key => spec.set(key, v)?,
            }
        }
        let command = command.ok_or_else(|| usage!("manifest lacks `command`"))?;
        if command != "reproduce" {
            return Err(usage!("manifest is for `{command}`, not `reproduce`"));
        }
        Ok(Self {
            command,
            config_path,
            out_dir: out_dir.ok_or_else(|| usage!("manifest lacks `out_dir`"))?,
            spec,
        })
    }
}

/// One pass/fail comparison between pc_rdc and vanilla medians.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaCheck {
    pub metric: &'static str,
    pub eta: f64,
    pub vanilla: f64,
    pub pc_rdc: f64,
    /// Required improvement of pc_rdc over vanilla (lower MAE, higher accuracy).
    pub margin: f64,
    pub pass: bool,
}

pub const DELTAS_HEADER: &str = "metric,eta,vanilla,pc_rdc,improvement,required,pass";

impl DeltaCheck {
    pub fn improvement(&self) -> f64 {
        match self.metric {
            "mae" => self.vanilla - self.pc_rdc,
            _ => self.pc_rdc - self.vanilla,
        }
    }

    fn line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            self.metric,
            self.eta,
            self.vanilla,
            self.pc_rdc,
            self.improvement(),
            self.margin,
            self.pass
        )
    }
}

/// MAE ordering at every η (with a margin at the highest rate) and the
/// controllability gap at the curve rate, for whichever cells are present.
pub fn delta_checks(summary: &[SummaryRow]) -> Vec<DeltaCheck> {
    let find = |variant, eta: f64| summary.iter().find(|r| r.variant == variant && r.eta == eta);
    let mut etas: Vec<f64> = summary.iter().map(|r| r.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let mut checks = Vec::new();
    for eta in etas {
        let (Some(v), Some(p)) = (find(Variant::Vanilla, eta), find(Variant::PcRdc, eta)) else {
            continue;
        };
        let margin = if eta == HIGH_NOISE_ETA { HIGH_NOISE_MAE_MARGIN } else { 0.0 };
        checks.push(DeltaCheck {
            metric: "mae",
            eta,
            vanilla: v.median_mae,
            pc_rdc: p.median_mae,
            margin,
            pass: p.median_mae <= v.median_mae - margin,
        });
        if eta == CONTROL_ETA {
            checks.push(DeltaCheck {
                metric: "controllability",
                eta,
                vanilla: v.median_controllability,
                pc_rdc: p.median_controllability,
                margin: CONTROL_MARGIN,
                pass: p.median_controllability - v.median_controllability >= CONTROL_MARGIN,
            });
        }
    }
    checks
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub variant: Variant,
    pub seed: u64,
    pub iter: usize,
    pub controllability: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub records: Vec<ResultRecord>,
    pub summary: Vec<SummaryRow>,
    pub checks: Vec<DeltaCheck>,
    pub curve: Vec<CurvePoint>,
    pub failures: Vec<(Cell, String)>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks.iter().all(|c| c.pass)
    }
}

struct CellOutcome {
    record: ResultRecord,
    curve: Vec<CurvePoint>,
}

fn run_cell(spec: &SweepSpec, cell: Cell, dir: &Path) -> Result<CellOutcome> {
    let (clean, noisy) = make_dataset(spec.n_per_class, spec.noise, cell.eta, None, cell.seed)?;
    let mut cfg = spec.train.clone();
    cfg.variant = cell.variant;
    cfg.seed = cell.seed;
    fs::create_dir_all(dir)?;
    let classifier = fit_centroids(&clean, cfg.network.cond_dim)?;
    let mut curve = Vec::new();
    let mut curve_error = None;
    let track = cell.eta == spec.curve_eta;
    let (result, _) = train_logged(&cfg, &noisy, &dir.join(TRAIN_LOG), |r| {
        if track && (r.iter + 1) % spec.curve_every == 0 && curve_error.is_none() {
            let queries = r.pseudo.map_or_else(|| one_hot_queries(cfg.network.cond_dim), |t| t.class_prototypes());
            match controllability_now(r.net, &queries, &cfg, &classifier, spec.curve_per_class, cell.seed) {
                Ok(c) => curve.push(CurvePoint {
                    variant: cell.variant,
                    seed: cell.seed,
                    iter: r.iter + 1,
                    controllability: c,
                }),
                Err(e) => curve_error = Some(e),
            }
        }
    })?;
    if let Some(e) = curve_error {
        return Err(e);
    }
    let ckpt = result?;
    ckpt.save(dir)?;
    let net = ckpt.network()?;
    let generated = generate_per_class(
        &net,
        &ckpt.class_queries(),
        spec.eval_per_class,
        cfg.guidance_w,
        &cfg.schedule,
        sample_seed(cell.seed),
    )?;
    write_samples(&dir.join("samples"), &generated)?;
    let record = score(&generated, &clean, &classifier, spec.noise, cell)?;
    fs::write(dir.join("metrics.txt"), format!("{}\n{record}\n", robust_diffusion::eval::RESULTS_HEADER))?;
    Ok(CellOutcome { record, curve })
}

fn sample_seed(seed: u64) -> u64 {
    seed.wrapping_add(7919)
}

fn controllability_now(
    net: &robust_diffusion::network::ScoreNetwork,
    queries: &[Vec<f64>],
    cfg: &TrainConfig,
    classifier: &CentroidClassifier,
    per_class: usize,
    seed: u64,
) -> Result<f64> {
    let gen = generate_per_class(net, queries, per_class, cfg.guidance_w, &cfg.schedule, sample_seed(seed))?;
    Ok(controllability_acc(&gen, classifier)?)
}

fn score(
    generated: &[Array2<f64>],
    clean: &[LabeledSample],
    classifier: &CentroidClassifier,
    noise: NoiseKind,
    cell: Cell,
) -> Result<ResultRecord> {
    Ok(ResultRecord {
        variant: cell.variant,
        noise,
        eta: cell.eta,
        seed: cell.seed,
        mae: class_mae(generated, clean)?,
        controllability: controllability_acc(generated, classifier)?,
    })
}

/// Runs every cell (up to `jobs` at once), then writes the tables and plots
/// into `out`. Cell failures are recorded and do not stop the sweep.
pub fn run_sweep(spec: &SweepSpec, out: &Path, jobs: usize) -> Result<SweepReport> {
    spec.validate()?;
    let cells = spec.cells();
    fs::create_dir_all(out.join("cells")).with_context(|| format!("creating {}", out.display()))?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellOutcome>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                let dir = out.join("cells").join(cell.dir_name(spec.noise));
                let outcome = run_cell(spec, cell, &dir);
                match &outcome {
                    Ok(o) => eprintln!("done {}: mae {:.4} controllability {:.4}", cell.dir_name(spec.noise), o.record.mae, o.record.controllability),
                    Err(e) => eprintln!("failed {}: {e:#}", cell.dir_name(spec.noise)),
                }
                slots.lock().expect("result slots")[i] = Some(outcome);
            });
        }
    });

    let mut records = Vec::new();
    let mut curve = Vec::new();
    let mut failures = Vec::new();
    for (cell, slot) in cells.iter().zip(slots.into_inner().expect("result slots")) {
        match slot.expect("every cell ran") {
            Ok(o) => {
                records.push(o.record);
                curve.extend(o.curve);
            }
            Err(e) => failures.push((*cell, format!("{e:#}"))),
        }
    }
    let summary = summarize(&records);
    let checks = delta_checks(&summary);
    let report = SweepReport {
        records,
        summary,
        checks,
        curve,
        failures,
    };
    write_outputs(spec, out, &report)?;
    Ok(report)
}

fn write_outputs(spec: &SweepSpec, out: &Path, report: &SweepReport) -> Result<()> {
    write_text(&out.join(RESULTS_FILE), &write_results(&report.records))?;
    write_text(&out.join(SUMMARY_FILE), &write_summary(&report.summary))?;
    let mut deltas = format!("{DELTAS_HEADER}\n");
    for c in &report.checks {
        deltas.push_str(&c.line());
        deltas.push('\n');
    }
    write_text(&out.join(DELTAS_FILE), &deltas)?;

    let mut curve = String::from("variant,seed,iter,controllability\n");
    for p in &report.curve {
        curve.push_str(&format!("{},{},{},{:?}\n", p.variant, p.seed, p.iter, p.controllability));
    }
    write_text(&out.join(CURVE_FILE), &curve)?;

    let failures_path = out.join(FAILURES_FILE);
    if report.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        let text: String = report
            .failures
            .iter()
            .map(|(c, e)| format!("{}: {e}\n", c.dir_name(spec.noise)))
            .collect();
        write_text(&failures_path, &text)?;
    }

    let plots = out.join("plots");
    let first_seed = spec.seeds[0];
    for &eta in &spec.etas {
        for &variant in &spec.variants {
            let cell = Cell { eta, variant, seed: first_seed };
            let dir = out.join("cells").join(cell.dir_name(spec.noise)).join("samples");
            if let Ok(generated) = crate::commands::read_samples(&dir) {
                let title = format!("{variant}, {} noise, eta {eta:?}, seed {first_seed}", spec.noise.name());
                write_scatter(&plots.join(format!("samples_eta{eta:?}_{variant}.svg")), &title, &generated)?;
            }
        }
    }
    let mut by_variant: BTreeMap<Variant, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for p in &report.curve {
        by_variant.entry(p.variant).or_default().entry(p.iter).or_default().push(p.controllability);
    }
    if !by_variant.is_empty() {
        let series: Vec<(String, Vec<(f64, f64)>)> = by_variant
            .into_iter()
            .map(|(v, pts)| {
                let line = pts
                    .into_iter()
                    .map(|(iter, vals)| (iter as f64, median(&vals).expect("non-empty")))
                    .collect();
                (v.to_string(), line)
            })
            .collect();
        let title = format!("median controllability vs iteration, eta {:?}", spec.curve_eta);
        write_text(&plots.join("controllability_curve.svg"), &svg::unit_lines(&title, &series))?;
    }
    Ok(())
}

pub fn cmd_reproduce(a: &ReproduceArgs) -> Result<i32> {
    if a.jobs == 0 {
        return Err(usage!("--jobs must be at least 1"));
    }
    let manifest = match &a.manifest {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
            RunManifest::parse(&text)?
        }
        None => {
            let mut spec = SweepSpec::default();
            if let Some(path) = &a.config {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                spec.apply_text(&text)?;
            }
            let flags = [
                ("seeds", a.seeds.clone()),
                ("etas", a.etas.clone()),
                ("variants", a.variants.clone()),
                ("noise", a.noise.clone()),
                ("n_per_class", a.n_per_class.map(|v| v.to_string())),
                ("total_iters", a.total_iters.map(|v| v.to_string())),
                ("eval_per_class", a.eval_per_class.map(|v| v.to_string())),
                ("curve_every", a.curve_every.map(|v| v.to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    spec.set(k, &v)?;
                }
            }
            for kv in &a.overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| usage!("--set expects KEY=VALUE, got `{kv}`"))?;
                spec.set(k.trim(), v)?;
            }
            if spec.train.early_stop.budget_iters > spec.train.total_iters && spec.train.total_iters > 0 {
                spec.train.early_stop.budget_iters = spec.train.total_iters;
            }
            RunManifest {
                command: "reproduce".into(),
                config_path: a.config.clone(),
                out_dir: a.out.clone().unwrap_or_else(|| out_root().join("reproduce")),
                spec,
            }
        }
    };
    manifest.spec.validate()?;
    fs::create_dir_all(&manifest.out_dir).with_context(|| format!("creating {}", manifest.out_dir.display()))?;
    let manifest_path = manifest.out_dir.join(MANIFEST_FILE);
    if a.manifest.as_deref() != Some(manifest_path.as_path()) {
        write_text(&manifest_path, &manifest.to_text())?;
    }

    let report = run_sweep(&manifest.spec, &manifest.out_dir, a.jobs)?;
    print!("{}", write_summary(&report.summary));
    println!("{DELTAS_HEADER}");
    for c in &report.checks {
        println!("{}", c.line());
    }
    for (cell, e) in &report.failures {
        eprintln!("cell {} failed: {e}", cell.dir_name(manifest.spec.noise));
    }
    println!("outputs in {}", manifest.out_dir.display());
    Ok(if report.passed() { EXIT_OK } else { EXIT_RUNTIME })
}
