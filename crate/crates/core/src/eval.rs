//! Toy-benchmark metrics and result records.
//!
//! MAE is measured against clean training points: each generated point is
//! matched to its nearest reference point of the same class under the per-axis
//! mean absolute difference, and that difference is averaged over generated
//! points. Controllability is the fraction of generated points whose nearest
//! class centroid is the conditioning class.

use std::fmt;

use ndarray::{Array2, ArrayView2};

use crate::data::{LabeledSample, NoiseKind};
use crate::diffusion::{heun_sample, Denoiser, NoiseSchedule};
use crate::error::{invalid, shape, Error, Result};
use crate::trainer::Variant;

/// Mean over `generated` rows of the per-axis mean absolute difference to
/// the nearest `reference` row.
pub fn mae(generated: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    if generated.nrows() == 0 || reference.nrows() == 0 {
        return Err(invalid("MAE needs non-empty point sets"));
    }
    if generated.ncols() != reference.ncols() || generated.ncols() == 0 {
        return Err(shape("point sets differ in width"));
    }
    let dim = generated.ncols() as f64;
    let mut total = 0.0;
    for g in generated.rows() {
        let mut best = f64::INFINITY;
        for r in reference.rows() {
            let d: f64 = g.iter().zip(r.iter()).map(|(a, b)| (a - b).abs()).sum();
            if d < best {
                best = d;
            }
        }
        total += best / dim;
    }
    Ok(total / generated.nrows() as f64)
}

/// Clean points of each class as row matrices, indexed by class.
pub fn clean_points_by_class(dataset: &[LabeledSample], num_classes: usize) -> Result<Vec<Array2<f64>>> {
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for s in dataset {
        if s.clean_class >= num_classes {
            return Err(invalid(format!("class {} outside {num_classes}", s.clean_class)));
        }
        rows[s.clean_class].extend_from_slice(&s.point);
    }
    rows.into_iter()
        .enumerate()
        .map(|(c, v)| {
            if v.is_empty() {
                return Err(invalid(format!("class {c} has no clean points")));
            }
            Array2::from_shape_vec((v.len() / 2, 2), v).map_err(|e| shape(e.to_string()))
        })
        .collect()
}

/// Class-averaged MAE of per-class generated sets against clean data.
pub fn class_mae(generated_per_class: &[Array2<f64>], dataset: &[LabeledSample]) -> Result<f64> {
    let refs = clean_points_by_class(dataset, generated_per_class.len())?;
    let mut total = 0.0;
    for (g, r) in generated_per_class.iter().zip(&refs) {
        total += mae(g.view(), r.view())?;
    }
    Ok(total / refs.len() as f64)
}

/// Nearest-centroid classifier fit on clean labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidClassifier {
    pub centroids: Vec<[f64; 2]>,
}

impl CentroidClassifier {
    /// Euclidean nearest centroid; ties go to the lower class id.
    pub fn classify(&self, point: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, m) in self.centroids.iter().enumerate() {
            let d = (point[0] - m[0]).powi(2) + (point[1] - m[1]).powi(2);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

/// Centroid of class `c` is the mean of its clean points.
pub fn fit_centroids(dataset: &[LabeledSample], num_classes: usize) -> Result<CentroidClassifier> {
    let mut sums = vec![[0.0; 2]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for s in dataset {
        if s.clean_class >= num_classes {
            return Err(invalid(format!("class {} outside {num_classes}", s.clean_class)));
        }
        sums[s.clean_class][0] += s.point[0];
        sums[s.clean_class][1] += s.point[1];
        counts[s.clean_class] += 1;
    }
    let centroids = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(c, (s, &n))| {
            if n == 0 {
                Err(invalid(format!("class {c} is missing from the dataset")))
            } else {
                Ok([s[0] / n as f64, s[1] / n as f64])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CentroidClassifier { centroids })
}

/// Fraction of generated points classified as the class they were generated
/// for; `generated_per_class[c]` holds the points conditioned on class `c`.
pub fn controllability_acc(generated_per_class: &[Array2<f64>], classifier: &CentroidClassifier) -> Result<f64> {
    if generated_per_class.len() != classifier.centroids.len() {
        return Err(shape("need one generated set per class"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (c, pts) in generated_per_class.iter().enumerate() {
        if pts.ncols() != 2 {
            return Err(shape("generated points must be 2-D"));
        }
        for p in pts.rows() {
            if classifier.classify(p.as_slice().expect("contiguous row")) == c {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid("no generated points"));
    }
    Ok(hits as f64 / total as f64)
}

/// One-hot condition for every class.
pub fn one_hot_queries(num_classes: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| (0..num_classes).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// `per_class` samples for each class, conditioned on `queries[c]`.
/// Class `c` uses sampler seed `seed + c`.
pub fn generate_per_class<D: Denoiser + ?Sized>(
    model: &D,
    queries: &[Vec<f64>],
    per_class: usize,
    guidance_w: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    queries
        .iter()
        .enumerate()
        .map(|(c, q)| {
            let cond = Array2::from_shape_fn((per_class, q.len()), |(_, j)| q[j]);
            heun_sample(model, cond.view(), guidance_w, schedule, seed.wrapping_add(c as u64))
        })
        .collect()
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub variant: Variant,
    pub noise: NoiseKind,
    pub eta: f64,
    pub seed: u64,
    pub mae: f64,
    pub controllability: f64,
}

pub const RESULTS_HEADER: &str = "variant,noise,eta,seed,mae,controllability";

impl fmt::Display for ResultRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:?},{},{:?},{:?}",
            self.variant,
            self.noise.name(),
            self.eta,
            self.seed,
            self.mae,
            self.controllability
        )
    }
}

impl ResultRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("bad result row `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}`")));
        Ok(Self {
            variant: Variant::parse(f[0])?,
            noise: NoiseKind::parse(f[1])?,
            eta: num(f[2])?,
            seed: f[3].parse().map_err(|_| Error::Parse(format!("bad seed `{}`", f[3])))?,
            mae: num(f[4])?,
            controllability: num(f[5])?,
        })
    }
}

pub fn write_results(records: &[ResultRecord]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in records {
        out.push_str(&format!("{r}\n"));
    }
    out
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(Error::Parse("results table lacks its header".into())),
    }
    lines.filter(|l| !l.trim().is_empty()).map(ResultRecord::parse).collect()
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Per-(variant, noise, η) medians over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub noise: NoiseKind,
    pub eta: f64,
    pub runs: usize,
    pub median_mae: f64,
    pub median_controllability: f64,
}

pub const SUMMARY_HEADER: &str = "variant,noise,eta,runs,median_mae,median_controllability";

impl fmt::Display for SummaryRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:?},{},{:?},{:?}",
            self.variant,
            self.noise.name(),
            self.eta,
            self.runs,
            self.median_mae,
            self.median_controllability
        )
    }
}

/// Groups by cell, ordered by noise kind, η, then variant.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut cells: Vec<(NoiseKind, f64, Variant)> = Vec::new();
    for r in records {
        let key = (r.noise, r.eta, r.variant);
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    cells.sort_by(|a, b| {
        a.0.name()
            .cmp(b.0.name())
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    cells
        .into_iter()
        .map(|(noise, eta, variant)| {
            let rows: Vec<&ResultRecord> = records
                .iter()
                .filter(|r| r.noise == noise && r.eta == eta && r.variant == variant)
                .collect();
            let maes: Vec<f64> = rows.iter().map(|r| r.mae).collect();
            let ctrl: Vec<f64> = rows.iter().map(|r| r.controllability).collect();
            SummaryRow {
                variant,
                noise,
                eta,
                runs: rows.len(),
                median_mae: median(&maes).expect("non-empty cell"),
                median_controllability: median(&ctrl).expect("non-empty cell"),
            }
        })
        .collect()
}

pub fn write_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{r}\n"));
    }
    out
}
