//! Synthetic four-class 2-D data and label-noise injection.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub point: [f64; 2],
    pub clean_class: usize,
    pub noisy_class: usize,
    pub index: usize,
}

/// Isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayout {
    pub centroids: Vec<[f64; 2]>,
    pub std: f64,
}

impl Default for ToyLayout {
    /// Blobs at (±1, ±1) with std 0.15, classes ordered
    /// (−1,−1), (1,−1), (−1,1), (1,1).
    fn default() -> Self {
        Self {
            centroids: vec![[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]],
            std: 0.15,
        }
    }
}

impl ToyLayout {
    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    /// `n_per_class` points per class, class-major order, indices `0..`.
    pub fn generate(&self, n_per_class: usize, seed: u64) -> Result<Vec<LabeledSample>> {
        if n_per_class == 0 {
            return Err(invalid("need at least one sample per class"));
        }
        if self.centroids.is_empty() || !(self.std >= 0.0) {
            return Err(invalid("layout needs centroids and a non-negative std"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_per_class * self.centroids.len());
        for (class, c) in self.centroids.iter().enumerate() {
            for _ in 0..n_per_class {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                out.push(LabeledSample {
                    point: [c[0] + self.std * dx, c[1] + self.std * dy],
                    clean_class: class,
                    noisy_class: class,
                    index: out.len(),
                });
            }
        }
        Ok(out)
    }
}

/// Clean four-class toy data with the default layout.
pub fn make_toy_dataset(n_per_class: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    ToyLayout::default().generate(n_per_class, seed)
}

/// Per-coordinate standard deviation of the points (population form).
pub fn empirical_std(samples: &[LabeledSample]) -> [f64; 2] {
    let n = samples.len().max(1) as f64;
    let mut mean = [0.0; 2];
    for s in samples {
        mean[0] += s.point[0] / n;
        mean[1] += s.point[1] / n;
    }
    let mut var = [0.0; 2];
    for s in samples {
        var[0] += (s.point[0] - mean[0]).powi(2) / n;
        var[1] += (s.point[1] - mean[1]).powi(2) / n;
    }
    [var[0].sqrt(), var[1].sqrt()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Symmetric => "sym",
            NoiseKind::Asymmetric => "asym",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sym" | "symmetric" => Ok(NoiseKind::Symmetric),
            "asym" | "asymmetric" => Ok(NoiseKind::Asymmetric),
            other => Err(invalid(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Involution on class ids built from disjoint pairs; unpaired classes map to
/// themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMap {
    partner: Vec<usize>,
}

impl PairMap {
    pub fn from_pairs(pairs: &[(usize, usize)], num_classes: usize) -> Result<Self> {
        let mut partner: Vec<usize> = (0..num_classes).collect();
        let mut used = vec![false; num_classes];
        for &(a, b) in pairs {
            if a >= num_classes || b >= num_classes {
                return Err(invalid(format!("pair ({a}, {b}) outside {num_classes} classes")));
            }
            if a == b || used[a] || used[b] {
                return Err(invalid(format!("pair ({a}, {b}) is not part of an involution")));
            }
            used[a] = true;
            used[b] = true;
            partner[a] = b;
            partner[b] = a;
        }
        Ok(Self { partner })
    }

    /// (0↔1), (2↔3).
    pub fn toy_default() -> Self {
        Self::from_pairs(&[(0, 1), (2, 3)], 4).expect("valid default pairs")
    }

    pub fn partner(&self, class: usize) -> usize {
        self.partner[class]
    }

    pub fn num_classes(&self) -> usize {
        self.partner.len()
    }

    /// `a-b` pairs separated by commas, e.g. `0-1,2-3`.
    pub fn parse(s: &str, num_classes: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (a, b) = item
                .split_once('-')
                .ok_or_else(|| invalid(format!("bad class pair `{item}`")))?;
            let a = a.trim().parse().map_err(|_| invalid(format!("bad class pair `{item}`")))?;
            let b = b.trim().parse().map_err(|_| invalid(format!("bad class pair `{item}`")))?;
            pairs.push((a, b));
        }
        Self::from_pairs(&pairs, num_classes)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid("noise rate must lie in [0, 1]"));
    }
    Ok(())
}

/// Each label flips with probability `eta` to a uniformly chosen other class.
pub fn inject_symmetric_noise(
    samples: &[LabeledSample],
    eta: f64,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    check_eta(eta)?;
    if num_classes < 2 {
        return Err(invalid("symmetric noise needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            if s.clean_class >= num_classes {
                return Err(invalid(format!("class {} outside {num_classes}", s.clean_class)));
            }
            let flip = rng.gen::<f64>() < eta;
            let other = rng.gen_range(0..num_classes - 1);
            let noisy_class = if flip {
                if other >= s.clean_class {
                    other + 1
                } else {
                    other
                }
            } else {
                s.clean_class
            };
            Ok(LabeledSample { noisy_class, ..*s })
        })
        .collect()
}

/// Each label flips with probability `eta` to its partner under `pairs`.
pub fn inject_asymmetric_noise(
    samples: &[LabeledSample],
    eta: f64,
    pairs: &PairMap,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    check_eta(eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            if s.clean_class >= pairs.num_classes() {
                return Err(invalid(format!("class {} outside the pair map", s.clean_class)));
            }
            let flip = rng.gen::<f64>() < eta;
            let noisy_class = if flip {
                pairs.partner(s.clean_class)
            } else {
                s.clean_class
            };
            Ok(LabeledSample { noisy_class, ..*s })
        })
        .collect()
}

/// Label-noise description.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eta: f64,
    pub pair_map: Option<PairMap>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn apply(&self, samples: &[LabeledSample], num_classes: usize) -> Result<Vec<LabeledSample>> {
        match self.kind {
            NoiseKind::Symmetric => inject_symmetric_noise(samples, self.eta, num_classes, self.seed),
            NoiseKind::Asymmetric => {
                let default;
                let pairs = match &self.pair_map {
                    Some(p) => p,
                    None => {
                        default = PairMap::toy_default();
                        &default
                    }
                };
                inject_asymmetric_noise(samples, self.eta, pairs, self.seed)
            }
        }
    }
}

/// Unit vector with a one at `class_id`.
pub fn one_hot(class_id: usize, num_classes: usize) -> Result<Vec<f64>> {
    if class_id >= num_classes {
        return Err(invalid(format!("class {class_id} outside {num_classes}")));
    }
    let mut v = vec![0.0; num_classes];
    v[class_id] = 1.0;
    Ok(v)
}

pub const DATASET_HEADER: &str = "x1,x2,clean,noisy";

/// Header `x1,x2,clean,noisy`, then one row per sample ordered by index.
pub fn write_dataset<W: Write>(mut w: W, samples: &[LabeledSample]) -> Result<()> {
    let mut sorted: Vec<&LabeledSample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.index);
    writeln!(w, "{DATASET_HEADER}")?;
    for s in sorted {
        writeln!(w, "{:?},{:?},{},{}", s.point[0], s.point[1], s.clean_class, s.noisy_class)?;
    }
    Ok(())
}

/// Inverse of [`write_dataset`]; indices are assigned by row order.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<LabeledSample>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))??;
    if header.trim() != DATASET_HEADER {
        return Err(Error::Parse(format!("unexpected dataset header `{header}`")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::Parse(format!("bad dataset row `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}`")));
        let class = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad class `{s}`")));
        out.push(LabeledSample {
            point: [num(f[0])?, num(f[1])?],
            clean_class: class(f[2])?,
            noisy_class: class(f[3])?,
            index: out.len(),
        });
    }
    Ok(out)
}
