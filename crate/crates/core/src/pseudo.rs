//! Per-sample pseudo conditions and their temporal-ensembling updates.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, shape, Error, Result};

/// One pseudo-condition vector per dataset index, all initialized to zero.
#[derive(Debug)]
pub struct PseudoTable {
    dim: usize,
    values: Vec<f64>,
    update_count: Vec<u64>,
    reads: AtomicU64,
}

impl Clone for PseudoTable {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            values: self.values.clone(),
            update_count: self.update_count.clone(),
            reads: AtomicU64::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for PseudoTable {
    /// Compares contents; the read counter is bookkeeping only.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.values == other.values && self.update_count == other.update_count
    }
}

impl PseudoTable {
    pub fn new(dataset_size: usize, cond_dim: usize) -> Result<Self> {
        if dataset_size == 0 || cond_dim == 0 {
            return Err(invalid("pseudo table needs a positive size and width"));
        }
        Ok(Self {
            dim: cond_dim,
            values: vec![0.0; dataset_size * cond_dim],
            update_count: vec![0; dataset_size],
            reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.update_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.update_count.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, idx: usize) -> Result<&[f64]> {
        if idx >= self.len() {
            return Err(invalid(format!("sample index {idx} not in pseudo table")));
        }
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(&self.values[idx * self.dim..(idx + 1) * self.dim])
    }

    pub fn update_count(&self, idx: usize) -> u64 {
        self.update_count[idx]
    }

    /// Number of entry reads since construction.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Mean entry over the entries whose largest coordinate is `c`, for each
    /// coordinate `c`.
    ///
    /// Entries without a unique largest coordinate are skipped; a coordinate
    /// no entry points to keeps its one-hot vector. Does not count as reads.
    pub fn class_prototypes(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut sums = vec![vec![0.0; d]; d];
        let mut counts = vec![0usize; d];
        for entry in self.values.chunks_exact(d) {
            let Some(top) = unique_argmax(entry) else { continue };
            counts[top] += 1;
            for (s, v) in sums[top].iter_mut().zip(entry) {
                *s += v;
            }
        }
        sums.into_iter()
            .zip(counts)
            .enumerate()
            .map(|(c, (sum, n))| {
                if n == 0 {
                    (0..d).map(|j| if j == c { 1.0 } else { 0.0 }).collect()
                } else {
                    sum.into_iter().map(|v| v / n as f64).collect()
                }
            })
            .collect()
    }

    /// `ŷ ← α·ŷ + (1 − α)·ŷ_φ`.
    pub fn ensemble_update(&mut self, idx: usize, estimate: &[f64], alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid("momentum must lie in [0, 1]"));
        }
        if idx >= self.len() {
            return Err(invalid(format!("sample index {idx} not in pseudo table")));
        }
        if estimate.len() != self.dim {
            return Err(shape("estimate width differs from the table"));
        }
        if estimate.iter().any(|v| !v.is_finite()) {
            return Err(invalid("pseudo-condition estimate is not finite"));
        }
        let entry = &mut self.values[idx * self.dim..(idx + 1) * self.dim];
        for (y, e) in entry.iter_mut().zip(estimate) {
            *y = if alpha == 1.0 {
                *y
            } else if alpha == 0.0 {
                *e
            } else {
                alpha * *y + (1.0 - alpha) * e
            };
        }
        self.update_count[idx] += 1;
        Ok(())
    }

    /// Text snapshot: header `pseudo <n> <dim>`, then `index v_1 … v_dim update_count`
    /// per line with shortest round-trip float formatting.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "pseudo {} {}", self.len(), self.dim)?;
        for idx in 0..self.len() {
            write!(w, "{idx}")?;
            for v in &self.values[idx * self.dim..(idx + 1) * self.dim] {
                write!(w, " {v:?}")?;
            }
            writeln!(w, " {}", self.update_count[idx])?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty pseudo snapshot".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (n, dim) = match parts.as_slice() {
            ["pseudo", n, d] => (parse::<usize>(n)?, parse::<usize>(d)?),
            _ => return Err(Error::Parse(format!("bad pseudo header `{header}`"))),
        };
        let mut table = Self::new(n, dim)?;
        for expected in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("pseudo snapshot truncated".into()))??;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != dim + 2 || parse::<usize>(fields[0])? != expected {
                return Err(Error::Parse(format!("bad pseudo row `{line}`")));
            }
            for (j, f) in fields[1..=dim].iter().enumerate() {
                table.values[expected * dim + j] = parse(f)?;
            }
            table.update_count[expected] = parse(fields[dim + 1])?;
        }
        Ok(table)
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("cannot parse `{s}`")))
}

/// Fixed iteration budget for the pseudo-condition phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStopPolicy {
    pub budget_iters: usize,
}

impl EarlyStopPolicy {
    /// A zero `total_iters` (no training) accepts any positive budget.
    pub fn new(budget_iters: usize, total_iters: usize) -> Result<Self> {
        if budget_iters == 0 || (total_iters > 0 && budget_iters > total_iters) {
            return Err(invalid(format!(
                "early-stop budget {budget_iters} must lie in [1, {total_iters}]"
            )));
        }
        Ok(Self { budget_iters })
    }

    pub fn should_stop(&self, iter: usize) -> bool {
        iter >= self.budget_iters
    }
}

fn unique_argmax(v: &[f64]) -> Option<usize> {
    let mut best = 0;
    let mut tied = false;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
            tied = false;
        } else if x == v[best] {
            tied = true;
        }
    }
    (!tied).then_some(best)
}
