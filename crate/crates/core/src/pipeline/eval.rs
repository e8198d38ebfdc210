//! Recall@K retrieval metrics.

use std::fmt;
use std::str::FromStr;

use super::data::Dataset;
use super::model::{Branch, Model};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// A cutoff: absolute `K`, or a percentage of the gallery size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Recall {
    Top(usize),
    Percent(f64),
}

impl Recall {
    /// Effective `K` for a gallery of `n` references (`⌈n·p/100⌉` for
    /// percentages).
    pub fn k(self, n: usize) -> usize {
        match self {
            Recall::Top(k) => k,
            Recall::Percent(p) => (n as f64 * p / 100.0).ceil() as usize,
        }
    }
}

impl fmt::Display for Recall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recall::Top(k) => write!(f, "R@{k}"),
            Recall::Percent(p) => write!(f, "R@{p}%"),
        }
    }
}

impl FromStr for Recall {
    type Err = Error;

    /// `5` or `1%`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("bad recall cutoff '{s}'"));
        match s.strip_suffix('%') {
            Some(p) => {
                let p: f64 = p.parse().map_err(|_| bad())?;
                if p > 0.0 && p <= 100.0 { Ok(Recall::Percent(p)) } else { Err(bad()) }
            }
            None => match s.parse::<usize>() {
                Ok(k) if k > 0 => Ok(Recall::Top(k)),
                _ => Err(bad()),
            },
        }
    }
}

/// 0-based rank of each query's true reference (row `i` of `refs`) by dot
/// product, ties going to the lower reference index.
pub fn true_ranks<T: Real>(queries: &Tensor<T>, refs: &Tensor<T>) -> Result<Vec<usize>> {
    let (qs, rs) = (queries.shape(), refs.shape());
    if qs.len() != 2 || rs.len() != 2 || qs != rs {
        return Err(Error::shape("recall", qs, rs));
    }
    let (n, d) = (qs[0], qs[1]);
    let mut sims = vec![T::ZERO; n * n];
    T::gemm(n, d, n, queries.data(), false, refs.data(), true, &mut sims, false);
    Ok((0..n)
        .map(|i| {
            let row = &sims[i * n..(i + 1) * n];
            let own = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect())
}

/// Percentage of queries whose true reference ranks within the cutoff.
pub fn recall_at_k<T: Real>(queries: &Tensor<T>, refs: &Tensor<T>, cutoff: Recall) -> Result<f64> {
    let ranks = true_ranks(queries, refs)?;
    Ok(recall_from_ranks(&ranks, cutoff))
}

pub fn recall_from_ranks(ranks: &[usize], cutoff: Recall) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let k = cutoff.k(ranks.len());
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Recall values for a set of cutoffs on one query set.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable {
    pub queries: usize,
    pub rows: Vec<(Recall, f64)>,
}

impl RecallTable {
    pub fn get(&self, cutoff: Recall) -> Option<f64> {
        self.rows.iter().find(|(c, _)| *c == cutoff).map(|&(_, v)| v)
    }
}

impl fmt::Display for RecallTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<String> = self.rows.iter().map(|(c, _)| format!("{:>8}", c.to_string())).collect();
        let vals: Vec<String> = self.rows.iter().map(|(_, v)| format!("{v:>8.2}")).collect();
        writeln!(f, "queries {}", self.queries)?;
        writeln!(f, "{}", head.join(""))?;
        write!(f, "{}", vals.join(""))
    }
}

pub const DEFAULT_CUTOFFS: [Recall; 4] = [Recall::Top(1), Recall::Top(5), Recall::Top(10), Recall::Percent(1.0)];

/// Street-fused queries against aerial references of the same dataset.
/// References are embedded once and shared by every cutoff.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, cutoffs: &[Recall]) -> Result<RecallTable> {
    let refs = model.embed(&data.inputs, Branch::Aerial)?;
    let queries = model.embed(&data.inputs, Branch::StreetFused)?;
    let ranks = true_ranks(&queries, &refs)?;
    Ok(RecallTable {
        queries: ranks.len(),
        rows: cutoffs.iter().map(|&c| (c, recall_from_ranks(&ranks, c))).collect(),
    })
}
