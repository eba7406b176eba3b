//! Ground-truth mixtures, synthetic datasets and mixture densities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distributions::{categorical_draw, dirichlet_log_pdf, dirichlet_log_pdf_unchecked, sample_dirichlet};
use crate::error::{Error, Result};
use crate::special::RngStream;

/// Observations are clamped to `[ε, 1 − ε]` before renormalization.
pub const CLAMP_EPS: f64 = 1e-10;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A finite mixture of Dirichlet components (beta components when K = 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    shapes: Vec<Vec<f64>>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, shapes: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture", "no components"));
        }
        if weights.len() != shapes.len() {
            return Err(Error::invalid(
                "mixture",
                format!("{} weights for {} components", weights.len(), shapes.len()),
            ));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid("mixture", format!("weights[{i}] = {w} must be > 0")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid("mixture", format!("weights sum to {total}")));
        }
        let k = shapes[0].len();
        if k < 2 {
            return Err(Error::invalid("mixture", "components need K >= 2 shape parameters"));
        }
        for (i, row) in shapes.iter().enumerate() {
            if row.len() != k {
                return Err(Error::invalid(
                    "mixture",
                    format!("shapes[{i}] has length {}, expected {k}", row.len()),
                ));
            }
            if let Some((j, s)) = row.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s > 0.0)) {
                return Err(Error::invalid("mixture", format!("shapes[{i}][{j}] = {s} must be > 0")));
            }
        }
        Ok(Self { weights, shapes })
    }

    /// Two-dimensional mixture from beta `(u, v)` pairs.
    pub fn beta(weights: Vec<f64>, params: &[(f64, f64)]) -> Result<Self> {
        Self::new(weights, params.iter().map(|&(u, v)| vec![u, v]).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn shapes(&self) -> &[Vec<f64>] {
        &self.shapes
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.shapes[0].len()
    }

    /// The same mixture with components reordered: component `i` of the
    /// result is component `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.components()];
        if perm.len() != seen.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permutation", format!("{perm:?}")));
        }
        Ok(Self {
            weights: perm.iter().map(|&p| self.weights[p]).collect(),
            shapes: perm.iter().map(|&p| self.shapes[p].clone()).collect(),
        })
    }

    /// Log-density of an interior simplex point under the mixture.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let mut terms = Vec::with_capacity(self.components());
        for (w, u) in self.weights.iter().zip(&self.shapes) {
            terms.push(w.ln() + dirichlet_log_pdf(x, u)?);
        }
        Ok(log_sum_exp(&terms))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.shapes)
            .map(|(w, u)| w.ln() + dirichlet_log_pdf_unchecked(x, u))
            .collect();
        log_sum_exp(&terms)
    }
}

/// Convenience wrapper around [`MixtureSpec::log_density`].
pub fn mixture_log_density(spec: &MixtureSpec, x: &[f64]) -> Result<f64> {
    spec.log_density(x)
}

/// Numerically stable `ln Σ exp(t_i)`.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// N observations on the open K-simplex, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
    log_values: Vec<f64>,
    seed: Option<u64>,
    // Latent component of each observation. Diagnostics only.
    latent: Option<Vec<usize>>,
}

impl Dataset {
    /// Build a dataset from raw rows. Each row is clamped to `[ε, 1 − ε]`
    /// and renormalized.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
        if dim < 2 {
            return Err(Error::invalid("dataset", "observations need K >= 2 coordinates"));
        }
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (n, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(
                    "dataset",
                    format!("row {n} has {} coordinates, expected {dim}", row.len()),
                ));
            }
            if row.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(Error::invalid("dataset", format!("row {n} has a negative or non-finite coordinate")));
            }
            values.extend(clamp_to_simplex(row));
        }
        let log_values = values.iter().map(|v| v.ln()).collect();
        Ok(Self {
            dim,
            values,
            log_values,
            seed: None,
            latent: None,
        })
    }

    /// Beta observations `x_n`, stored as `(x_n, 1 − x_n)`.
    pub fn from_beta(xs: &[f64]) -> Result<Self> {
        Self::from_rows(xs.iter().map(|&x| vec![x, 1.0 - x]).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.dim..(n + 1) * self.dim]
    }

    /// `ln x_n`, coordinate-wise.
    pub fn log_row(&self, n: usize) -> &[f64] {
        &self.log_values[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn latent(&self) -> Option<&[usize]> {
        self.latent.as_deref()
    }

    /// Text form: a `# K=<K> N=<N> seed=<seed>` header followed by one
    /// tab-separated observation per line.
    pub fn to_text(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let mut out = format!("# K={} N={} seed={}\n", self.dim, self.len(), seed);
        for row in self.rows() {
            for (k, c) in row.iter().enumerate() {
                if k > 0 {
                    out.push('\t');
                }
                write!(out, "{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse("missing dataset header".into()))?;
        let (k, n, seed) = parse_header(header)?;
        let mut rows = Vec::with_capacity(n);
        for (lineno, line) in lines {
            let row = line
                .split('\t')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if row.len() != k {
                return Err(Error::Parse(format!(
                    "line {}: expected {k} fields, found {}",
                    lineno + 1,
                    row.len()
                )));
            }
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::Parse(format!("header declares N={n}, found {} rows", rows.len())));
        }
        let mut data = Self::from_rows(rows)?;
        data.seed = seed;
        Ok(data)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize, Option<u64>)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse(format!("bad dataset header `{line}`")))?;
    let (mut k, mut n, mut seed) = (None, None, None);
    for field in body.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field `{field}`")))?;
        let bad = |_| Error::Parse(format!("bad header value `{field}`"));
        match key {
            "K" => k = Some(value.parse::<usize>().map_err(bad)?),
            "N" => n = Some(value.parse::<usize>().map_err(bad)?),
            "seed" if value == "none" => {}
            "seed" => seed = Some(value.parse::<u64>().map_err(bad)?),
            _ => return Err(Error::Parse(format!("unknown header field `{key}`"))),
        }
    }
    match (k, n) {
        (Some(k), Some(n)) => Ok((k, n, seed)),
        _ => Err(Error::Parse("header must declare K and N".into())),
    }
}

fn clamp_to_simplex(mut row: Vec<f64>) -> Vec<f64> {
    let interior = row.iter().all(|c| (CLAMP_EPS..=1.0 - CLAMP_EPS).contains(c));
    if interior && (row.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_SUM_TOL {
        return row;
    }
    for _ in 0..2 {
        row.iter_mut().for_each(|c| *c = c.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS));
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|c| *c /= total);
    }
    row
}

/// Draw `n` observations from `spec`. The latent component of every
/// observation is retained on the dataset for diagnostics.
pub fn generate_dataset(spec: &MixtureSpec, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for _ in 0..n {
        let i = categorical_draw(spec.weights(), rng);
        rows.push(sample_dirichlet(&spec.shapes()[i], rng)?);
        latent.push(i);
    }
    let mut data = Dataset::from_rows(rows)?;
    data.seed = Some(rng.seed());
    data.latent = Some(latent);
    Ok(data)
}
