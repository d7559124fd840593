use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Shared code table with its EMA state.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Array2<f64>,
    pub ema_count: Array1<f64>,
    pub ema_sum: Array2<f64>,
    /// Hits per code since the last reset check.
    pub usage: Vec<u64>,
    batches_since_check: usize,
}

/// `n x j` grid of code indices for one person.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMap {
    n: usize,
    j: usize,
    indices: Vec<usize>,
}

impl TokenMap {
    pub fn new(n: usize, j: usize, indices: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if indices.len() != n * j {
            return Err(Error::DimensionMismatch(format!("{} indices for a {n}x{j} token map", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::IndexOutOfRange { index: bad, size: codebook_size });
        }
        Ok(Self { n, j, indices })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.j)
    }

    pub fn get(&self, t: usize, s: usize) -> usize {
        self.indices[t * self.j + s]
    }

    /// Row-major (temporal, then spatial) indices.
    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// Outcome of an EMA step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetReport {
    pub reset: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSettings {
    pub decay: f64,
    /// Batches per usage check.
    pub reset_window: usize,
    /// Codes with fewer hits over a window are re-seeded.
    pub reset_min_hits: u64,
}

const COUNT_FLOOR: f64 = 1e-5;

impl Codebook {
    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(invalid("empty codebook"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        let k = entries.nrows();
        Ok(Self {
            ema_count: Array1::ones(k),
            ema_sum: entries.clone(),
            usage: vec![0; k],
            entries,
            batches_since_check: 0,
        })
    }

    /// Seed every entry from randomly chosen rows of `latents`, jittered so
    /// duplicates do not tie.
    pub fn seeded_from<R: Rng + ?Sized>(size: usize, latents: ArrayView2<f64>, rng: &mut R) -> Result<Self> {
        if latents.nrows() == 0 {
            return Err(invalid("cannot seed a codebook from zero latents"));
        }
        let d = latents.ncols();
        let scale = latents.iter().map(|v| v * v).sum::<f64>().sqrt() / ((latents.len() as f64).sqrt() + 1e-12);
        let mut entries = Array2::zeros((size, d));
        for k in 0..size {
            let row = latents.row(rng.random_range(0..latents.nrows()));
            for c in 0..d {
                entries[[k, c]] = row[c] + 0.01 * scale.max(1e-3) * rng.random_range(-1.0..1.0);
            }
        }
        Self::from_entries(entries)
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Nearest entry for one vector; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, row) in self.entries.outer_iter().enumerate() {
            let d: f64 = row.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Quantize an `n x j x d'` grid. Returns tokens, the snapped grid and
    /// `beta * mean((latent - quantized)^2)`.
    pub fn quantize(&self, latent: ArrayView3<f64>, beta: f64) -> Result<(TokenMap, Array3<f64>, f64)> {
        let (n, j, d) = latent.dim();
        if d != self.dim() {
            return Err(Error::DimensionMismatch(format!("latent width {d} vs codebook width {}", self.dim())));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        let mut indices = Vec::with_capacity(n * j);
        let mut quantized = Array3::zeros((n, j, d));
        let mut sq = 0.0;
        for t in 0..n {
            for s in 0..j {
                let cell: Vec<f64> = latent.slice(ndarray::s![t, s, ..]).to_vec();
                let k = self.nearest(&cell);
                indices.push(k);
                for c in 0..d {
                    let q = self.entries[[k, c]];
                    quantized[[t, s, c]] = q;
                    sq += (cell[c] - q).powi(2);
                }
            }
        }
        let commitment = beta * sq / (n * j * d).max(1) as f64;
        Ok((TokenMap { n, j, indices }, quantized, commitment))
    }

    /// Rows of `latents` (`M x d'`) snapped to their nearest entries.
    pub fn assign(&self, latents: ArrayView2<f64>) -> Vec<usize> {
        latents.outer_iter().map(|row| self.nearest(row.as_slice().unwrap_or(&row.to_vec()))).collect()
    }

    pub fn dequantize(&self, tokens: &TokenMap) -> Result<Array3<f64>> {
        let (n, j) = tokens.shape();
        let d = self.dim();
        let mut out = Array3::zeros((n, j, d));
        for t in 0..n {
            for s in 0..j {
                let k = tokens.get(t, s);
                if k >= self.size() {
                    return Err(Error::IndexOutOfRange { index: k, size: self.size() });
                }
                out.slice_mut(ndarray::s![t, s, ..]).assign(&self.entries.row(k));
            }
        }
        Ok(out)
    }

    /// One EMA step over a batch of latents and their assignments, followed
    /// by a dead-code check when a reset window completes.
    pub fn ema_update<R: Rng + ?Sized>(
        &mut self,
        latents: ArrayView2<f64>,
        assignments: &[usize],
        settings: &EmaSettings,
        rng: &mut R,
    ) -> Result<ResetReport> {
        if latents.nrows() != assignments.len() {
            return Err(Error::DimensionMismatch("one assignment per latent row".into()));
        }
        if latents.ncols() != self.dim() {
            return Err(Error::DimensionMismatch("latent width differs from codebook".into()));
        }
        let k_total = self.size();
        let mut hits = Array1::<f64>::zeros(k_total);
        let mut sums = Array2::<f64>::zeros((k_total, self.dim()));
        for (row, &k) in latents.outer_iter().zip(assignments) {
            if k >= k_total {
                return Err(Error::IndexOutOfRange { index: k, size: k_total });
            }
            hits[k] += 1.0;
            let mut s = sums.row_mut(k);
            s += &row;
            self.usage[k] += 1;
        }
        let g = settings.decay;
        self.ema_count = &self.ema_count * g + &hits * (1.0 - g);
        self.ema_sum = &self.ema_sum * g + &sums * (1.0 - g);
        for k in 0..k_total {
            let c = self.ema_count[k].max(COUNT_FLOOR);
            let mut e = self.entries.row_mut(k);
            e.assign(&(&self.ema_sum.row(k) / c));
        }
        let mut report = ResetReport::default();
        self.batches_since_check += 1;
        if settings.reset_window > 0 && self.batches_since_check >= settings.reset_window {
            for k in 0..k_total {
                if self.usage[k] < settings.reset_min_hits && latents.nrows() > 0 {
                    let row = latents.row(rng.random_range(0..latents.nrows()));
                    self.entries.row_mut(k).assign(&row);
                    self.ema_sum.row_mut(k).assign(&row);
                    self.ema_count[k] = 1.0;
                    report.reset.push(k);
                }
            }
            self.usage.iter_mut().for_each(|u| *u = 0);
            self.batches_since_check = 0;
        }
        Ok(report)
    }

    /// Fraction of codes hit at least once by `tokens`.
    pub fn utilization<'a>(&self, tokens: impl IntoIterator<Item = &'a TokenMap>) -> f64 {
        let mut seen = vec![false; self.size()];
        for t in tokens {
            for &k in t.as_slice() {
                seen[k] = true;
            }
        }
        seen.iter().filter(|&&s| s).count() as f64 / self.size() as f64
    }
}
