//! Tabular categorical policy: one logit row per context key.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub type RowId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub rows: Vec<Vec<f64>>,
}

impl PolicyParams {
    pub fn zeros(widths: impl IntoIterator<Item = usize>) -> Self {
        Self {
            rows: widths.into_iter().map(|w| vec![0.0; w]).collect(),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.rows.iter().map(Vec::len))
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, row: RowId) -> &[f64] {
        &self.rows[row as usize]
    }

    pub fn log_probs(&self, row: RowId) -> Vec<f64> {
        log_softmax(self.row(row))
    }

    pub fn probs(&self, row: RowId) -> Vec<f64> {
        self.log_probs(row).into_iter().map(f64::exp).collect()
    }

    pub fn logp(&self, row: RowId, token: u32) -> f64 {
        self.log_probs(row)[token as usize]
    }

    pub fn entropy(&self, row: RowId) -> f64 {
        self.log_probs(row).iter().map(|lp| -lp.exp() * lp).sum()
    }

    /// Draws a token. `temperature == 0` is greedy (lowest index on ties).
    /// The returned log-probability is always under the untempered row.
    pub fn sample<R: Rng + ?Sized>(&self, row: RowId, temperature: f64, rng: &mut R) -> (u32, f64) {
        let lp = self.log_probs(row);
        let token = if temperature <= 0.0 {
            let mut best = 0;
            for (i, v) in lp.iter().enumerate() {
                if *v > lp[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = self.row(row).iter().map(|z| z / temperature).collect();
            let p: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        (token as u32, lp[token])
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|v| v.is_finite())
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self).map_err(std::io::Error::other)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        serde_json::from_reader(f).map_err(std::io::Error::other)
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}
