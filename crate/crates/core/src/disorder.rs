//! Reproducible Gaussian disorder.
//!
//! Entry `(i, j)` with `i < j` is drawn from a ChaCha8 stream keyed by the
//! seed and selected by the row index `i`; within a row the draws are taken
//! in increasing `j`. Rows are therefore independent of each other and can be
//! generated in any order or in parallel without changing a single bit.

use std::io::{Read, Write};

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TAPGMAT1";

/// Symmetric `N×N` standard-Gaussian coupling matrix with zero diagonal,
/// stored dense and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderMatrix {
    n: usize,
    seed: u64,
    entries: Vec<f64>,
}

impl DisorderMatrix {
    pub fn sample(n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSize(format!("disorder needs n >= 2, got {n}")));
        }
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                (i + 1..n).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .collect();
        let mut entries = vec![0.0; n * n];
        for (i, row) in upper.iter().enumerate() {
            for (offset, &g) in row.iter().enumerate() {
                let j = i + 1 + offset;
                entries[i * n + j] = g;
                entries[j * n + i] = g;
            }
        }
        Ok(Self { n, seed, entries })
    }

    /// Builds a matrix from explicit row-major entries, checking symmetry and
    /// the zero diagonal.
    pub fn from_entries(n: usize, seed: u64, entries: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSize(format!("disorder needs n >= 2, got {n}")));
        }
        if entries.len() != n * n {
            return Err(Error::Shape { expected: n * n, got: entries.len() });
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::Format(format!("nonzero diagonal entry at {i}")));
            }
            for j in i + 1..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return Err(Error::Format(format!("asymmetric entry at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, seed, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.n, self.n), &self.entries).expect("square storage")
    }

    /// Copy with `g_ij` and `g_ji` both shifted by `eps`.
    pub fn perturb_entry(&self, i: usize, j: usize, eps: f64) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidIndex(format!("diagonal entry ({i}, {i}) is pinned to zero")));
        }
        if i >= self.n || j >= self.n {
            return Err(Error::InvalidIndex(format!("({i}, {j}) outside {0}x{0}", self.n)));
        }
        let mut out = self.clone();
        out.entries[i * self.n + j] += eps;
        out.entries[j * self.n + i] += eps;
        Ok(out)
    }

    /// Binary dump: magic, `n` and `seed` as little-endian u64, then the
    /// row-major entries as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for x in &self.entries {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let seed = u64::from_le_bytes(word);
        let len = n
            .checked_mul(n)
            .ok_or_else(|| Error::Format(format!("size {n} overflows")))?;
        let mut entries = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word)?;
            entries.push(f64::from_le_bytes(word));
        }
        Self::from_entries(n, seed, entries)
    }
}
