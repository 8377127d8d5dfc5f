//! Gauss–Hermite rules for expectations under the standard normal.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Default order. Gauss–Hermite converges slowly for `tanh` integrands whose
/// poles sit close to the real axis; 256 nodes keep `φ`, `χ`, `ψ` stable to
/// about `1e-10` under order doubling for `|β|√x ≤ 2`.
pub const DEFAULT_ORDER: usize = 256;
/// Above this order the recurrence overflows at the outermost nodes.
pub const MAX_ORDER: usize = 512;

/// Nodes and weights with `Σ w_i f(x_i) ≈ E f(Z)`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if !(2..=MAX_ORDER).contains(&order) {
            return Err(Error::InvalidSize(format!("quadrature order must be in 2..={MAX_ORDER}, got {order}")));
        }
        // Golub–Welsch on the Jacobi matrix of the probabilists' polynomials,
        // then a Newton polish on the orthonormal recurrence.
        let mut jacobi = DMatrix::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.total_cmp(b));

        let mut weights = Vec::with_capacity(order);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (p, dp, _) = orthonormal(order, *x);
                if dp != 0.0 {
                    *x -= p / dp;
                }
            }
            let (_, _, norm) = orthonormal(order, *x);
            weights.push(1.0 / norm);
        }
        // Exact symmetry about zero.
        for i in 0..order / 2 {
            let j = order - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            let w = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -x;
            nodes[j] = x;
            weights[i] = w;
            weights[j] = w;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// `E f(U, V)` for independent standard normals, via the tensor rule.
    pub fn expect2(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&u, &wu)| wu * self.nodes.iter().zip(&self.weights).map(|(&v, &wv)| wv * f(u, v)).sum::<f64>())
            .sum()
    }
}

/// `p_n(x)`, `p_n'(x)` and `Σ_{k<n} p_k(x)²` for the orthonormal
/// probabilists' Hermite polynomials.
fn orthonormal(n: usize, x: f64) -> (f64, f64, f64) {
    let mut p_prev = 0.0;
    let mut p = 1.0;
    let mut norm = 0.0;
    for k in 0..n {
        norm += p * p;
        let next = (x * p - (k as f64).sqrt() * p_prev) / ((k + 1) as f64).sqrt();
        p_prev = p;
        p = next;
    }
    // p_n' = √n p_{n−1}.
    (p, (n as f64).sqrt() * p_prev, norm)
}
