//! First derivatives `𝔡_yz m_j^{(k)} = ∂m_j^{(k)} / ∂g_yz` of the iterates with
//! respect to the couplings, propagated forward through the iteration by the
//! chain rule, plus the error functionals
//!
//! ```text
//! Δ^{(k)}_{x;y,z} = (β/√N) Σ_l g_xl 𝔡_yz m_l^{(k)} − 𝔡_yz On_x^{(k)}
//! ℰ^{(k)}_x       = (β/√N) Σ_{l≠x} 𝔡_xl m_l^{(k)} − On_x^{(k)}
//! ```
//!
//! Each coupling pair `{y, z}` is an independent tangent direction, so a
//! tensor may carry any subset of pairs. The full set (`N(N−1)/2` columns)
//! is required for the re-centering Onsager term; the error-functional
//! studies only need the pairs incident to a few sites.
//!
//! The classical Onsager derivative
//! `𝔡On^{(k)}_j = β²(1 − q^{(k)}) 𝔡m^{(k−1)}_j − (2β²/N)(Σ_i m^{(k)}_i 𝔡m^{(k)}_i) m^{(k−1)}_j`
//! is exact for the classical choice. For the re-centering choice the same
//! expression is used as a first-order closure; the exact derivative would
//! need second-order disorder derivatives. [`finite_difference_tensor`]
//! provides the exact reference for both choices at small `N`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis, Zip};

use crate::disorder::DisorderMatrix;
use crate::dynamics::{run_classical, IterationState, ModelParams, OnsagerChoice};
use crate::summation::{pairwise_dot, pairwise_sum};
use crate::{Error, Result};

const ABSENT: u32 = u32::MAX;

/// An ordered list of unordered coupling pairs `{y, z}` (stored `y < z`)
/// with constant-time lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    n: usize,
    pairs: Vec<(usize, usize)>,
    lookup: Vec<u32>,
}

impl PairSet {
    /// All `N(N−1)/2` pairs in lexicographic order.
    pub fn full(n: usize) -> Self {
        let pairs = (0..n).flat_map(|y| (y + 1..n).map(move |z| (y, z))).collect();
        Self::build(n, pairs)
    }

    /// Every pair with at least one endpoint in `sites`.
    pub fn incident_to(n: usize, sites: &[usize]) -> Result<Self> {
        if let Some(&s) = sites.iter().find(|&&s| s >= n) {
            return Err(Error::InvalidIndex(format!("site {s} outside 0..{n}")));
        }
        let pairs = (0..n)
            .flat_map(|y| (y + 1..n).map(move |z| (y, z)))
            .filter(|(y, z)| sites.contains(y) || sites.contains(z))
            .collect();
        Ok(Self::build(n, pairs))
    }

    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut normalized = Vec::with_capacity(pairs.len());
        for &(y, z) in pairs {
            if y == z || y >= n || z >= n {
                return Err(Error::InvalidIndex(format!("pair ({y}, {z}) invalid for n = {n}")));
            }
            let p = (y.min(z), y.max(z));
            if !normalized.contains(&p) {
                normalized.push(p);
            }
        }
        Ok(Self::build(n, normalized))
    }

    fn build(n: usize, pairs: Vec<(usize, usize)>) -> Self {
        let mut lookup = vec![ABSENT; n * n];
        for (p, &(y, z)) in pairs.iter().enumerate() {
            lookup[y * n + z] = p as u32;
            lookup[z * n + y] = p as u32;
        }
        Self { n, pairs, lookup }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Column index of `{y, z}`; symmetric in its arguments.
    #[inline]
    pub fn index(&self, y: usize, z: usize) -> Option<usize> {
        if y >= self.n || z >= self.n {
            return None;
        }
        match self.lookup[y * self.n + z] {
            ABSENT => None,
            p => Some(p as usize),
        }
    }

    /// True when all `N − 1` pairs touching site `x` are present.
    pub fn covers_site(&self, x: usize) -> bool {
        x < self.n && (0..self.n).filter(|&l| l != x).all(|l| self.index(x, l).is_some())
    }
}

/// `𝔡_yz m_j^{(k)}` for `j < N` and every pair `{y, z}` of a [`PairSet`].
/// Stored pair-major: row `p` is the tangent vector along pair `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeTensor {
    k: usize,
    pairs: Arc<PairSet>,
    data: Array2<f64>,
}

impl DerivativeTensor {
    pub fn zeros(k: usize, pairs: Arc<PairSet>) -> Self {
        let data = Array2::zeros((pairs.len(), pairs.n()));
        Self { k, pairs, data }
    }

    pub fn from_data(k: usize, pairs: Arc<PairSet>, data: Array2<f64>) -> Result<Self> {
        if data.dim() != (pairs.len(), pairs.n()) {
            return Err(Error::Shape { expected: pairs.len() * pairs.n(), got: data.len() });
        }
        Ok(Self { k, pairs, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.pairs.n()
    }

    pub fn pairs(&self) -> &Arc<PairSet> {
        &self.pairs
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// `𝔡_yz m_j`, or `None` when the pair is not tracked.
    pub fn get(&self, j: usize, y: usize, z: usize) -> Option<f64> {
        let p = self.pairs.index(y, z)?;
        self.data.get((p, j)).copied()
    }

    pub fn column(&self, y: usize, z: usize) -> Option<ArrayView1<'_, f64>> {
        self.pairs.index(y, z).map(|p| self.data.row(p))
    }

    /// `Σ_{l≠x} 𝔡_xl m_l`, the raw sum behind both the re-centering Onsager
    /// term and `ℰ`. `None` if some pair touching `x` is missing.
    pub fn incident_sum(&self, x: usize) -> Option<f64> {
        let n = self.n();
        let terms: Option<Vec<f64>> = (0..n)
            .filter(|&l| l != x)
            .map(|l| self.pairs.index(x, l).map(|p| self.data[(p, l)]))
            .collect();
        terms.map(|t| pairwise_sum(&t))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::Shape { expected: self.data.len(), got: other.data.len() });
        }
        Ok(Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |acc, a, b| acc.max((a - b).abs())))
    }
}

/// The current tensor `D^{(k)}` and its predecessor `D^{(k−1)}`, which the
/// classical Onsager derivative references.
#[derive(Debug, Clone)]
pub struct TangentWindow {
    current: DerivativeTensor,
    previous: DerivativeTensor,
}

impl TangentWindow {
    /// Window at `k = 1`: `m^{(1)}` (and `m^{(0)}`) do not depend on the
    /// disorder, so both tensors vanish.
    pub fn new(pairs: Arc<PairSet>) -> Self {
        Self {
            current: DerivativeTensor::zeros(1, pairs.clone()),
            previous: DerivativeTensor::zeros(0, pairs),
        }
    }

    pub fn k(&self) -> usize {
        self.current.k
    }

    pub fn current(&self) -> &DerivativeTensor {
        &self.current
    }

    pub fn previous(&self) -> &DerivativeTensor {
        &self.previous
    }

    /// `𝔡_yz On^{(k)}_j` for the window's iterate, as a pair-major array.
    pub fn onsager_derivative(&self, state: &IterationState, params: ModelParams) -> Result<Array2<f64>> {
        onsager_derivative(&self.current, &self.previous, state, params)
    }

    /// Moves the window to `k + 1`; `state` must already hold `m^{(k+1)}`.
    pub fn advance(&mut self, state: &IterationState, g: &DisorderMatrix, params: ModelParams) -> Result<()> {
        let next = propagate_derivatives(self, state, g, params)?;
        self.previous = std::mem::replace(&mut self.current, next);
        Ok(())
    }
}

fn check_state(d: &DerivativeTensor, state: &IterationState, min_k: usize) -> Result<()> {
    if state.k() < min_k {
        return Err(Error::Staleness { tensor: d.k, expected: state.k() });
    }
    if state.n() != d.n() {
        return Err(Error::Shape { expected: d.n(), got: state.n() });
    }
    Ok(())
}

/// `𝔡_yz On^{(k)}_j` with the classical formula, `k = current.k()`.
pub fn onsager_derivative(
    current: &DerivativeTensor,
    previous: &DerivativeTensor,
    state: &IterationState,
    params: ModelParams,
) -> Result<Array2<f64>> {
    let k = current.k;
    if previous.k + 1 != k {
        return Err(Error::Staleness { tensor: previous.k, expected: k.saturating_sub(1) });
    }
    check_state(current, state, k)?;
    let n = current.n();
    let beta2 = params.beta * params.beta;
    let m_k = state.m(k).expect("checked above");
    let zeros = vec![0.0; n];
    let m_km1 = state.m(k - 1).unwrap_or(&zeros);
    let q_k = state.q(k, k).expect("checked above");
    let a = beta2 * (1.0 - q_k) * state.onsager_sign();
    let b = 2.0 * beta2 / n as f64 * state.onsager_sign();

    let mut out = Array2::zeros(current.data.dim());
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(current.data.axis_iter(Axis(0)))
        .and(previous.data.axis_iter(Axis(0)))
        .par_for_each(|mut row, cur, prev| {
            let s: f64 = cur.iter().zip(m_k).map(|(d, m)| d * m).sum();
            for ((o, &dp), &mp) in row.iter_mut().zip(prev).zip(m_km1) {
                *o = a * dp - b * s * mp;
            }
        });
    Ok(out)
}

/// Chain rule through one step: from `D^{(k)}` (and `D^{(k−1)}`) to
/// `D^{(k+1)}`, with `state` holding `m^{(k+1)}`.
pub fn propagate_derivatives(
    window: &TangentWindow,
    state: &IterationState,
    g: &DisorderMatrix,
    params: ModelParams,
) -> Result<DerivativeTensor> {
    let current = &window.current;
    let k = current.k;
    if state.k() != k + 1 {
        return Err(Error::Staleness { tensor: k, expected: state.k().saturating_sub(1) });
    }
    if g.n() != current.n() {
        return Err(Error::Shape { expected: current.n(), got: g.n() });
    }
    let n = current.n();
    let scale = params.beta / (n as f64).sqrt();
    let m_next = state.m(k + 1).unwrap();
    let m_k = state.m(k).unwrap();
    let d_on = window.onsager_derivative(state, params)?;
    // G is symmetric, so (D G)[p, j] = Σ_l D[p, l] g_lj.
    let contraction = current.data.dot(&g.view());

    let mut data = Array2::zeros(current.data.dim());
    let pairs = current.pairs.pairs();
    Zip::indexed(data.axis_iter_mut(Axis(0)))
        .and(contraction.axis_iter(Axis(0)))
        .and(d_on.axis_iter(Axis(0)))
        .par_for_each(|p, mut row, c, don| {
            let (y, z) = pairs[p];
            for (j, out) in row.iter_mut().enumerate() {
                let mut dy = scale * c[j] - don[j];
                if j == y {
                    dy += scale * m_k[z];
                } else if j == z {
                    dy += scale * m_k[y];
                }
                *out = (1.0 - m_next[j] * m_next[j]) * dy;
            }
        });
    Ok(DerivativeTensor { k: k + 1, pairs: current.pairs.clone(), data })
}

/// `ℰ^{(k)}_x` at the given sites (each must have all incident pairs).
/// The Onsager term is the one the state's choice defines for iterate `k`.
pub fn compute_epsilon_at(
    d: &DerivativeTensor,
    state: &IterationState,
    params: ModelParams,
    sites: &[usize],
) -> Result<Vec<f64>> {
    check_state(d, state, d.k)?;
    let tensor_for_on = match state.choice() {
        OnsagerChoice::Classical => None,
        OnsagerChoice::SteinRecentering => Some(d),
    };
    let on = state.onsager_at(d.k, params, tensor_for_on)?;
    let scale = params.beta / (d.n() as f64).sqrt();
    sites
        .iter()
        .map(|&x| {
            let s = d.incident_sum(x).ok_or_else(|| {
                Error::Configuration(format!("tensor lacks pairs incident to site {x}"))
            })?;
            Ok(scale * s - on[x])
        })
        .collect()
}

/// `ℰ^{(k)}` at every site; needs a full tensor.
pub fn compute_epsilon(d: &DerivativeTensor, state: &IterationState, params: ModelParams) -> Result<Vec<f64>> {
    let sites: Vec<usize> = (0..d.n()).collect();
    compute_epsilon_at(d, state, params, &sites)
}

/// `Δ^{(k)}_{x;y,z}` using the classical (exact for choice I) Onsager
/// derivative `d_onsager`, as returned by [`TangentWindow::onsager_derivative`].
pub fn compute_delta(
    d: &DerivativeTensor,
    d_onsager: &Array2<f64>,
    g: &DisorderMatrix,
    params: ModelParams,
    x: usize,
    y: usize,
    z: usize,
) -> Result<f64> {
    if y == z {
        return Err(Error::InvalidIndex(format!("Δ needs distinct pair indices, got ({y}, {y})")));
    }
    let n = d.n();
    if x >= n {
        return Err(Error::InvalidIndex(format!("site {x} outside 0..{n}")));
    }
    if d_onsager.dim() != d.data.dim() {
        return Err(Error::Shape { expected: d.data.len(), got: d_onsager.len() });
    }
    let p = d
        .pairs
        .index(y, z)
        .ok_or_else(|| Error::InvalidIndex(format!("pair ({y}, {z}) not tracked")))?;
    let scale = params.beta / (n as f64).sqrt();
    let col = d.data.row(p);
    let col = col.as_slice().expect("rows are contiguous");
    let mut scratch = Vec::with_capacity(n);
    Ok(scale * pairwise_dot(g.row(x), col, &mut scratch) - d_onsager[(p, x)])
}

/// Every `Δ^{(k)}_{x;p}` for all sites `x` and tracked pairs `p`, pair-major.
pub fn delta_table(
    d: &DerivativeTensor,
    d_onsager: &Array2<f64>,
    g: &DisorderMatrix,
    params: ModelParams,
) -> Result<Array2<f64>> {
    if d_onsager.dim() != d.data.dim() {
        return Err(Error::Shape { expected: d.data.len(), got: d_onsager.len() });
    }
    let scale = params.beta / (d.n() as f64).sqrt();
    let mut out = d.data.dot(&g.view());
    Zip::from(&mut out).and(d_onsager).for_each(|o, &don| *o = scale * *o - don);
    Ok(out)
}

const FD_MAX_N: usize = 64;
const NESTED_COST_LIMIT: f64 = 2e10;

/// Central finite differences of `m^{(k)}` over every coupling pair.
///
/// For the classical choice this differentiates the plain iteration. For the
/// re-centering choice it differentiates [`exact_stein_run`], which rebuilds
/// every inner Onsager term without the closure.
pub fn finite_difference_tensor(
    g: &DisorderMatrix,
    m1: &[f64],
    params: ModelParams,
    choice: OnsagerChoice,
    k: usize,
    step: f64,
) -> Result<DerivativeTensor> {
    let n = g.n();
    if n > FD_MAX_N {
        return Err(Error::ResourceGuard(format!("finite differences limited to n <= {FD_MAX_N}, got {n}")));
    }
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    if k == 0 {
        return Err(Error::InvalidIndex("iterates start at 1".into()));
    }
    if choice == OnsagerChoice::SteinRecentering {
        check_nested_cost(n, k)?;
    }
    let pairs = Arc::new(PairSet::full(n));
    let run = |gp: &DisorderMatrix| -> Result<Vec<f64>> {
        let state = match choice {
            OnsagerChoice::Classical => run_classical(gp, m1, params, k)?,
            OnsagerChoice::SteinRecentering => exact_stein_run(gp, m1, params, k, step)?,
        };
        Ok(state.m(k).unwrap().to_vec())
    };
    let mut data = Array2::zeros((pairs.len(), n));
    for (p, &(y, z)) in pairs.pairs().iter().enumerate() {
        let plus = run(&g.perturb_entry(y, z, step)?)?;
        let minus = run(&g.perturb_entry(y, z, -step)?)?;
        for j in 0..n {
            data[(p, j)] = (plus[j] - minus[j]) / (2.0 * step);
        }
    }
    DerivativeTensor::from_data(k, pairs, data)
}

fn check_nested_cost(n: usize, k: usize) -> Result<()> {
    let p = (n * (n - 1) / 2) as f64;
    let base = (n as f64).powi(2) * p;
    let cost = (2.0 * p).powi(k.saturating_sub(2) as i32) * base;
    if cost > NESTED_COST_LIMIT {
        return Err(Error::ResourceGuard(format!(
            "exact re-centering derivatives at n = {n}, k = {k} need ~{cost:.1e} flops"
        )));
    }
    Ok(())
}

/// The re-centering iteration without the first-order closure.
///
/// `D^{(1)}` and `D^{(2)}` from propagation are exact (the Onsager term of
/// the first iterate is constant). From `k = 3` on, each `On^{(j)}` is built
/// from a central-difference tensor of this same function, so the cost grows
/// by a factor `N(N−1)` per level.
pub fn exact_stein_run(
    g: &DisorderMatrix,
    m1: &[f64],
    params: ModelParams,
    k: usize,
    step: f64,
) -> Result<IterationState> {
    let n = g.n();
    let mut state = IterationState::init(m1, OnsagerChoice::SteinRecentering)?;
    let mut window = TangentWindow::new(Arc::new(PairSet::full(n)));
    while state.k() < k {
        let j = state.k();
        if j <= 2 {
            state.step(g, params, Some(window.current()))?;
            if state.k() <= 2 {
                window.advance(&state, g, params)?;
            }
        } else {
            let d = finite_difference_tensor(g, m1, params, OnsagerChoice::SteinRecentering, j, step)?;
            state.step(g, params, Some(&d))?;
        }
    }
    Ok(state)
}
