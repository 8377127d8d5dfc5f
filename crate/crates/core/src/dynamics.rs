//! The TAP/AMP iteration
//!
//! ```text
//! m^{(k+1)}_i = tanh(h + Y^{(k)}_i),   Y^{(k)}_i = (β/√N) Σ_j g_ij m^{(k)}_j − On^{(k)}_i
//! ```
//!
//! with either the classical finite-size Onsager term
//! `On^{(k)} = β²(1 − q^{(k)}) m^{(k−1)}` (and `m^{(0)} = 0`), or the
//! re-centering term `On^{(k)}_i = (β/√N) Σ_j ∂m^{(k)}_j / ∂g_ij` which needs
//! the current [`DerivativeTensor`].

use serde::{Deserialize, Serialize};

use crate::derivatives::DerivativeTensor;
use crate::disorder::DisorderMatrix;
use crate::summation::{pairwise_dot, pairwise_sum};
use crate::{Error, Result};

/// Inverse temperature and external field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub h: f64,
}

impl ModelParams {
    pub fn new(beta: f64, h: f64) -> Result<Self> {
        if !beta.is_finite() || !h.is_finite() {
            return Err(Error::Domain(format!("beta={beta}, h={h} must be finite")));
        }
        Ok(Self { beta, h })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsagerChoice {
    /// `β²(1 − q_N) m^{(k−1)}`, started from `m^{(0)} = 0`.
    #[default]
    Classical,
    /// `(β/√N) Σ_j 𝔡_ij m_j^{(k)}`, the derivative re-centering.
    SteinRecentering,
}

/// Starting vector used when none is given: `tanh(h)` everywhere, or `0.5`
/// when `h = 0` so the zero-field low-temperature phase does not start on the
/// repulsive fixed point.
pub fn default_start(params: ModelParams, n: usize) -> Vec<f64> {
    let c = if params.h != 0.0 { params.h.tanh() } else { 0.5 };
    vec![c; n]
}

/// `(β/√N) Σ_j g_ij m_j` for every `i`.
pub fn effective_field(g: &DisorderMatrix, m: &[f64], params: ModelParams) -> Result<Vec<f64>> {
    let n = g.n();
    if m.len() != n {
        return Err(Error::Shape { expected: n, got: m.len() });
    }
    let scale = params.beta / (n as f64).sqrt();
    let mut scratch = Vec::with_capacity(n);
    Ok((0..n).map(|i| scale * pairwise_dot(g.row(i), m, &mut scratch)).collect())
}

/// Classical finite-size Onsager term `β²(1 − q_N(m_k)) m_prev`.
pub fn onsager_classical(m_k: &[f64], m_prev: &[f64], params: ModelParams) -> Result<Vec<f64>> {
    if m_k.len() != m_prev.len() {
        return Err(Error::Shape { expected: m_k.len(), got: m_prev.len() });
    }
    let q = overlap(m_k, m_k)?;
    let factor = params.beta * params.beta * (1.0 - q);
    Ok(m_prev.iter().map(|&x| factor * x).collect())
}

/// Re-centering Onsager term `(β/√N) Σ_{j≠i} 𝔡_ij m_j` read off the tensor.
/// Needs every pair incident to every site, i.e. a full tensor.
pub fn onsager_stein(d: &DerivativeTensor, params: ModelParams) -> Result<Vec<f64>> {
    let n = d.n();
    let scale = params.beta / (n as f64).sqrt();
    (0..n)
        .map(|i| {
            d.incident_sum(i).map(|s| scale * s).ok_or_else(|| {
                Error::Configuration(format!("tensor lacks the pairs incident to site {i}"))
            })
        })
        .collect()
}

/// `(1/N) Σ_i a_i b_i`.
pub fn overlap(m_a: &[f64], m_b: &[f64]) -> Result<f64> {
    if m_a.len() != m_b.len() {
        return Err(Error::Shape { expected: m_a.len(), got: m_b.len() });
    }
    if m_a.is_empty() {
        return Err(Error::InvalidSize("overlap of empty vectors".into()));
    }
    let mut scratch = Vec::with_capacity(m_a.len());
    Ok(pairwise_dot(m_a, m_b, &mut scratch) / m_a.len() as f64)
}

/// Iteration history for one disorder sample.
///
/// Iterates are indexed from 1 as in `m^{(1)}, m^{(2)}, …`; the classical
/// choice additionally stores the fixed `m^{(0)} = 0`.
#[derive(Debug, Clone)]
pub struct IterationState {
    k: usize,
    choice: OnsagerChoice,
    /// `history[j]` holds `m^{(j + first)}`.
    history: Vec<Vec<f64>>,
    first: usize,
    y_current: Option<Vec<f64>>,
    onsager_current: Option<Vec<f64>>,
    /// `overlaps[a-1][b-1] = q^{(a,b)}` for `b <= a`.
    overlaps: Vec<Vec<f64>>,
    onsager_sign: f64,
}

impl IterationState {
    pub fn init(m1: &[f64], choice: OnsagerChoice) -> Result<Self> {
        if m1.is_empty() {
            return Err(Error::InvalidSize("empty starting vector".into()));
        }
        if let Some((i, x)) = m1.iter().enumerate().find(|(_, x)| !(x.abs() <= 1.0)) {
            return Err(Error::Domain(format!("m1[{i}] = {x} outside [-1, 1]")));
        }
        let (history, first) = match choice {
            OnsagerChoice::Classical => (vec![vec![0.0; m1.len()], m1.to_vec()], 0),
            OnsagerChoice::SteinRecentering => (vec![m1.to_vec()], 1),
        };
        let q11 = overlap(m1, m1)?;
        Ok(Self {
            k: 1,
            choice,
            history,
            first,
            y_current: None,
            onsager_current: None,
            overlaps: vec![vec![q11]],
            onsager_sign: 1.0,
        })
    }

    /// Test hook: flips the sign of the Onsager term in every later step.
    #[doc(hidden)]
    pub fn with_flipped_onsager(mut self) -> Self {
        self.onsager_sign = -self.onsager_sign;
        self
    }

    #[doc(hidden)]
    pub fn onsager_sign(&self) -> f64 {
        self.onsager_sign
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.history[0].len()
    }

    pub fn choice(&self) -> OnsagerChoice {
        self.choice
    }

    /// `m^{(j)}`, or `None` if it was never stored (`j > k`, or `j = 0` for
    /// the re-centering choice).
    pub fn m(&self, j: usize) -> Option<&[f64]> {
        j.checked_sub(self.first)
            .and_then(|idx| self.history.get(idx))
            .map(Vec::as_slice)
    }

    pub fn current(&self) -> &[f64] {
        self.history.last().expect("history is never empty")
    }

    /// Re-centered field `Y^{(k−1)}` that produced the current iterate.
    pub fn y_current(&self) -> Option<&[f64]> {
        self.y_current.as_deref()
    }

    /// Onsager term `On^{(k−1)}` used in the last step.
    pub fn onsager_current(&self) -> Option<&[f64]> {
        self.onsager_current.as_deref()
    }

    /// `q^{(a,b)}` for `1 <= a, b <= k`.
    pub fn q(&self, a: usize, b: usize) -> Option<f64> {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        if lo == 0 || hi > self.k {
            return None;
        }
        Some(self.overlaps[hi - 1][lo - 1])
    }

    /// Full symmetric `k × k` overlap table, row `a-1`, column `b-1`.
    pub fn q_table(&self) -> Vec<Vec<f64>> {
        (1..=self.k)
            .map(|a| (1..=self.k).map(|b| self.q(a, b).unwrap()).collect())
            .collect()
    }

    /// Onsager term `On^{(j)}` of iterate `j <= k` under this state's choice.
    /// The re-centering choice reads it from `d`, which must be for iterate `j`.
    pub fn onsager_at(
        &self,
        j: usize,
        params: ModelParams,
        d: Option<&DerivativeTensor>,
    ) -> Result<Vec<f64>> {
        if j == 0 || j > self.k {
            return Err(Error::InvalidIndex(format!("iterate {j} not in 1..={}", self.k)));
        }
        let mut on = match self.choice {
            OnsagerChoice::Classical => {
                onsager_classical(self.m(j).unwrap(), self.m(j - 1).unwrap(), params)?
            }
            OnsagerChoice::SteinRecentering => {
                let d = d.ok_or_else(|| {
                    Error::Configuration("re-centering choice needs a derivative tensor".into())
                })?;
                if d.k() != j {
                    return Err(Error::Staleness { tensor: d.k(), expected: j });
                }
                if d.n() != self.n() {
                    return Err(Error::Shape { expected: self.n(), got: d.n() });
                }
                onsager_stein(d, params)?
            }
        };
        if self.onsager_sign != 1.0 {
            on.iter_mut().for_each(|x| *x *= self.onsager_sign);
        }
        Ok(on)
    }

    /// One step `m^{(k)} → m^{(k+1)}`, updating all overlaps `q^{(k+1, a)}`.
    pub fn step(
        &mut self,
        g: &DisorderMatrix,
        params: ModelParams,
        d: Option<&DerivativeTensor>,
    ) -> Result<()> {
        let n = self.n();
        if g.n() != n {
            return Err(Error::Shape { expected: n, got: g.n() });
        }
        let on = self.onsager_at(self.k, params, d)?;
        let field = effective_field(g, self.current(), params)?;
        let y: Vec<f64> = field.iter().zip(&on).map(|(f, o)| f - o).collect();
        let next: Vec<f64> = y.iter().map(|&yi| (params.h + yi).tanh()).collect();

        let mut scratch = Vec::with_capacity(n);
        let mut row: Vec<f64> = (1..=self.k)
            .map(|a| pairwise_dot(&next, self.m(a).unwrap(), &mut scratch) / n as f64)
            .collect();
        row.push(pairwise_dot(&next, &next, &mut scratch) / n as f64);
        self.overlaps.push(row);
        self.history.push(next);
        self.y_current = Some(y);
        self.onsager_current = Some(on);
        self.k += 1;
        Ok(())
    }

    /// `q^{(k)} + q^{(l)} − 2 q^{(k,l)}`, the mean squared distance of two iterates.
    pub fn pseudo_distance(&self, k: usize, l: usize) -> Result<f64> {
        let out_of_range = |j: usize| j == 0 || j > self.k;
        if out_of_range(k) || out_of_range(l) {
            return Err(Error::InvalidIndex(format!("iterates ({k}, {l}) not in 1..={}", self.k)));
        }
        if k == l {
            return Ok(0.0);
        }
        let d = self.q(k, k).unwrap() + self.q(l, l).unwrap() - 2.0 * self.q(k, l).unwrap();
        Ok(d.max(0.0))
    }

    pub fn snapshot(&self, params: ModelParams, seed: u64) -> StateSnapshot {
        let m = self.current();
        StateSnapshot {
            schema_version: crate::ensemble::SCHEMA_VERSION.to_string(),
            k: self.k,
            q_table: self.q_table(),
            final_m_summary: MagnetizationSummary {
                mean: pairwise_sum(m) / m.len() as f64,
                q_kk: self.q(self.k, self.k).unwrap(),
            },
            params,
            seed,
            choice: self.choice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnetizationSummary {
    pub mean: f64,
    pub q_kk: f64,
}

/// JSON snapshot of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub schema_version: String,
    pub k: usize,
    pub q_table: Vec<Vec<f64>>,
    pub final_m_summary: MagnetizationSummary,
    pub params: ModelParams,
    pub seed: u64,
    pub choice: OnsagerChoice,
}

/// Runs the classical iteration from `m1` up to iterate `k`.
pub fn run_classical(
    g: &DisorderMatrix,
    m1: &[f64],
    params: ModelParams,
    k: usize,
) -> Result<IterationState> {
    let mut state = IterationState::init(m1, OnsagerChoice::Classical)?;
    while state.k() < k {
        state.step(g, params, None)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(beta: f64, h: f64) -> ModelParams {
        ModelParams::new(beta, h).unwrap()
    }

    #[test]
    fn init_seeds_first_overlap() {
        let s = IterationState::init(&[0.5; 4], OnsagerChoice::Classical).unwrap();
        assert_eq!(s.q(1, 1), Some(0.25));
        assert_eq!(s.m(0), Some(&[0.0; 4][..]));
        let s = IterationState::init(&[0.0; 4], OnsagerChoice::SteinRecentering).unwrap();
        assert_eq!(s.q(1, 1), Some(0.0));
        assert_eq!(s.m(0), None);
        let s = IterationState::init(&[1.0; 3], OnsagerChoice::Classical).unwrap();
        assert_eq!(s.q(1, 1), Some(1.0));
    }

    #[test]
    fn init_rejects_out_of_range_entries() {
        let err = IterationState::init(&[0.1, 1.5], OnsagerChoice::Classical).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(IterationState::init(&[f64::NAN], OnsagerChoice::Classical).is_err());
    }

    #[test]
    fn field_of_zero_vector_or_zero_beta_vanishes() {
        let g = DisorderMatrix::sample(5, 1).unwrap();
        assert!(effective_field(&g, &[0.0; 5], p(1.3, 0.0)).unwrap().iter().all(|&x| x == 0.0));
        assert!(effective_field(&g, &[0.7; 5], p(0.0, 0.2)).unwrap().iter().all(|&x| x == 0.0));
        assert!(matches!(
            effective_field(&g, &[0.1; 4], p(1.0, 0.0)),
            Err(Error::Shape { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn field_matches_hand_sum_on_three_sites() {
        let g = DisorderMatrix::from_entries(
            3,
            0,
            vec![0.0, 0.3, -1.2, 0.3, 0.0, 0.8, -1.2, 0.8, 0.0],
        )
        .unwrap();
        let beta = 1.7;
        let f = effective_field(&g, &[1.0; 3], p(beta, 0.0)).unwrap();
        let s = beta / 3f64.sqrt();
        let want = [s * (0.3 - 1.2), s * (0.3 + 0.8), s * (-1.2 + 0.8)];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn classical_onsager_closed_forms() {
        let pr = p(1.0, 0.0);
        assert!(onsager_classical(&[0.3; 4], &[0.0; 4], pr).unwrap().iter().all(|&x| x == 0.0));
        assert!(onsager_classical(&[1.0, -1.0], &[0.4, 0.2], pr)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let on = onsager_classical(&[0.6; 3], &[0.2; 3], pr).unwrap();
        for x in on {
            assert!((x - 0.128).abs() < 1e-15);
        }
        assert!(onsager_classical(&[0.1; 3], &[0.1; 2], pr).is_err());
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap(&[1.0; 6], &[1.0; 6]).unwrap(), 1.0);
        assert_eq!(overlap(&[1.0, -1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!((overlap(&[0.3; 5], &[0.7; 5]).unwrap() - 0.21).abs() < 1e-15);
        assert!(overlap(&[0.3; 5], &[0.7; 4]).is_err());
    }

    #[test]
    fn zero_beta_reaches_fixed_point_in_one_step() {
        let g = DisorderMatrix::sample(30, 4).unwrap();
        let pr = p(0.0, 0.4);
        let s = run_classical(&g, &[0.9; 30], pr, 4).unwrap();
        let t = 0.4f64.tanh();
        for k in 2..=4 {
            assert!(s.m(k).unwrap().iter().all(|&x| x == t));
            assert!((s.q(k, k).unwrap() - t * t).abs() < 1e-15);
        }
        assert_eq!(s.pseudo_distance(3, 4).unwrap(), 0.0);
    }

    #[test]
    fn zero_field_zero_start_stays_zero() {
        let g = DisorderMatrix::sample(20, 9).unwrap();
        let s = run_classical(&g, &[0.0; 20], p(2.5, 0.0), 6).unwrap();
        for k in 1..=6 {
            assert!(s.m(k).unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn one_step_matches_direct_formula() {
        let entries = vec![0.0, 0.5, -0.25, 0.5, 0.0, 1.5, -0.25, 1.5, 0.0];
        let g = DisorderMatrix::from_entries(3, 0, entries.clone()).unwrap();
        let (beta, h) = (1.2, 0.1);
        let mut s = IterationState::init(&[0.5; 3], OnsagerChoice::Classical).unwrap();
        s.step(&g, p(beta, h), None).unwrap();
        // m^{(0)} = 0 so the Onsager term vanishes on the first step.
        for i in 0..3 {
            let sum: f64 = (0..3).map(|j| entries[i * 3 + j] * 0.5).sum();
            let want = (h + beta / 3f64.sqrt() * sum).tanh();
            assert!((s.m(2).unwrap()[i] - want).abs() < 1e-15);
        }
        // Second step uses β²(1 − q^{(2)}) m^{(1)}.
        let m2 = s.m(2).unwrap().to_vec();
        s.step(&g, p(beta, h), None).unwrap();
        let q2: f64 = m2.iter().map(|x| x * x).sum::<f64>() / 3.0;
        for i in 0..3 {
            let sum: f64 = (0..3).map(|j| entries[i * 3 + j] * m2[j]).sum();
            let want = (h + beta / 3f64.sqrt() * sum - beta * beta * (1.0 - q2) * 0.5).tanh();
            assert!((s.m(3).unwrap()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn stein_step_requires_current_tensor() {
        let g = DisorderMatrix::sample(4, 1).unwrap();
        let mut s = IterationState::init(&[0.2; 4], OnsagerChoice::SteinRecentering).unwrap();
        assert!(matches!(s.step(&g, p(1.0, 0.0), None), Err(Error::Configuration(_))));
        let stale = DerivativeTensor::zeros(2, std::sync::Arc::new(crate::PairSet::full(4)));
        assert!(matches!(
            s.step(&g, p(1.0, 0.0), Some(&stale)),
            Err(Error::Staleness { tensor: 2, expected: 1 })
        ));
    }

    #[test]
    fn pseudo_distance_cases() {
        let g = DisorderMatrix::sample(25, 3).unwrap();
        let s = run_classical(&g, &default_start(p(1.1, 0.3), 25), p(1.1, 0.3), 5).unwrap();
        assert_eq!(s.pseudo_distance(4, 4).unwrap(), 0.0);
        for (k, l) in [(1, 2), (2, 5), (5, 3)] {
            let direct: f64 = s
                .m(k)
                .unwrap()
                .iter()
                .zip(s.m(l).unwrap())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / 25.0;
            assert!((s.pseudo_distance(k, l).unwrap() - direct).abs() < 1e-12);
            assert_eq!(s.pseudo_distance(k, l).unwrap(), s.pseudo_distance(l, k).unwrap());
        }
        assert!(matches!(s.pseudo_distance(0, 1), Err(Error::InvalidIndex(_))));
        assert!(matches!(s.pseudo_distance(1, 6), Err(Error::InvalidIndex(_))));
    }

    #[test]
    fn antipodal_iterates_distance() {
        // Overlap bookkeeping alone: m^{(k)} = -m^{(l)} = c gives 4c².
        let c: f64 = 0.35;
        let q = c * c;
        let d = q + q - 2.0 * (-q);
        assert!((d - 4.0 * c * c).abs() < 1e-15);
        let g = DisorderMatrix::from_entries(2, 0, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut s = IterationState::init(&[c, c], OnsagerChoice::SteinRecentering).unwrap();
        // β = 0, h = atanh(-c): next iterate is exactly -c.
        let pr = p(0.0, (-c).atanh());
        let d0 = DerivativeTensor::zeros(1, std::sync::Arc::new(crate::PairSet::full(2)));
        s.step(&g, pr, Some(&d0)).unwrap();
        assert!((s.pseudo_distance(1, 2).unwrap() - 4.0 * c * c).abs() < 1e-15);
    }

    #[test]
    fn snapshot_serializes_expected_keys() {
        let g = DisorderMatrix::sample(10, 5).unwrap();
        let s = run_classical(&g, &[0.5; 10], p(0.5, 0.2), 3).unwrap();
        let v = serde_json::to_value(s.snapshot(p(0.5, 0.2), 5)).unwrap();
        for key in ["k", "q_table", "final_m_summary", "params", "seed", "choice"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["choice"], "classical");
        assert_eq!(v["q_table"].as_array().unwrap().len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn overlap_table_invariants(
            n in 2usize..40,
            seed in any::<u64>(),
            beta in -2.5f64..2.5,
            h in -1.0f64..1.0,
            c in -1.0f64..1.0,
        ) {
            let g = DisorderMatrix::sample(n, seed).unwrap();
            let pr = p(beta, h);
            let s = run_classical(&g, &vec![c; n], pr, 6).unwrap();
            for a in 1..=6 {
                let qaa = s.q(a, a).unwrap();
                prop_assert!((0.0..=1.0).contains(&qaa));
                prop_assert!(s.m(a).unwrap().iter().all(|x| x.abs() <= 1.0));
                for b in 1..=6 {
                    let qab = s.q(a, b).unwrap();
                    prop_assert_eq!(qab, s.q(b, a).unwrap());
                    let bound = (qaa * s.q(b, b).unwrap()).sqrt();
                    prop_assert!(qab.abs() <= bound + 1e-12);
                    prop_assert!(s.pseudo_distance(a, b).unwrap() >= 0.0);
                }
            }
        }
    }
}
