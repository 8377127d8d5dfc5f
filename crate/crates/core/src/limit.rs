//! The deterministic large-`N` limit.
//!
//! ```text
//! φ(x)         = E tanh²(h + β√x Z)
//! χ(t)         = E tanh(h + β√t Z)
//! ψ(t, t1, t2) = E tanh(h + βZ') tanh(h + βZ''),  Var Z' = t1, Var Z'' = t2, Cov = t
//! ```
//!
//! `q` is the designated fixed point of `φ`, `q̃` the smallest nonnegative
//! fixed point of `t ↦ ψ(t, q, q)`, and the overlap table of the iteration
//! follows the recursion in [`propagate_covariance`].

use serde::{Deserialize, Serialize};

use crate::dynamics::ModelParams;
use crate::quadrature::QuadratureRule;
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_BUDGET: usize = 100_000;

/// Relative slack on `|t| ≤ √(t1 t2)` before a covariance counts as invalid.
const PSD_SLACK: f64 = 1e-10;

fn check_variance(name: &str, x: f64) -> Result<()> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("{name} = {x} must be a nonnegative variance")));
    }
    Ok(())
}

#[inline]
fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

pub fn phi(x: f64, params: ModelParams, rule: &QuadratureRule) -> Result<f64> {
    check_variance("x", x)?;
    let s = params.beta * x.sqrt();
    Ok(rule.expect(|z| (params.h + s * z).tanh().powi(2)))
}

/// `φ'(x) = β² E[sech⁴ − 2 tanh² sech²](h + β√x Z)`.
pub fn phi_prime(x: f64, params: ModelParams, rule: &QuadratureRule) -> Result<f64> {
    check_variance("x", x)?;
    let s = params.beta * x.sqrt();
    let b2 = params.beta * params.beta;
    Ok(b2 * rule.expect(|z| {
        let y = params.h + s * z;
        let (t, s2) = (y.tanh(), sech2(y));
        s2 * s2 - 2.0 * t * t * s2
    }))
}

pub fn chi(t: f64, params: ModelParams, rule: &QuadratureRule) -> Result<f64> {
    check_variance("t", t)?;
    if params.h == 0.0 {
        // Odd integrand.
        return Ok(0.0);
    }
    let s = params.beta * t.sqrt();
    Ok(rule.expect(|z| (params.h + s * z).tanh()))
}

/// `E f(Z', Z'')` for the centered pair with the given covariance, by a
/// Cholesky factorization `Z' = aU`, `Z'' = bU + cV`. Singular cases reduce
/// to lower-dimensional rules.
fn pair_expectation(
    t: f64,
    t1: f64,
    t2: f64,
    rule: &QuadratureRule,
    f: impl Fn(f64, f64) -> f64,
) -> Result<f64> {
    check_variance("t1", t1)?;
    check_variance("t2", t2)?;
    if !t.is_finite() {
        return Err(Error::Domain(format!("covariance {t} is not finite")));
    }
    let bound = (t1 * t2).sqrt();
    if t.abs() > bound * (1.0 + PSD_SLACK) + 1e-300 {
        return Err(Error::Domain(format!(
            "covariance {t} exceeds sqrt({t1} * {t2}) = {bound}; not positive semi-definite"
        )));
    }
    let t = t.clamp(-bound, bound);
    match (t1 == 0.0, t2 == 0.0) {
        (true, true) => Ok(f(0.0, 0.0)),
        (true, false) => {
            let s = t2.sqrt();
            Ok(rule.expect(|u| f(0.0, s * u)))
        }
        (false, true) => {
            let s = t1.sqrt();
            Ok(rule.expect(|u| f(s * u, 0.0)))
        }
        (false, false) => {
            let a = t1.sqrt();
            let b = t / a;
            let c2 = t2 - t * t / t1;
            if c2 <= 1e-15 * t2 {
                Ok(rule.expect(|u| f(a * u, b * u)))
            } else {
                let c = c2.sqrt();
                Ok(rule.expect2(|u, v| f(a * u, b * u + c * v)))
            }
        }
    }
}

pub fn psi(t: f64, t1: f64, t2: f64, params: ModelParams, rule: &QuadratureRule) -> Result<f64> {
    let (b, h) = (params.beta, params.h);
    pair_expectation(t, t1, t2, rule, |x, y| (h + b * x).tanh() * (h + b * y).tanh())
}

/// Partial derivatives of `ψ` in its covariance and its two variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiPartials {
    pub d_t: f64,
    pub d_t1: f64,
    pub d_t2: f64,
    /// Set on the boundary `|t| = √(t1 t2)` or at a zero variance, where only
    /// one-sided derivatives exist.
    pub one_sided: bool,
}

/// Gaussian integration by parts: `∂_cov E[F G] = E[F' G']` and
/// `∂_var E[F G] = ½ E[F'' G]`, with `F = tanh(h + β·)`.
pub fn psi_partials(
    t: f64,
    t1: f64,
    t2: f64,
    params: ModelParams,
    rule: &QuadratureRule,
) -> Result<PsiPartials> {
    let (b, h) = (params.beta, params.h);
    let b2 = b * b;
    let d_t = psi_dt(t, t1, t2, params, rule)?;
    let second = |x: f64| {
        let y = h + b * x;
        -2.0 * y.tanh() * sech2(y)
    };
    let d_t1 = 0.5 * b2 * pair_expectation(t, t1, t2, rule, |x, y| second(x) * (h + b * y).tanh())?;
    let d_t2 = 0.5 * b2 * pair_expectation(t, t1, t2, rule, |x, y| (h + b * x).tanh() * second(y))?;
    let bound = (t1 * t2).sqrt();
    let one_sided = t1 == 0.0 || t2 == 0.0 || t.abs() >= bound * (1.0 - 1e-12);
    Ok(PsiPartials { d_t, d_t1, d_t2, one_sided })
}

fn psi_dt(t: f64, t1: f64, t2: f64, params: ModelParams, rule: &QuadratureRule) -> Result<f64> {
    let (b, h) = (params.beta, params.h);
    Ok(b * b * pair_expectation(t, t1, t2, rule, |x, y| sech2(h + b * x) * sech2(h + b * y))?)
}

/// `β² E sech⁴(h + β√q Z) − 1`; nonpositive exactly when the AT condition holds.
pub fn at_residual(params: ModelParams, q: f64, rule: &QuadratureRule) -> Result<f64> {
    check_variance("q", q)?;
    let s = params.beta * q.sqrt();
    let b2 = params.beta * params.beta;
    Ok(b2 * rule.expect(|z| sech2(params.h + s * z).powi(2)) - 1.0)
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// Fixed point of `φ`: the unique one, or the positive one when `h = 0` and
/// `|β| > 1`. Plain iteration from `x = 1`, with a Newton step whenever it
/// lowers the residual.
pub fn solve_q(params: ModelParams, rule: &QuadratureRule, tol: f64) -> Result<f64> {
    check_tol(tol)?;
    if params.beta == 0.0 {
        return Ok(params.h.tanh().powi(2));
    }
    // Zero field, high temperature: 0 is the only fixed point.
    if params.h == 0.0 && params.beta.abs() <= 1.0 {
        return Ok(0.0);
    }
    let mut x = 1.0;
    let mut r = phi(x, params, rule)? - x;
    for _ in 0..DEFAULT_BUDGET {
        if r.abs() < tol {
            return Ok(x);
        }
        let slope = phi_prime(x, params, rule)? - 1.0;
        if slope < -1e-12 {
            let newton = x - r / slope;
            if newton > 0.0 && newton <= 1.0 {
                let rn = phi(newton, params, rule)? - newton;
                if rn.abs() < r.abs() {
                    x = newton;
                    r = rn;
                    continue;
                }
            }
        }
        x = (x + r).clamp(0.0, 1.0);
        r = phi(x, params, rule)? - x;
    }
    Err(Error::NonConvergence { iterations: DEFAULT_BUDGET, residual: r.abs() })
}

/// Smallest nonnegative fixed point of `t ↦ ψ(t, q, q)`, by Newton steps from
/// `t = 0`. `ψ(·, q, q)` is convex on `[0, q]`, so the steps stay below the
/// root and increase to it.
pub fn solve_q_tilde(params: ModelParams, q: f64, rule: &QuadratureRule, tol: f64) -> Result<f64> {
    check_tol(tol)?;
    check_variance("q", q)?;
    // At zero field ψ(0, q, q) = χ(q)² = 0, so 0 is already a fixed point.
    if q == 0.0 || params.h == 0.0 {
        return Ok(0.0);
    }
    let mut t = 0.0;
    let mut f = psi(t, q, q, params, rule)? - t;
    let mut settled = false;
    for _ in 0..DEFAULT_BUDGET {
        if f.abs() < tol {
            // One more step once inside the tolerance tightens a simple root
            // to rounding level.
            if settled {
                return Ok(t);
            }
            settled = true;
        }
        let gap = 1.0 - psi_dt(t, q, q, params, rule)?;
        let step = if gap > 1e-14 { f / gap } else { f };
        let next = (t + step).clamp(0.0, q);
        if next == t {
            return Ok(t);
        }
        t = next;
        f = psi(t, q, q, params, rule)? - t;
        if settled && f.abs() >= tol {
            settled = false;
        }
    }
    Err(Error::NonConvergence { iterations: DEFAULT_BUDGET, residual: f.abs() })
}

/// Limit quantities at one `(β, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitSolution {
    pub params: ModelParams,
    pub q: f64,
    pub q_tilde: f64,
    pub chi_q: f64,
    pub at_residual: f64,
    pub at_satisfied: bool,
}

impl LimitSolution {
    pub fn solve(params: ModelParams, rule: &QuadratureRule) -> Result<Self> {
        Self::solve_with_tol(params, rule, DEFAULT_TOL)
    }

    pub fn solve_with_tol(params: ModelParams, rule: &QuadratureRule, tol: f64) -> Result<Self> {
        let q = solve_q(params, rule, tol)?;
        let q_tilde = solve_q_tilde(params, q, rule, tol)?;
        let at_residual = at_residual(params, q, rule)?;
        Ok(Self {
            params,
            q,
            q_tilde,
            chi_q: chi(q, params, rule)?,
            at_residual,
            at_satisfied: at_residual <= 0.0,
        })
    }
}

/// Deterministic overlap table `q^{(k,k')}`, `1 ≤ k, k' ≤ k_max`, stored
/// with zero-based indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariancePropagation {
    pub q_table: Vec<Vec<f64>>,
    pub m_bar: f64,
    pub q1: f64,
}

impl CovariancePropagation {
    /// `q^{(k,k')}` with one-based iterate indices.
    pub fn get(&self, k: usize, l: usize) -> Option<f64> {
        self.q_table.get(k.checked_sub(1)?)?.get(l.checked_sub(1)?).copied()
    }

    pub fn k_max(&self) -> usize {
        self.q_table.len()
    }
}

pub fn propagate_covariance(
    q1: f64,
    m_bar: f64,
    k_max: usize,
    params: ModelParams,
    rule: &QuadratureRule,
) -> Result<CovariancePropagation> {
    if !(0.0..=1.0).contains(&q1) {
        return Err(Error::Domain(format!("q1 = {q1} outside [0, 1]")));
    }
    if !(m_bar.abs() <= q1.sqrt() * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!(
            "|m_bar| = {} exceeds sqrt(q1) = {}; violates Cauchy-Schwarz",
            m_bar.abs(),
            q1.sqrt()
        )));
    }
    if k_max == 0 {
        return Err(Error::InvalidSize("k_max must be >= 1".into()));
    }
    let mut table = vec![vec![0.0; k_max]; k_max];
    table[0][0] = q1;
    for k in 1..k_max {
        let diag_prev = table[k - 1][k - 1];
        table[k][0] = chi(diag_prev, params, rule)? * m_bar;
        for l in 1..k {
            table[k][l] = psi(table[k - 1][l - 1], diag_prev, table[l - 1][l - 1], params, rule)?;
        }
        table[k][k] = phi(diag_prev, params, rule)?;
        let row = table[k].clone();
        for (l, v) in row.into_iter().enumerate().take(k) {
            table[l][k] = v;
        }
    }
    Ok(CovariancePropagation { q_table: table, m_bar, q1 })
}

/// One-step map of the correlation `κ = q^{(k,k')}/√(q^{(k)} q^{(k')})`:
/// `f(x) = ψ(x√(q_k q_k'), q_k, q_k') / √(φ(q_k) φ(q_k'))`.
pub fn kappa_map(x: f64, qk: f64, qk1: f64, params: ModelParams, rule: &QuadratureRule) -> Result<f64> {
    if !(qk > 0.0) || !(qk1 > 0.0) {
        return Err(Error::Domain(format!("kappa map needs positive variances, got {qk}, {qk1}")));
    }
    if !(x.abs() <= 1.0 + 1e-12) {
        return Err(Error::Domain(format!("correlation {x} outside [-1, 1]")));
    }
    let x = x.clamp(-1.0, 1.0);
    let denom = (phi(qk, params, rule)? * phi(qk1, params, rule)?).sqrt();
    if denom == 0.0 {
        return Err(Error::Domain("kappa map undefined: φ vanishes".into()));
    }
    Ok(psi(x * (qk * qk1).sqrt(), qk, qk1, params, rule)? / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::DEFAULT_ORDER;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn rule() -> &'static QuadratureRule {
        static RULE: OnceLock<QuadratureRule> = OnceLock::new();
        RULE.get_or_init(|| QuadratureRule::gauss_hermite(DEFAULT_ORDER).unwrap())
    }

    fn p(beta: f64, h: f64) -> ModelParams {
        ModelParams::new(beta, h).unwrap()
    }

    /// Trapezoid rule on the Gaussian density over [−12, 12]; spectrally
    /// accurate for smooth integrands and independent of Gauss–Hermite.
    fn trapezoid_expect(f: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi, steps) = (-12.0f64, 12.0f64, 24_000);
        let dz = (hi - lo) / steps as f64;
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        (0..=steps)
            .map(|i| {
                let z = lo + i as f64 * dz;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * f(z) * (-0.5 * z * z).exp() / norm
            })
            .sum::<f64>()
            * dz
    }

    #[test]
    fn phi_and_chi_closed_forms() {
        let r = rule();
        assert!((phi(0.7, p(0.0, 0.4), r).unwrap() - 0.4f64.tanh().powi(2)).abs() < 1e-15);
        assert_eq!(phi(0.0, p(1.5, 0.0), r).unwrap(), 0.0);
        assert!(phi(-0.1, p(1.0, 0.0), r).is_err());
        assert!(chi(0.5, p(2.0, 0.0), r).unwrap().abs() < 1e-15);
        assert!((chi(0.5, p(0.0, 0.3), r).unwrap() - 0.3f64.tanh()).abs() < 1e-15);
        assert!((chi(0.0, p(1.7, 0.3), r).unwrap() - 0.3f64.tanh()).abs() < 1e-15);
        assert!(chi(-1.0, p(1.0, 0.3), r).is_err());
    }

    #[test]
    fn phi_matches_independent_quadrature() {
        let got = phi(0.3, p(1.0, 0.5), rule()).unwrap();
        let want = trapezoid_expect(|z| (0.5 + 0.3f64.sqrt() * z).tanh().powi(2));
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn psi_reductions() {
        let r = rule();
        let pr = p(1.0, 0.3);
        for x in [0.0, 0.2, 0.7] {
            assert!((psi(x, x, x, pr, r).unwrap() - phi(x, pr, r).unwrap()).abs() < 1e-12);
        }
        for (t1, t2) in [(0.4, 0.5), (0.0, 0.3), (0.9, 0.1)] {
            let got = psi(0.0, t1, t2, pr, r).unwrap();
            let want = chi(t1, pr, r).unwrap() * chi(t2, pr, r).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
        assert!((psi(0.0, 0.0, 0.0, pr, r).unwrap() - 0.3f64.tanh().powi(2)).abs() < 1e-15);
        assert!(matches!(psi(0.5, 0.2, 0.2, pr, r), Err(Error::Domain(_))));
    }

    #[test]
    fn psi_matches_independent_two_dimensional_quadrature() {
        let pr = p(1.3, 0.2);
        let (t, t1, t2): (f64, f64, f64) = (0.15, 0.4, 0.6);
        // Condition on Z' and integrate the conditional law of Z'' with the
        // trapezoid rule in both directions.
        let a = t1.sqrt();
        let c = (t2 - t * t / t1).sqrt();
        let want = trapezoid_expect(|u| {
            let inner = trapezoid_expect(|v| (pr.h + pr.beta * (t / a * u + c * v)).tanh());
            (pr.h + pr.beta * a * u).tanh() * inner
        });
        let got = psi(t, t1, t2, pr, rule()).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn psi_partials_match_finite_differences() {
        let r = rule();
        let pr = p(1.2, 0.3);
        let (t, t1, t2) = (0.1, 0.4, 0.5);
        let e = 1e-6;
        let part = psi_partials(t, t1, t2, pr, r).unwrap();
        let fd_t = (psi(t + e, t1, t2, pr, r).unwrap() - psi(t - e, t1, t2, pr, r).unwrap()) / (2.0 * e);
        let fd_1 = (psi(t, t1 + e, t2, pr, r).unwrap() - psi(t, t1 - e, t2, pr, r).unwrap()) / (2.0 * e);
        let fd_2 = (psi(t, t1, t2 + e, pr, r).unwrap() - psi(t, t1, t2 - e, pr, r).unwrap()) / (2.0 * e);
        assert!((part.d_t - fd_t).abs() < 1e-6);
        assert!((part.d_t1 - fd_1).abs() < 1e-6);
        assert!((part.d_t2 - fd_2).abs() < 1e-6);
        assert!(!part.one_sided);
        assert!(psi_partials(0.2, 0.2, 0.2, pr, r).unwrap().one_sided);
    }

    #[test]
    fn psi_partials_special_cases() {
        let r = rule();
        let zero = psi_partials(0.1, 0.3, 0.4, p(0.0, 0.5), r).unwrap();
        assert_eq!((zero.d_t, zero.d_t1, zero.d_t2), (0.0, 0.0, 0.0));
        // Independence at t = 0, h = 0.
        let (b, t1, t2): (f64, f64, f64) = (1.4, 0.3, 0.6);
        let d = psi_partials(0.0, t1, t2, p(b, 0.0), r).unwrap();
        let e1 = r.expect(|z| sech2(b * t1.sqrt() * z));
        let e2 = r.expect(|z| sech2(b * t2.sqrt() * z));
        assert!((d.d_t - b * b * e1 * e2).abs() < 1e-13);
        assert!(d.d_t > 0.0);
    }

    #[test]
    fn phi_prime_matches_finite_difference() {
        let r = rule();
        let pr = p(1.7, 0.2);
        let e = 1e-6;
        for x in [0.1, 0.5, 0.9] {
            let fd = (phi(x + e, pr, r).unwrap() - phi(x - e, pr, r).unwrap()) / (2.0 * e);
            assert!((phi_prime(x, pr, r).unwrap() - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn at_residual_closed_forms() {
        let r = rule();
        assert!((at_residual(p(0.0, 0.7), 0.4, r).unwrap() + 1.0).abs() < 1e-15);
        assert!((at_residual(p(0.5, 0.0), 0.0, r).unwrap() + 0.75).abs() < 1e-15);
        assert!(at_residual(p(1.0, 0.0), 0.0, r).unwrap().abs() < 1e-15);
    }

    #[test]
    fn solve_q_examples() {
        let r = rule();
        assert!((solve_q(p(0.0, 0.6), r, DEFAULT_TOL).unwrap() - 0.6f64.tanh().powi(2)).abs() < 1e-15);
        assert_eq!(solve_q(p(0.8, 0.0), r, DEFAULT_TOL).unwrap(), 0.0);
        let q = solve_q(p(1.5, 0.0), r, DEFAULT_TOL).unwrap();
        assert!(q > 0.1 && (phi(q, p(1.5, 0.0), r).unwrap() - q).abs() < DEFAULT_TOL);
        assert!(solve_q(p(1.0, 0.3), r, 0.0).is_err());
    }

    #[test]
    fn solve_q_matches_brute_force_iteration() {
        let fine = QuadratureRule::gauss_hermite(128).unwrap();
        let pr = p(1.5, 0.3);
        let mut x = 1.0;
        for _ in 0..10_000 {
            x = phi(x, pr, &fine).unwrap();
        }
        let q = solve_q(pr, rule(), DEFAULT_TOL).unwrap();
        assert!((q - x).abs() < 1e-8, "{q} vs {x}");
    }

    #[test]
    fn q_tilde_examples() {
        let r = rule();
        let pr = p(0.0, 0.4);
        let q = solve_q(pr, r, DEFAULT_TOL).unwrap();
        assert!((solve_q_tilde(pr, q, r, DEFAULT_TOL).unwrap() - q).abs() < 1e-15);
        let pr = p(2.0, 0.0);
        let q = solve_q(pr, r, DEFAULT_TOL).unwrap();
        assert_eq!(solve_q_tilde(pr, q, r, DEFAULT_TOL).unwrap(), 0.0);

        let pr = p(0.9, 0.3);
        let sol = LimitSolution::solve(pr, r).unwrap();
        assert!(sol.at_residual < 0.0);
        assert!((sol.q_tilde - sol.q).abs() < 10.0 * DEFAULT_TOL);
    }

    #[test]
    fn q_tilde_strictly_below_q_beyond_the_at_line() {
        let pr = p(2.0, 0.3);
        let sol = LimitSolution::solve(pr, rule()).unwrap();
        assert!(sol.at_residual > 0.0);
        assert!(sol.q - sol.q_tilde > 1e-3);
        let f = psi(sol.q_tilde, sol.q, sol.q, pr, rule()).unwrap();
        assert!((f - sol.q_tilde).abs() < DEFAULT_TOL);
        // No smaller nonnegative fixed point: ψ(t) − t stays positive below.
        for i in 0..50 {
            let t = sol.q_tilde * i as f64 / 50.0;
            assert!(psi(t, sol.q, sol.q, pr, rule()).unwrap() - t > 0.0);
        }
    }

    #[test]
    fn zero_field_gives_zero_chi() {
        let sol = LimitSolution::solve(p(1.8, 0.0), rule()).unwrap();
        assert_eq!(sol.chi_q, 0.0);
    }

    #[test]
    fn covariance_propagation_closed_forms() {
        let r = rule();
        let t2 = 0.3f64.tanh().powi(2);
        let c = propagate_covariance(0.64, 0.8, 6, p(0.0, 0.3), r).unwrap();
        for k in 2..=6 {
            for l in 2..=6 {
                assert!((c.get(k, l).unwrap() - t2).abs() < 1e-15);
            }
        }
        let c = propagate_covariance(0.0, 0.0, 5, p(1.5, 0.0), r).unwrap();
        assert!(c.q_table.iter().flatten().all(|&x| x == 0.0));
        assert!(matches!(propagate_covariance(0.25, 0.6, 3, p(1.0, 0.1), r), Err(Error::Domain(_))));
    }

    #[test]
    fn covariance_table_recursion_and_limit() {
        let r = rule();
        let pr = p(1.0, 0.5);
        let c0 = 0.5f64.tanh();
        let c = propagate_covariance(c0 * c0, c0, 60, pr, r).unwrap();
        for k in 1..60 {
            let dk = c.get(k, k).unwrap();
            assert_eq!(c.get(k + 1, 1).unwrap(), chi(dk, pr, r).unwrap() * c0);
            for l in 1..60 {
                let want = psi(c.get(k, l).unwrap(), dk, c.get(l, l).unwrap(), pr, r).unwrap();
                if l < k {
                    assert_eq!(c.get(k + 1, l + 1).unwrap(), want);
                }
                let bound = (c.get(k, k).unwrap() * c.get(l, l).unwrap()).sqrt();
                assert!(c.get(k, l).unwrap().abs() <= bound + 1e-12);
            }
        }
        let q = solve_q(pr, r, DEFAULT_TOL).unwrap();
        assert!((c.get(60, 60).unwrap() - q).abs() < 1e-6);
    }

    #[test]
    fn kappa_map_examples() {
        let r = rule();
        let pr = p(1.2, 0.4);
        let q = solve_q(pr, r, DEFAULT_TOL).unwrap();
        assert!((kappa_map(1.0, q, q, pr, r).unwrap() - 1.0).abs() < 1e-10);
        for x in [-0.8, 0.0, 0.5] {
            assert!((kappa_map(x, 0.3, 0.6, p(0.0, 0.4), r).unwrap() - 1.0).abs() < 1e-14);
        }
        assert!(kappa_map(0.5, 0.0, 0.3, pr, r).is_err());
        assert!(kappa_map(0.5, 0.3, 0.3, p(1.0, 0.0), r).is_ok());

        let pr = p(2.0, 0.1);
        let mut last = f64::NEG_INFINITY;
        for i in 0..100 {
            let x = -1.0 + 2.0 * i as f64 / 99.0;
            let f = kappa_map(x, 0.5, 0.7, pr, r).unwrap();
            assert!(f > last);
            last = f;
        }
    }

    #[test]
    fn order_doubling_is_stable() {
        let coarse = rule();
        let fine = QuadratureRule::gauss_hermite(2 * DEFAULT_ORDER).unwrap();
        for &(b, h) in &[(0.5, 0.0), (1.0, 0.3), (1.5, 1.0), (2.0, 0.5)] {
            let pr = p(b, h);
            for x in [0.1, 0.5, 1.0] {
                assert!((phi(x, pr, coarse).unwrap() - phi(x, pr, &fine).unwrap()).abs() < 1e-9);
                assert!((chi(x, pr, coarse).unwrap() - chi(x, pr, &fine).unwrap()).abs() < 1e-9);
                let t = 0.4 * x;
                let a = psi(t, x, 0.8, pr, coarse).unwrap();
                let bb = psi(t, x, 0.8, pr, &fine).unwrap();
                assert!((a - bb).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn psi_symmetric_and_bounded(
            beta in -2.0f64..2.0, h in -1.0f64..1.0,
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, rho in -1.0f64..1.0,
        ) {
            let pr = p(beta, h);
            let t = rho * (t1 * t2).sqrt();
            let a = psi(t, t1, t2, pr, rule()).unwrap();
            let b = psi(t, t2, t1, pr, rule()).unwrap();
            // The two orderings use different factorizations, so they agree
            // to quadrature accuracy only.
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a.abs() <= 1.0);
        }

        #[test]
        fn psi_increasing_in_covariance(
            beta in 0.1f64..2.5, h in -1.0f64..1.0,
            t1 in 0.05f64..1.0, t2 in 0.05f64..1.0,
            r1 in -1.0f64..1.0, r2 in -1.0f64..1.0,
        ) {
            prop_assume!((r1 - r2).abs() > 1e-3);
            let pr = p(beta, h);
            let s = (t1 * t2).sqrt();
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(psi(lo * s, t1, t2, pr, rule()).unwrap() < psi(hi * s, t1, t2, pr, rule()).unwrap());
        }

        #[test]
        fn phi_stays_in_unit_interval(beta in -3.0f64..3.0, h in -2.0f64..2.0, x in 0.0f64..3.0) {
            let v = phi(x, p(beta, h), rule()).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
