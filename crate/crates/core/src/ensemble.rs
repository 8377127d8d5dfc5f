//! Disorder ensembles: many independent couplings matrices, one iteration per
//! replica, aggregated overlaps, field samples and error functionals, and the
//! diagnostics that compare them against the limit theory.
//!
//! Replica `r` uses the disorder seed `base_seed ^ r` unless explicit seeds
//! are given. Replicas run in parallel, but records are always reduced in
//! ascending seed order, so every aggregate is independent of scheduling and
//! of the order in which seeds were listed.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derivatives::{compute_epsilon_at, delta_table, PairSet, TangentWindow};
use crate::disorder::DisorderMatrix;
use crate::dynamics::{default_start, effective_field, IterationState, ModelParams, OnsagerChoice};
use crate::limit::{propagate_covariance, CovariancePropagation, LimitSolution};
use crate::quadrature::{QuadratureRule, DEFAULT_ORDER};
use crate::stats::{self, Estimate, LinearFit};
use crate::{Error, Result};

pub const SCHEMA_VERSION: &str = "1.0";

/// Largest size for which derivative tracking is allowed.
pub const MAX_DERIVATIVE_N: usize = 400;
/// Largest size for the re-centering choice, which carries all `N(N−1)/2`
/// tangent columns.
pub const MAX_FULL_TENSOR_N: usize = 256;

/// Accepts any `1.x` schema version.
pub fn check_schema_version(v: &str) -> Result<()> {
    let major = v.split('.').next().unwrap_or_default();
    let ours = SCHEMA_VERSION.split('.').next().unwrap_or_default();
    if major != ours {
        return Err(Error::Format(format!("unsupported schema version {v}; this build reads {ours}.x")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    Constant(f64),
    Vector(Vec<f64>),
}

/// Test-only corruptions of the iteration.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    OnsagerSign,
}

fn default_sites() -> Vec<usize> {
    vec![0, 1]
}

/// Flat JSON configuration of an ensemble run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<String>,
    pub beta: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    /// Number of iterates `m^{(1)}, …, m^{(k)}`.
    pub k: usize,
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub choice: OnsagerChoice,
    /// Defaults to the constant `tanh(h)` (or `0.5` at `h = 0`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSpec>,
    #[serde(default)]
    pub track_derivatives: bool,
    /// Zero-based sites whose incident pairs carry tangent columns.
    #[serde(default = "default_sites")]
    pub derivative_sites: Vec<usize>,
    /// Zero-based `(site, iterate)` pairs whose field `Y^{(iterate)}_site` is
    /// recorded. Defaults to sites `{0, 1}` at the last three iterates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_fields: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica_seeds: Option<Vec<u64>>,
    /// Also runs the other Onsager choice on each disorder sample and
    /// records the largest coordinate gap between the two trajectories.
    #[serde(default)]
    pub compare_choices: bool,
    #[doc(hidden)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_fault: Option<Fault>,
}

impl EnsembleConfig {
    /// Minimal configuration with every optional field at its default.
    pub fn new(beta: f64, h: f64, n: usize, k: usize, replicas: usize) -> Self {
        Self {
            schema_version: None,
            beta,
            h,
            n: Some(n),
            n_list: None,
            k,
            replicas,
            seed: 0,
            choice: OnsagerChoice::Classical,
            init: None,
            track_derivatives: false,
            derivative_sites: default_sites(),
            track_fields: None,
            replica_seeds: None,
            compare_choices: false,
            inject_fault: None,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::new(self.beta, self.h)
    }

    pub fn sizes(&self) -> Result<Vec<usize>> {
        match (&self.n, &self.n_list) {
            (Some(n), None) => Ok(vec![*n]),
            (None, Some(list)) if !list.is_empty() => Ok(list.clone()),
            (Some(_), Some(_)) => Err(Error::Configuration("give either n or n_list, not both".into())),
            _ => Err(Error::Configuration("missing field `n` (or `n_list`)".into())),
        }
    }

    /// Replica seeds in ascending order.
    pub fn seeds(&self) -> Result<Vec<u64>> {
        let mut seeds = match &self.replica_seeds {
            Some(s) => {
                if s.len() != self.replicas {
                    return Err(Error::Configuration(format!(
                        "replica_seeds has {} entries but replicas = {}",
                        s.len(),
                        self.replicas
                    )));
                }
                s.clone()
            }
            None => (0..self.replicas as u64).map(|r| self.seed ^ r).collect(),
        };
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Configuration("replica seeds must be distinct".into()));
        }
        Ok(seeds)
    }

    pub fn fields(&self) -> Vec<(usize, usize)> {
        match &self.track_fields {
            Some(f) => f.clone(),
            None => {
                let iterates: Vec<usize> = (self.k.saturating_sub(2).max(1)..=self.k).collect();
                [0usize, 1]
                    .iter()
                    .flat_map(|&s| iterates.iter().map(move |&j| (s, j)))
                    .collect()
            }
        }
    }

    pub fn init_vector(&self, n: usize) -> Result<Vec<f64>> {
        let v = match &self.init {
            None => default_start(self.params()?, n),
            Some(InitSpec::Constant(c)) => vec![*c; n],
            Some(InitSpec::Vector(v)) => {
                if v.len() != n {
                    return Err(Error::Configuration(format!(
                        "init vector has {} entries but n = {n}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if let Some(x) = v.iter().find(|x| !(x.abs() <= 1.0)) {
            return Err(Error::Configuration(format!("init entry {x} outside [-1, 1]")));
        }
        Ok(v)
    }

    /// `(q1, m_bar)` implied by the initialization.
    pub fn init_moments(&self) -> Result<(f64, f64)> {
        let v = match &self.init {
            Some(InitSpec::Vector(v)) => v.clone(),
            Some(InitSpec::Constant(c)) => vec![*c],
            None => default_start(self.params()?, 1),
        };
        let n = v.len() as f64;
        let q1 = crate::pairwise_sum(&v.iter().map(|x| x * x).collect::<Vec<_>>()) / n;
        let m_bar = crate::pairwise_sum(&v) / n;
        Ok((q1, m_bar))
    }

    fn needs_full_tensor(&self) -> bool {
        self.choice == OnsagerChoice::SteinRecentering || self.compare_choices
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = &self.schema_version {
            check_schema_version(v)?;
        }
        self.params()?;
        let sizes = self.sizes()?;
        if self.k == 0 {
            return Err(Error::Configuration("k must be >= 1".into()));
        }
        if self.replicas < 2 {
            return Err(Error::Configuration(format!(
                "replicas must be >= 2 to report standard errors, got {}",
                self.replicas
            )));
        }
        self.seeds()?;
        for &n in &sizes {
            if n < 2 {
                return Err(Error::Configuration(format!("n must be >= 2, got {n}")));
            }
            self.init_vector(n)?;
            if self.track_derivatives && n > MAX_DERIVATIVE_N {
                return Err(Error::ResourceGuard(format!(
                    "derivative tracking limited to n <= {MAX_DERIVATIVE_N}, got {n}"
                )));
            }
            if self.needs_full_tensor() && n > MAX_FULL_TENSOR_N {
                return Err(Error::ResourceGuard(format!(
                    "the re-centering choice is limited to n <= {MAX_FULL_TENSOR_N}, got {n}"
                )));
            }
            for &(site, iterate) in &self.fields() {
                if site >= n || iterate == 0 || iterate > self.k {
                    return Err(Error::Configuration(format!(
                        "tracked field ({site}, {iterate}) invalid for n = {n}, k = {}",
                        self.k
                    )));
                }
            }
            if self.track_derivatives {
                if self.derivative_sites.is_empty() {
                    return Err(Error::Configuration("derivative_sites is empty".into()));
                }
                if let Some(s) = self.derivative_sites.iter().find(|&&s| s >= n) {
                    return Err(Error::Configuration(format!("derivative site {s} outside 0..{n}")));
                }
            }
        }
        Ok(())
    }
}

/// Everything kept from one disorder sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaRecord {
    pub seed: u64,
    pub q_table: Vec<Vec<f64>>,
    /// `pseudo_distance(j, j−1)` for `j = 2, …, k`.
    pub pseudo_conv: Vec<f64>,
    /// Values of the tracked fields, in configuration order.
    pub fields: Vec<f64>,
    /// Mean of `ℰ²` over the derivative sites at the last iterate.
    pub epsilon_sq: Option<f64>,
    /// Mean of `Δ²` over all sites and the tracked pairs at the last iterate.
    pub delta_sq: Option<f64>,
    pub choice_gap: Option<f64>,
}

struct Trajectory {
    state: IterationState,
    fields: Vec<f64>,
    epsilon_sq: Option<f64>,
    delta_sq: Option<f64>,
}

fn mean_sq(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.map(|x| x * x).collect();
    crate::pairwise_sum(&v) / v.len() as f64
}

fn run_trajectory(
    cfg: &EnsembleConfig,
    g: &DisorderMatrix,
    m1: &[f64],
    choice: OnsagerChoice,
    fields: &[(usize, usize)],
    derivatives: bool,
) -> Result<Trajectory> {
    let params = cfg.params()?;
    let n = g.n();
    let mut state = IterationState::init(m1, choice)?;
    if cfg.inject_fault == Some(Fault::OnsagerSign) {
        state = state.with_flipped_onsager();
    }
    let pairs = match (choice, derivatives) {
        (OnsagerChoice::SteinRecentering, _) => Some(Arc::new(PairSet::full(n))),
        (OnsagerChoice::Classical, true) => Some(Arc::new(PairSet::incident_to(n, &cfg.derivative_sites)?)),
        (OnsagerChoice::Classical, false) => None,
    };
    let mut window = pairs.map(TangentWindow::new);
    let mut values = vec![0.0; fields.len()];

    let record = |values: &mut [f64], iterate: usize, y: &[f64]| {
        for (slot, &(site, j)) in values.iter_mut().zip(fields) {
            if j == iterate {
                *slot = y[site];
            }
        }
    };

    while state.k() < cfg.k {
        state.step(g, params, window.as_ref().map(|w| w.current()))?;
        if let Some(w) = window.as_mut() {
            w.advance(&state, g, params)?;
        }
        record(&mut values, state.k() - 1, state.y_current().expect("just stepped"));
    }
    if fields.iter().any(|&(_, j)| j == cfg.k) {
        let on = state.onsager_at(cfg.k, params, window.as_ref().map(|w| w.current()))?;
        let y: Vec<f64> = effective_field(g, state.current(), params)?
            .iter()
            .zip(&on)
            .map(|(f, o)| f - o)
            .collect();
        record(&mut values, cfg.k, &y);
    }

    let (mut epsilon_sq, mut delta_sq) = (None, None);
    if derivatives {
        let w = window.as_ref().expect("derivative tracking builds a window");
        let d = w.current();
        let eps = compute_epsilon_at(d, &state, params, &cfg.derivative_sites)?;
        epsilon_sq = Some(mean_sq(eps.into_iter()));
        let d_on = w.onsager_derivative(&state, params)?;
        let table = delta_table(d, &d_on, g, params)?;
        let touching = d
            .pairs()
            .pairs()
            .iter()
            .enumerate()
            .filter(|(_, (y, z))| cfg.derivative_sites.contains(y) || cfg.derivative_sites.contains(z))
            .map(|(p, _)| p);
        let rows: Vec<f64> = touching.flat_map(|p| table.row(p).to_vec()).collect();
        delta_sq = Some(mean_sq(rows.into_iter()));
    }
    Ok(Trajectory { state, fields: values, epsilon_sq, delta_sq })
}

/// One replica at size `n` with disorder seed `seed`.
pub fn run_replica(cfg: &EnsembleConfig, n: usize, seed: u64) -> Result<ReplicaRecord> {
    let g = DisorderMatrix::sample(n, seed)?;
    let m1 = cfg.init_vector(n)?;
    let fields = cfg.fields();
    let main = run_trajectory(cfg, &g, &m1, cfg.choice, &fields, cfg.track_derivatives)?;
    let choice_gap = if cfg.compare_choices {
        let other = match cfg.choice {
            OnsagerChoice::Classical => OnsagerChoice::SteinRecentering,
            OnsagerChoice::SteinRecentering => OnsagerChoice::Classical,
        };
        let alt = run_trajectory(cfg, &g, &m1, other, &[], false)?;
        let mut gap = 0.0f64;
        for j in 1..=cfg.k {
            for (a, b) in main.state.m(j).unwrap().iter().zip(alt.state.m(j).unwrap()) {
                gap = gap.max((a - b).abs());
            }
        }
        Some(gap)
    } else {
        None
    };
    let state = &main.state;
    let pseudo_conv = (2..=cfg.k).map(|j| state.pseudo_distance(j, j - 1)).collect::<Result<_>>()?;
    Ok(ReplicaRecord {
        seed,
        q_table: state.q_table(),
        pseudo_conv,
        fields: main.fields,
        epsilon_sq: main.epsilon_sq,
        delta_sq: main.delta_sq,
        choice_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSamples {
    pub site: usize,
    pub iterate: usize,
    /// One value per replica, in ascending seed order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub site: usize,
    pub iterate: usize,
    pub mean: f64,
    pub variance: Estimate,
    /// `None` when the sample is constant.
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCovariance {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub covariance: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltStats {
    pub fields: Vec<FieldStats>,
    pub covariances: Vec<FieldCovariance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorScaling {
    pub k: usize,
    pub epsilon_sq: Estimate,
    pub delta_sq: Estimate,
}

/// Aggregates at one system size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub n: usize,
    /// Mean and standard error of `q^{(k,k')}` with zero-based indices.
    pub q_mc: Vec<Vec<Estimate>>,
    /// `pseudo_distance(j, j−1)` for `j = 2, …, k`.
    pub pseudo_conv: Vec<Estimate>,
    pub field_samples: Vec<FieldSamples>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clt_stats: Option<CltStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_scaling: Option<ErrorScaling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_gap: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub schema_version: String,
    pub config: EnsembleConfig,
    /// Replica seeds in the order used for every reduction.
    pub seeds: Vec<u64>,
    pub limit: LimitSolution,
    pub q_det: CovariancePropagation,
    pub sizes: Vec<SizeReport>,
}

fn column<T>(records: &[ReplicaRecord], f: impl Fn(&ReplicaRecord) -> T) -> Vec<T> {
    records.iter().map(f).collect()
}

fn clt_stats(samples: &[FieldSamples]) -> Result<CltStats> {
    let fields = samples
        .iter()
        .map(|s| {
            Ok(FieldStats {
                site: s.site,
                iterate: s.iterate,
                mean: stats::mean(&s.values)?,
                variance: stats::covariance(&s.values, &s.values)?,
                skewness: stats::skewness(&s.values).ok(),
                excess_kurtosis: stats::excess_kurtosis(&s.values).ok(),
            })
        })
        .collect::<Result<_>>()?;
    let mut covariances = Vec::new();
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            covariances.push(FieldCovariance {
                a: (a.site, a.iterate),
                b: (b.site, b.iterate),
                covariance: stats::covariance(&a.values, &b.values)?,
            });
        }
    }
    Ok(CltStats { fields, covariances })
}

fn aggregate(cfg: &EnsembleConfig, n: usize, records: &[ReplicaRecord]) -> Result<SizeReport> {
    let k = cfg.k;
    let q_mc = (0..k)
        .map(|a| (0..k).map(|b| Estimate::of(&column(records, |r| r.q_table[a][b]))).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let pseudo_conv = (0..k.saturating_sub(1))
        .map(|j| Estimate::of(&column(records, |r| r.pseudo_conv[j])))
        .collect::<Result<_>>()?;
    let field_samples: Vec<FieldSamples> = cfg
        .fields()
        .iter()
        .enumerate()
        .map(|(i, &(site, iterate))| FieldSamples { site, iterate, values: column(records, |r| r.fields[i]) })
        .collect();
    let clt = if field_samples.is_empty() || records.len() < 3 {
        None
    } else {
        Some(clt_stats(&field_samples)?)
    };
    let error_scaling = if cfg.track_derivatives {
        Some(ErrorScaling {
            k,
            epsilon_sq: Estimate::of(&column(records, |r| r.epsilon_sq.unwrap_or(0.0)))?,
            delta_sq: Estimate::of(&column(records, |r| r.delta_sq.unwrap_or(0.0)))?,
        })
    } else {
        None
    };
    let choice_gap = if cfg.compare_choices {
        Some(Estimate::of(&column(records, |r| r.choice_gap.unwrap_or(0.0)))?)
    } else {
        None
    };
    Ok(SizeReport { n, q_mc, pseudo_conv, field_samples, clt_stats: clt, error_scaling, choice_gap })
}

pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleReport> {
    cfg.validate()?;
    let params = cfg.params()?;
    let seeds = cfg.seeds()?;
    let rule = QuadratureRule::gauss_hermite(DEFAULT_ORDER)?;
    let limit = LimitSolution::solve(params, &rule)?;
    let (q1, m_bar) = cfg.init_moments()?;
    let q_det = propagate_covariance(q1, m_bar, cfg.k, params, &rule)?;
    let sizes = cfg
        .sizes()?
        .into_iter()
        .map(|n| {
            let records: Vec<ReplicaRecord> =
                seeds.par_iter().map(|&s| run_replica(cfg, n, s)).collect::<Result<_>>()?;
            aggregate(cfg, n, &records)
        })
        .collect::<Result<_>>()?;
    Ok(EnsembleReport { schema_version: SCHEMA_VERSION.to_string(), config: cfg.clone(), seeds, limit, q_det, sizes })
}

/// Thresholds for the field CLT comparison.
pub const CLT_SKEW_MAX: f64 = 0.15;
pub const CLT_KURT_MAX: f64 = 0.3;
pub const CLT_VAR_SE: f64 = 5.0;
pub const CLT_CROSS_SITE_SE: f64 = 4.0;
pub const CLT_SAME_SITE_SE: f64 = 5.0;
pub const CLT_MIN_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub empirical: Estimate,
    pub target: f64,
    /// `|empirical − target| / se`.
    pub z: f64,
    pub limit: f64,
    pub pass: bool,
}

impl MomentCheck {
    fn new(a: (usize, usize), b: (usize, usize), empirical: Estimate, target: f64, limit: f64) -> Self {
        let diff = (empirical.mean - target).abs();
        let z = if empirical.se > 0.0 {
            diff / empirical.se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self { a, b, empirical, target, z, limit, pass: z < limit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltDiagnostic {
    pub n: usize,
    pub pooled_samples: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub variances: Vec<MomentCheck>,
    pub same_site: Vec<MomentCheck>,
    pub cross_site: Vec<MomentCheck>,
    /// Large-`k` targets `β²q` and `β²q̃`, for reference.
    pub beta2_q: f64,
    pub beta2_q_tilde: f64,
}

impl CltDiagnostic {
    pub fn pass(&self) -> bool {
        self.skewness.abs() < CLT_SKEW_MAX
            && self.excess_kurtosis.abs() < CLT_KURT_MAX
            && self.variances.iter().chain(&self.same_site).chain(&self.cross_site).all(|c| c.pass)
    }
}

/// Field statistics at every size against the Gaussian limit with
/// covariance `β² q^{(k,k')}` on one site and `0` across sites. Finite-`k`
/// targets come from the deterministic table; the limit supplies the
/// large-`k` reference values.
pub fn clt_check(report: &EnsembleReport, limit: &LimitSolution) -> Result<Vec<CltDiagnostic>> {
    let b2 = limit.params.beta * limit.params.beta;
    let target = |k: usize, l: usize| -> Result<f64> {
        report
            .q_det
            .get(k, l)
            .map(|q| b2 * q)
            .ok_or_else(|| Error::InvalidIndex(format!("no deterministic entry ({k}, {l})")))
    };
    report
        .sizes
        .iter()
        .map(|size| {
            let samples = &size.field_samples;
            if samples.is_empty() {
                return Err(Error::InsufficientSamples { needed: CLT_MIN_SAMPLES, have: 0 });
            }
            let have = samples[0].values.len();
            if have < CLT_MIN_SAMPLES {
                return Err(Error::InsufficientSamples { needed: CLT_MIN_SAMPLES, have });
            }
            let mut pooled = Vec::with_capacity(have * samples.len());
            let mut variances = Vec::new();
            for s in samples {
                let m = stats::mean(&s.values)?;
                let var = stats::covariance(&s.values, &s.values)?;
                let sd = var.mean.sqrt();
                if sd > 0.0 {
                    pooled.extend(s.values.iter().map(|x| (x - m) / sd));
                }
                let key = (s.site, s.iterate);
                variances.push(MomentCheck::new(key, key, var, target(s.iterate, s.iterate)?, CLT_VAR_SE));
            }
            let (mut same_site, mut cross_site) = (Vec::new(), Vec::new());
            for (i, a) in samples.iter().enumerate() {
                for b in &samples[i + 1..] {
                    let cov = stats::covariance(&a.values, &b.values)?;
                    let (ka, kb) = ((a.site, a.iterate), (b.site, b.iterate));
                    if a.site == b.site {
                        if a.iterate != b.iterate {
                            same_site.push(MomentCheck::new(ka, kb, cov, target(a.iterate, b.iterate)?, CLT_SAME_SITE_SE));
                        }
                    } else {
                        cross_site.push(MomentCheck::new(ka, kb, cov, 0.0, CLT_CROSS_SITE_SE));
                    }
                }
            }
            let (skewness, excess_kurtosis) = if pooled.len() >= 4 {
                (stats::skewness(&pooled)?, stats::excess_kurtosis(&pooled)?)
            } else {
                (0.0, 0.0)
            };
            Ok(CltDiagnostic {
                n: size.n,
                pooled_samples: pooled.len(),
                skewness,
                excess_kurtosis,
                variances,
                same_site,
                cross_site,
                beta2_q: b2 * limit.q,
                beta2_q_tilde: b2 * limit.q_tilde,
            })
        })
        .collect()
}

/// Plateau thresholds for the pseudo-convergence dichotomy.
pub const PLATEAU_SATISFIED_MAX: f64 = 0.02;
pub const PLATEAU_VIOLATED_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtDichotomy {
    pub n: usize,
    pub k: usize,
    /// Mean of `pseudo_distance(k, k−1)` across replicas.
    pub plateau: Estimate,
    /// `2(q − q̃)`.
    pub expected: f64,
    pub at_residual: f64,
    pub at_satisfied: bool,
    pub pass: bool,
}

/// Pseudo-convergence at the last iterate of every size in `report`.
pub fn at_dichotomy_from_report(report: &EnsembleReport, limit: &LimitSolution) -> Result<Vec<AtDichotomy>> {
    let expected = 2.0 * (limit.q - limit.q_tilde);
    report
        .sizes
        .iter()
        .map(|s| {
            let plateau = *s
                .pseudo_conv
                .last()
                .ok_or_else(|| Error::Configuration("pseudo-convergence needs k >= 2".into()))?;
            let pass = if limit.at_satisfied {
                plateau.mean < PLATEAU_SATISFIED_MAX
            } else {
                (plateau.mean - expected).abs() < PLATEAU_VIOLATED_TOL
            };
            Ok(AtDichotomy {
                n: s.n,
                k: report.config.k,
                plateau,
                expected,
                at_residual: limit.at_residual,
                at_satisfied: limit.at_satisfied,
                pass,
            })
        })
        .collect()
}

pub fn at_dichotomy_check(cfg: &EnsembleConfig, limit: &LimitSolution) -> Result<Vec<AtDichotomy>> {
    at_dichotomy_from_report(&run_ensemble(cfg)?, limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingQuantity {
    Epsilon,
    Delta,
    ChoiceGap,
}

impl std::str::FromStr for ScalingQuantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(Self::Epsilon),
            "delta" => Ok(Self::Delta),
            "choice_gap" => Ok(Self::ChoiceGap),
            _ => Err(Error::Configuration(format!("unknown scaling quantity `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    /// Some mean vanished, so no log-log fit exists.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub quantity: ScalingQuantity,
    pub n_list: Vec<usize>,
    /// Mean over replicas at each size: `ℰ²`, `Δ²`, or the choice gap.
    pub means: Vec<Estimate>,
    pub status: FitStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<LinearFit>,
}

/// Checks that a size list can support a slope fit.
pub fn check_scaling_design(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 3 {
        return Err(Error::Design(format!("scaling needs at least 3 sizes, got {}", sizes.len())));
    }
    let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    if *hi < 4 * *lo {
        return Err(Error::Design(format!("sizes must span at least a factor 4, got {lo}..{hi}")));
    }
    Ok(())
}

/// Log-log slope of a quantity against `N` from the per-size means of a report.
pub fn scaling_fit(report: &EnsembleReport, quantity: ScalingQuantity) -> Result<ScalingFit> {
    let n_list: Vec<usize> = report.sizes.iter().map(|s| s.n).collect();
    check_scaling_design(&n_list)?;
    let means = report
        .sizes
        .iter()
        .map(|s| {
            let missing = || Error::Configuration(format!("report lacks {quantity:?} data"));
            match quantity {
                ScalingQuantity::Epsilon => s.error_scaling.as_ref().map(|e| e.epsilon_sq).ok_or_else(missing),
                ScalingQuantity::Delta => s.error_scaling.as_ref().map(|e| e.delta_sq).ok_or_else(missing),
                ScalingQuantity::ChoiceGap => s.choice_gap.ok_or_else(missing),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if means.iter().any(|e| !(e.mean > 0.0)) {
        return Ok(ScalingFit { quantity, n_list, means, status: FitStatus::Degenerate, fit: None });
    }
    let xs: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = means.iter().map(|e| e.mean.ln()).collect();
    let fit = stats::ols(&xs, &ys)?;
    Ok(ScalingFit { quantity, n_list, means, status: FitStatus::Ok, fit: Some(fit) })
}

/// Runs the ensemble over `n_list`, with the tracking the quantity needs
/// switched on, and fits the log-log slope.
pub fn scaling_study(cfg: &EnsembleConfig, quantity: ScalingQuantity) -> Result<(EnsembleReport, ScalingFit)> {
    check_scaling_design(&cfg.sizes()?)?;
    let mut cfg = cfg.clone();
    match quantity {
        ScalingQuantity::Epsilon | ScalingQuantity::Delta => cfg.track_derivatives = true,
        ScalingQuantity::ChoiceGap => cfg.compare_choices = true,
    }
    if cfg.track_fields.is_none() {
        cfg.track_fields = Some(Vec::new());
    }
    let report = run_ensemble(&cfg)?;
    let fit = scaling_fit(&report, quantity)?;
    Ok((report, fit))
}
