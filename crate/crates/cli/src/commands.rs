//! The subcommands as functions from a configuration to named output files.
//! Nothing here touches the filesystem, so results can be compared in memory.

use rayon::prelude::*;
use serde_json::Value;
use tapamp::ensemble::{check_scaling_design, run_ensemble, scaling_fit, EnsembleReport, FitStatus, ScalingQuantity};
use tapamp::quadrature::DEFAULT_ORDER;
use tapamp::{LimitSolution, ModelParams, QuadratureRule};

use crate::config::{ensemble_config, phase_config};
use crate::output::{csv_bytes, num, to_json, RunManifest, MANIFEST_FILE};
use crate::CliError;

pub type Files = Vec<(String, Vec<u8>)>;

fn finish(command: &str, config: Value, seeds: Vec<u64>, mut files: Files) -> Result<Files, CliError> {
    let manifest = RunManifest::new(command, config, seeds, &files);
    files.push((MANIFEST_FILE.to_string(), to_json(&manifest)?));
    Ok(files)
}

fn q_mc_csv(report: &EnsembleReport) -> Result<Vec<u8>, CliError> {
    let mut rows = Vec::new();
    for size in &report.sizes {
        for (a, row) in size.q_mc.iter().enumerate() {
            for (b, e) in row.iter().enumerate() {
                let det = report.q_det.q_table[a][b];
                rows.push(vec![size.n.to_string(), (a + 1).to_string(), (b + 1).to_string(), num(e.mean), num(e.se), num(det)]);
            }
        }
    }
    csv_bytes(&["n", "k", "l", "mean", "se", "q_det"], &rows)
}

fn pseudo_conv_csv(report: &EnsembleReport) -> Result<Vec<u8>, CliError> {
    let expected = 2.0 * (report.limit.q - report.limit.q_tilde);
    let mut rows = Vec::new();
    for size in &report.sizes {
        for (j, e) in size.pseudo_conv.iter().enumerate() {
            rows.push(vec![size.n.to_string(), (j + 2).to_string(), num(e.mean), num(e.se), num(expected)]);
        }
    }
    csv_bytes(&["n", "k", "mean", "se", "limit"], &rows)
}

fn clt_csv(report: &EnsembleReport) -> Result<Vec<u8>, CliError> {
    let b2 = report.config.beta * report.config.beta;
    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
    let mut rows = Vec::new();
    for size in &report.sizes {
        let Some(clt) = &size.clt_stats else { continue };
        for f in &clt.fields {
            let target = b2 * report.q_det.get(f.iterate, f.iterate).unwrap_or(f64::NAN);
            rows.push(vec![
                size.n.to_string(),
                f.site.to_string(),
                f.iterate.to_string(),
                num(f.mean),
                num(f.variance.mean),
                num(f.variance.se),
                num(target),
                opt(f.skewness),
                opt(f.excess_kurtosis),
            ]);
        }
    }
    csv_bytes(
        &["n", "site", "iterate", "mean", "variance", "variance_se", "target", "skewness", "excess_kurtosis"],
        &rows,
    )
}

/// Ensemble run: `report.json`, `q_mc.csv`, `pseudo_conv.csv`, `clt.csv`
/// when fields are tracked, and the manifest.
pub fn simulate(config: Value) -> Result<Files, CliError> {
    let cfg = ensemble_config(config)?;
    let report = run_ensemble(&cfg)?;
    let mut files = vec![
        ("report.json".to_string(), to_json(&report)?),
        ("q_mc.csv".to_string(), q_mc_csv(&report)?),
        ("pseudo_conv.csv".to_string(), pseudo_conv_csv(&report)?),
    ];
    if report.sizes.iter().any(|s| s.clt_stats.is_some()) {
        files.push(("clt.csv".to_string(), clt_csv(&report)?));
    }
    finish("simulate", serde_json::to_value(&cfg).expect("config serializes"), report.seeds, files)
}

/// Limit quantities over a `(β, h)` grid: `phase.csv` and the manifest.
pub fn phase(config: Value) -> Result<Files, CliError> {
    let cfg = phase_config(config.clone())?;
    let points = cfg.points()?;
    let rule = QuadratureRule::gauss_hermite(cfg.order.unwrap_or(DEFAULT_ORDER))?;
    let solutions = points
        .par_iter()
        .map(|&(beta, h)| LimitSolution::solve(ModelParams::new(beta, h)?, &rule))
        .collect::<tapamp::Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = solutions
        .iter()
        .map(|s| {
            vec![num(s.params.beta), num(s.params.h), num(s.q), num(s.q_tilde), num(s.at_residual), num(s.chi_q)]
        })
        .collect();
    let files = vec![("phase.csv".to_string(), csv_bytes(&["beta", "h", "q", "q_tilde", "at_residual", "chi_q"], &rows)?)];
    finish("phase", config, Vec::new(), files)
}

/// Log-log slopes against `N`: `scaling.csv` with the per-size means,
/// `scaling_fit.csv` with one slope per quantity, and the manifest.
pub fn scaling(config: Value, quantities: &[ScalingQuantity]) -> Result<Files, CliError> {
    if quantities.is_empty() {
        return Err(CliError::Usage("no scaling quantity requested".into()));
    }
    let mut cfg: tapamp::EnsembleConfig = serde_json::from_value(config.clone())
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    check_scaling_design(&cfg.sizes()?)?;
    for q in quantities {
        match q {
            ScalingQuantity::Epsilon | ScalingQuantity::Delta => cfg.track_derivatives = true,
            ScalingQuantity::ChoiceGap => cfg.compare_choices = true,
        }
    }
    if cfg.track_fields.is_none() {
        cfg.track_fields = Some(Vec::new());
    }
    let cfg = ensemble_config(serde_json::to_value(&cfg).expect("config serializes"))?;
    let report = run_ensemble(&cfg)?;
    let (mut means, mut fits) = (Vec::new(), Vec::new());
    for &q in quantities {
        let fit = scaling_fit(&report, q)?;
        let name = serde_json::to_value(q).expect("quantity serializes");
        let name = name.as_str().expect("unit variant").to_string();
        for (n, e) in fit.n_list.iter().zip(&fit.means) {
            means.push(vec![name.clone(), n.to_string(), num(e.mean), num(e.se)]);
        }
        let (status, cells) = match (fit.status, fit.fit) {
            (FitStatus::Ok, Some(f)) => ("ok", vec![num(f.slope), num(f.slope_half_width), num(f.intercept)]),
            _ => ("degenerate", vec![String::new(); 3]),
        };
        let mut row = vec![name, status.to_string()];
        row.extend(cells);
        fits.push(row);
    }
    let files = vec![
        ("scaling.csv".to_string(), csv_bytes(&["quantity", "n", "mean", "se"], &means)?),
        (
            "scaling_fit.csv".to_string(),
            csv_bytes(&["quantity", "status", "slope", "slope_half_width", "intercept"], &fits)?,
        ),
    ];
    finish("scaling", serde_json::to_value(&cfg).expect("config serializes"), report.seeds, files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn file<'a>(files: &'a Files, name: &str) -> &'a str {
        std::str::from_utf8(&files.iter().find(|(n, _)| n == name).unwrap().1).unwrap()
    }

    #[test]
    fn simulate_writes_expected_files() {
        let files = simulate(json!({"beta": 1.0, "h": 0.5, "n": 40, "k": 4, "replicas": 4, "seed": 3})).unwrap();
        let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["report.json", "q_mc.csv", "pseudo_conv.csv", "clt.csv", "manifest.json"]);
        assert_eq!(file(&files, "q_mc.csv").lines().count(), 1 + 16);
        assert!(file(&files, "report.json").contains("\"schema_version\": \"1.0\""));
        assert!(file(&files, "manifest.json").contains("\"seeds\""));
    }

    #[test]
    fn phase_rows_follow_the_grid() {
        let files = phase(json!({"beta": {"from": 0.0, "to": 1.0, "steps": 3}, "h": [0.0, 0.5], "order": 64})).unwrap();
        let csv = file(&files, "phase.csv");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "beta,h,q,q_tilde,at_residual,chi_q");
        assert_eq!(lines.len(), 7);
        // β = 0, h = 0.5: q = tanh²(0.5).
        let q: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
        assert!((q - 0.5f64.tanh().powi(2)).abs() < 1e-9);
        assert!(phase(json!({"beta": [], "h": 0.5})).is_err());
    }

    #[test]
    fn scaling_rejects_a_single_size() {
        let err = scaling(json!({"beta": 1.0, "h": 0.5, "n": 50, "k": 3, "replicas": 4}), &[ScalingQuantity::Epsilon])
            .unwrap_err();
        assert_eq!(err.exit_code(), crate::EXIT_USAGE);
        assert!(err.to_string().contains("design"), "{err}");
    }

    #[test]
    fn scaling_marks_degenerate_fits() {
        let cfg = json!({"beta": 0.0, "h": 0.5, "n_list": [10, 20, 40], "k": 3, "replicas": 3});
        let files = scaling(cfg, &[ScalingQuantity::Epsilon, ScalingQuantity::Delta]).unwrap();
        let fit = file(&files, "scaling_fit.csv");
        assert!(fit.lines().skip(1).all(|l| l.contains("degenerate")), "{fit}");
        assert_eq!(file(&files, "scaling.csv").lines().count(), 1 + 6);
    }
}
