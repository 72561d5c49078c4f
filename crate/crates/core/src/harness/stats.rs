use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{MetricsReport, Structure};
use crate::error::{Error, Result};

/// Largest sample size enumerated exactly.
pub const EXACT_LIMIT: usize = 20;
pub const MONTE_CARLO_DRAWS: usize = 100_000;
const MONTE_CARLO_SEED: u64 = 0x5eed_f11b;

/// Two-sided paired sign-flip permutation test on `x − y`.
pub fn permutation_test(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len();
    if n == 0 {
        return Ok(1.0);
    }
    let observed = d.iter().sum::<f64>().abs();
    let tol = 1e-12 * (1.0 + d.iter().map(|v| v.abs()).sum::<f64>());
    let extreme = |s: f64| s.abs() >= observed - tol;
    if n <= EXACT_LIMIT {
        let total = 1u64 << n;
        let mut hits = 0u64;
        for mask in 0..total {
            let s: f64 = d
                .iter()
                .enumerate()
                .map(|(i, v)| if mask >> i & 1 == 1 { -v } else { *v })
                .sum();
            hits += extreme(s) as u64;
        }
        Ok(hits as f64 / total as f64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(MONTE_CARLO_SEED);
        let mut hits = 0usize;
        for _ in 0..MONTE_CARLO_DRAWS {
            let s: f64 = d
                .iter()
                .map(|v| if rng.random::<bool>() { -v } else { *v })
                .sum();
            hits += extreme(s) as usize;
        }
        Ok((hits + 1) as f64 / (MONTE_CARLO_DRAWS + 1) as f64)
    }
}

fn round_half_up(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    ((v * f) + 0.5 + 1e-9).floor() / f
}

/// `MM.MM ± SS.SS` in percent.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!(
        "{:.2} ± {:.2}",
        round_half_up(mean * 100.0, 2),
        round_half_up(std * 100.0, 2)
    )
}

/// One row per method; columns abnormal pancreas, PDAC mass, pancreatic duct.
pub fn report_table(reports: &[(String, MetricsReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::config("report needs at least one method"));
    }
    let name_w = reports.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let cell_w = 17;
    let mut out = format!("{:<name_w$}", "method");
    for s in Structure::ALL {
        out.push_str(&format!(" | {:<cell_w$}", s.to_string()));
    }
    out = out.trim_end().to_string();
    out.push('\n');
    for (name, r) in reports {
        let mut row = format!("{name:<name_w$}");
        for s in Structure::ALL {
            row.push_str(&format!(" | {:<cell_w$}", format_cell(r.mean(s), r.std(s))));
        }
        out.push_str(row.trim_end());
        out.push('\n');
    }
    Ok(out)
}
