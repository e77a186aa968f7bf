//! Deterministic report emission.
//!
//! JSON output formats every float as a 17-significant-digit scientific
//! literal so values round-trip exactly and re-runs are byte-identical.
//! CSVs use '.' decimals, ',' separators, '\n' line ends and a mandatory
//! header row.

use crate::stats::{ComparisonTable, DensityExport, MonteCarloReport};
use crate::system::fmt_f64;
use serde::Serialize;
use std::io;

struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            // JSON has no literal for non-finite values.
            writer.write_all(b"null")
        }
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.write_f64(writer, value as f64)
    }
}

/// Serialize with exact float formatting (compact layout).
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFormatter);
    value.serialize(&mut ser).expect("report serialization cannot fail");
    String::from_utf8(out).expect("json is utf-8")
}

/// Wrapper adding provenance to any payload.
#[derive(Serialize)]
pub struct Provenanced<'a, T: Serialize> {
    pub tool_version: &'static str,
    pub seed: u64,
    pub config_echo: &'a str,
    pub payload: &'a T,
}

pub fn with_provenance<T: Serialize>(payload: &T, seed: u64, config_echo: &str) -> String {
    to_json(&Provenanced {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed,
        config_echo,
        payload,
    })
}

fn push_row(out: &mut String, cols: &[String]) {
    out.push_str(&cols.join(","));
    out.push('\n');
}

fn f(x: f64) -> String {
    fmt_f64(x)
}

/// checkpoints.csv: n, statistic, coordinate, value, stderr.
pub fn checkpoints_csv(report: &MonteCarloReport) -> String {
    let mut out = String::from("n,statistic,coordinate,value,stderr\n");
    for ck in &report.checkpoints {
        let n = ck.n.to_string();
        let mut vec_stats = |name: &str, stats: &crate::stats::VectorStats| {
            for (i, m) in stats.mean.iter().enumerate() {
                push_row(
                    &mut out,
                    &[n.clone(), format!("{name}_mean"), i.to_string(), f(*m), String::new()],
                );
            }
            for (i, s) in stats.per_coord_std.iter().enumerate() {
                push_row(
                    &mut out,
                    &[n.clone(), format!("{name}_std"), i.to_string(), f(*s), String::new()],
                );
            }
            push_row(
                &mut out,
                &[
                    n.clone(),
                    format!("{name}_expected_norm"),
                    String::new(),
                    f(stats.expected_norm),
                    f(stats.expected_norm_stderr),
                ],
            );
        };
        if let Some(s) = &ck.pr_fast_scaled {
            vec_stats("pr_fast_scaled", s);
        }
        if let Some(s) = &ck.pr_slow_scaled {
            vec_stats("pr_slow_scaled", s);
        }
        if let Some(s) = &ck.pr_fast_sqrtn {
            vec_stats("pr_fast_sqrtn", s);
        }
        if let Some(s) = &ck.pr_slow_sqrtn {
            vec_stats("pr_slow_sqrtn", s);
        }
        if let Some(s) = &ck.last_fast_scaled {
            vec_stats("last_fast_scaled", s);
        }
        if let Some(s) = &ck.last_slow_scaled {
            vec_stats("last_slow_scaled", s);
        }
        if let Some(s) = &ck.last_slow_sqrtn {
            vec_stats("last_slow_sqrtn", s);
        }
        for (name, stat) in [
            ("pr_err_fast_norm", &ck.pr_err_fast_norm),
            ("pr_err_slow_norm", &ck.pr_err_slow_norm),
            ("pr_err_combined_norm", &ck.pr_err_combined_norm),
        ] {
            if let Some(s) = stat {
                push_row(
                    &mut out,
                    &[n.clone(), name.to_string(), String::new(), f(s.mean), f(s.stderr)],
                );
            }
        }
        if let Some(w1) = &ck.w1_slow {
            for w in w1 {
                push_row(
                    &mut out,
                    &[
                        n.clone(),
                        "w1_pr_slow_scaled".to_string(),
                        w.coord.to_string(),
                        f(w.value),
                        f(w.stderr),
                    ],
                );
            }
        }
        if let Some(d) = &ck.diag {
            for (name, value, stderr) in [
                (
                    "delta_x_tilde_over_alpha",
                    d.delta_x_tilde_over_alpha,
                    d.delta_x_tilde_over_alpha_stderr,
                ),
                ("delta_y_over_gamma", d.delta_y_over_gamma, d.delta_y_over_gamma_stderr),
                ("delta_x_tilde", d.deltas.delta_x_tilde, f64::NAN),
                ("delta_x_hat", d.deltas.delta_x, f64::NAN),
                ("delta_y", d.deltas.delta_y, f64::NAN),
            ] {
                push_row(
                    &mut out,
                    &[
                        n.clone(),
                        name.to_string(),
                        String::new(),
                        f(value),
                        if stderr.is_nan() { String::new() } else { f(stderr) },
                    ],
                );
            }
        }
    }
    out
}

/// density.csv: checkpoint, grid_x, kde, hist. The histogram value is the
/// normalized density of the bin containing grid_x (0 outside the range).
pub fn density_csv(densities: &[(u64, DensityExport)]) -> String {
    let mut out = String::from("checkpoint,grid_x,kde,hist\n");
    for (n, d) in densities {
        for (gx, kv) in d.grid.iter().zip(&d.kde) {
            let hist = hist_value(d, *gx);
            push_row(&mut out, &[n.to_string(), f(*gx), f(*kv), f(hist)]);
        }
    }
    out
}

fn hist_value(d: &DensityExport, x: f64) -> f64 {
    let edges = &d.bin_edges;
    if x < edges[0] || x > *edges.last().unwrap() {
        return 0.0;
    }
    let mut idx = 0;
    while idx + 1 < edges.len() - 1 && x >= edges[idx + 1] {
        idx += 1;
    }
    d.bin_density[idx]
}

/// comparison.csv: schedule_id, n, which, mean_error, ci_lo, ci_hi,
/// paired_diff, paired_lo, paired_hi (paired columns reference schedule 0
/// and are filled for the slow rows).
pub fn comparison_csv(table: &ComparisonTable) -> String {
    let mut out = String::from(
        "schedule_id,n,which,mean_error,ci_lo,ci_hi,paired_diff,paired_lo,paired_hi\n",
    );
    for cell in &table.cells {
        push_row(
            &mut out,
            &[
                cell.schedule_id.to_string(),
                cell.n.to_string(),
                "fast".to_string(),
                f(cell.mean_fast),
                f(cell.fast_ci.0),
                f(cell.fast_ci.1),
                String::new(),
                String::new(),
                String::new(),
            ],
        );
        push_row(
            &mut out,
            &[
                cell.schedule_id.to_string(),
                cell.n.to_string(),
                "slow".to_string(),
                f(cell.mean_slow),
                f(cell.slow_ci.0),
                f(cell.slow_ci.1),
                f(cell.paired_slow_diff),
                f(cell.paired_slow_ci.0),
                f(cell.paired_slow_ci.1),
            ],
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_floats_are_exact_and_stable() {
        #[derive(Serialize)]
        struct T {
            x: f64,
            y: f64,
        }
        let t = T { x: 0.1 + 0.2, y: f64::INFINITY };
        let s = to_json(&t);
        assert!(s.contains("3.0000000000000004e-1"), "{s}");
        assert!(s.contains("null"));
        let s2 = to_json(&T { x: 0.1 + 0.2, y: f64::INFINITY });
        assert_eq!(s, s2);
    }

    #[test]
    fn json_float_round_trips() {
        let vals = [1.0 / 3.0, 2.0_f64.sqrt(), 1e-300, -7.25e17];
        for v in vals {
            let s = format!("{v:.16e}");
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, v, "{s}");
        }
    }

    #[test]
    fn hist_lookup_covers_edges() {
        let d = DensityExport {
            bin_edges: vec![0.0, 1.0, 2.0],
            bin_density: vec![0.25, 0.75],
            grid: vec![],
            kde: vec![],
            bandwidth: 0.1,
        };
        assert_eq!(hist_value(&d, -0.5), 0.0);
        assert_eq!(hist_value(&d, 0.5), 0.25);
        assert_eq!(hist_value(&d, 1.5), 0.75);
        assert_eq!(hist_value(&d, 2.0), 0.75);
        assert_eq!(hist_value(&d, 2.5), 0.0);
    }
}
