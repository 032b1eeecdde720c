//! Report emission: JSON, CSV, and SVG sweep plots, plus the run manifest.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::Real;

use super::{
    metric_names, CellReport, ExperimentConfig, Report, StageTimings, TransformKind,
    METRIC_SHIFTED_MEAN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    SvgPlots,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "svg-plots" | "svg" => Ok(ReportFormat::SvgPlots),
            other => Err(Error::invalid(format!(
                "unknown report format '{other}' (expected json|csv|svg-plots)"
            ))),
        }
    }
}

/// Write the report in the requested format. JSON is the full structured
/// report; CSV has one row per (cell, seed, metric); the SVG renders the
/// budget sweep and the variants-per-source sweep with per-seed error bars,
/// one polyline per shift domain.
pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => serde_json::to_vec_pretty(report)?,
        ReportFormat::Csv => render_csv(report).into_bytes(),
        ReportFormat::SvgPlots => render_svg(report).into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn render_csv(report: &Report) -> String {
    let mut out = String::from("cell,transform,rho,m,seed,metric,value\n");
    let names = metric_names(&report.shifts);
    for cell in &report.cells {
        for seed in &cell.per_seed {
            for name in &names {
                if let Some(value) = seed.metrics.get(name) {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        cell.id,
                        cell.cell.transform,
                        cell.cell.rho,
                        cell.cell.m,
                        seed.seed,
                        name,
                        value
                    );
                }
            }
        }
    }
    out
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 48.0;

struct Series {
    label: String,
    /// (x, mean, std) per grid point.
    points: Vec<(Real, Real, Real)>,
}

/// Sweep cells for one transform, varying `rho` at fixed `m` or vice versa.
fn sweep<'a>(
    report: &'a Report,
    vary_rho: bool,
) -> Vec<&'a CellReport> {
    let transport: Vec<&CellReport> = report
        .cells
        .iter()
        .filter(|c| c.cell.transform == TransformKind::Transport && c.error.is_none())
        .collect();
    if transport.is_empty() {
        return Vec::new();
    }
    // anchor the fixed coordinate at its most common value
    let anchor = |values: Vec<usize>| -> usize {
        let mut best = values[0];
        let mut best_count = 0;
        for &v in &values {
            let count = values.iter().filter(|&&x| x == v).count();
            if count > best_count {
                best = v;
                best_count = count;
            }
        }
        best
    };
    if vary_rho {
        let fixed_m = anchor(transport.iter().map(|c| c.cell.m).collect());
        let mut cells: Vec<&CellReport> = transport
            .into_iter()
            .filter(|c| c.cell.m == fixed_m)
            .collect();
        cells.sort_by(|a, b| a.cell.rho.partial_cmp(&b.cell.rho).unwrap());
        cells
    } else {
        let rhos: Vec<usize> = transport
            .iter()
            .map(|c| (c.cell.rho * 1e6) as usize)
            .collect();
        let fixed = anchor(rhos);
        let mut cells: Vec<&CellReport> = transport
            .into_iter()
            .filter(|c| (c.cell.rho * 1e6) as usize == fixed)
            .collect();
        cells.sort_by_key(|c| c.cell.m);
        cells
    }
}

fn series_for(cells: &[&CellReport], shifts: &[String], vary_rho: bool) -> Vec<Series> {
    shifts
        .iter()
        .map(|metric| {
            let points = cells
                .iter()
                .map(|c| {
                    let x = if vary_rho { c.cell.rho } else { c.cell.m as Real };
                    let mean = c.aggregate.mean.get(metric).copied().unwrap_or(0.0);
                    let std = c.aggregate.std.get(metric).copied().unwrap_or(0.0);
                    (x, mean, std)
                })
                .collect();
            Series {
                label: metric.clone(),
                points,
            }
        })
        .collect()
}

fn panel(svg: &mut String, origin_x: f64, title: &str, series: &[Series]) {
    let x0 = origin_x + MARGIN;
    let y0 = MARGIN;
    let w = PANEL_W - 2.0 * MARGIN;
    let h = PANEL_H - 2.0 * MARGIN;
    let _ = writeln!(
        svg,
        r##"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#888"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{title}</text>"#,
        x0 + w / 2.0,
        y0 - 14.0
    );
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    if xs.is_empty() {
        return;
    }
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (xmax - xmin).max(1e-9);
    let to_x = |v: f64| x0 + (v - xmin) / span * w;
    let to_y = |acc: f64| y0 + (1.0 - acc.clamp(0.0, 1.0)) * h;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
    for (i, s) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|(x, m, _)| format!("{:.2},{:.2}", to_x(*x), to_y(*m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for (x, m, sd) in &s.points {
            let px = to_x(*x);
            let _ = writeln!(
                svg,
                r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="{color}" stroke-width="1"/>"#,
                to_y(m + sd),
                to_y(m - sd)
            );
            let _ = writeln!(
                svg,
                r#"<circle cx="{px:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                to_y(*m)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" fill="{color}">{}</text>"#,
            x0 + 4.0,
            y0 + h + 14.0 + 11.0 * i as f64,
            s.label
        );
    }
}

fn render_svg(report: &Report) -> String {
    let shift_metrics: Vec<String> = report
        .shifts
        .iter()
        .map(|s| format!("shifted_zero_shot:{s}"))
        .collect();
    let mut svg = String::new();
    let total_h = PANEL_H + 20.0 + 11.0 * (shift_metrics.len() as f64 + 1.0);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{total_h}" viewBox="0 0 {} {total_h}">"#,
        2.0 * PANEL_W,
        2.0 * PANEL_W
    );
    let rho_cells = sweep(report, true);
    panel(
        &mut svg,
        0.0,
        &format!("budget sweep ({METRIC_SHIFTED_MEAN} by shift)"),
        &series_for(&rho_cells, &shift_metrics, true),
    );
    let m_cells = sweep(report, false);
    panel(
        &mut svg,
        PANEL_W,
        "variants-per-source sweep",
        &series_for(&m_cells, &shift_metrics, false),
    );
    svg.push_str("</svg>\n");
    svg
}

/// Run manifest: configuration echo, content hash, and wall-clock per
/// stage. This is the only artifact that carries timing data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub wall_clock_seconds: StageTimings,
}

pub fn write_manifest(
    config: &ExperimentConfig,
    timings: &StageTimings,
    path: &Path,
) -> Result<()> {
    let manifest = Manifest {
        config: config.clone(),
        config_hash: config.hash(),
        wall_clock_seconds: timings.clone(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::super::{run_experiment, ShiftName};
    use super::*;

    fn small_report() -> (ExperimentConfig, Report, StageTimings) {
        let cfg = tiny_config();
        let (report, timings) = run_experiment(&cfg).unwrap();
        (cfg, report, timings)
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        let (_, report, _) = small_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        emit_report(&report, ReportFormat::Json, &path).unwrap();
        let parsed: Report =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn csv_row_count_is_cells_by_seeds_by_metrics() {
        let (cfg, report, _) = small_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&report, ReportFormat::Csv, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let data_rows = text.lines().count() - 1;
        let cells = cfg.cells().len();
        let metrics = metric_names(&cfg.dataset.shifts).len();
        assert_eq!(data_rows, cells * cfg.seeds.len() * metrics);
    }

    #[test]
    fn svg_is_well_formed_with_one_polyline_per_shift_per_panel() {
        let (cfg, report, _) = small_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plots.svg");
        emit_report(&report, ReportFormat::SvgPlots, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        let polylines = text.matches("<polyline").count();
        assert_eq!(polylines, 2 * cfg.dataset.shifts.len());
        // every inner element is self-closing or a text element
        for line in text.lines().skip(1) {
            if line.is_empty() || line == "</svg>" {
                continue;
            }
            assert!(line.starts_with('<'), "stray content: {line}");
            assert!(
                line.ends_with("/>") || (line.starts_with("<text") && line.ends_with("</text>")),
                "unclosed element: {line}"
            );
        }
    }

    #[test]
    fn unknown_format_rejected() {
        assert!(ReportFormat::from_str("yaml").is_err());
        assert_eq!(
            ReportFormat::from_str("svg-plots").unwrap(),
            ReportFormat::SvgPlots
        );
    }

    #[test]
    fn manifest_written_with_timings() {
        let (cfg, _, timings) = small_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        write_manifest(&cfg, &timings, &path).unwrap();
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(manifest.config_hash, cfg.hash());
        assert!(manifest.wall_clock_seconds.contains_key("diffusion"));
        let _ = ShiftName::Background;
    }
}
