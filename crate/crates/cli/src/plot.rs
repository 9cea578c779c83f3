//! Accuracy-vs-label-fraction figures.
//!
//! One figure per (dataset, mode): x = label fraction, y = held-out top-1
//! accuracy, one curve per initialization. Output is vector SVG with an
//! adjacent CSV holding the exact plotted numbers (6 significant digits),
//! so no value exists only as ink.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use tempossl_core::eval::{read_eval_rows, EvalError, EvalMode, EvalRow};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no rows found in {0} report file(s)")]
    Empty(usize),
    #[error("fraction grids differ for dataset {dataset} ({mode}): {grids}")]
    GridMismatch {
        dataset: String,
        mode: String,
        grids: String,
    },
}

const COLORS: [&str; 6] = ["#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4", "#42d4f4"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;

/// Format with 6 significant digits; the CSV round-trip contract.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".into();
    }
    let exponent = v.abs().log10().floor() as i32;
    let decimals = (5 - exponent).max(0) as usize;
    format!("{v:.decimals$}")
}

/// One curve: init name -> accuracy per fraction.
struct Figure {
    dataset: String,
    mode: EvalMode,
    fractions: Vec<f64>,
    curves: BTreeMap<String, Vec<f64>>,
}

type GroupedRows = BTreeMap<(String, String), BTreeMap<String, Vec<(f64, f64)>>>;

fn collect_figures(rows: &[EvalRow]) -> Result<Vec<Figure>, PlotError> {
    // group rows by (dataset, mode, init), preserving fraction order
    let mut grouped: GroupedRows = BTreeMap::new();
    for row in rows {
        grouped
            .entry((row.dataset.clone(), row.mode.as_str().to_string()))
            .or_default()
            .entry(row.init.clone())
            .or_default()
            .push((row.fraction, row.top1_accuracy));
    }
    let mut figures = Vec::new();
    for ((dataset, mode_str), curves_raw) in grouped {
        let mode = if mode_str == "linear_probe" {
            EvalMode::LinearProbe
        } else {
            EvalMode::FineTune
        };
        let mut fractions: Option<Vec<f64>> = None;
        let mut curves = BTreeMap::new();
        let mut grids: Vec<String> = Vec::new();
        for (init, mut points) in curves_raw {
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let grid: Vec<f64> = points.iter().map(|p| p.0).collect();
            grids.push(format!("{init}: {grid:?}"));
            match &fractions {
                None => fractions = Some(grid),
                Some(existing) => {
                    if *existing != grid {
                        return Err(PlotError::GridMismatch {
                            dataset,
                            mode: mode_str,
                            grids: grids.join("; "),
                        });
                    }
                }
            }
            curves.insert(init, points.into_iter().map(|p| p.1).collect());
        }
        figures.push(Figure {
            dataset,
            mode,
            fractions: fractions.unwrap_or_default(),
            curves,
        });
    }
    Ok(figures)
}

/// Read reports, group into figures, and write `figures/<dataset>_<mode>.svg`
/// plus the CSV sidecar. Returns the figure file paths.
pub fn emit_plots(report_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let mut rows = Vec::new();
    for path in report_paths {
        rows.extend(read_eval_rows(path)?);
    }
    if rows.is_empty() {
        return Err(PlotError::Empty(report_paths.len()));
    }
    fs::create_dir_all(out_dir).map_err(|e| PlotError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let mut produced = Vec::new();
    for fig in collect_figures(&rows)? {
        let base = format!("{}_{}", sanitize(&fig.dataset), fig.mode.as_str());
        let svg_path = out_dir.join(format!("{base}.svg"));
        let csv_path = out_dir.join(format!("{base}.csv"));
        fs::write(&svg_path, render_svg(&fig)).map_err(|e| PlotError::Io {
            path: svg_path.clone(),
            source: e,
        })?;
        fs::write(&csv_path, render_csv(&fig)).map_err(|e| PlotError::Io {
            path: csv_path.clone(),
            source: e,
        })?;
        produced.push(svg_path);
    }
    Ok(produced)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn render_csv(fig: &Figure) -> String {
    let mut out = String::from("fraction");
    for init in fig.curves.keys() {
        out.push(',');
        out.push_str(init);
    }
    out.push('\n');
    for (i, &f) in fig.fractions.iter().enumerate() {
        out.push_str(&format_sig6(f));
        for values in fig.curves.values() {
            out.push(',');
            out.push_str(&format_sig6(values[i]));
        }
        out.push('\n');
    }
    out
}

fn render_svg(fig: &Figure) -> String {
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_min = fig.fractions.first().copied().unwrap_or(0.0);
    let x_max = fig.fractions.last().copied().unwrap_or(1.0);
    let x_span = (x_max - x_min).max(1e-9);
    let x_of = |f: f64| MARGIN_L + (f - x_min) / x_span * plot_w;
    let y_of = |acc: f64| MARGIN_T + (1.0 - acc.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    ));
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push_str(&format!(
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{} — {}</text>"#,
        WIDTH / 2.0,
        fig.dataset,
        fig.mode.as_str().replace('_', " ")
    ));

    // axes
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        MARGIN_T + plot_h
    ));
    // y ticks at 0, .25, .5, .75, 1
    for i in 0..=4 {
        let acc = i as f64 / 4.0;
        let y = y_of(acc);
        svg.push_str(&format!(
            r#"<line x1="{}" y1="{y}" x2="{MARGIN_L}" y2="{y}" stroke="black"/>"#,
            MARGIN_L - 5.0
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{acc:.2}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0
        ));
        if i > 0 {
            svg.push_str(&format!(
                r##"<line x1="{MARGIN_L}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/>"##,
                MARGIN_L + plot_w
            ));
        }
    }
    // x ticks at the fraction grid
    for &f in &fig.fractions {
        let x = x_of(f);
        let y = MARGIN_T + plot_h;
        svg.push_str(&format!(
            r#"<line x1="{x}" y1="{y}" x2="{x}" y2="{}" stroke="black"/>"#,
            y + 5.0
        ));
        svg.push_str(&format!(
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{f}</text>"#,
            y + 18.0
        ));
    }
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">label fraction</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 16.0
    ));
    svg.push_str(&format!(
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">top-1 accuracy</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    // curves + legend
    for (ci, (init, values)) in fig.curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        let points: Vec<String> = fig
            .fractions
            .iter()
            .zip(values.iter())
            .map(|(&f, &a)| format!("{:.2},{:.2}", x_of(f), y_of(a)))
            .collect();
        svg.push_str(&format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        ));
        for (&f, &a) in fig.fractions.iter().zip(values.iter()) {
            svg.push_str(&format!(
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                x_of(f),
                y_of(a)
            ));
        }
        let ly = MARGIN_T + 8.0 + 18.0 * ci as f64;
        svg.push_str(&format!(
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            MARGIN_L + plot_w - 150.0,
            MARGIN_L + plot_w - 126.0
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{init}</text>"#,
            MARGIN_L + plot_w - 120.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::format_sig6;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig6(0.0), "0.00000");
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(0.8234567), "0.823457");
        assert_eq!(format_sig6(0.01), "0.0100000");
        assert_eq!(format_sig6(0.999999), "0.999999");
        assert_eq!(format_sig6(123.4567), "123.457");
    }
}
