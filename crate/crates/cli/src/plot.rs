//! Minimal SVG time-series plots: stacked panels sharing the time axis.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::CliError;

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const GAP: f64 = 45.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Numeric CSV: a header row and one column per field.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let bad = |msg: String| CliError::Csv {
        path: path.display().to_string(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(bad("empty file".into()));
    }
    let mut columns = vec![Vec::new(); names.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: `{field}` is not a number", row + 2)))?;
            columns[col].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(bad("no data rows".into()));
    }
    Ok(Table { names, columns })
}

#[derive(Debug, Clone)]
pub struct Line {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub lines: Vec<Line>,
}

/// Output-like columns share one panel, everything else gets its own.
pub fn panels_for(table: &Table) -> Vec<Panel> {
    const OUTPUT: [&str; 4] = ["y_ref", "y", "y_noisy", "y_hat0"];
    let mut out_panel = Panel {
        title: "output".into(),
        lines: Vec::new(),
    };
    let mut rest = Vec::new();
    for (name, values) in table.names.iter().zip(&table.columns).skip(1) {
        let line = Line {
            label: name.clone(),
            values: values.clone(),
        };
        if OUTPUT.contains(&name.as_str()) {
            out_panel.lines.push(line);
        } else {
            rest.push(Panel {
                title: name.clone(),
                lines: vec![line],
            });
        }
    }
    // draw the reference and noisy data first so they sit underneath
    out_panel.lines.sort_by_key(|l| OUTPUT.iter().position(|n| *n == l.label));
    let mut panels = Vec::new();
    if !out_panel.lines.is_empty() {
        panels.push(out_panel);
    }
    // put the input right after the output, matching the usual layout
    rest.sort_by_key(|p| p.title != "u");
    panels.extend(rest);
    panels
}

fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let f = if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    };
    f * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo, 5);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        let pad = 0.5 * (1.0 + lo.abs()) * 1e-3;
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render panels over a shared x axis into a standalone SVG document.
pub fn render(title: &str, x_label: &str, x: &[f64], panels: &[Panel]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let height = MARGIN_TOP + panels.len() as f64 * (PANEL_HEIGHT + GAP) + 10.0;
    let (x0, x1) = range(x.iter().copied());
    let sx = |v: f64| MARGIN_LEFT + (v - x0) / (x1 - x0) * plot_w;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for (k, panel) in panels.iter().enumerate() {
        let top = MARGIN_TOP + k as f64 * (PANEL_HEIGHT + GAP);
        let (y0, y1) = range(panel.lines.iter().flat_map(|l| l.values.iter().copied()));
        let sy = |v: f64| top + PANEL_HEIGHT - (v - y0) / (y1 - y0) * PANEL_HEIGHT;
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_LEFT}" y="{top}" width="{plot_w}" height="{PANEL_HEIGHT}" fill="none" stroke="#333"/>"##
        );
        for t in ticks(y0, y1) {
            let py = sy(t);
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                MARGIN_LEFT + plot_w,
                MARGIN_LEFT - 5.0,
                py + 4.0,
                format_tick(t)
            );
        }
        for t in ticks(x0, x1) {
            let px = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{px:.2}" y1="{top}" x2="{px:.2}" y2="{:.2}" stroke="#eee"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                top + PANEL_HEIGHT,
                top + PANEL_HEIGHT + 14.0,
                format_tick(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
            top + PANEL_HEIGHT / 2.0,
            top + PANEL_HEIGHT / 2.0,
            escape(&panel.title)
        );
        for (i, line) in panel.lines.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut pts = String::new();
            for (xv, yv) in x.iter().zip(&line.values) {
                if xv.is_finite() && yv.is_finite() {
                    let _ = write!(pts, "{:.2},{:.2} ", sx(*xv), sy(*yv));
                }
            }
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                pts.trim_end()
            );
            let lx = MARGIN_LEFT + plot_w - 110.0;
            let ly = top + 14.0 + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{}" y="{ly:.2}">{}</text>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0,
                lx + 22.0,
                escape(&line.label)
            );
        }
    }
    let last_bottom = MARGIN_TOP + panels.len() as f64 * (PANEL_HEIGHT + GAP) - GAP + 30.0;
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{last_bottom:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(x_label)
    );
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Plot one CSV file; the first column is the x axis.
pub fn plot_table(title: &str, table: &Table) -> String {
    render(title, &table.names[0], &table.columns[0], &panels_for(table))
}

/// Overlay the input and output of several scenarios of a dataset.
pub fn plot_scenarios(title: &str, scenarios: &[(String, Table)]) -> Result<String, CliError> {
    let first = &scenarios.first().ok_or_else(|| CliError::Csv {
        path: title.into(),
        msg: "no scenarios".into(),
    })?;
    let mut out = Panel {
        title: "y".into(),
        lines: Vec::new(),
    };
    let mut input = Panel {
        title: "u".into(),
        lines: Vec::new(),
    };
    for (name, t) in scenarios {
        let get = |c: &str| {
            t.column(c).map(<[f64]>::to_vec).ok_or_else(|| CliError::Csv {
                path: name.clone(),
                msg: format!("missing column `{c}`"),
            })
        };
        out.lines.push(Line {
            label: name.clone(),
            values: get("y_noisy")?,
        });
        input.lines.push(Line {
            label: name.clone(),
            values: get("u")?,
        });
    }
    let x = first.1.columns[0].clone();
    Ok(render(title, &first.1.names[0], &x, &[out, input]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(nice_step(10.0, 5), 2.0);
        assert_eq!(nice_step(0.9, 5), 0.2);
        assert_eq!(ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(format_tick(0.6000000000000001), "0.6");
    }

    #[test]
    fn closed_loop_columns_overlay() {
        let names: Vec<String> = ["t", "y_ref", "y", "y_hat0", "y_hat1", "y_hat2", "u"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let table = Table {
            columns: vec![vec![0.0, 1.0]; names.len()],
            names,
        };
        let panels = panels_for(&table);
        assert_eq!(panels[0].title, "output");
        assert_eq!(panels[0].lines.len(), 3);
        assert_eq!(panels[1].title, "u");
        assert_eq!(panels.len(), 4);
        let svg = plot_table("loop", &table);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 6);
    }

    #[test]
    fn flat_series_still_renders() {
        let table = Table {
            names: vec!["t".into(), "u".into()],
            columns: vec![vec![0.0, 1.0, 2.0], vec![3.0; 3]],
        };
        assert!(!plot_table("flat", &table).contains("NaN"));
    }
}
