//! Wide curve tables and their SVG rendering.
//!
//! A curve table is a CSV whose first column is the x axis and whose other
//! columns are series named `<label>_<vel|tempo|art>`; the plot draws one
//! panel per attribute with every series of that attribute. Other columns
//! are carried along but not drawn.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::render::ATTR_NAMES;

#[derive(Clone, Debug, PartialEq)]
pub struct CurveTable {
    pub x_label: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

impl CurveTable {
    pub fn new(x_label: impl Into<String>, x: Vec<f64>) -> Self {
        Self { x_label: x_label.into(), x, series: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.x.len(), "series length");
        self.series.push((name.into(), values));
    }

    /// Adds `<label>_vel`, `<label>_tempo`, `<label>_art` from a T x 3 matrix.
    pub fn push_attrs(&mut self, label: &str, m: &crate::Matrix) {
        for (a, name) in ATTR_NAMES.iter().enumerate() {
            self.push(format!("{label}_{name}"), m.col(a));
        }
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![self.x_label.clone()];
        header.extend(self.series.iter().map(|s| s.0.clone()));
        out.write_record(&header)?;
        for (i, x) in self.x.iter().enumerate() {
            let mut rec = vec![x.to_string()];
            rec.extend(self.series.iter().map(|s| if s.1[i].is_nan() { String::new() } else { s.1[i].to_string() }));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Empty cells read as NaN (gaps).
    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 {
            return Err(Error::Parse { line: 1, msg: "need an x column and at least one series".into() });
        }
        let mut t = CurveTable::new(header[0].clone(), Vec::new());
        t.series = header[1..].iter().map(|h| (h.clone(), Vec::new())).collect();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let num = |s: &str| -> Result<f64> {
                if s.trim().is_empty() {
                    return Ok(f64::NAN);
                }
                s.trim().parse().map_err(|e| Error::Parse { line, msg: format!("'{s}': {e}") })
            };
            let x = num(&rec[0])?;
            if x.is_nan() {
                return Err(Error::Parse { line, msg: "empty x value".into() });
            }
            t.x.push(x);
            for (j, s) in t.series.iter_mut().enumerate() {
                s.1.push(num(rec.get(j + 1).unwrap_or(""))?);
            }
        }
        if t.x.is_empty() {
            return Err(Error::Parse { line: 2, msg: "no rows".into() });
        }
        Ok(t)
    }
}

const PALETTE: [&str; 8] = ["#888888", "#4fa3e0", "#1f4fb4", "#111111", "#e8820c", "#2ca02c", "#c03a2b", "#8e44ad"];
const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 180.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_V: f64 = 28.0;

fn colour(label: &str, idx: usize) -> &'static str {
    match label {
        "truth" | "gt" | "input" => PALETTE[0],
        "recon" => PALETTE[1],
        "sketch" | "alpha" => PALETTE[5],
        _ => PALETTE[2 + idx % (PALETTE.len() - 2)],
    }
}

/// Three stacked panels (velocity, tempo, articulation) sharing the x axis.
pub fn render_svg(t: &CurveTable) -> Result<String> {
    let panels: Vec<Vec<(&str, &[f64])>> = ATTR_NAMES
        .iter()
        .map(|a| {
            let suffix = format!("_{a}");
            t.series
                .iter()
                .filter(|(_, v)| v.iter().any(|y| y.is_finite()))
                .filter_map(|(n, v)| n.strip_suffix(suffix.as_str()).map(|label| (label, v.as_slice())))
                .collect()
        })
        .collect();
    if panels.iter().all(Vec::is_empty) {
        return Err(Error::Parse { line: 1, msg: "no columns named <series>_vel, _tempo or _art".into() });
    }
    let (x0, x1) = t.x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let x_span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let height = ATTR_NAMES.len() as f64 * (PANEL_H + MARGIN_V) + MARGIN_V;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let titles = ["MIDIVelocity", "IOIRatio", "Articulation"];
    for (p, series) in panels.iter().enumerate() {
        let top = MARGIN_V + p as f64 * (PANEL_H + MARGIN_V);
        let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
        let (mut y0, mut y1) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !y0.is_finite() {
            (y0, y1) = (-1.0, 1.0);
        }
        if y1 - y0 < 1e-9 {
            (y0, y1) = (y0 - 0.5, y1 + 0.5);
        }
        let px = |x: f64| MARGIN_L + (x - x0) / x_span * plot_w;
        let py = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#cccccc"/>"##
        );
        let _ = writeln!(s, r#"<text x="{MARGIN_L}" y="{:.1}" font-weight="bold">{}</text>"#, top - 6.0, titles[p]);
        for (v, anchor) in [(y0, top + PANEL_H), (y1, top + 10.0)] {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{anchor:.1}" text-anchor="end">{v:.2}</text>"#, MARGIN_L - 4.0);
        }
        if y0 < 0.0 && y1 > 0.0 {
            let (x_end, y_zero) = (MARGIN_L + plot_w, py(0.0));
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_L}" x2="{x_end:.1}" y1="{y_zero:.1}" y2="{y_zero:.1}" stroke="#eeeeee"/>"##
            );
        }
        for (i, (label, values)) in series.iter().enumerate() {
            let c = colour(label, i);
            // NaN splits the line into separate runs
            let mut runs: Vec<Vec<String>> = vec![Vec::new()];
            for (x, y) in t.x.iter().zip(values.iter()) {
                if y.is_finite() {
                    runs.last_mut().expect("non-empty").push(format!("{:.2},{:.2}", px(*x), py(*y)));
                } else if !runs.last().expect("non-empty").is_empty() {
                    runs.push(Vec::new());
                }
            }
            for run in runs.iter().filter(|r| !r.is_empty()) {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
                    run.join(" ")
                );
            }
            let ly = top + 14.0 + i as f64 * 14.0;
            let lx = MARGIN_L + plot_w + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 16.0,
                lx + 20.0,
                ly + 4.0,
                escape(label)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        height - 8.0,
        escape(&t.x_label)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
