//! Static SVG line charts from result CSVs.
//!
//! The plot spec uses the config syntax with a single `[plot]` section:
//!
//! ```text
//! [plot]
//! x = dataset_size
//! y = test_loss
//! group = whitening_mode
//! log_x = true
//! log_y = false
//! title = Test loss
//! where = row_kind=terminal, optimizer=gradient_flow
//! ```
//!
//! Rows sharing a group and an x value are averaged; the band is the mean
//! ± 2 standard errors across those rows. Output is byte-deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RawConfig;
use crate::error::{io_err, HarnessError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    pub group: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
    pub title: String,
    pub filters: Vec<(String, String)>,
}

impl PlotSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let raw = RawConfig::parse_with(text, &[("plot", &["x", "y", "group", "log_x", "log_y", "title", "where"])])?;
        let need = |k: &str| {
            raw.value("plot", k)
                .map(str::to_string)
                .ok_or_else(|| HarnessError::Spec(format!("plot spec needs `{k}`")))
        };
        let mut filters = Vec::new();
        if let Some(w) = raw.value("plot", "where") {
            for clause in w.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                let (k, v) = clause
                    .split_once('=')
                    .ok_or_else(|| HarnessError::Spec(format!("filter {clause:?} is not column=value")))?;
                filters.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(Self {
            x: need("x")?,
            y: need("y")?,
            group: raw.value("plot", "group").map(str::to_string),
            log_x: raw.parse_or("plot", "log_x", false)?,
            log_y: raw.parse_or("plot", "log_y", false)?,
            title: raw.value("plot", "title").unwrap_or("").to_string(),
            filters,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub x: f64,
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

/// Groups, in sorted order, each with points sorted by x.
pub fn aggregate(csv_text: &str, spec: &PlotSpec) -> Result<Vec<(String, Vec<SeriesPoint>)>> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Spec(format!("results have no column {name:?}")))
    };
    let xi = col(&spec.x)?;
    let yi = col(&spec.y)?;
    let gi = spec.group.as_deref().map(col).transpose()?;
    let filters: Vec<(usize, &str)> = spec
        .filters
        .iter()
        .map(|(k, v)| Ok((col(k)?, v.as_str())))
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if filters.iter().any(|(i, v)| rec.get(*i) != Some(*v)) {
            continue;
        }
        let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        let (Some(x), Some(y)) = (parse(xi), parse(yi)) else {
            continue;
        };
        if (spec.log_x && x <= 0.0) || (spec.log_y && y <= 0.0) {
            continue;
        }
        let g = gi.and_then(|i| rec.get(i)).unwrap_or("all").to_string();
        groups
            .entry(g)
            .or_default()
            .entry(x.to_bits())
            .or_insert_with(|| (x, Vec::new()))
            .1
            .push(y);
    }
    Ok(groups
        .into_iter()
        .map(|(g, pts)| {
            let mut series: Vec<SeriesPoint> = pts
                .into_values()
                .map(|(x, ys)| {
                    let n = ys.len() as f64;
                    let mean = ys.iter().sum::<f64>() / n;
                    let se = if ys.len() > 1 {
                        (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
                    } else {
                        0.0
                    };
                    SeriesPoint {
                        x,
                        mean,
                        se,
                        count: ys.len(),
                    }
                })
                .collect();
            series.sort_by(|a, b| a.x.total_cmp(&b.x));
            (g, series)
        })
        .collect())
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let vals: Vec<f64> = values.map(|v| if log { v.log10() } else { v }).filter(|v| v.is_finite()).collect();
        let (mut lo, mut hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if log { 0.5 } else { lo.abs().max(1.0) * 0.5 };
            lo -= pad;
            hi += pad;
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.max(f64::MIN_POSITIVE).log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.floor() as i32, self.hi.ceil() as i32);
            let inside = |v: &f64| (self.lo..=self.hi).contains(&v.log10());
            let decades: Vec<f64> = (a..=b).map(|e| 10f64.powi(e)).filter(inside).collect();
            if decades.len() >= 3 {
                return decades;
            }
            let ticks: Vec<f64> = (a..=b)
                .flat_map(|e| [1.0, 2.0, 5.0].map(|m| m * 10f64.powi(e)))
                .filter(inside)
                .collect();
            if !ticks.is_empty() {
                return ticks;
            }
            return vec![10f64.powf((self.lo + self.hi) / 2.0)];
        }
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + 1e-9 * step {
            out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
            t += step;
        }
        out
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(series: &[(String, Vec<SeriesPoint>)], spec: &PlotSpec) -> String {
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let xs = Axis::new(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.x)), spec.log_x);
    let ys = Axis::new(
        series
            .iter()
            .flat_map(|(_, p)| p.iter().flat_map(|q| [q.mean - 2.0 * q.se, q.mean + 2.0 * q.se]))
            .filter(|v| !spec.log_y || *v > 0.0),
        spec.log_y,
    );
    let px = |v: f64| LEFT + xs.frac(v) * pw;
    let py = |v: f64| TOP + (1.0 - ys.frac(v)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        LEFT + pw / 2.0,
        escape(&spec.title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    for t in xs.ticks() {
        let x = px(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/><text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            label(t)
        );
    }
    for t in ys.ticks() {
        let y = py(t);
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            label(t)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}{}</text>",
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&spec.x),
        if spec.log_x { " (log)" } else { "" }
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}{}</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&spec.y),
        if spec.log_y { " (log)" } else { "" }
    );

    for (gi, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let floor = |v: f64| if spec.log_y && v <= 0.0 { 10f64.powf(ys.lo) } else { v };
        if pts.iter().any(|p| p.se > 0.0) {
            let mut poly: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.mean + 2.0 * p.se))).collect();
            poly.extend(pts.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.x), py(floor(p.mean - 2.0 * p.se)))));
            let _ = writeln!(
                s,
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>",
                poly.join(" ")
            );
        }
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.mean))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            line.join(" ")
        );
        for p in pts {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                px(p.x),
                py(p.mean)
            );
        }
        let ly = TOP + 10.0 + 18.0 * gi as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads `results`, renders the plot described by `spec`, writes `output`.
pub fn emit_plot(results: &Path, spec: &PlotSpec, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(results).map_err(io_err(results))?;
    let series = aggregate(&text, spec)?;
    if series.is_empty() {
        return Err(HarnessError::Spec(format!(
            "no rows of {} have finite `{}` and `{}` after filtering",
            results.display(),
            spec.x,
            spec.y
        )));
    }
    crate::io::write_text(output, &render_svg(&series, spec))
}
