//! Self-contained SVG line charts: per-series medians with interquartile
//! bands. Output bytes depend only on the input records and spec.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::fit::quantile;
use crate::harness::records::RunRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    /// Record field whose value splits the data into series.
    pub series: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
    pub title: String,
    pub width: f64,
    pub height: f64,
    pub file: String,
}

impl Default for PlotSpec {
    fn default() -> Self {
        PlotSpec {
            x: "size".into(),
            y: "gap".into(),
            series: Some("epsilon".into()),
            log_x: true,
            log_y: true,
            title: String::new(),
            width: 640.0,
            height: 420.0,
            file: "plot.svg".into(),
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPoint {
    pub x: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Groups records into named series of per-x medians and quartiles.
pub fn aggregate(records: &[RunRecord], spec: &PlotSpec) -> Result<Vec<(String, Vec<SeriesPoint>)>> {
    let mut groups: BTreeMap<String, BTreeMap<String, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in records {
        let x = r
            .numeric(&spec.x)
            .ok_or_else(|| Error::config("plot.x", format!("unknown numeric field {}", spec.x)))?;
        let y = r
            .numeric(&spec.y)
            .ok_or_else(|| Error::config("plot.y", format!("unknown numeric field {}", spec.y)))?;
        let name = match &spec.series {
            Some(field) => r
                .text(field)
                .ok_or_else(|| Error::config("plot.series", format!("unknown field {field}")))?,
            None => spec.y.clone(),
        };
        let key = format!("{:e}", x);
        groups
            .entry(name)
            .or_default()
            .entry(key)
            .or_insert_with(|| (x, Vec::new()))
            .1
            .push(y);
    }
    Ok(groups
        .into_iter()
        .map(|(name, by_x)| {
            let mut points: Vec<SeriesPoint> = by_x
                .into_values()
                .map(|(x, ys)| SeriesPoint {
                    x,
                    median: quantile(&ys, 0.5).unwrap_or(f64::NAN),
                    q25: quantile(&ys, 0.25).unwrap_or(f64::NAN),
                    q75: quantile(&ys, 0.75).unwrap_or(f64::NAN),
                })
                .collect();
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            (name, points)
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
        let usable: Vec<f64> = values
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .map(|v| if log { v.log10() } else { v })
            .collect();
        let mut lo = usable.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = usable.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Axis { lo, hi, log }
    }

    fn frac(&self, v: f64) -> Option<f64> {
        let t = if self.log {
            if v <= 0.0 {
                return None;
            }
            v.log10()
        } else {
            v
        };
        t.is_finite().then(|| (t - self.lo) / (self.hi - self.lo))
    }

    /// (position in [0, 1], label)
    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (lo, hi) = (self.lo as i32, self.hi as i32);
            (lo..=hi)
                .map(|e| ((e as f64 - self.lo) / (self.hi - self.lo), format!("1e{e}")))
                .collect()
        } else {
            let span = self.hi - self.lo;
            let raw = span / 5.0;
            let mag = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0]
                .iter()
                .map(|m| m * mag)
                .find(|s| span / s <= 6.0)
                .unwrap_or(10.0 * mag);
            let mut v = (self.lo / step).ceil() * step;
            let mut out = Vec::new();
            while v <= self.hi + 1e-9 * step {
                out.push(((v - self.lo) / span, format_tick(v)));
                v += step;
            }
            out
        }
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the chart as an SVG document.
pub fn emit_plot(records: &[RunRecord], spec: &PlotSpec) -> Result<String> {
    if records.is_empty() {
        return Err(Error::EmptyData);
    }
    let series = aggregate(records, spec)?;
    render(&series, spec)
}

pub fn render(series: &[(String, Vec<SeriesPoint>)], spec: &PlotSpec) -> Result<String> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::EmptyData);
    }
    let all = || series.iter().flat_map(|(_, pts)| pts.iter());
    let x_axis = Axis::new(all().map(|p| p.x), spec.log_x);
    let y_axis = Axis::new(
        all().flat_map(|p| [p.median, p.q25, p.q75]),
        spec.log_y,
    );
    let plot_w = spec.width - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = spec.height - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |v: f64| x_axis.frac(v).map(|f| MARGIN_LEFT + f * plot_w);
    let py = |v: f64| y_axis.frac(v).map(|f| MARGIN_TOP + (1.0 - f) * plot_h);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#,
        w = spec.width,
        h = spec.height
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{:.0}" height="{:.0}" fill="white"/>"#, spec.width, spec.height);
    if !spec.title.is_empty() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            escape(&spec.title)
        );
    }
    let bottom = MARGIN_TOP + plot_h;
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT:.2}" y="{MARGIN_TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="rgb(68,68,68)"/>"#
    );
    for (f, label) in x_axis.ticks() {
        let x = MARGIN_LEFT + f * plot_w;
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="rgb(68,68,68)"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
            bottom + 5.0,
            bottom + 18.0
        );
    }
    for (f, label) in y_axis.ticks() {
        let y = MARGIN_TOP + (1.0 - f) * plot_h;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_LEFT:.2}" y2="{y:.2}" stroke="rgb(68,68,68)"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        spec.height - 12.0,
        escape(&spec.x)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(&spec.y)
    );

    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let upper: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|p| Some((px(p.x)?, py(p.q75)?)))
            .collect();
        let lower: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|p| Some((px(p.x)?, py(p.q25)?)))
            .collect();
        if upper.len() >= 2 && upper.len() == lower.len() {
            let ring: Vec<String> = upper
                .iter()
                .chain(lower.iter().rev())
                .map(|(x, y)| format!("{x:.2},{y:.2}"))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
                ring.join(" ")
            );
        }
        let line: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|p| Some((px(p.x)?, py(p.median)?)))
            .collect();
        if line.len() >= 2 {
            let path: Vec<String> = line.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for (x, y) in &line {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{color}"/>"#);
        }
        let ly = MARGIN_TOP + 14.0 + 18.0 * k as f64;
        let lx = MARGIN_LEFT + plot_w + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(points: &[(f64, f64)]) -> Vec<(String, Vec<SeriesPoint>)> {
        vec![(
            "a".to_string(),
            points
                .iter()
                .map(|&(x, y)| SeriesPoint { x, median: y, q25: y * 0.9, q75: y * 1.1 })
                .collect(),
        )]
    }

    #[test]
    fn two_points_two_markers() {
        let svg = render(&series(&[(1.0, 1.0), (2.0, 3.0)]), &PlotSpec { log_x: false, log_y: false, ..PlotSpec::default() }).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn log_axes_tick_at_powers_of_ten() {
        let svg = render(&series(&[(500.0, 0.2), (32000.0, 0.02)]), &PlotSpec::default()).unwrap();
        for label in [">1e2<", ">1e3<", ">1e4<", ">1e5<", ">1e-2<", ">1e-1<", ">1e0<"] {
            assert!(svg.contains(label), "missing {label}");
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(emit_plot(&[], &PlotSpec::default()), Err(Error::EmptyData)));
        assert!(matches!(render(&[], &PlotSpec::default()), Err(Error::EmptyData)));
    }

    #[test]
    fn deterministic_bytes() {
        let data = series(&[(1.0, 2.0), (10.0, 1.0), (100.0, 0.5)]);
        let a = render(&data, &PlotSpec::default()).unwrap();
        let b = render(&data, &PlotSpec::default()).unwrap();
        assert_eq!(a, b);
    }
}
