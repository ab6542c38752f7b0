//! Static SVG line charts of a metrics stream, aggregated per epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use da2s::metrics::MetricsRecord;
use da2s::{Error, Float, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; computed from the data when `None`.
    pub y_range: Option<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn x_extent(&self) -> (f64, f64) {
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if lo == hi {
            (lo, lo + 1.0)
        } else {
            (lo, hi)
        }
    }

    fn y_extent(&self) -> (f64, f64) {
        if let Some(r) = self.y_range {
            return r;
        }
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        let lo = lo.min(0.0);
        if hi <= lo {
            (lo, lo + 1.0)
        } else {
            (lo, hi * 1.05)
        }
    }

    pub fn render(&self) -> String {
        let (x0, x1) = self.x_extent();
        let (y0, y1) = self.y_extent();
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + plot_w / 2.0,
            escape(&self.title)
        );
        for k in 0..=5 {
            let y = y0 + (y1 - y0) * k as f64 / 5.0;
            let py = sy(y);
            let _ = writeln!(
                svg,
                r##"<line x1="{LEFT:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#e0e0e0"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"##,
                LEFT + plot_w,
                LEFT - 6.0,
                py + 4.0
            );
        }
        let span = (x1 - x0).max(1.0);
        let step = (span / 6.0).ceil().max(1.0);
        let mut x = x0;
        while x <= x1 + 1e-9 {
            let px = sx(x);
            let _ = writeln!(
                svg,
                r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#444"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{x}</text>"##,
                TOP + plot_h,
                TOP + plot_h + 5.0,
                TOP + plot_h + 18.0
            );
            x += step;
        }
        let _ = writeln!(
            svg,
            r##"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        );
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let dash = if (k / PALETTE.len()) % 2 == 1 { r#" stroke-dasharray="5 3""# } else { "" };
            let points: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                points.join(" ")
            );
            let ly = TOP + 10.0 + 13.0 * k as f64;
            if ly < HEIGHT - 10.0 {
                let lx = LEFT + plot_w + 10.0;
                let _ = writeln!(
                    svg,
                    r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                    lx + 18.0,
                    lx + 22.0,
                    ly + 4.0,
                    escape(&s.label)
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Mean of each per-step quantity over the steps of each epoch.
fn per_epoch<F>(records: &[MetricsRecord], f: F) -> Vec<(f64, Vec<f64>)>
where
    F: Fn(&MetricsRecord) -> Vec<Float>,
{
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let values = f(r);
        let entry = sums.entry(r.epoch).or_insert_with(|| (vec![0.0; values.len()], 0));
        for (acc, v) in entry.0.iter_mut().zip(values) {
            *acc += v as f64;
        }
        entry.1 += 1;
    }
    sums.into_iter().map(|(e, (s, n))| (e as f64, s.into_iter().map(|v| v / n as f64).collect())).collect()
}

fn edge_labels(records: &[MetricsRecord]) -> Vec<String> {
    let types = ["normal", "reduction"];
    let first = &records[0];
    let edges = first.alpha_max.first().map_or(0, Vec::len);
    let nodes = (2..).find(|&n: &usize| (2..n).sum::<usize>() >= edges).unwrap_or(2);
    let pairs: Vec<(usize, usize)> = (2..nodes).flat_map(|j| (0..j).map(move |i| (i, j))).collect();
    (0..first.alpha_max.len())
        .flat_map(|t| pairs.iter().map(move |&(i, j)| format!("{} {i}-{j}", types.get(t).unwrap_or(&"cell"))))
        .collect()
}

fn build_series(labels: &[String], rows: &[(f64, Vec<f64>)]) -> Vec<Series> {
    labels
        .iter()
        .enumerate()
        .map(|(k, label)| Series { label: label.clone(), points: rows.iter().map(|(e, v)| (*e, v[k])).collect() })
        .collect()
}

/// The three charts of a metrics stream: operation weights, edge weights and
/// loss components, each over epochs.
pub fn charts(records: &[MetricsRecord]) -> Result<Vec<(&'static str, Chart)>> {
    if records.is_empty() {
        return Err(Error::config("metrics", "metrics stream is empty"));
    }
    let labels = edge_labels(records);
    let alpha = per_epoch(records, |r| r.alpha_max.concat());
    let beta = per_epoch(records, |r| r.beta_softmax.concat());
    let losses = per_epoch(records, |r| vec![r.l_c, r.l_o, r.l_e, r.total]);
    let loss_labels: Vec<String> = ["L_C", "L_O", "L_E", "total"].iter().map(|s| s.to_string()).collect();
    Ok(vec![
        (
            "alpha_softmax.svg",
            Chart {
                title: "largest operation weight per edge".into(),
                x_label: "epoch".into(),
                y_label: "max softmax(alpha)".into(),
                series: build_series(&labels, &alpha),
                y_range: Some((0.0, 1.0)),
            },
        ),
        (
            "beta_softmax.svg",
            Chart {
                title: "edge weight per node".into(),
                x_label: "epoch".into(),
                y_label: "softmax(beta)".into(),
                series: build_series(&labels, &beta),
                y_range: Some((0.0, 1.0)),
            },
        ),
        (
            "losses.svg",
            Chart {
                title: "loss components".into(),
                x_label: "epoch".into(),
                y_label: "loss".into(),
                series: build_series(&loss_labels, &losses),
                y_range: None,
            },
        ),
    ])
}
