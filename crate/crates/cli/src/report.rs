//! CSV rows, aggregate tables and SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use adra_core::metrics::aggregate;

pub const RESULTS_HEADER: &str = "task,method,seed,metric,value";
pub const AGGREGATE_HEADER: &str = "task,method,metric,mean,std,n";

/// One measurement of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// A cell that failed, with its error message.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub error: String,
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub task: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Quote a field if it contains a separator or quote.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shortest round-trip decimal form, independent of locale.
pub fn number(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

pub fn results_csv(rows: &[Row]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            field(&r.task),
            field(&r.method),
            r.seed,
            field(&r.metric),
            number(r.value)
        );
    }
    out
}

pub fn failures_csv(failures: &[Failure]) -> String {
    let mut out = String::from("task,method,seed,error\n");
    for f in failures {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            field(&f.task),
            field(&f.method),
            f.seed,
            field(&f.error)
        );
    }
    out
}

/// Group rows by `(task, method, metric)` in order of first appearance and
/// reduce over seeds.
pub fn aggregate_rows(rows: &[Row]) -> Vec<AggregateRow> {
    let mut order: Vec<(&str, &str, &str)> = Vec::new();
    let mut groups: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.task.as_str(), r.method.as_str(), r.metric.as_str());
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let a = aggregate(&groups[&key]).expect("groups are nonempty");
            AggregateRow {
                task: key.0.into(),
                method: key.1.into(),
                metric: key.2.into(),
                mean: a.mean,
                std: a.std,
                n: a.n,
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = format!("{AGGREGATE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            field(&r.task),
            field(&r.method),
            field(&r.metric),
            number(r.mean),
            number(r.std),
            r.n
        );
    }
    out
}

/// Plain-text table of `metric`: one row per task, one column per method,
/// plus a closing row of column means.
pub fn table(agg: &[AggregateRow], metric: &str, methods: &[String]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for r in agg.iter().filter(|r| r.metric == metric) {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
        cells.insert((r.task.as_str(), r.method.as_str()), r.mean);
    }
    let width = tasks.iter().map(|t| t.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{metric}\n{:width$}", "task");
    for m in methods {
        let _ = write!(out, " {:>9}", m);
    }
    out.push('\n');
    let mut sums = vec![(0.0, 0usize); methods.len()];
    for t in &tasks {
        let _ = write!(out, "{t:width$}");
        for (m, sum) in methods.iter().zip(&mut sums) {
            match cells.get(&(*t, m.as_str())) {
                Some(v) => {
                    let _ = write!(out, " {:>9.4}", v);
                    sum.0 += v;
                    sum.1 += 1;
                }
                None => {
                    let _ = write!(out, " {:>9}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:width$}", "mean");
    for (s, n) in sums {
        if n > 0 {
            let _ = write!(out, " {:>9.4}", s / n as f64);
        } else {
            let _ = write!(out, " {:>9}", "-");
        }
    }
    out.push('\n');
    out
}

/// One polyline of a [`LinePlot`].
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// About five round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let (w, h) = (640.0, 420.0);
        let (left, right, top, bottom) = (70.0, 170.0, 40.0, 55.0);
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let pw = w - left - right;
        let ph = h - top - bottom;
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            left + pw / 2.0,
            escape(&self.title)
        );
        for t in ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ddd"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
                top,
                top + ph,
                top + ph + 16.0,
                tick_label(t)
            );
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                out,
                r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                left + pw,
                left - 6.0,
                y + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            out,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + pw / 2.0,
            h - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for p in &path {
                let (x, y) = p.split_once(',').expect("formatted pair");
                let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
            }
            let ly = top + 10.0 + 18.0 * i as f64;
            let lx = left + pw + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}
