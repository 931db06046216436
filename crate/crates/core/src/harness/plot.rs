//! Deterministic SVG charts of aggregated runs.
//!
//! Every chart is accompanied by a CSV of exactly the points drawn.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::output::{
    read_aggregate_csv, read_threshold_summary, write_atomic, AggregateRow, ThresholdSummary, AGGREGATE_FILE,
    METRIC_COLUMNS, SUMMARY_FILE,
};
use super::{HarnessError, Result};

pub const PLOT_DIR: &str = "plots";

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
/// Points per series beyond which the curve is thinned by striding.
const MAX_POINTS: usize = 2000;

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Metrics drawn on a log axis.
const LOG_METRICS: [&str; 4] = ["grad_norm_sq", "consensus_err", "tracking_err", "tracking_residual"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn cell_label(p: f64, t: usize) -> String {
    format!("p={} T_o={t}", short(p))
}

fn short(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" { "0".into() } else { s.into() }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if points.len() <= MAX_POINTS {
        return points;
    }
    let stride = points.len().div_ceil(MAX_POINTS);
    let last = *points.last().expect("nonempty");
    let mut out: Vec<(f64, f64)> = points.into_iter().step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Tick positions in data units.
fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        short(v)
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
}

fn svg_header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, esc(title));
    s
}

fn axes(s: &mut String, f: &Frame, xticks: &[f64], yticks: &[f64], log_y: bool, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(s, r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, r - l, b - t);
    for &x in xticks {
        let px = f.px(x);
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{b:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, b + 5.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, b + 19.0, tick_label(x, false));
    }
    for &y in yticks {
        let py = f.py(y);
        let _ = writeln!(s, r##"<line x1="{l:.2}" y1="{py:.2}" x2="{r:.2}" y2="{py:.2}" stroke="#dddddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, py + 4.0, tick_label(y, log_y));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, HEIGHT - 18.0, esc(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        esc(ylabel)
    );
}

fn legend(s: &mut String, entries: &[(String, &str)]) {
    let x = WIDTH - RIGHT + 15.0;
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, x + 18.0, esc(label));
    }
}

fn line_chart(metric: &str, series: &[Series], log_y: bool) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| if log_y { p.1.log10() } else { p.1 }));
    let (x0, x1) = padded(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (ylo, yhi) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = if log_y { padded(ylo.floor(), yhi.ceil()) } else { padded(ylo, yhi) };
    let frame = Frame { x0, x1, y0, y1 };
    let yticks: Vec<f64> = if log_y {
        let step = ((y1 - y0) / 8.0).ceil().max(1.0);
        let mut v = Vec::new();
        let mut t = y0;
        while t <= y1 + 1e-9 {
            v.push(t);
            t += step;
        }
        v
    } else {
        linear_ticks(y0, y1)
    };
    let mut s = svg_header(&format!("{metric} (seed mean)"));
    axes(&mut s, &frame, &linear_ticks(x0, x1), &yticks, log_y, "communication round", metric);
    let mut entries = Vec::new();
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(if log_y { y.log10() } else { y })))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        entries.push((ser.label.clone(), color));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    s
}

struct Bar {
    label: String,
    gossip: f64,
    server: f64,
}

fn bar_chart(title: &str, bars: &[Bar]) -> String {
    let top = bars.iter().map(|b| b.gossip + b.server).fold(0.0, f64::max);
    let frame = Frame { x0: 0.0, x1: bars.len() as f64, y0: 0.0, y1: if top > 0.0 { top * 1.05 } else { 1.0 } };
    let mut s = svg_header(title);
    axes(&mut s, &frame, &[], &linear_ticks(frame.y0, frame.y1), false, "grid cell", "communication rounds");
    let slot = (WIDTH - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, b) in bars.iter().enumerate() {
        let x = LEFT + slot * (i as f64 + 0.2);
        let w = slot * 0.6;
        let base = frame.py(0.0);
        let yg = frame.py(b.gossip);
        let ys = frame.py(b.gossip + b.server);
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{yg:.2}" width="{w:.2}" height="{:.2}" fill="{}"/>"#, base - yg, PALETTE[0]);
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{ys:.2}" width="{w:.2}" height="{:.2}" fill="{}"/>"#, yg - ys, PALETTE[1]);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            x + w / 2.0,
            base + 16.0,
            esc(&b.label)
        );
    }
    legend(&mut s, &[("agent-to-agent".into(), PALETTE[0]), ("agent-to-server".into(), PALETTE[1])]);
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    write_atomic(path, text.as_bytes())?;
    Ok(path.to_path_buf())
}

/// One line chart per metric (one series per grid cell) and a stacked bar chart
/// of agent-to-agent vs agent-to-server rounds, each with a CSV of the plotted
/// data. Returns the files written.
pub fn emit_plots(rows: &[AggregateRow], summary: &[ThresholdSummary], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(HarnessError::Data("no aggregated rows to plot".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Output(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        if !cells.contains(&(r.p, r.local_steps)) {
            cells.push((r.p, r.local_steps));
        }
    }
    let mut written = Vec::new();
    for (c, metric) in METRIC_COLUMNS.iter().enumerate() {
        let log_y = LOG_METRICS.contains(metric);
        let mut series = Vec::new();
        for &(p, t) in &cells {
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.p == p && r.local_steps == t)
                .filter_map(|r| r.mean[c].map(|v| (r.round as f64, v)))
                .filter(|&(_, v)| v.is_finite() && (!log_y || v > 0.0))
                .collect();
            if points.is_empty() {
                log::warn!("{metric}: no plottable values for {}, series skipped", cell_label(p, t));
                continue;
            }
            series.push(Series { label: cell_label(p, t), points: thin(points) });
        }
        if series.is_empty() {
            continue;
        }
        let mut data = String::from("series,round,value\n");
        for ser in &series {
            for (x, y) in &ser.points {
                let _ = writeln!(data, "{},{},{y:.16e}", ser.label, *x as usize);
            }
        }
        written.push(write(&out_dir.join(format!("{metric}.svg")), &line_chart(metric, &series, log_y))?);
        written.push(write(&out_dir.join(format!("{metric}.csv")), &data)?);
    }

    if !summary.is_empty() {
        let to_threshold = summary.iter().all(|s| s.train_crossed > 0);
        let bars: Vec<Bar> = summary
            .iter()
            .map(|s| {
                let (gossip, server) = if to_threshold {
                    (s.train_gossip_mean.unwrap_or(0.0), s.train_server_mean.unwrap_or(0.0))
                } else {
                    (s.gossip_rounds_mean, s.server_rounds_mean)
                };
                Bar { label: cell_label(s.p, s.local_steps), gossip, server }
            })
            .collect();
        let title = if to_threshold { "rounds to the training threshold" } else { "rounds per run" };
        let mut data = String::from("series,gossip_rounds,server_rounds\n");
        for b in &bars {
            let _ = writeln!(data, "{},{:.16e},{:.16e}", b.label, b.gossip, b.server);
        }
        written.push(write(&out_dir.join("communication.svg"), &bar_chart(title, &bars))?);
        written.push(write(&out_dir.join("communication.csv"), &data)?);
    }
    Ok(written)
}

/// Re-renders the plots of a finished run directory into `<run_dir>/plots`.
pub fn plot_run_dir(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let agg = run_dir.join(AGGREGATE_FILE);
    if !agg.is_file() {
        return Err(HarnessError::Data(format!("{} not found", agg.display())));
    }
    let rows = read_aggregate_csv(&agg)?;
    let summary_path = run_dir.join(SUMMARY_FILE);
    let summary = if summary_path.is_file() { read_threshold_summary(&summary_path)? } else { Vec::new() };
    emit_plots(&rows, &summary, &run_dir.join(PLOT_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_the_range() {
        let t = linear_ticks(0.0, 1000.0);
        assert_eq!(t.first(), Some(&0.0));
        assert_eq!(t.last(), Some(&1000.0));
        assert!(t.len() <= 7);
        assert_eq!(short(0.31622776601683794), "0.3162");
        assert_eq!(short(1.0), "1");
        assert_eq!(short(0.0), "0");
    }

    #[test]
    fn thinning_keeps_the_last_point() {
        let pts: Vec<(f64, f64)> = (0..5001).map(|i| (i as f64, 1.0)).collect();
        let t = thin(pts);
        assert!(t.len() <= MAX_POINTS + 1);
        assert_eq!(t.last(), Some(&(5000.0, 1.0)));
    }
}
