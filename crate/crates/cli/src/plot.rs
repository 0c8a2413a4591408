//! Target-vs-prediction line plots as plain SVG.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mkst_core::data::{parse_timestamp, Instant};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct RawRow {
    timestamp: String,
    site: String,
    target: f64,
    prediction: f64,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub timestamp: Instant,
    pub site: String,
    pub target: f64,
    pub prediction: f64,
}

pub fn read_trace(path: &Path) -> Result<Vec<Row>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening trace {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<RawRow>().enumerate() {
        let r = rec.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        rows.push(Row { timestamp: parse_timestamp(&r.timestamp)?, site: r.site, target: r.target, prediction: r.prediction });
    }
    Ok(rows)
}

const WIDTH: f64 = 900.0;
const PANEL: f64 = 240.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 40.0); // left, right, top, bottom

/// One panel per site in `sites` (in that order), each with a target and a
/// prediction polyline over the rows falling in `span`.
pub fn render(rows: &[Row], sites: &[String], span: Option<(Instant, Instant)>) -> Result<String> {
    let mut known: Vec<&str> = Vec::new();
    for r in rows {
        if !known.contains(&r.site.as_str()) {
            known.push(&r.site);
        }
    }
    let sites: Vec<String> = if sites.is_empty() { known.iter().map(|s| s.to_string()).collect() } else { sites.to_vec() };
    for s in &sites {
        if !known.contains(&s.as_str()) {
            bail!("unknown site `{s}` (trace has: {})", known.join(", "));
        }
    }
    let in_span = |r: &&Row| span.is_none_or(|(a, b)| r.timestamp >= a && r.timestamp < b);
    let panels: Vec<(&String, Vec<&Row>)> = sites
        .iter()
        .map(|s| {
            let mut pts: Vec<&Row> = rows.iter().filter(|r| &r.site == s).filter(in_span).collect();
            pts.sort_by_key(|r| r.timestamp);
            (s, pts)
        })
        .collect();
    if panels.iter().all(|(_, p)| p.is_empty()) {
        match span {
            Some((a, b)) => bail!("span {a}..{b} contains no trace rows"),
            None => bail!("trace is empty"),
        }
    }
    let (t0, t1) = match span {
        Some(s) => s,
        None => {
            let ts = panels.iter().flat_map(|(_, p)| p.iter().map(|r| r.timestamp));
            let (lo, hi) = ts.fold((None, None), |(lo, hi): (Option<Instant>, Option<Instant>), t| {
                (Some(lo.map_or(t, |l| l.min(t))), Some(hi.map_or(t, |h| h.max(t))))
            });
            (lo.unwrap(), hi.unwrap())
        }
    };
    let t_range = ((t1 - t0).num_seconds() as f64).max(1.0);

    let height = PANEL * panels.len() as f64;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    )?;
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    let (ml, mr, mt, mb) = MARGIN;
    let pw = WIDTH - ml - mr;
    let ph = PANEL - mt - mb;
    for (k, (site, pts)) in panels.iter().enumerate() {
        let top = k as f64 * PANEL + mt;
        let (lo, hi) = pts
            .iter()
            .flat_map(|r| [r.target, r.prediction])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi.max(lo + 1e-9)) } else { (0.0, 1.0) };
        let x = |t: Instant| ml + pw * (t - t0).num_seconds() as f64 / t_range;
        let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

        writeln!(svg, r#"<g class="panel" data-site="{}">"#, escape(site))?;
        writeln!(svg, r#"<text x="{ml}" y="{:.1}" font-weight="bold">{}</text>"#, top - 8.0, escape(site))?;
        writeln!(svg, r##"<rect x="{ml}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#888"/>"##)?;
        for frac in [0.0, 0.5, 1.0] {
            let v = lo + frac * (hi - lo);
            writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, ml - 5.0, y(v) + 4.0)?;
        }
        for (frac, anchor) in [(0.0, "start"), (1.0, "end")] {
            let t = t0 + chrono::Duration::seconds((frac * t_range) as i64);
            writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{}</text>"#,
                ml + frac * pw,
                top + ph + 15.0,
                t.format("%Y-%m-%d %H:%M")
            )?;
        }
        for (class, colour, get) in
            [("target", "#1f77b4", (|r: &Row| r.target) as fn(&Row) -> f64), ("prediction", "#d62728", |r: &Row| r.prediction)]
        {
            let points: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", x(r.timestamp), y(get(r)))).collect();
            writeln!(
                svg,
                r#"<polyline class="{class}" fill="none" stroke="{colour}" stroke-width="1.2" points="{}"/>"#,
                points.join(" ")
            )?;
        }
        let lx = ml + pw - 150.0;
        writeln!(svg, r##"<text x="{lx:.1}" y="{:.1}" fill="#1f77b4">measured</text>"##, top + 14.0)?;
        writeln!(svg, r##"<text x="{:.1}" y="{:.1}" fill="#d62728">forecast</text>"##, lx + 70.0, top + 14.0)?;
        writeln!(svg, "</g>")?;
    }
    writeln!(svg, "</svg>")?;
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
