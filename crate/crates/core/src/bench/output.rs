//! CSV and SVG emitters.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Arrival, BenchError, RunReport, SloTarget};
use crate::clock::Micros;
use crate::executor::Cluster;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub offered_qps: f64,
    pub p5_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub miss_rates: Vec<f64>,
    pub achieved_qps: f64,
}

fn opt(v: Option<Micros>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: query_id, phase, arrival_us, ingress_us, egress_us, latency_us,
/// one `miss_<t>ms` per target, path.
pub fn write_queries_csv<W: Write>(report: &RunReport, out: W) -> csv::Result<()> {
    let targets = report.targets();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["query_id".to_string(), "phase".into(), "arrival_us".into(), "ingress_us".into(), "egress_us".into(), "latency_us".into()];
    header.extend(targets.iter().map(|t| format!("miss_{}ms", t.label())));
    header.push("path".into());
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.query_id.to_string(),
            r.phase.to_string(),
            r.arrival_us.to_string(),
            r.ingress_us.to_string(),
            opt(r.egress_us),
            opt(r.latency_us),
        ];
        for t in &targets {
            let miss = r.latency_us.is_none_or(|l| l > t.latency_us());
            rec.push(u8::from(miss).to_string());
        }
        rec.push(r.path.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: offered_qps, p5_ms, p50_ms, p95_ms, one `miss_rate_<t>` per target, achieved_qps.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], targets: &[SloTarget], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["offered_qps".to_string(), "p5_ms".into(), "p50_ms".into(), "p95_ms".into()];
    header.extend(targets.iter().map(|t| format!("miss_rate_{}", t.label())));
    header.push("achieved_qps".into());
    w.write_record(&header)?;
    for p in points {
        let mut rec = vec![format!("{:.3}", p.offered_qps), format!("{:.3}", p.p5_ms), format!("{:.3}", p.p50_ms), format!("{:.3}", p.p95_ms)];
        rec.extend(p.miss_rates.iter().map(|m| format!("{m:.6}")));
        rec.push(format!("{:.3}", p.achieved_qps));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Node-by-window matrix: one row per partitioned GPU node, one column per
/// window start, cells are size-weighted node GRACT.
pub fn write_gract_matrix_csv<W: Write>(cluster: &Cluster, from: Micros, to: Micros, window_us: Micros, out: W) -> csv::Result<()> {
    let window_us = window_us.max(1);
    let starts: Vec<Micros> = (from..to).step_by(window_us as usize).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["node".to_string()];
    header.extend(starts.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for node in cluster.nodes().iter().filter(|n| !n.host && n.layout.is_some()) {
        let mut rec = vec![node.id.to_string()];
        for &s in &starts {
            let g = cluster.node_gract(node.id, s, (s + window_us).min(to)).unwrap_or(0.0);
            rec.push(format!("{g:.6}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: index, phase, t_us.
pub fn write_arrivals_csv<W: Write>(arrivals: &[Arrival], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "phase", "t_us"])?;
    for a in arrivals {
        w.write_record([a.index.to_string(), a.phase.to_string(), a.t_us.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of named series sharing one pair of axes.
pub fn svg_lines(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, v)| v.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= 0.0 {
        y1 = 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / y1 * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(k) / 4.0;
        let fy = y1 * f64::from(k) / 4.0;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{fx:.4}</text>", sx(fx), H - PAD + 16.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{fy:.4}</text>", PAD - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, (name, v)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = v.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", d.join(" "));
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\" fill=\"{c}\" text-anchor=\"end\">{}</text>", W - PAD, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap with one row per label; values are clamped to [0, 1].
pub fn svg_heatmap(title: &str, rows: &[(String, Vec<f64>)]) -> String {
    let cols = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(1);
    let cw = (W - 2.0 * PAD) / cols as f64;
    let ch = (H - 2.0 * PAD) / rows.len().max(1) as f64;
    let mut s = svg_open(title);
    for (r, (label, v)) in rows.iter().enumerate() {
        let y = PAD + r as f64 * ch;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", PAD - 6.0, y + ch / 2.0 + 4.0, escape(label));
        for (c, g) in v.iter().enumerate() {
            let g = g.clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - g)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"rgb(255,{shade},{shade})\"/>",
                PAD + c as f64 * cw,
                cw.max(0.5),
                ch
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    fs::write(path, bytes).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> BenchError {
    BenchError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

/// Writes `queries.csv`, `summary.json` and `gract.csv` (one-second windows)
/// into `dir`, plus `latency.svg` and `gract.svg` when `svg` is set.
pub fn emit_report(report: &RunReport, cluster: &Cluster, dir: &Path, svg: bool) -> Result<Vec<PathBuf>, BenchError> {
    fs::create_dir_all(dir).map_err(|source| BenchError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    let p = dir.join("queries.csv");
    let mut buf = Vec::new();
    write_queries_csv(report, &mut buf).map_err(|e| csv_err(&p, e))?;
    write_file(&p, &buf)?;
    written.push(p);

    let p = dir.join("summary.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&p, json.as_bytes())?;
    written.push(p);

    let (from, to) = report.span;
    let p = dir.join("gract.csv");
    let mut buf = Vec::new();
    write_gract_matrix_csv(cluster, from, to, 1_000_000, &mut buf).map_err(|e| csv_err(&p, e))?;
    write_file(&p, &buf)?;
    written.push(p);

    if svg {
        let lat: Vec<(f64, f64)> = report
            .rows
            .iter()
            .filter_map(|r| r.latency_us.map(|l| (r.query_id as f64, l as f64 / 1000.0)))
            .collect();
        let p = dir.join("latency.svg");
        write_file(&p, svg_lines("End-to-end latency", "query", "latency (ms)", &[("latency".into(), lat)]).as_bytes())?;
        written.push(p);

        let rows: Vec<(String, Vec<f64>)> = cluster
            .nodes()
            .iter()
            .filter(|n| !n.host && n.layout.is_some())
            .map(|n| {
                let v = (from..to)
                    .step_by(1_000_000)
                    .map(|s| cluster.node_gract(n.id, s, (s + 1_000_000).min(to)).unwrap_or(0.0))
                    .collect();
                (format!("node {}", n.id), v)
            })
            .collect();
        let p = dir.join("gract.svg");
        write_file(&p, svg_heatmap("GRACT per node, 1 s windows", &rows).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{InstanceId, MigLayout};

    #[test]
    fn curve_header_and_rows() {
        let pts = vec![
            CurvePoint {
                offered_qps: 10.0,
                p5_ms: 1.0,
                p50_ms: 2.0,
                p95_ms: 3.0,
                miss_rates: vec![0.0, 0.0],
                achieved_qps: 10.0,
            };
            5
        ];
        let mut out = Vec::new();
        write_curve_csv(&pts, &SloTarget::defaults(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "offered_qps,p5_ms,p50_ms,p95_ms,miss_rate_200,miss_rate_500,achieved_qps");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn gract_matrix_matches_interval_sums() {
        let mut c = Cluster::new(1, 24);
        c.partition_node(0, &MigLayout::new(vec![12, 12])).unwrap();
        let a = InstanceId { node: 0, slot: 0 };
        c.instance_mut(a).unwrap().install("m", 1.0).unwrap();
        c.instance_mut(a).unwrap().execute("m", 0, 500, 1.0).unwrap();
        c.instance_mut(a).unwrap().execute("m", 1_200, 300, 1.0).unwrap();
        let mut out = Vec::new();
        write_gract_matrix_csv(&c, 0, 2_000, 1_000, &mut out).unwrap();
        // slot 0 busy 500/1000 then 300/1000; slot 1 idle; equal sizes halve it
        assert_eq!(String::from_utf8(out).unwrap(), "node,0,1000\n0,0.250000,0.150000\n");
    }

    #[test]
    fn svg_is_well_formed() {
        let s = svg_lines("t", "x", "y", &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("polyline"));
        let h = svg_heatmap("h", &[("n0".into(), vec![0.0, 1.0])]);
        assert_eq!(h.matches("<rect").count(), 3);
    }
}
