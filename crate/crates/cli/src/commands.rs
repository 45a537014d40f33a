//! `plan`, `bench` and `report`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use sloserve::bench::scenarios::{self, build_runtime};
use sloserve::bench::{
    emit_report, latency_stats, miss_count, svg_lines, write_arrivals_csv, write_curve_csv, BenchError, CurvePoint, RunOptions, RunReport, SloTarget,
    WorkloadSpec,
};
use sloserve::clock::Micros;
use sloserve::elasticity::Controller;
use sloserve::planner::{monolithic_baseline, plan, Placement, PlanError};
use sloserve::runtime::{Runtime, RuntimeError};

use crate::config::Deployment;
use crate::CliError;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn bench_err(e: BenchError) -> CliError {
    match e {
        BenchError::Runtime(RuntimeError::Unschedulable { stage, model }) => {
            CliError::Infeasible(vec![format!("stage {stage} has no replica of model {model}")])
        }
        e => CliError::Io(e.to_string()),
    }
}

/// Plans (or builds the monolithic baseline), writes the placement JSON and
/// prints the layout table.
pub fn plan_cmd(dep: &Deployment, monolithic: bool, out: &Path, stdout: &mut dyn Write) -> Result<Placement, CliError> {
    let result = if monolithic { monolithic_baseline(&dep.problem) } else { plan(&dep.problem) };
    let placement = result.map_err(|e| match e {
        PlanError::Infeasible(m) => CliError::Infeasible(vec![m]),
        PlanError::InvalidPlacement(v) => CliError::Infeasible(v.iter().map(ToString::to_string).collect()),
        e => CliError::Config(e.to_string()),
    })?;
    write_file(out, placement.to_json().as_bytes())?;
    let vector: Vec<String> = placement.sorted_vector().iter().map(|m| format!("{:.3}", *m as f64 / 1000.0)).collect();
    writeln!(stdout, "{}", placement.table())?;
    writeln!(stdout, "sorted throughput vector (qps): [{}]", vector.join(", "))?;
    writeln!(stdout, "placement written to {}", out.display())?;
    Ok(placement)
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub out: PathBuf,
    pub svg: bool,
}

#[derive(Debug)]
pub struct BenchRun {
    pub dir: PathBuf,
    pub report: RunReport,
}

fn with_rate(w: &WorkloadSpec, rate: f64) -> WorkloadSpec {
    let mut w = w.clone();
    for p in &mut w.phases {
        p.rate_qps = rate;
    }
    w
}

fn run_one(dep: &Deployment, placement: &Placement, workload: &WorkloadSpec, dir: &Path, svg: bool) -> Result<(Runtime, RunReport), CliError> {
    let c = &dep.config;
    let mut rt = build_runtime(&dep.profiles, c.cluster.nodes, c.cluster.gpu_gb, c.cluster.host_workers, &dep.pipeline, placement, dep.runtime_config())
        .map_err(bench_err)?;
    let opts = RunOptions {
        controller: c
            .elasticity
            .as_ref()
            .map(|e| Controller::new(e.thresholds.clone()).with_standby(e.standby.clone())),
        resize: c.resize.clone(),
        ..RunOptions::default()
    };
    let (out, report) = scenarios::run(&mut rt, workload, opts, &c.slo).map_err(bench_err)?;
    emit_report(&report, rt.cluster(), dir, svg)?;

    let mut buf = Vec::new();
    write_arrivals_csv(&out.arrivals, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&dir.join("arrivals.csv"), &buf)?;
    let mut buf = Vec::new();
    rt.write_exec_log_csv(&mut buf)?;
    write_file(&dir.join("exec.csv"), &buf)?;
    if let Some(ctl) = &out.controller {
        let mut buf = Vec::new();
        ctl.write_action_log_csv(&mut buf)?;
        write_file(&dir.join("actions.csv"), &buf)?;
    }
    if !out.resize_events.is_empty() {
        let json = serde_json::to_string_pretty(&out.resize_events).expect("events serialize");
        write_file(&dir.join("resize.json"), json.as_bytes())?;
    }
    Ok((rt, report))
}

fn describe(report: &RunReport) -> String {
    let lat = report
        .stats
        .map(|s| format!("p50 {:.2} ms p95 {:.2} ms", s.p50_us as f64 / 1e3, s.p95_us as f64 / 1e3))
        .unwrap_or_else(|| "no completions".into());
    let miss: Vec<String> = report.miss.iter().map(|m| format!("miss@{}ms {:.4}", m.target.label(), m.rate)).collect();
    format!("{}/{} completed, {lat}, {}", report.completed, report.submitted, miss.join(" "))
}

/// Runs the configured workload (once, or once per sweep rate) and writes
/// the report files. Budget overruns surface as [`CliError::Budget`] after
/// every file is written.
pub fn bench(dep: &Deployment, opts: &BenchOptions, stdout: &mut dyn Write) -> Result<Vec<BenchRun>, CliError> {
    let workload = dep
        .workload
        .clone()
        .ok_or_else(|| CliError::Config("bench needs a workload".into()))?;
    let placement = dep.placement()?;
    write_file(&opts.out.join("placement.json"), placement.to_json().as_bytes())?;
    let runs: Vec<(PathBuf, WorkloadSpec)> = if dep.config.sweep_qps.is_empty() {
        vec![(opts.out.clone(), workload)]
    } else {
        dep.config
            .sweep_qps
            .iter()
            .map(|r| (opts.out.join(format!("rate_{r}")), with_rate(&workload, *r)))
            .collect()
    };
    let mut done = Vec::new();
    for (dir, w) in runs {
        log::info!("running {} phases into {}", w.phases.len(), dir.display());
        let (_, report) = run_one(dep, &placement, &w, &dir, opts.svg)?;
        writeln!(stdout, "{}: offered {:.1} qps, {}", dir.display(), report.offered_qps(), describe(&report))?;
        done.push(BenchRun { dir, report });
    }
    let points: Vec<CurvePoint> = done.iter().filter_map(|r| r.report.curve_point()).collect();
    let mut buf = Vec::new();
    write_curve_csv(&points, &dep.config.slo, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&opts.out.join("curve.csv"), &buf)?;
    if opts.svg && points.len() > 1 {
        write_file(&opts.out.join("curve.svg"), curve_svg(&points).as_bytes())?;
    }
    let exceeded: Vec<String> = done
        .iter()
        .flat_map(|r| {
            r.report
                .miss
                .iter()
                .filter(|m| m.exceeded())
                .map(|m| format!("{}: miss rate {:.4} at {} ms over allowed {}", r.dir.display(), m.rate, m.target.label(), m.target.allowed_miss_rate.unwrap_or(0.0)))
                .collect::<Vec<_>>()
        })
        .collect();
    if !exceeded.is_empty() {
        return Err(CliError::Budget(exceeded.join("; ")));
    }
    Ok(done)
}

fn curve_svg(points: &[CurvePoint]) -> String {
    let series = |name: &str, f: fn(&CurvePoint) -> f64| (name.to_string(), points.iter().map(|p| (p.offered_qps, f(p))).collect());
    svg_lines("Latency versus offered load", "offered qps", "latency (ms)", &[series("p50", |p| p.p50_ms), series("p95", |p| p.p95_ms)])
}

/// One recomputed run directory.
#[derive(Debug, Clone)]
pub struct RecountedRun {
    pub dir: PathBuf,
    pub targets: Vec<SloTarget>,
    pub point: Option<CurvePoint>,
    pub total: usize,
    pub completed: usize,
    /// Whether the recount agrees with the run's summary.json.
    pub matches_summary: bool,
}

fn recount_dir(dir: &Path) -> Result<RecountedRun, CliError> {
    let qpath = dir.join("queries.csv");
    let io = |e: &dyn std::fmt::Display| CliError::Io(format!("{}: {e}", qpath.display()));
    let mut rdr = csv::Reader::from_path(&qpath).map_err(|e| io(&e))?;
    let header = rdr.headers().map_err(|e| io(&e))?.clone();
    let lat_col = header
        .iter()
        .position(|h| h == "latency_us")
        .ok_or_else(|| io(&"no latency_us column"))?;
    let summary: Value = fs::read_to_string(dir.join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or(Value::Null);
    let allowed = |label: &str| {
        summary["miss"].as_array().and_then(|ms| {
            ms.iter()
                .find(|m| m["target"]["latency_ms"].as_f64().map(|l| SloTarget::new(l).label()).as_deref() == Some(label))
                .and_then(|m| m["target"]["allowed_miss_rate"].as_f64())
        })
    };
    let mut targets = Vec::new();
    for h in header.iter() {
        if let Some(label) = h.strip_prefix("miss_").and_then(|s| s.strip_suffix("ms")) {
            let ms: f64 = label.parse().map_err(|_| io(&format!("bad column {h}")))?;
            targets.push(SloTarget {
                latency_ms: ms,
                allowed_miss_rate: allowed(label),
            });
        }
    }
    let mut lat: Vec<Option<Micros>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io(&e))?;
        let cell = rec.get(lat_col).unwrap_or("");
        lat.push(if cell.is_empty() { None } else { Some(cell.parse().map_err(|_| io(&format!("bad latency {cell}")))?) });
    }
    let done: Vec<Micros> = lat.iter().flatten().copied().collect();
    let stats = latency_stats(&done).ok();
    let miss_rates: Vec<f64> = targets
        .iter()
        .map(|t| {
            let (m, n) = miss_count(&lat, t);
            if n == 0 {
                0.0
            } else {
                m as f64 / n as f64
            }
        })
        .collect();
    let last_phase = summary["phases"].as_array().and_then(|p| p.last()).cloned().unwrap_or(Value::Null);
    let point = stats.map(|s| CurvePoint {
        offered_qps: last_phase["rate_qps"].as_f64().unwrap_or(0.0),
        p5_ms: s.p5_us as f64 / 1000.0,
        p50_ms: s.p50_us as f64 / 1000.0,
        p95_ms: s.p95_us as f64 / 1000.0,
        miss_rates: miss_rates.clone(),
        achieved_qps: last_phase["throughput"]["qps"].as_f64().unwrap_or(0.0),
    });
    let matches_summary = match (&summary["stats"], stats) {
        (Value::Null, None) => true,
        (v, Some(s)) => v["p5_us"].as_u64() == Some(s.p5_us) && v["p50_us"].as_u64() == Some(s.p50_us) && v["p95_us"].as_u64() == Some(s.p95_us),
        _ => false,
    } && summary["miss"]
        .as_array()
        .is_some_and(|ms| ms.iter().zip(&miss_rates).all(|(m, r)| m["rate"].as_f64() == Some(*r)));
    Ok(RecountedRun {
        dir: dir.to_path_buf(),
        targets,
        point,
        total: lat.len(),
        completed: done.len(),
        matches_summary,
    })
}

/// Recomputes percentiles and miss rates from each directory's queries.csv,
/// prints a table and optionally writes the combined curve.
pub fn report(dirs: &[PathBuf], out: Option<&Path>, svg: bool, stdout: &mut dyn Write) -> Result<Vec<RecountedRun>, CliError> {
    let runs = dirs.iter().map(|d| recount_dir(d)).collect::<Result<Vec<_>, _>>()?;
    let Some(first) = runs.first() else {
        return Err(CliError::Config("report needs at least one run directory".into()));
    };
    let labels = |r: &RecountedRun| r.targets.iter().map(SloTarget::label).collect::<Vec<_>>();
    if runs.iter().any(|r| labels(r) != labels(first)) {
        return Err(CliError::Config("runs were measured against different SLO targets".into()));
    }
    let mut head = format!("{:<32} {:>9} {:>9} {:>9} {:>9} {:>9}", "run", "offered", "done", "p5_ms", "p50_ms", "p95_ms");
    for t in &first.targets {
        head.push_str(&format!(" {:>12}", format!("miss@{}ms", t.label())));
    }
    writeln!(stdout, "{head}")?;
    for r in &runs {
        if !r.matches_summary {
            log::warn!("{}: recount differs from summary.json", r.dir.display());
        }
        let mut line = format!("{:<32}", r.dir.display().to_string());
        match &r.point {
            Some(p) => {
                line.push_str(&format!(" {:>9.2} {:>9} {:>9.3} {:>9.3} {:>9.3}", p.offered_qps, r.completed, p.p5_ms, p.p50_ms, p.p95_ms));
                for m in &p.miss_rates {
                    line.push_str(&format!(" {m:>12.4}"));
                }
            }
            None => line.push_str(&format!(" {:>9} {:>9} (no completions out of {})", "-", 0, r.total)),
        }
        writeln!(stdout, "{line}")?;
    }
    let points: Vec<CurvePoint> = runs.iter().filter_map(|r| r.point.clone()).collect();
    if let Some(path) = out {
        let mut buf = Vec::new();
        write_curve_csv(&points, &first.targets, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
        write_file(path, &buf)?;
        if svg {
            write_file(&path.with_extension("svg"), curve_svg(&points).as_bytes())?;
        }
    }
    Ok(runs)
}
