//! Cross-seed aggregation and the results table and figure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use griddpp::artifact::{read_json, write_atomic};
use griddpp::trainer::{Metric, RunRecord, Task, TestRegime};
use griddpp::{Error, Result};

use crate::pipeline::{csv_err, Layout, Results};

/// One finished run and the condition it belongs to.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub label: String,
    pub task: Task,
    pub regime: TestRegime,
    pub record: RunRecord,
}

/// One row of `regions.csv`. For regression runs `mean_accuracy` holds the
/// mean squared error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub method: String,
    /// `analogy`, `arithmetic`, `arithmetic_add` or `arithmetic_multiply`.
    pub task: String,
    pub regime: String,
    pub region: String,
    pub mean_accuracy: f64,
    /// Standard error of the mean across seeds; zero for a single seed.
    pub stderr: f64,
    pub n_seeds: usize,
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups runs by condition, task subset, regime and region. Rows keep the
/// order in which conditions and regions first appear.
pub fn aggregate(runs: &[RunSummary]) -> Vec<RegionRow> {
    let mut order: Vec<(String, String, String, String)> = Vec::new();
    let mut values: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for r in &run.record.regions {
            let task = match r.subset.as_str() {
                "all" => snake(&run.task),
                subset => format!("{}_{subset}", snake(&run.task)),
            };
            let key = (run.label.clone(), task, snake(&run.regime), r.region.clone());
            values.entry(key.clone()).or_insert_with(|| {
                order.push(key.clone());
                Vec::new()
            });
            values.get_mut(&key).expect("inserted").push(r.value);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let v = &values[&key];
            let (mean, stderr) = mean_stderr(v);
            RegionRow {
                method: key.0,
                task: key.1,
                regime: key.2,
                region: key.3,
                mean_accuracy: mean,
                stderr,
                n_seeds: v.len(),
            }
        })
        .collect()
}

pub fn write_regions_csv(path: &Path, rows: &[RegionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["method", "task", "regime", "region", "mean_accuracy", "stderr", "n_seeds"])
            .map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

pub fn read_regions_csv(path: &Path) -> Result<Vec<RegionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Every finished run under an experiment directory. With a `results.json`
/// only the runs it lists are used (so unchosen sweep weights are left
/// out); otherwise every `record.json` below `dir` counts, labelled by method.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunSummary>> {
    let layout = Layout::new(dir);
    if layout.results().exists() {
        let results: Results = read_json(&layout.results())?;
        let mut out = Vec::new();
        for c in &results.conditions {
            for rel in &c.runs {
                let record: RunRecord = read_json(&dir.join(rel).join("record.json"))?;
                out.push(RunSummary { label: c.label.clone(), task: c.task, regime: c.regime, record });
            }
        }
        return Ok(out);
    }
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Artifact(format!("{}: {e}", dir.display())))?;
        if entry.file_type().is_file() && entry.file_name() == "record.json" {
            found.push(entry.into_path());
        }
    }
    if found.is_empty() {
        return Err(Error::Empty(format!("no finished runs under {}", dir.display())));
    }
    found
        .iter()
        .map(|p| {
            let record: RunRecord = read_json(p)?;
            Ok(RunSummary {
                label: record.method.clone(),
                task: record.config.task,
                regime: record.config.regime,
                record,
            })
        })
        .collect()
}

/// Aggregates the runs of every directory into `<out>/regions.csv` and
/// `<out>/report.svg`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<RegionRow>> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(collect_runs(d)?);
    }
    let rows = aggregate(&runs);
    let metric = runs.first().map_or(Metric::Accuracy, |r| r.record.metric);
    write_regions_csv(&out.join("regions.csv"), &rows)?;
    write_atomic(&out.join("report.svg"), render_svg(&rows, metric).as_bytes())?;
    Ok(rows)
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// One panel per task subset: test-region mean with ±1 standard error bars,
/// one line per method.
pub fn render_svg(rows: &[RegionRow], metric: Metric) -> String {
    let test: Vec<&RegionRow> = rows.iter().filter(|r| r.region.parse::<u32>().is_ok()).collect();
    let mut panels: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in &test {
        let panel = format!("{} / {}", r.task, r.regime);
        if !panels.contains(&panel) {
            panels.push(panel);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let (pw, ph, margin) = (420.0, 300.0, 50.0);
    let legend_h = 18.0 * methods.len() as f64 + 10.0;
    let width = margin + panels.len().max(1) as f64 * (pw + margin);
    let height = ph + 2.0 * margin + legend_h;
    let ks: Vec<u32> = test.iter().filter_map(|r| r.region.parse().ok()).collect();
    let (kmin, kmax) = (ks.iter().copied().min().unwrap_or(1), ks.iter().copied().max().unwrap_or(1).max(1));
    let (ymin, ymax) = match metric {
        Metric::Accuracy => (0.0, 1.0),
        Metric::Mse => (0.0, test.iter().map(|r| r.mean_accuracy + r.stderr).fold(1e-12, f64::max)),
    };
    let ylabel = match metric {
        Metric::Accuracy => "accuracy",
        Metric::Mse => "mse",
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (pi, panel) in panels.iter().enumerate() {
        let x0 = margin + pi as f64 * (pw + margin);
        let y0 = margin;
        let px = |k: u32| {
            if kmax == kmin {
                x0 + pw / 2.0
            } else {
                x0 + (k - kmin) as f64 / (kmax - kmin) as f64 * pw
            }
        };
        let py = |v: f64| y0 + ph - (v.clamp(ymin, ymax) - ymin) / (ymax - ymin) * ph;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-weight="bold">{}</text>"#,
            x0 + pw / 2.0,
            y0 - 12.0,
            xml(panel)
        );
        let _ = writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
        for i in 0..=4 {
            let v = ymin + (ymax - ymin) * i as f64 / 4.0;
            let y = py(v);
            let _ = writeln!(
                s,
                r##"<line x1="{x0}" x2="{}" y1="{y}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
                x0 + pw,
                x0 - 4.0,
                y + 4.0
            );
        }
        for k in kmin..=kmax {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{k}</text>"#, px(k), y0 + ph + 16.0);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">test region K</text>"#,
            x0 + pw / 2.0,
            y0 + ph + 34.0
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({},{}) rotate(-90)" text-anchor="middle">{ylabel}</text>"#,
            x0 - 36.0,
            y0 + ph / 2.0
        );
        for (mi, method) in methods.iter().enumerate() {
            let color = PALETTE[mi % PALETTE.len()];
            let mut pts: Vec<(u32, &RegionRow)> = test
                .iter()
                .filter(|r| &r.method == method && format!("{} / {}", r.task, r.regime) == *panel)
                .map(|r| (r.region.parse().expect("numeric"), *r))
                .collect();
            pts.sort_by_key(|p| p.0);
            if pts.is_empty() {
                continue;
            }
            let path: Vec<String> =
                pts.iter().map(|(k, r)| format!("{:.1},{:.1}", px(*k), py(r.mean_accuracy))).collect();
            let _ =
                writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
            for (k, r) in &pts {
                let x = px(*k);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" x2="{x:.1}" y1="{:.1}" y2="{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                    py(r.mean_accuracy - r.stderr),
                    py(r.mean_accuracy + r.stderr),
                    py(r.mean_accuracy)
                );
            }
        }
    }
    for (mi, method) in methods.iter().enumerate() {
        let y = margin + ph + 52.0 + 18.0 * mi as f64;
        let color = PALETTE[mi % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{margin}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            margin + 18.0,
            y,
            xml(method)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
