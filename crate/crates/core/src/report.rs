//! Run reports: per-session accuracy matrices, flat metric records, the
//! plain-text summary table and progression plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::TaskAccuracy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "RA")]
    Ra,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Sa => "SA",
            Metric::Ra => "RA",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportHead {
    Primary,
    Auxiliary,
    Cem,
}

impl ReportHead {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportHead::Primary => "primary",
            ReportHead::Auxiliary => "auxiliary",
            ReportHead::Cem => "cem",
        }
    }
}

/// One line of `records.jsonl`. Tasks are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub session: usize,
    pub task: usize,
    pub metric: Metric,
    pub head: ReportHead,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub classes_seen: usize,
    pub selected_epoch: usize,
    pub validation_accuracy: Vec<f64>,
    pub bank_size: usize,
    pub queried_size: usize,
    pub wall_clock_secs: f64,
    pub sa: Vec<(ReportHead, TaskAccuracy)>,
    pub ra: Vec<(ReportHead, TaskAccuracy)>,
}

impl SessionReport {
    pub fn get(&self, metric: Metric, head: ReportHead) -> Option<&TaskAccuracy> {
        let rows = match metric {
            Metric::Sa => &self.sa,
            Metric::Ra => &self.ra,
        };
        rows.iter().find(|(h, _)| *h == head).map(|(_, a)| a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    /// Echo of the configuration that produced the run.
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub sessions: Vec<SessionReport>,
    /// False when the stream stopped early.
    pub complete: bool,
    pub wall_clock_secs: f64,
}

impl StreamReport {
    pub fn new(config: serde_json::Value, master_seed: u64) -> Self {
        Self { config, master_seed, sessions: Vec::new(), complete: false, wall_clock_secs: 0.0 }
    }

    /// Accuracy after the last finished session.
    pub fn final_accuracy(&self, metric: Metric, head: ReportHead) -> Option<&TaskAccuracy> {
        self.sessions.last().and_then(|s| s.get(metric, head))
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for s in &self.sessions {
            for (metric, rows) in [(Metric::Sa, &s.sa), (Metric::Ra, &s.ra)] {
                for (head, acc) in rows {
                    for (t, &value) in acc.per_task.iter().enumerate() {
                        out.push(MetricRecord { session: s.session, task: t + 1, metric, head: *head, value, seed: self.master_seed });
                    }
                }
            }
        }
        out
    }
}

pub fn write_records(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Per-session accuracies grouped by seed: `(metric, head) -> seed ->
/// session -> per-task values`.
type Grouped = BTreeMap<(Metric, ReportHead), BTreeMap<u64, BTreeMap<usize, Vec<(usize, f64)>>>>;

fn group(records: &[MetricRecord]) -> Grouped {
    let mut g: Grouped = BTreeMap::new();
    for r in records {
        g.entry((r.metric, r.head)).or_default().entry(r.seed).or_default().entry(r.session).or_default().push((r.task, r.value));
    }
    for seeds in g.values_mut() {
        for sessions in seeds.values_mut() {
            for tasks in sessions.values_mut() {
                tasks.sort_by_key(|(t, _)| *t);
            }
        }
    }
    g
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final-session table: one row per metric and head, one column per task
/// plus the unweighted average, each averaged over the seeds present.
pub fn render_summary(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    let grouped = group(records);
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let _ = writeln!(out, "seeds: {}", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "));
    let tasks = records.iter().map(|r| r.task).max().unwrap_or(0);
    let mut header = format!("{:<6} {:<10}", "metric", "head");
    for t in 1..=tasks {
        let _ = write!(header, " {:>7}", format!("T{t}"));
    }
    let _ = write!(header, " {:>8}", "Average");
    let _ = writeln!(out, "{header}");
    for ((metric, head), by_seed) in &grouped {
        let mut per_task = vec![Vec::new(); tasks];
        let mut averages = Vec::new();
        for sessions in by_seed.values() {
            let Some((_, last)) = sessions.iter().next_back() else { continue };
            for &(t, v) in last {
                per_task[t - 1].push(v);
            }
            averages.push(mean(&last.iter().map(|(_, v)| *v).collect::<Vec<_>>()));
        }
        let mut row = format!("{:<6} {:<10}", metric.as_str(), head.as_str());
        for vals in &per_task {
            if vals.is_empty() {
                let _ = write!(row, " {:>7}", "-");
            } else {
                let _ = write!(row, " {:>7.2}", 100.0 * mean(vals));
            }
        }
        let _ = write!(row, " {:>8.2}", 100.0 * mean(&averages));
        let _ = writeln!(out, "{row}");
    }
    out
}

/// Average accuracy over seen tasks after each session, averaged over seeds.
pub fn progression(records: &[MetricRecord], metric: Metric, head: ReportHead) -> Vec<(usize, f64)> {
    let grouped = group(records);
    let Some(by_seed) = grouped.get(&(metric, head)) else { return Vec::new() };
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for sessions in by_seed.values() {
        for (&s, tasks) in sessions {
            acc.entry(s).or_default().push(mean(&tasks.iter().map(|(_, v)| *v).collect::<Vec<_>>()));
        }
    }
    acc.into_iter().map(|(s, v)| (s, mean(&v))).collect()
}

const HEAD_COLORS: [(ReportHead, RGBColor); 3] =
    [(ReportHead::Primary, RGBColor(31, 119, 180)), (ReportHead::Auxiliary, RGBColor(255, 127, 14)), (ReportHead::Cem, RGBColor(44, 160, 44))];

/// Writes one SVG per metric with a line per head. Returns the written paths.
pub fn render_plots(records: &[MetricRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let mut written = Vec::new();
    for metric in [Metric::Sa, Metric::Ra] {
        let series: Vec<_> = HEAD_COLORS
            .iter()
            .map(|&(h, c)| (h, c, progression(records, metric, h)))
            .filter(|(_, _, p)| !p.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        let sessions = series.iter().flat_map(|(_, _, p)| p.iter().map(|(s, _)| *s)).max().unwrap_or(1);
        let path = dir.join(format!("progression_{}.svg", metric.as_str().to_lowercase()));
        {
            let root = SVGBackend::new(&path, (640, 420)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| plot_err(&e))?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("{} over seen tasks", metric.as_str()), ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(36)
                .y_label_area_size(48)
                .build_cartesian_2d(0.5f64..sessions as f64 + 0.5, 0f64..100f64)
                .map_err(|e| plot_err(&e))?;
            chart
                .configure_mesh()
                .x_desc("session")
                .y_desc("average accuracy (%)")
                .x_labels(sessions.min(20))
                .x_label_formatter(&|v| format!("{}", v.round() as i64))
                .draw()
                .map_err(|e| plot_err(&e))?;
            for (head, color, points) in &series {
                let pts: Vec<(f64, f64)> = points.iter().map(|&(s, v)| (s as f64, 100.0 * v)).collect();
                chart
                    .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                    .map_err(|e| plot_err(&e))?
                    .label(head.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], *color));
                chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(|e| plot_err(&e))?;
            }
            chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(|e| plot_err(&e))?;
            root.present().map_err(|e| plot_err(&e))?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Fails early if `dir` cannot be created or written.
pub fn preflight_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Renders the summary and plots from records alone.
pub fn render_from_records(records: &[MetricRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.txt"), render_summary(records))?;
    render_plots(records, dir)?;
    Ok(())
}

/// Writes `records.jsonl`, `report.json`, `summary.txt` and the SVG plots.
pub fn emit_report(report: &StreamReport, dir: &Path) -> Result<()> {
    preflight_output_dir(dir)?;
    let records = report.records();
    write_records(&records, &dir.join("records.jsonl"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    render_from_records(&records, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> StreamReport {
        let mut r = StreamReport::new(serde_json::json!({}), 3);
        for s in 1..=2 {
            let per_task: Vec<f64> = (0..s).map(|t| 0.5 + 0.1 * t as f64).collect();
            r.sessions.push(SessionReport {
                session: s,
                classes_seen: 2 * s,
                selected_epoch: 1,
                validation_accuracy: vec![0.5],
                bank_size: 0,
                queried_size: 0,
                wall_clock_secs: 0.0,
                sa: vec![(ReportHead::Primary, TaskAccuracy::from_per_task(per_task))],
                ra: vec![],
            });
        }
        r
    }

    #[test]
    fn records_form_a_lower_triangle() {
        let recs = report().records();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.task <= r.session));
    }

    #[test]
    fn summary_average_is_task_mean() {
        let s = render_summary(&report().records());
        assert!(s.contains("55.00"), "{s}");
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = report().records();
        write_records(&recs, &dir.path().join("r.jsonl")).unwrap();
        assert_eq!(read_records(&dir.path().join("r.jsonl")).unwrap(), recs);
    }
}
