//! Rendering of control traces and validation metrics into CSV tables and
//! static SVG plots. All output is deterministic: identical inputs yield
//! byte-identical files.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use formtwin_core::mpc::ControlTrace;
use formtwin_core::Result;

use crate::pipeline::{termination_label, ValidationMetrics};
use crate::plot::{LinePlot, Series};

pub struct ReportInputs<'a> {
    /// `(label, trace)` pairs, e.g. `("adapt_on", …)`.
    pub traces: &'a [(String, ControlTrace)],
    pub validation: Option<&'a ValidationMetrics>,
    pub station_grid: &'a [f64],
    pub tracker_grid: &'a [f64],
}

/// Render every table and plot into `dir`; returns the file names written.
pub fn render(dir: &Path, inputs: &ReportInputs) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for (label, trace) in inputs.traces {
        files.push(deformation_csv(dir, label, trace, inputs.tracker_grid)?);
        files.push(deformation_svg(dir, label, trace, inputs.tracker_grid)?);
        files.push(toolpaths_csv(dir, label, trace, inputs.station_grid)?);
        files.push(toolpaths_svg(dir, label, trace, inputs.station_grid)?);
        files.push(predicted_vs_true_csv(dir, label, trace, inputs.tracker_grid)?);
        files.push(predicted_vs_true_svg(dir, label, trace, inputs.tracker_grid)?);
        files.push(b_increments_csv(dir, label, trace)?);
    }
    files.push(summary_csv(dir, inputs.traces)?);
    if let Some(v) = inputs.validation {
        files.push(validation_csv(dir, v)?);
        files.push(validation_svg(dir, v)?);
    }
    Ok(files)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn write_file(dir: &Path, name: &str, content: String) -> Result<String> {
    fs::write(dir.join(name), content)?;
    Ok(name.to_string())
}

/// Wide table: one row per cycle (plus the final measurement), one column
/// per tracker. An empty trace produces just the header.
fn deformation_csv(
    dir: &Path,
    label: &str,
    trace: &ControlTrace,
    tracker_grid: &[f64],
) -> Result<String> {
    let mut out = String::from("cycle");
    for y in tracker_grid {
        out.push_str(&format!(",tracker_{y:.0}mm"));
    }
    out.push_str(",max_deviation_mm\n");
    for r in &trace.records {
        out.push_str(&r.cycle.to_string());
        for v in &r.measured {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push(',');
        out.push_str(&fmt(r.max_deviation_mm));
        out.push('\n');
    }
    if let Some(last) = trace.records.last() {
        out.push_str(&(last.cycle + 1).to_string());
        for v in &trace.final_measured {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push(',');
        out.push_str(&fmt(trace.final_max_deviation_mm));
        out.push('\n');
    }
    write_file(dir, &format!("deformation_vs_cycle_{label}.csv"), out)
}

fn deformation_svg(
    dir: &Path,
    label: &str,
    trace: &ControlTrace,
    tracker_grid: &[f64],
) -> Result<String> {
    let mut series = Vec::new();
    for (t, y) in tracker_grid.iter().enumerate() {
        let mut points: Vec<(f64, f64)> = trace
            .records
            .iter()
            .map(|r| (r.cycle as f64, r.measured[t]))
            .collect();
        if let Some(last) = trace.records.last() {
            points.push(((last.cycle + 1) as f64, trace.final_measured[t]));
        }
        series.push(Series { label: format!("y={y:.0}mm"), points, dashed: false });
    }
    let plot = LinePlot {
        title: format!("Measured deformation per cycle ({label})"),
        x_label: "cycle".to_string(),
        y_label: "deflection [mm]".to_string(),
        series,
    };
    write_file(dir, &format!("deformation_vs_cycle_{label}.svg"), plot.svg())
}

/// Wide table: one row per station, one column per applied toolpath.
fn toolpaths_csv(
    dir: &Path,
    label: &str,
    trace: &ControlTrace,
    station_grid: &[f64],
) -> Result<String> {
    let mut out = String::from("station_mm");
    for r in &trace.records {
        out.push_str(&format!(",cycle_{}", r.cycle));
    }
    out.push('\n');
    if !trace.records.is_empty() {
        for (s, y) in station_grid.iter().enumerate() {
            out.push_str(&fmt(*y));
            for r in &trace.records {
                out.push(',');
                out.push_str(&fmt(r.applied_toolpath[s]));
            }
            out.push('\n');
        }
    }
    write_file(dir, &format!("toolpaths_vs_cycle_{label}.csv"), out)
}

fn toolpaths_svg(
    dir: &Path,
    label: &str,
    trace: &ControlTrace,
    station_grid: &[f64],
) -> Result<String> {
    let series = trace
        .records
        .iter()
        .map(|r| Series {
            label: format!("cycle {}", r.cycle),
            points: station_grid
                .iter()
                .zip(&r.applied_toolpath)
                .map(|(&y, &v)| (y, v))
                .collect(),
            dashed: false,
        })
        .collect();
    let plot = LinePlot {
        title: format!("Applied toolpaths ({label})"),
        x_label: "station [mm]".to_string(),
        y_label: "tool depth [mm]".to_string(),
        series,
    };
    write_file(dir, &format!("toolpaths_vs_cycle_{label}.svg"), plot.svg())
}

/// Long table comparing the model's one-step prediction with the snapshot
/// actually measured one cycle later.
fn predicted_vs_true_csv(
    dir: &Path,
    label: &str,
    trace: &ControlTrace,
    tracker_grid: &[f64],
) -> Result<String> {
    let mut out = String::from("cycle,tracker_mm,predicted_mm,measured_next_mm\n");
    for (k, r) in trace.records.iter().enumerate() {
        let next = match trace.records.get(k + 1) {
            Some(n) => &n.measured,
            None => &trace.final_measured,
        };
        for (t, y) in tracker_grid.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.cycle,
                fmt(*y),
                fmt(r.predicted_next[t]),
                fmt(next[t])
            ));
        }
    }
    write_file(dir, &format!("predicted_vs_true_{label}.csv"), out)
}

fn predicted_vs_true_svg(
    dir: &Path,
    label: &str,
    trace: &ControlTrace,
    tracker_grid: &[f64],
) -> Result<String> {
    let mut series = Vec::new();
    for (k, r) in trace.records.iter().enumerate() {
        let next = match trace.records.get(k + 1) {
            Some(n) => &n.measured,
            None => &trace.final_measured,
        };
        series.push(Series {
            label: format!("measured {}", r.cycle + 1),
            points: tracker_grid.iter().zip(next).map(|(&y, &v)| (y, v)).collect(),
            dashed: false,
        });
        series.push(Series {
            label: format!("predicted {}", r.cycle + 1),
            points: tracker_grid
                .iter()
                .zip(&r.predicted_next)
                .map(|(&y, &v)| (y, v))
                .collect(),
            dashed: true,
        });
    }
    let plot = LinePlot {
        title: format!("One-step prediction vs measurement ({label})"),
        x_label: "tracker [mm]".to_string(),
        y_label: "deflection [mm]".to_string(),
        series,
    };
    write_file(dir, &format!("predicted_vs_true_{label}.svg"), plot.svg())
}

/// The summed input-map increment over all online updates, one row per
/// lifted coordinate. Header-only when no update fired.
fn b_increments_csv(dir: &Path, label: &str, trace: &ControlTrace) -> Result<String> {
    let mut total: Option<Array2<f64>> = None;
    for r in &trace.records {
        if let Some(inc) = &r.b_increment {
            match &mut total {
                Some(t) => *t += &inc.delta,
                None => total = Some(inc.delta.clone()),
            }
        }
    }
    let mut out = String::from("lifted_index");
    let inputs = total.as_ref().map(|t| t.ncols()).unwrap_or(0);
    for j in 0..inputs {
        out.push_str(&format!(",u_{j}"));
    }
    out.push('\n');
    if let Some(t) = &total {
        for i in 0..t.nrows() {
            out.push_str(&i.to_string());
            for j in 0..t.ncols() {
                out.push(',');
                out.push_str(&format!("{:.6e}", t[[i, j]]));
            }
            out.push('\n');
        }
    }
    write_file(dir, &format!("b_increments_{label}.csv"), out)
}

fn summary_csv(dir: &Path, traces: &[(String, ControlTrace)]) -> Result<String> {
    let mut out =
        String::from("trace,final_max_deviation_mm,cycles_used,termination,b_updates\n");
    for (label, trace) in traces {
        out.push_str(&format!(
            "{label},{},{},{},{}\n",
            fmt(trace.final_max_deviation_mm),
            trace.cycles_used(),
            termination_label(&trace.termination),
            trace.records.iter().filter(|r| r.b_updated).count()
        ));
    }
    write_file(dir, "summary.csv", out)
}

fn validation_csv(dir: &Path, v: &ValidationMetrics) -> Result<String> {
    let mut out = String::from("tracker_mm,mae_mm\n");
    for (y, mae) in v.tracker_grid.iter().zip(&v.per_tracker_mae_mm) {
        out.push_str(&format!("{},{}\n", fmt(*y), fmt(*mae)));
    }
    write_file(dir, "validation_mae.csv", out)
}

fn validation_svg(dir: &Path, v: &ValidationMetrics) -> Result<String> {
    let plot = LinePlot {
        title: "Held-out one-step MAE per tracker".to_string(),
        x_label: "tracker [mm]".to_string(),
        y_label: "MAE [mm]".to_string(),
        series: vec![Series {
            label: "mae".to_string(),
            points: v
                .tracker_grid
                .iter()
                .zip(&v.per_tracker_mae_mm)
                .map(|(&y, &m)| (y, m))
                .collect(),
            dashed: false,
        }],
    };
    write_file(dir, "validation_mae.svg", plot.svg())
}
