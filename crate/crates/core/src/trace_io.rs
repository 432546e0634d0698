//! Trace and oracle CSV files, run manifests and event logs.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so a read-back is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::oracle::AlphaStar;
use crate::sim::{RunStatus, SimulationTrace, TraceLayout};

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_columns(layout: &TraceLayout) -> Vec<String> {
    let (n, r) = (layout.n, layout.r);
    let mut cols = vec!["t".to_string()];
    for i in 1..=r {
        cols.extend((1..=n).map(|j| format!("x_{i}_{j}")));
    }
    cols.extend(layout.aux_names.iter().cloned());
    cols.extend((1..=n).map(|j| format!("u_{j}")));
    cols.extend(["alpha", "alpha_bar", "rho_alpha"].map(String::from));
    if layout.adaptive {
        cols.extend(["varrho", "alpha_hat"].map(String::from));
        cols.extend((1..=n).map(|j| format!("x_tilde_{j}")));
    }
    cols.extend(["e_alpha", "eps_alpha"].map(String::from));
    for i in 2..=r {
        cols.extend((1..=n).map(|j| format!("e_hat_{i}_{j}")));
    }
    cols.push("event".into());
    cols
}

pub fn write_trace_csv<W: Write>(trace: &SimulationTrace, out: W) -> Result<()> {
    let layout = &trace.layout;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_columns(layout))?;
    let mut row: Vec<String> = Vec::new();
    for rec in &trace.records {
        row.clear();
        row.push(fmt_f64(rec.t));
        row.extend(rec.state.iter().map(|v| fmt_f64(*v)));
        row.extend(rec.u.iter().map(|v| fmt_f64(*v)));
        row.extend([rec.alpha, rec.alpha_bar, rec.rho_alpha].map(fmt_f64));
        if layout.adaptive {
            row.push(fmt_f64(rec.varrho.unwrap_or(f64::NAN)));
            row.push(fmt_f64(rec.alpha_hat.unwrap_or(f64::NAN)));
            match &rec.x_tilde {
                Some(xt) => row.extend(xt.iter().map(|v| fmt_f64(*v))),
                None => row.extend((0..layout.n).map(|_| fmt_f64(f64::NAN))),
            }
        }
        row.extend([rec.e_alpha, rec.eps_alpha].map(fmt_f64));
        row.extend(rec.e_hat.iter().map(|v| fmt_f64(*v)));
        row.push(rec.event.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trace.csv`, `manifest.json` and `events.log` into `dir`, creating it if needed.
pub fn emit_trace(
    trace: &SimulationTrace,
    dir: &Path,
    resolved: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trace_csv(trace, fs::File::create(dir.join("trace.csv"))?)?;
    let manifest = json!({
        "name": trace.name,
        "status": match trace.status {
            RunStatus::Completed => "completed",
            RunStatus::Aborted => "aborted",
        },
        "records": trace.records.len(),
        "columns": trace_columns(&trace.layout),
        "n": trace.layout.n,
        "r": trace.layout.r,
        "adaptive": trace.layout.adaptive,
        "resolved": resolved,
        "events": trace.events.len(),
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let mut log = String::new();
    for e in &trace.events {
        log.push_str(&format!("{}\t{}\t{}\n", fmt_f64(e.t), e.kind, e.detail));
    }
    fs::write(dir.join("events.log"), log)?;
    Ok(())
}

/// A numeric CSV read back by column name. The `event` column is kept as text.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// The `event` column, if present.
    pub events: Vec<String>,
}

impl Table {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.index(name).is_some()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn read_table<R: std::io::Read>(input: R) -> Result<Table> {
    let mut rd = csv::Reader::from_reader(input);
    let columns: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    let event_col = columns.iter().position(|c| c == "event");
    let mut rows = Vec::new();
    let mut events = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(columns.len());
        for (i, field) in rec.iter().enumerate() {
            if Some(i) == event_col {
                events.push(field.to_string());
                row.push(f64::NAN);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                location: format!("row {}, column {}", k + 2, columns[i]),
                message: format!("`{field}` is not a number"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(Table { columns, rows, events })
}

pub fn read_table_file(path: &Path) -> Result<Table> {
    read_table(fs::File::open(path)?)
}

pub fn oracle_columns(n: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["t", "alpha_star", "alpha_bar_star", "on_boundary"].map(String::from).into();
    cols.extend((1..=n).map(|j| format!("argmax_{j}")));
    cols
}

pub fn write_oracle_csv<W: Write>(times: &[f64], stars: &[AlphaStar], n: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(oracle_columns(n))?;
    for (t, s) in times.iter().zip(stars) {
        let mut row = vec![
            fmt_f64(*t),
            fmt_f64(s.alpha_star),
            fmt_f64(s.alpha_bar_star),
            if s.on_boundary { "1" } else { "0" }.to_string(),
        ];
        row.extend(s.argmax.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{TraceEvent, TraceRecord};

    fn layout(adaptive: bool) -> TraceLayout {
        TraceLayout {
            n: 2,
            r: 2,
            aux_names: vec!["theta".into()],
            adaptive,
        }
    }

    fn record(t: f64, event: Option<&str>) -> TraceRecord {
        TraceRecord {
            t,
            state: vec![0.1, -1.0 / 3.0, 2.5e-17, 1e300, 0.7],
            u: vec![std::f64::consts::PI, -0.0],
            alpha: 0.123_456_789_012_345_67,
            alpha_bar: 0.2,
            rho_alpha: -1.0,
            varrho: Some(0.4),
            alpha_hat: Some(0.11),
            x_tilde: Some(vec![1.0, 2.0]),
            e_alpha: 0.9,
            eps_alpha: 2.2,
            e_hat: vec![0.5, -0.25],
            event: event.map(String::from),
        }
    }

    #[test]
    fn columns_follow_layout() {
        assert_eq!(
            trace_columns(&layout(false)).join(","),
            "t,x_1_1,x_1_2,x_2_1,x_2_2,theta,u_1,u_2,alpha,alpha_bar,rho_alpha,e_alpha,eps_alpha,e_hat_2_1,e_hat_2_2,event"
        );
        assert!(trace_columns(&layout(true)).contains(&"x_tilde_2".to_string()));
    }

    #[test]
    fn empty_trace_is_header_only() {
        let mut buf = Vec::new();
        write_trace_csv(&SimulationTrace::empty("e", layout(false)), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("t,x_1_1"));
    }

    #[test]
    fn floats_round_trip_exactly() {
        let mut tr = SimulationTrace::empty("r", layout(true));
        tr.records = vec![record(0.0, None), record(0.001, Some("a, \"quoted\" tag"))];
        let mut buf = Vec::new();
        write_trace_csv(&tr, &mut buf).unwrap();
        let t = read_table(buf.as_slice()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.column("x_1_2").unwrap()[0].to_bits(), (-1.0f64 / 3.0).to_bits());
        assert_eq!(t.column("x_2_2").unwrap()[1], 1e300);
        assert_eq!(t.column("alpha").unwrap()[0], 0.123_456_789_012_345_67);
        assert_eq!(t.column("u_2").unwrap()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(t.events, vec!["".to_string(), "a, \"quoted\" tag".to_string()]);
    }

    #[test]
    fn emit_writes_three_files_and_marks_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let mut tr = SimulationTrace::empty("a", layout(false));
        tr.records = vec![record(0.0, None), record(0.5, Some("constraint_transform_singularity"))];
        tr.events.push(TraceEvent {
            t: 0.5,
            kind: "constraint_transform_singularity".into(),
            detail: "e_alpha = 0".into(),
        });
        tr.status = RunStatus::Aborted;
        emit_trace(&tr, dir.path(), &BTreeMap::new()).unwrap();
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["status"], "aborted");
        let t = read_table_file(&dir.path().join("trace.csv")).unwrap();
        assert_eq!(t.events.last().unwrap(), "constraint_transform_singularity");
        let log = fs::read_to_string(dir.path().join("events.log")).unwrap();
        assert_eq!(log.lines().count(), 1);
    }

    #[test]
    fn bad_number_is_located() {
        let err = read_table("t,alpha\n0,1\n1,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref location, .. } if location == "row 3, column alpha"));
    }
}
