//! Per-round metrics and their CSV form.
//!
//! Columns: `round,fgrad,objective`, then six columns per task `i`:
//! `loss_i,inverse_rate_i,rel_rate_i,weight_i,actual_norm_i,target_norm_i`.
//! Floats are written with 17 significant digits, which round-trips `f64`
//! exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRoundMetrics {
    pub raw_loss: f64,
    pub inverse_rate: f64,
    pub rel_rate: f64,
    pub weight: f64,
    /// `pᵢ·‖∇_tail Fᵢ‖` at the weights entering the round.
    pub actual_norm: f64,
    pub target_norm: f64,
}

impl TaskRoundMetrics {
    fn fields(&self) -> [f64; 6] {
        [
            self.raw_loss,
            self.inverse_rate,
            self.rel_rate,
            self.weight,
            self.actual_norm,
            self.target_norm,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    pub fgrad: f64,
    /// `(1/N) Σᵢ pᵢ·Fᵢ` with the round's weights and losses.
    pub objective: f64,
    pub tasks: Vec<TaskRoundMetrics>,
}

impl RoundMetrics {
    pub fn weights(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.weight).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.raw_loss).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.fgrad.is_finite()
            && self.objective.is_finite()
            && self
                .tasks
                .iter()
                .all(|t| t.fields().iter().all(|v| v.is_finite()))
    }
}

const TASK_COLUMNS: [&str; 6] = [
    "loss",
    "inverse_rate",
    "rel_rate",
    "weight",
    "actual_norm",
    "target_norm",
];

pub fn header(num_tasks: usize) -> Vec<String> {
    let mut cols = vec!["round".to_string(), "fgrad".into(), "objective".into()];
    for i in 0..num_tasks {
        cols.extend(TASK_COLUMNS.iter().map(|c| format!("{c}_{i}")));
    }
    cols
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the CSV to any sink.
pub fn write_metrics_to<W: Write>(
    metrics: &[RoundMetrics],
    num_tasks: usize,
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    };
    w.write_record(header(num_tasks)).map_err(csv_err)?;
    for m in metrics {
        if m.tasks.len() != num_tasks {
            return Err(Error::invalid(format!(
                "round {} has {} tasks, expected {num_tasks}",
                m.round,
                m.tasks.len()
            )));
        }
        let mut row = vec![
            m.round.to_string(),
            fmt_float(m.fgrad),
            fmt_float(m.objective),
        ];
        for t in &m.tasks {
            row.extend(t.fields().iter().map(|&v| fmt_float(v)));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(metrics: &[RoundMetrics], num_tasks: usize, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_metrics_to(metrics, num_tasks, file)
}

/// Parses a file written by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(1, e.to_string()))?;
    let headers = r
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.len() < 3 || (headers.len() - 3) % TASK_COLUMNS.len() != 0 {
        return Err(parse_err(
            1,
            format!("{} columns is not 3 + 6·N", headers.len()),
        ));
    }
    let num_tasks = (headers.len() - 3) / TASK_COLUMNS.len();
    if headers
        .iter()
        .ne(header(num_tasks).iter().map(String::as_str))
    {
        return Err(parse_err(1, "unexpected column names".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec =
            rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| parse_err(line, format!("`{}` is not a number", &rec[i])))
        };
        let round = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("`{}` is not a round index", &rec[0])))?;
        let mut tasks = Vec::with_capacity(num_tasks);
        for t in 0..num_tasks {
            let base = 3 + t * TASK_COLUMNS.len();
            tasks.push(TaskRoundMetrics {
                raw_loss: num(base)?,
                inverse_rate: num(base + 1)?,
                rel_rate: num(base + 2)?,
                weight: num(base + 3)?,
                actual_norm: num(base + 4)?,
                target_norm: num(base + 5)?,
            });
        }
        out.push(RoundMetrics {
            round,
            fgrad: num(1)?,
            objective: num(2)?,
            tasks,
        });
    }
    Ok(out)
}
