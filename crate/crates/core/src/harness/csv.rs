//! Plain CSV emission and parsing for paths, weights and summaries.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces the in-memory values bit for bit.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sde::{SamplePath, TimeGrid};
use crate::weights::LogWeight;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("csv line {line}: {}", message.into()))
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("not a number: '{field}'")))
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(field, line).map(Some)
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `path_id,t,x_0,…` with one row per path and node, in the order given.
pub fn write_paths<W: Write>(mut w: W, paths: &[(usize, &SamplePath)]) -> Result<()> {
    let dim = paths.first().map_or(1, |(_, p)| p.dim());
    write!(w, "path_id,t")?;
    for c in 0..dim {
        write!(w, ",x_{c}")?;
    }
    writeln!(w)?;
    for (id, path) in paths {
        if path.dim() != dim {
            return Err(Error::Dimension("paths in one CSV must share a dimension".into()));
        }
        for (i, t) in path.grid().nodes().iter().enumerate() {
            write!(w, "{id},{t}")?;
            for x in path.state(i) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Reads a file written by [`write_paths`]. Paths sharing a node sequence
/// share one grid.
pub fn read_paths<R: BufRead>(r: R) -> Result<Vec<(usize, SamplePath)>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "path_id" || cols[1] != "t" {
        return Err(parse_err(1, "expected header `path_id,t,x_0,…`"));
    }
    let dim = cols.len() - 2;
    let mut raw: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(n + 2, format!("expected {} fields", dim + 2)));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(n + 2, "bad path_id"))?;
        let t = parse_f64(fields[1], n + 2)?;
        if raw.last().is_none_or(|(last, _, _)| *last != id) {
            raw.push((id, Vec::new(), Vec::new()));
        }
        let (_, ts, xs) = raw.last_mut().expect("pushed above");
        ts.push(t);
        for f in &fields[2..] {
            xs.push(parse_f64(f, n + 2)?);
        }
    }
    let mut grids: Vec<Arc<TimeGrid>> = Vec::new();
    raw.into_iter()
        .map(|(id, ts, xs)| {
            let grid = match grids.iter().find(|g| g.nodes() == ts.as_slice()) {
                Some(g) => g.clone(),
                None => {
                    let g = Arc::new(TimeGrid::from_nodes(ts)?);
                    grids.push(g.clone());
                    g
                }
            };
            Ok((id, SamplePath::new(grid, dim, xs)?))
        })
        .collect()
}

/// One row of a weights CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub path_id: usize,
    pub log_total: f64,
    pub log_psi1: Option<f64>,
    pub log_psi2: Option<f64>,
    pub log_const: Option<f64>,
    pub g_integral: Option<f64>,
}

impl WeightRecord {
    pub fn new(path_id: usize, w: &LogWeight) -> Self {
        Self {
            path_id,
            log_total: w.total,
            log_psi1: w.log_psi1,
            log_psi2: w.log_psi2,
            log_const: w.log_const,
            g_integral: w.g_integral,
        }
    }
}

pub const WEIGHTS_HEADER: &str = "path_id,log_total,log_psi1,log_psi2,log_const,g_integral";

/// Writes weights; absent components are empty fields.
pub fn write_weights<W: Write>(mut w: W, rows: &[WeightRecord]) -> Result<()> {
    writeln!(w, "{WEIGHTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.path_id,
            r.log_total,
            opt(r.log_psi1),
            opt(r.log_psi2),
            opt(r.log_const),
            opt(r.g_integral)
        )?;
    }
    Ok(())
}

pub fn read_weights<R: BufRead>(r: R) -> Result<Vec<WeightRecord>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
    if header.trim() != WEIGHTS_HEADER {
        return Err(parse_err(1, format!("expected header `{WEIGHTS_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(n + 2, "expected 6 fields"));
        }
        rows.push(WeightRecord {
            path_id: f[0].parse().map_err(|_| parse_err(n + 2, "bad path_id"))?,
            log_total: parse_f64(f[1], n + 2)?,
            log_psi1: parse_opt(f[2], n + 2)?,
            log_psi2: parse_opt(f[3], n + 2)?,
            log_const: parse_opt(f[4], n + 2)?,
            g_integral: parse_opt(f[5], n + 2)?,
        });
    }
    Ok(rows)
}

/// A table of named numeric columns with a leading text label column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub label: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    pub fn new(label: &str, columns: &[&str]) -> Self {
        Self {
            label: label.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<Option<f64>>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((name.into(), values));
    }

    /// The value in row `name`, column `column`.
    pub fn get(&self, name: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(n, _)| n == name)?.1[c]
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},{}", self.label, self.columns.join(","))?;
        for (name, values) in &self.rows {
            write!(w, "{name}")?;
            for v in values {
                write!(w, ",{}", opt(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
        let mut cols = header.split(',').map(str::to_string);
        let label = cols.next().unwrap_or_default();
        let columns: Vec<String> = cols.collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != columns.len() + 1 {
                return Err(parse_err(n + 2, format!("expected {} fields", columns.len() + 1)));
            }
            let values = f[1..]
                .iter()
                .map(|x| parse_opt(x, n + 2))
                .collect::<Result<_>>()?;
            rows.push((f[0].to_string(), values));
        }
        Ok(Self { label, columns, rows })
    }
}
