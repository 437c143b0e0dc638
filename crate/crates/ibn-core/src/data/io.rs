//! CSV persistence for series, adjacency matrices, and node coordinates.
//!
//! Floats are written with 17 significant digits, which round-trips
//! every f64 bit pattern exactly. Parse errors carry the 1-based line
//! number of the offending row.

use super::SeriesSet;
use crate::error::{IbnError, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| IbnError::io(path.display().to_string(), e))
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| IbnError::io(path.display().to_string(), e))
}

fn parse_cell(path: &Path, line: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| IbnError::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("expected a number, got {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(IbnError::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

/// Series CSV: header row of variable ids, then one row per time step.
pub fn write_series_csv(path: &Path, series: &SeriesSet) -> Result<()> {
    let (t, n) = series.values.dims2()?;
    if series.ids.len() != n {
        return Err(IbnError::invalid(format!(
            "series has {n} columns but {} ids",
            series.ids.len()
        )));
    }
    let mut out = String::new();
    out.push_str(&series.ids.join(","));
    out.push('\n');
    for ti in 0..t {
        for v in 0..n {
            if v > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_f64(series.values.get2(ti, v)));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn load_series_csv(path: &Path) -> Result<SeriesSet> {
    let content = read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| IbnError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "empty file, expected a header row of variable ids".to_string(),
    })?;
    let ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n = ids.len();
    if n == 0 || ids.iter().any(|id| id.is_empty()) {
        return Err(IbnError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "header must list non-empty variable ids".to_string(),
        });
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(IbnError::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: format!("expected {n} columns, got {}", cells.len()),
            });
        }
        for cell in cells {
            rows.push(parse_cell(path, lineno, cell)?);
        }
        t += 1;
    }
    if t == 0 {
        return Err(IbnError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "no data rows after the header".to_string(),
        });
    }
    Ok(SeriesSet {
        values: Tensor::new(vec![t, n], rows)?,
        ids,
        coords: None,
    })
}

/// Adjacency CSV: N rows of N values, no header.
pub fn write_adjacency_csv(path: &Path, adjacency: &Tensor) -> Result<()> {
    let (n, _) = adjacency.dims2()?;
    let mut out = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_f64(adjacency.get2(i, j)));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn load_adjacency_csv(path: &Path) -> Result<Tensor> {
    let content = read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|c| parse_cell(path, lineno, c))
            .collect();
        rows.push(row?);
    }
    let n = rows.len();
    if n == 0 {
        return Err(IbnError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "empty adjacency file".to_string(),
        });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(IbnError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("adjacency must be square: {n} rows but row has {} columns", row.len()),
            });
        }
    }
    Tensor::from_rows(&rows)
}

/// Coordinates CSV: header "id,x,y", one row per node.
pub fn write_coords_csv(path: &Path, ids: &[String], coords: &Tensor) -> Result<()> {
    let (n, two) = coords.dims2()?;
    if two != 2 {
        return Err(IbnError::invalid(format!(
            "coordinates must be N x 2, got {:?}",
            coords.shape()
        )));
    }
    if ids.len() != n {
        return Err(IbnError::invalid(format!(
            "{n} coordinate rows but {} ids",
            ids.len()
        )));
    }
    let mut out = String::from("id,x,y\n");
    for (i, id) in ids.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{}",
            id,
            fmt_f64(coords.get2(i, 0)),
            fmt_f64(coords.get2(i, 1))
        );
    }
    write_string(path, &out)
}

pub fn load_coords_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let content = read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| IbnError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "empty file, expected header id,x,y".to_string(),
    })?;
    if header.trim() != "id,x,y" {
        return Err(IbnError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected header \"id,x,y\", got {header:?}"),
        });
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(IbnError::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: format!("expected 3 columns, got {}", cells.len()),
            });
        }
        let id = cells[0].trim();
        if id.is_empty() {
            return Err(IbnError::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: "empty node id".to_string(),
            });
        }
        ids.push(id.to_string());
        data.push(parse_cell(path, lineno, cells[1])?);
        data.push(parse_cell(path, lineno, cells[2])?);
    }
    if ids.is_empty() {
        return Err(IbnError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "no coordinate rows after the header".to_string(),
        });
    }
    let n = ids.len();
    Ok((ids, Tensor::new(vec![n, 2], data)?))
}
