//! CSV encodings of measures and flows.
//!
//! Comma-separated, `.` decimal point, one header row, LF line endings.
//! Floats use Rust's shortest round-trip formatting, so output is bit-stable.

use std::io::{BufRead, Write};

use super::{EmpiricalMeasure, MeasureFlow};
use crate::error::{Error, Result};

fn coord_header(d: usize) -> String {
    (1..=d).map(|c| format!("x_{c}")).collect::<Vec<_>>().join(",")
}

/// Writes `weight,x_1..x_d`.
pub fn write_measure_csv<W: Write>(mut out: W, m: &EmpiricalMeasure) -> Result<()> {
    writeln!(out, "weight,{}", coord_header(m.dim()))?;
    for (x, w) in m.iter() {
        write!(out, "{w}")?;
        for v in x {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn parse_row(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {lineno}: `{f}`: {e}")))
        })
        .collect()
}

/// Reads the format written by [`write_measure_csv`].
pub fn read_measure_csv<R: BufRead>(input: R) -> Result<EmpiricalMeasure> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(Error::EmptyData("measure CSV is empty"))??;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"weight") || cols.len() < 2 {
        return Err(Error::Parse(format!("unexpected header `{header}`")));
    }
    let d = cols.len() - 1;
    let (mut atoms, mut weights) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(&line, i + 2)?;
        if row.len() != d + 1 {
            return Err(Error::Parse(format!("line {}: expected {} fields", i + 2, d + 1)));
        }
        weights.push(row[0]);
        atoms.extend_from_slice(&row[1..]);
    }
    EmpiricalMeasure::new(d, atoms, weights)
}

/// Writes `t,x_1..x_d,weight`, one row per atom per node.
pub fn write_flow_csv<W: Write>(mut out: W, flow: &MeasureFlow) -> Result<()> {
    writeln!(out, "t,{},weight", coord_header(flow.dim()))?;
    for (t, m) in flow.grid().nodes().iter().zip(flow.measures()) {
        for (x, w) in m.iter() {
            write!(out, "{t}")?;
            for v in x {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{w}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_round_trip() {
        let m = EmpiricalMeasure::new(2, vec![0.1, -3.0, 1e-17, 2.5], vec![0.3, 0.7]).unwrap();
        let mut buf = Vec::new();
        write_measure_csv(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"weight,x_1,x_2\n"));
        let back = read_measure_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(read_measure_csv("weight,x_1\n0.5,abc\n".as_bytes()).is_err());
        assert!(read_measure_csv("weight,x_1\n0.5\n".as_bytes()).is_err());
        assert!(read_measure_csv("".as_bytes()).is_err());
    }
}
