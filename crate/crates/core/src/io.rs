//! CSV formats.
//!
//! Matrix files: first line `rows,cols`, then one comma-separated row per
//! line. Observation files: header `i,j,value`, 0-based indices. Floats are
//! written with 17 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{ImcError, Result};
use crate::model::{ObservationSet, Sample};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "{},{}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|e| ImcError::Parse(format!("line {line}: cannot parse {tok:?} as a number: {e}")))
}

pub fn read_matrix<R: BufRead>(r: R) -> Result<DMatrix<f64>> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let (_, header) = lines.next().ok_or_else(|| ImcError::Parse("empty matrix file".into()))?;
    let header = header?;
    let dims: Vec<&str> = header.split(',').collect();
    if dims.len() != 2 {
        return Err(ImcError::Parse(format!("matrix header must be rows,cols, got {header:?}")));
    }
    let parse_dim = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| ImcError::Parse(format!("bad matrix dimension {s:?}: {e}")))
    };
    let (rows, cols) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, line) in lines {
        let line = line?;
        let vals = line
            .split(',')
            .map(|t| parse_f64(t, ln + 1))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != cols {
            return Err(ImcError::Parse(format!("line {}: expected {cols} values, got {}", ln + 1, vals.len())));
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(ImcError::Parse(format!("expected {rows} rows, got {seen}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix(BufReader::new(File::open(path)?))
}

pub fn write_observations<W: Write>(mut w: W, obs: &ObservationSet) -> Result<()> {
    writeln!(w, "i,j,value")?;
    for s in obs.samples() {
        writeln!(w, "{},{},{}", s.i, s.j, fmt_f64(s.value))?;
    }
    Ok(())
}

pub fn write_observations_csv(path: impl AsRef<Path>, obs: &ObservationSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_observations(&mut w, obs)?;
    w.flush()?;
    Ok(())
}

pub fn read_observations<R: BufRead>(r: R, m: usize, n: usize) -> Result<ObservationSet> {
    let mut samples = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if ln == 0 {
            if line.replace(' ', "") != "i,j,value" {
                return Err(ImcError::Parse(format!("observation header must be i,j,value, got {line:?}")));
            }
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 3 {
            return Err(ImcError::Parse(format!("line {}: expected 3 fields", ln + 1)));
        }
        let idx = |t: &str| {
            t.trim()
                .parse::<u32>()
                .map_err(|e| ImcError::Parse(format!("line {}: bad index {t:?}: {e}", ln + 1)))
        };
        samples.push(Sample { i: idx(toks[0])?, j: idx(toks[1])?, value: parse_f64(toks[2], ln + 1)? });
    }
    ObservationSet::from_samples(m, n, samples)
}

pub fn read_observations_csv(path: impl AsRef<Path>, m: usize, n: usize) -> Result<ObservationSet> {
    read_observations(BufReader::new(File::open(path)?), m, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_is_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, 2.5e10, std::f64::consts::PI, -0.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let back = read_matrix(&buf[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn observations_roundtrip() {
        let obs = ObservationSet::from_samples(
            3,
            2,
            vec![Sample { i: 2, j: 1, value: 0.7 }, Sample { i: 0, j: 0, value: -1.0 / 7.0 }],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_observations(&mut buf, &obs).unwrap();
        let back = read_observations(&buf[..], 3, 2).unwrap();
        assert_eq!(back.samples(), obs.samples());
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(read_matrix(&b"2,2\n1,2\n"[..]).is_err());
        assert!(read_observations(&b"a,b,c\n0,0,1\n"[..], 1, 1).is_err());
        assert!(read_observations(&b"i,j,value\n5,0,1\n"[..], 1, 1).is_err());
    }
}
