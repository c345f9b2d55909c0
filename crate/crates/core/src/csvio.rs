//! Plain CSV helpers shared by designs, datasets and fit reports.
//!
//! Numbers are written with 17 significant digits in C `%.17g` style so that
//! every `f64` survives a write/read cycle bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{GpError, Result};

/// Formats `x` the way C's `printf("%.17g", x)` does.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (16 - exp) as usize;
        strip_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes a header line plus one row per matrix row.
pub fn write_matrix<W: Write>(mut w: W, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if !header.is_empty() {
        writeln!(w, "{}", header.join(","))?;
    }
    let mut line = String::new();
    for i in 0..m.nrows() {
        line.clear();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            let _ = write!(line, "{}", fmt_g17(m[(i, j)]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a numeric CSV with a single header row. Returns the header and the
/// data matrix (`rows x header.len()`).
pub fn read_matrix<R: BufRead>(r: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut lines = r.lines();
    let header: Vec<String> = match lines.next() {
        Some(line) => line?.trim().split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(GpError::Parse("empty CSV: missing header".into())),
    };
    let ncols = header.len();
    let mut data = Vec::new();
    let mut nrows = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(GpError::Parse(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                ncols,
                fields.len()
            )));
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| {
                GpError::Parse(format!("line {}: not a number: {f:?}", lineno + 2))
            })?;
            data.push(v);
        }
        nrows += 1;
    }
    Ok((header, DMatrix::from_row_slice(nrows, ncols, &data)))
}
