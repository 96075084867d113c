//! Matrix Market text format (`coordinate` and `array`, real or integer).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{Layout, MatrixStorage, Symmetry, TripletBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    Coordinate,
    Array,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_matrix_market(path: impl AsRef<Path>) -> Result<MatrixStorage> {
    let text = fs::read_to_string(path)?;
    parse_matrix_market(&text)
}

/// Parses Matrix Market text. Line numbers in errors are 1-based.
pub fn parse_matrix_market(text: &str) -> Result<MatrixStorage> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file"))?;
    let tokens: Vec<String> = header
        .split_whitespace()
        .map(str::to_ascii_lowercase)
        .collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(parse_err(hline, "missing %%MatrixMarket matrix header"));
    }
    let format = match tokens[2].as_str() {
        "coordinate" => Format::Coordinate,
        "array" => Format::Array,
        other => return Err(parse_err(hline, format!("unknown format '{other}'"))),
    };
    match tokens[3].as_str() {
        "real" | "integer" | "double" => {}
        "complex" | "pattern" => {
            return Err(Error::Unsupported(format!("field type '{}'", tokens[3])))
        }
        other => return Err(parse_err(hline, format!("unknown field '{other}'"))),
    }
    let symmetry = match tokens[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        other => return Err(Error::Unsupported(format!("symmetry '{other}'"))),
    };

    let mut data = lines.filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('%')
    });

    let (sline, size) = data
        .next()
        .ok_or_else(|| parse_err(hline + 1, "missing size line"))?;
    let dims = parse_usizes(sline, size)?;

    match format {
        Format::Coordinate => {
            let [nrows, ncols, nnz] = dims[..] else {
                return Err(parse_err(sline, "coordinate size line needs rows cols nnz"));
            };
            let mut builder = TripletBuilder::new(nrows, ncols, symmetry);
            let mut count = 0;
            for (ln, l) in data {
                let mut it = l.split_whitespace();
                let (Some(i), Some(j), Some(v), None) = (it.next(), it.next(), it.next(), it.next())
                else {
                    return Err(parse_err(ln, "expected 'row col value'"));
                };
                let i: usize = i.parse().map_err(|_| parse_err(ln, "bad row index"))?;
                let j: usize = j.parse().map_err(|_| parse_err(ln, "bad column index"))?;
                let v: f64 = v.parse().map_err(|_| parse_err(ln, "bad value"))?;
                if i == 0 || j == 0 || i > nrows || j > ncols {
                    return Err(parse_err(ln, "index out of bounds"));
                }
                if symmetry == Symmetry::Symmetric && i < j {
                    return Err(parse_err(ln, "symmetric file has an upper-triangle entry"));
                }
                builder
                    .push(i - 1, j - 1, v)
                    .map_err(|e| parse_err(ln, e.to_string()))?;
                count += 1;
            }
            if count != nnz {
                return Err(parse_err(
                    sline,
                    format!("header declares {nnz} entries, found {count}"),
                ));
            }
            builder.finalize()
        }
        Format::Array => {
            let [nrows, ncols] = dims[..] else {
                return Err(parse_err(sline, "array size line needs rows cols"));
            };
            if symmetry == Symmetry::Symmetric && nrows != ncols {
                return Err(parse_err(sline, "symmetric array must be square"));
            }
            let mut m = DMatrix::zeros(nrows, ncols);
            // column-major; symmetric files list the lower triangle only
            let slots: Vec<(usize, usize)> = (0..ncols)
                .flat_map(|j| {
                    let start = if symmetry == Symmetry::Symmetric { j } else { 0 };
                    (start..nrows).map(move |i| (i, j))
                })
                .collect();
            let mut filled = 0;
            for (ln, l) in data {
                for tok in l.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| parse_err(ln, "bad value"))?;
                    let &(i, j) = slots
                        .get(filled)
                        .ok_or_else(|| parse_err(ln, "more values than the size line allows"))?;
                    m[(i, j)] = v;
                    if symmetry == Symmetry::Symmetric {
                        m[(j, i)] = v;
                    }
                    filled += 1;
                }
            }
            if filled != slots.len() {
                return Err(parse_err(
                    sline,
                    format!("expected {} values, found {filled}", slots.len()),
                ));
            }
            Ok(MatrixStorage {
                nrows,
                ncols,
                symmetry,
                layout: Layout::Dense(m),
            })
        }
    }
}

fn parse_usizes(line: usize, text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(line, "bad size line")))
        .collect()
}

/// Serializes storage; dense matrices are written as `array`, sparse as
/// `coordinate`. Values use the shortest round-trip representation.
pub fn format_matrix_market(m: &MatrixStorage) -> String {
    let sym = if m.is_symmetric() { "symmetric" } else { "general" };
    let mut out = String::new();
    match m.layout() {
        Layout::Dense(d) => {
            let _ = writeln!(out, "%%MatrixMarket matrix array real {sym}");
            let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
            for j in 0..m.ncols() {
                let start = if m.is_symmetric() { j } else { 0 };
                for i in start..m.nrows() {
                    let _ = writeln!(out, "{:e}", d[(i, j)]);
                }
            }
        }
        Layout::Csc(s) => {
            let _ = writeln!(out, "%%MatrixMarket matrix coordinate real {sym}");
            let _ = writeln!(out, "{} {} {}", m.nrows(), m.ncols(), s.nnz());
            for (i, j, v) in s.iter() {
                let _ = writeln!(out, "{} {} {:e}", i + 1, j + 1, v);
            }
        }
    }
    out
}

pub fn write_matrix_market(path: impl AsRef<Path>, m: &MatrixStorage) -> Result<()> {
    fs::write(path, format_matrix_market(m))?;
    Ok(())
}

/// Reads an `n × 1` array file as a vector.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let m = read_matrix_market(path)?;
    if m.ncols() != 1 {
        return Err(Error::DimensionMismatch {
            context: "vector file columns",
            expected: 1,
            found: m.ncols(),
        });
    }
    Ok(m.to_dense().column(0).iter().copied().collect())
}

pub fn write_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    let m = MatrixStorage::dense(DMatrix::from_column_slice(v.len(), 1, v));
    write_matrix_market(path, &m)
}
