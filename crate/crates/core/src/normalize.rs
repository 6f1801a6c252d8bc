//! Redundancy normalization: projecting window counts back to tokens.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::counter::RedundantCountMap;
use crate::error::{Error, Result};

/// Count map at token resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCountMap {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
    total: f64,
}

impl NormalizedCountMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} count map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("count map".into()));
        }
        let total = values.iter().sum();
        Ok(Self {
            rows,
            cols,
            values,
            total,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Writes the text grid: a `rows cols` header line, then one line per
    /// row of space-separated values in shortest round-trip notation.
    pub fn write_text(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.rows, self.cols)?;
        for row in self.values.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text(input: impl BufRead) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("count map text: {msg}"));
        let mut tokens = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        let mut it = tokens.into_iter();
        let mut dim = || -> Result<usize> {
            it.next()
                .ok_or_else(|| bad("missing header".into()))?
                .parse()
                .map_err(|e| bad(format!("header: {e}")))
        };
        let (rows, cols) = (dim()?, dim()?);
        let values = it
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("value {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, cols, values)
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_text(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_text(std::io::BufReader::new(f))
    }
}

/// Number of windows covering each token along one axis.
fn axis_frequency(len: usize, k_p: usize, z_p: usize, windows: usize) -> Vec<usize> {
    let mut f = vec![0; len];
    for j in 0..windows {
        for c in &mut f[j * z_p..j * z_p + k_p] {
            *c += 1;
        }
    }
    f
}

/// Spreads each window count evenly over its `k_p × k_p` footprint,
/// accumulates per token in row-major window order and divides by the
/// token's coverage frequency. Uncovered tokens are 0.
pub fn normalize(r: &RedundantCountMap) -> NormalizedCountMap {
    let g = &r.geometry;
    let (h, w) = g.grid;
    let (rows, cols) = g.out;
    let (k, z) = (g.k_p, g.z_p);
    let area = (k * k) as f64;
    let mut acc = vec![0.0; h * w];
    for jy in 0..rows {
        for jx in 0..cols {
            let share = r.values[jy * cols + jx] / area;
            for ty in jy * z..jy * z + k {
                let start = ty * w + jx * z;
                for a in &mut acc[start..start + k] {
                    *a += share;
                }
            }
        }
    }
    let fy = axis_frequency(h, k, z, rows);
    let fx = axis_frequency(w, k, z, cols);
    for ty in 0..h {
        for tx in 0..w {
            let f = fy[ty] * fx[tx];
            let a = &mut acc[ty * w + tx];
            *a = if f == 0 { 0.0 } else { *a / f as f64 };
        }
    }
    NormalizedCountMap::new(h, w, acc).expect("finite window values")
}

/// Image-level count.
pub fn image_count(c: &NormalizedCountMap) -> f64 {
    c.total()
}
