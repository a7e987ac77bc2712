//! Vendored CIE 1931 2-degree observer and D65 illuminant tables.
//!
//! Both tables are shipped as data files (5 nm sampling, 380-780 nm) and
//! sampled onto run grids with linear interpolation.

use std::sync::OnceLock;

use crate::error::{DazzleError, Result};

const CMF_CSV: &str = include_str!("../data/cie1931_cmf_2deg_5nm.csv");
const D65_CSV: &str = include_str!("../data/cie_d65_5nm.csv");

pub const TABLE_MIN_NM: f64 = 380.0;
pub const TABLE_MAX_NM: f64 = 780.0;

struct Table {
    nm: Vec<f64>,
    cols: Vec<Vec<f64>>,
}

fn parse_table(text: &str, n_cols: usize) -> Table {
    let mut nm = Vec::new();
    let mut cols = vec![Vec::new(); n_cols];
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        nm.push(parts.next().unwrap().trim().parse::<f64>().unwrap());
        for col in cols.iter_mut() {
            col.push(parts.next().unwrap().trim().parse::<f64>().unwrap());
        }
    }
    Table { nm, cols }
}

fn cmf_table() -> &'static Table {
    static T: OnceLock<Table> = OnceLock::new();
    T.get_or_init(|| parse_table(CMF_CSV, 3))
}

fn d65_table() -> &'static Table {
    static T: OnceLock<Table> = OnceLock::new();
    T.get_or_init(|| parse_table(D65_CSV, 1))
}

fn interp(table: &Table, col: usize, lambda_nm: f64) -> Result<f64> {
    let nm = &table.nm;
    if lambda_nm < nm[0] - 1e-9 || lambda_nm > nm[nm.len() - 1] + 1e-9 {
        return Err(DazzleError::GridOutsideTable(format!(
            "{lambda_nm} nm outside [{}, {}] nm",
            nm[0],
            nm[nm.len() - 1]
        )));
    }
    let v = &table.cols[col];
    let pos = ((lambda_nm - nm[0]) / (nm[1] - nm[0])).clamp(0.0, (nm.len() - 1) as f64);
    let i = (pos.floor() as usize).min(nm.len() - 2);
    let t = pos - i as f64;
    Ok(v[i] * (1.0 - t) + v[i + 1] * t)
}

/// Linearly interpolated color matching functions (xbar, ybar, zbar) at `lambda` (m).
pub fn cmf_at(lambda: f64) -> Result<(f64, f64, f64)> {
    let nm = lambda * 1e9;
    let t = cmf_table();
    Ok((interp(t, 0, nm)?, interp(t, 1, nm)?, interp(t, 2, nm)?))
}

/// Linearly interpolated D65 relative power at `lambda` (m).
pub fn d65_at(lambda: f64) -> Result<f64> {
    let nm = lambda * 1e9;
    interp(d65_table(), 0, nm)
}
