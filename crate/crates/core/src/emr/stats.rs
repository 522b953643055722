use std::io::Write;

use ndarray::{Array1, Array2, Axis};

use super::EmrTable;
use crate::error::{Error, Result};

/// Sample correlation coefficient, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("columns differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a column is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pairwise correlations of the named numeric columns.
pub fn correlation_matrix<S: AsRef<str>>(table: &EmrTable, columns: &[S]) -> Result<Array2<f64>> {
    let cols = columns
        .iter()
        .map(|c| table.numeric(c.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let k = cols.len();
    let mut m = Array2::eye(k);
    for i in 0..k {
        for j in i + 1..k {
            let r = pearson(cols[i], cols[j]).map_err(|e| match e {
                Error::UndefinedCorrelation(_) => Error::UndefinedCorrelation(format!(
                    "{} vs {}: a column is constant",
                    columns[i].as_ref(),
                    columns[j].as_ref()
                )),
                other => other,
            })?;
            m[[i, j]] = r;
            m[[j, i]] = r;
        }
    }
    // Constant columns would otherwise slip through a 1x1 matrix.
    if k == 1 {
        pearson(cols[0], cols[0])?;
    }
    Ok(m)
}

pub fn write_matrix_csv<S: AsRef<str>>(names: &[S], m: &Array2<f64>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(names.iter().map(|n| n.as_ref().to_string()));
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(m.rows()) {
        let mut rec = vec![name.as_ref().to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Z-scored matrix with the statistics needed to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub data: Array2<f64>,
    pub mean: Array1<f64>,
    /// Population standard deviation; constant columns use 1.
    pub std: Array1<f64>,
}

impl Standardized {
    pub fn restore(&self, z: &Array2<f64>) -> Array2<f64> {
        z * &self.std + &self.mean
    }
}

pub fn standardize(x: &Array2<f64>) -> Result<Standardized> {
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot standardize an empty matrix"));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    Ok(Standardized {
        data: (x - &mean) / &std,
        mean,
        std,
    })
}
