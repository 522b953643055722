use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DIAGNOSIS_COLUMN: &str = "diagnosis";

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sorted distinct values; a value's code is its index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    pub classes: Vec<String>,
}

impl LabelMapping {
    pub fn encode(&self, value: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(value)).ok()
    }

    pub fn decode(&self, code: usize) -> Option<&str> {
        self.classes.get(code).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Maps distinct values, in lexicographic order, to `0..m`.
pub fn label_encode<S: AsRef<str>>(values: &[S]) -> (Vec<usize>, LabelMapping) {
    let mut classes: Vec<String> = values.iter().map(|v| v.as_ref().to_string()).collect();
    classes.sort();
    classes.dedup();
    let mapping = LabelMapping { classes };
    let codes = values
        .iter()
        .map(|v| mapping.encode(v.as_ref()).expect("value is in its own mapping"))
        .collect();
    (codes, mapping)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Most frequent value; ties go to the lexicographically smallest.
pub(crate) fn mode<'a>(values: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (v, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v)
}

/// Named numeric and categorical columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct EmrTable {
    names: Vec<String>,
    columns: Vec<Column>,
}

impl EmrTable {
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::invalid("column names and columns differ in number"));
        }
        if let Some(first) = columns.first() {
            if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != first.len()) {
                return Err(Error::invalid(format!(
                    "column {} has {} rows, expected {}",
                    names[i],
                    c.len(),
                    first.len()
                )));
            }
        }
        for (i, c) in columns.iter().enumerate() {
            if let Column::Numeric(v) = c {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("column {} has non-finite values", names[i])));
                }
            }
        }
        let mut seen = names.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate column names"));
        }
        Ok(Self { names, columns })
    }

    /// Reads a headed CSV. A column is numeric when every non-empty cell
    /// parses as a number (the diagnosis column is always categorical).
    /// Empty numeric cells get the column median, empty categorical cells the
    /// column mode.
    pub fn from_reader(reader: impl Read, origin: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec?;
            for (col, cell) in raw.iter_mut().zip(rec.iter()) {
                col.push(cell.to_string());
            }
        }
        let columns = names
            .iter()
            .zip(raw)
            .map(|(name, cells)| {
                let present: Vec<&str> = cells.iter().map(String::as_str).filter(|c| !c.is_empty()).collect();
                if present.is_empty() {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: 1,
                        msg: format!("column {name} has no values"),
                    });
                }
                let parsed: Option<Vec<f64>> = present.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
                match parsed {
                    Some(mut vals) if name != DIAGNOSIS_COLUMN => {
                        let fill = median(&mut vals);
                        Ok(Column::Numeric(
                            cells.iter().map(|c| if c.is_empty() { fill } else { c.parse().expect("checked") }).collect(),
                        ))
                    }
                    _ => {
                        let fill = mode(present.iter().copied()).expect("non-empty").to_string();
                        Ok(Column::Categorical(
                            cells.into_iter().map(|c| if c.is_empty() { fill.clone() } else { c }).collect(),
                        ))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(names, columns)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, path)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names)?;
        for r in 0..self.n_rows() {
            let row: Vec<String> = self
                .columns
                .iter()
                .map(|c| match c {
                    Column::Numeric(v) => v[r].to_string(),
                    Column::Categorical(v) => v[r].clone(),
                })
                .collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &Column)> {
        self.names.iter().map(String::as_str).zip(&self.columns)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| Error::invalid(format!("no column named {name:?}")))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical(_) => Err(Error::invalid(format!("column {name:?} is not numeric"))),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&[String]> {
        match self.column(name)? {
            Column::Categorical(v) => Ok(v),
            Column::Numeric(_) => Err(Error::invalid(format!("column {name:?} is not categorical"))),
        }
    }

    /// Names of numeric columns, in table order.
    pub fn numeric_names(&self) -> Vec<&str> {
        self.columns()
            .filter(|(_, c)| matches!(c, Column::Numeric(_)))
            .map(|(n, _)| n)
            .collect()
    }

    /// `rows x columns.len()` matrix of the named numeric columns.
    pub fn numeric_matrix<S: AsRef<str>>(&self, columns: &[S]) -> Result<Array2<f64>> {
        let cols = columns
            .iter()
            .map(|c| self.numeric(c.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_fn((self.n_rows(), cols.len()), |(r, c)| cols[c][r]))
    }

    /// Encoded labels of a column; numeric columns are encoded by their text.
    pub fn encoded(&self, name: &str) -> Result<(Vec<usize>, LabelMapping)> {
        match self.column(name)? {
            Column::Categorical(v) => Ok(label_encode(v)),
            Column::Numeric(v) => {
                let text: Vec<String> = v.iter().map(f64::to_string).collect();
                Ok(label_encode(&text))
            }
        }
    }
}

/// Writes `x,y,z,color,color_code` rows for external 3D plotting. Returns
/// the number of rows written.
pub fn export_3d_coordinates(table: &EmrTable, axes: [&str; 3], color: &str, out: impl Write) -> Result<usize> {
    let [x, y, z] = axes.map(|a| table.numeric(a));
    let (x, y, z) = (x?, y?, z?);
    let labels: Vec<String> = match table.column(color)? {
        Column::Categorical(v) => v.clone(),
        Column::Numeric(v) => v.iter().map(f64::to_string).collect(),
    };
    let (codes, _) = label_encode(&labels);
    let mut w = csv::Writer::from_writer(out);
    w.write_record([axes[0], axes[1], axes[2], color, "color_code"])?;
    for r in 0..table.n_rows() {
        w.write_record([
            x[r].to_string(),
            y[r].to_string(),
            z[r].to_string(),
            labels[r].clone(),
            codes[r].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(table.n_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "patient_id,age,sex,bmi,crackles,wheezes,diagnosis\n\
        101,70,M,27.5,3,0,COPD\n\
        102,,F,,0,1,Healthy\n\
        103,64,,22.0,5,2,COPD\n\
        104,81,F,30.1,1,0,URTI\n";

    fn table() -> EmrTable {
        EmrTable::from_reader(SAMPLE.as_bytes(), Path::new("emr.csv")).unwrap()
    }

    #[test]
    fn label_encoding_is_lexicographic() {
        let (codes, map) = label_encode(&["b", "a", "c"]);
        assert_eq!(codes, vec![1, 0, 2]);
        assert_eq!(map.classes, vec!["a", "b", "c"]);
        let (codes, _) = label_encode(&["x", "x"]);
        assert_eq!(codes, vec![0, 0]);
        let values = ["wheeze", "crackle", "normal", "crackle"];
        let (codes, map) = label_encode(&values);
        let back: Vec<&str> = codes.iter().map(|&c| map.decode(c).unwrap()).collect();
        assert_eq!(back, values);
    }

    #[test]
    fn csv_columns_are_typed_and_imputed() {
        let t = table();
        assert_eq!(t.n_rows(), 4);
        assert_eq!(t.numeric("age").unwrap(), &[70.0, 70.0, 64.0, 81.0]);
        // median of 27.5, 22.0, 30.1
        assert_eq!(t.numeric("bmi").unwrap()[1], 27.5);
        // sex mode: F twice
        assert_eq!(t.categorical("sex").unwrap()[2], "F");
        assert!(t.categorical("diagnosis").is_ok());
        assert!(t.numeric("diagnosis").is_err());
        assert!(t.column("height").is_err());
    }

    #[test]
    fn ragged_csv_is_an_error() {
        let bad = "a,b\n1,2\n3\n";
        assert!(EmrTable::from_reader(bad.as_bytes(), Path::new("x.csv")).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = EmrTable::from_reader(buf.as_slice(), Path::new("y.csv")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn coordinates_export() {
        let t = table();
        let mut buf = Vec::new();
        let n = export_3d_coordinates(&t, ["age", "crackles", "wheezes"], "diagnosis", &mut buf).unwrap();
        assert_eq!(n, 4);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "age,crackles,wheezes,diagnosis,color_code");
        assert_eq!(lines[1], "70,3,0,COPD,0");
        assert_eq!(lines[4], "81,1,0,URTI,2");
        assert!(export_3d_coordinates(&t, ["age", "sex", "wheezes"], "diagnosis", Vec::new()).is_err());
    }
}
