use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::audio::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::fusion::ProbabilityVector;

const SPEC_MAGIC: &[u8; 4] = b"AMEL";

/// Rows written by hand (rounded to a few decimals) may miss 1 by this much;
/// they are renormalized on read.
const CSV_SIMPLEX_TOL: f64 = 1e-6;

/// One row per frame, header `mel_0,...,mel_{n-1}`. Values use the shortest
/// representation that parses back to the same f64.
pub fn write_spectrogram_csv(frames: &Array2<f64>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..frames.ncols()).map(|i| format!("mel_{i}")))?;
    for row in frames.rows() {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| Error::io("<spectrogram csv>", e))?;
    Ok(())
}

pub fn read_spectrogram_csv(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for field in rec.iter() {
            data.push(field.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("{field:?} is not a number"),
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::invalid(e.to_string()))
}

/// `AMEL`, u32 frames, u32 mel bins, then row-major little-endian f64.
pub fn write_spectrogram_bin(spec: &LogMelSpectrogram, mut out: impl Write) -> Result<()> {
    let (t, m) = spec.frames.dim();
    let mut buf = Vec::with_capacity(12 + 8 * t * m);
    buf.extend_from_slice(SPEC_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    for v in spec.frames.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io("<spectrogram bin>", e))
}

pub fn read_spectrogram_bin(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != SPEC_MAGIC {
        return Err(fail(0, "not a spectrogram file".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let m = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 8 * t * m;
    if bytes.len() != expected {
        return Err(fail(bytes.len().min(expected), format!("expected {expected} bytes for {t}x{m}, found {}", bytes.len())));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((t, m), data).map_err(|e| Error::invalid(e.to_string()))
}

/// Per-item probabilities keyed by an id column.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    pub class_names: Vec<String>,
    pub ids: Vec<String>,
    pub rows: Vec<ProbabilityVector>,
}

impl ProbabilityTable {
    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }
}

/// Header `id,<class>,<class>,...`.
pub fn write_probability_csv(ids: &[String], rows: &[ProbabilityVector], out: impl Write) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("no probability rows to write"));
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("id").chain(first.labels().iter().map(String::as_str)))?;
    for (id, p) in ids.iter().zip(rows) {
        if p.labels() != first.labels() {
            return Err(Error::invalid(format!("row {id} has different class labels")));
        }
        w.write_record(std::iter::once(id.clone()).chain(p.probs().iter().map(f64::to_string)))?;
    }
    w.flush().map_err(|e| Error::io("<probability csv>", e))?;
    Ok(())
}

pub fn read_probability_csv(path: &Path) -> Result<ProbabilityTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if header.get(0) != Some("id") || header.len() < 3 {
        return Err(parse_err(1, "header must be id followed by at least two class names".into()));
    }
    let class_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut table = ProbabilityTable {
        class_names: class_names.clone(),
        ids: Vec::new(),
        rows: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let probs = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(line, format!("{f:?} is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > CSV_SIMPLEX_TOL {
            return Err(parse_err(line, format!("probabilities sum to {sum}")));
        }
        let probs = if sum == 1.0 { probs } else { probs.iter().map(|p| p / sum).collect() };
        let p = ProbabilityVector::new(probs, class_names.clone()).map_err(|e| parse_err(line, e.to_string()))?;
        table.ids.push(rec[0].to_string());
        table.rows.push(p);
    }
    Ok(table)
}

/// Header `id,label`; labels are class names or class indices.
pub fn read_truth_csv(path: &Path, class_names: &[String]) -> Result<Vec<(String, usize)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "label"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "header must be id,label".into(),
        });
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let label = &rec[1];
            let idx = class_names
                .iter()
                .position(|c| c == label)
                .or_else(|| label.parse::<usize>().ok().filter(|&i| i < class_names.len()))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("label {label:?} is not one of {class_names:?}"),
                })?;
            Ok((rec[0].to_string(), idx))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{log_mel_spectrogram, AudioSignal, FrontendConfig};

    fn spec() -> LogMelSpectrogram {
        let s: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.07).sin() * 0.3).collect();
        log_mel_spectrogram(&AudioSignal::new(s, 16000).unwrap(), &FrontendConfig::default()).unwrap()
    }

    #[test]
    fn spectrogram_csv_round_trip_is_exact() {
        let spec = spec();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_spectrogram_csv(&spec.frames, std::fs::File::create(&p).unwrap()).unwrap();
        let back = read_spectrogram_csv(&p).unwrap();
        assert_eq!(back.ncols(), 80);
        assert_eq!(back, spec.frames);
    }

    #[test]
    fn spectrogram_bin_round_trip_and_truncation() {
        let spec = spec();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        write_spectrogram_bin(&spec, std::fs::File::create(&p).unwrap()).unwrap();
        assert_eq!(read_spectrogram_bin(&p).unwrap(), spec.frames);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_spectrogram_bin(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn probability_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let labels = vec!["normal".to_string(), "copd".to_string()];
        let rows = vec![
            ProbabilityVector::new(vec![0.3, 0.7], labels.clone()).unwrap(),
            ProbabilityVector::new(vec![1.0, 0.0], labels.clone()).unwrap(),
        ];
        let ids = vec!["a".to_string(), "b".to_string()];
        write_probability_csv(&ids, &rows, std::fs::File::create(&p).unwrap()).unwrap();
        let t = read_probability_csv(&p).unwrap();
        assert_eq!(t.rows, rows);
        assert_eq!(t.position("b"), Some(1));

        std::fs::write(&p, "id,a,b\nx,0.3333,0.6667\ny,0.5,0.6\n").unwrap();
        match read_probability_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }

        let truth = dir.path().join("t.csv");
        std::fs::write(&truth, "id,label\na,copd\nb,0\n").unwrap();
        assert_eq!(read_truth_csv(&truth, &labels).unwrap(), vec![("a".into(), 1), ("b".into(), 0)]);
        std::fs::write(&truth, "id,label\na,asthma\n").unwrap();
        assert!(matches!(read_truth_csv(&truth, &labels), Err(Error::Parse { line: 2, .. })));
    }
}
