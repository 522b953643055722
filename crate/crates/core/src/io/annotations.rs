use std::path::Path;

use crate::error::{Error, Result};

/// One respiratory cycle with its adventitious-sound flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationRecord {
    pub begin_s: f64,
    pub end_s: f64,
    pub crackles: bool,
    pub wheezes: bool,
}

/// Parses `begin end crackles wheezes` lines. Blank lines are skipped.
pub fn parse_cycle_annotations_str(text: &str, origin: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", fields.len())));
        }
        let time = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{s:?} is not a time in seconds")))
        };
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(err(format!("{s:?} is not a 0/1 flag"))),
        };
        let rec = AnnotationRecord {
            begin_s: time(fields[0])?,
            end_s: time(fields[1])?,
            crackles: flag(fields[2])?,
            wheezes: flag(fields[3])?,
        };
        if rec.begin_s < 0.0 || rec.end_s <= rec.begin_s {
            return Err(err(format!("cycle [{}, {}] is not a forward interval", rec.begin_s, rec.end_s)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_cycle_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cycle_annotations_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<AnnotationRecord>> {
        parse_cycle_annotations_str(s, Path::new("101_1b1_Al_sc_Meditron.txt"))
    }

    #[test]
    fn icbhi_style_line() {
        let r = parse("0.364\t2.436\t0\t0\n2.436 5.1 1 0\n").unwrap();
        assert_eq!(
            r[0],
            AnnotationRecord { begin_s: 0.364, end_s: 2.436, crackles: false, wheezes: false }
        );
        assert!(r[1].crackles && !r[1].wheezes);
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [("0 1 0 0\n1.0 0.5 0 0\n", 2), ("0 1 0\n", 1), ("0 1 0 0\n\n0 1 2 0\n", 3), ("a 1 0 0", 1)] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{other:?}"),
            }
        }
    }
}
