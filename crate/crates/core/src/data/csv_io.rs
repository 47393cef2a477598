//! CSV form: header `subject_id,label,f1,...,fd`, then one example per row.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, Example};
use crate::{Error, Result};

pub fn write_csv<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string(), "label".to_string()];
    header.extend((1..=ds.feature_dim()).map(|j| format!("f{j}")));
    out.write_record(&header).map_err(csv_err)?;
    for e in ds.examples() {
        let mut row = vec![e.subject.to_string(), e.label.to_string()];
        row.extend(e.features.iter().map(|f| f.to_string()));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write_csv(ds, std::io::BufWriter::new(File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("{other:?}")),
    }
}

/// Reads a dataset; the class count is `max label + 1`.
pub fn read_csv<R: Read>(r: R, origin: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let width = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.len();
    if width < 3 {
        return Err(parse_err(1, "header needs subject_id, label and >= 1 feature".into()));
    }
    let mut examples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let subject = field(0)
            .parse::<u32>()
            .map_err(|e| parse_err(line, format!("subject_id `{}`: {e}", field(0))))?;
        let label = field(1)
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("label `{}`: {e}", field(1))))?;
        let features = (2..rec.len())
            .map(|j| {
                field(j)
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("feature {} `{}` is not a finite number", j - 1, field(j))))
            })
            .collect::<Result<Vec<f32>>>()?;
        examples.push(Example {
            features,
            label,
            subject,
        });
    }
    if examples.is_empty() {
        return Err(parse_err(1, "no examples after the header".into()));
    }
    let k = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Dataset::new(examples, k)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    read_csv(std::io::BufReader::new(File::open(path)?), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn round_trip() {
        let ds = generate_synthetic(&SyntheticSpec::new(12, (1, 3), 3, 5, 1.0), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        save_csv(&ds, &p).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn bad_feature_names_line() {
        let text = "subject_id,label,f1,f2\n0,1,0.5,0.25\n1,0,abc,1\n";
        let err = read_csv(text.as_bytes(), Path::new("x.csv")).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_and_header_only() {
        let ragged = "subject_id,label,f1\n0,1,0.5\n1,0\n";
        assert!(matches!(
            read_csv(ragged.as_bytes(), Path::new("r.csv")),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(read_csv("subject_id,label,f1\n".as_bytes(), Path::new("h.csv")).is_err());
    }
}
