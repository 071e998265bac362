//! The bag CSV format.
//!
//! ```text
//! bag_id,label,instance_label,f0,f1,...,f{d-1}
//! bag-7,1,0,0.25,-1.5,...
//! bag-7,1,1,0.75,2.0,...
//! ```
//!
//! One row per instance. Rows are grouped by `bag_id`; bags appear in order of
//! first occurrence and instances keep file order within a bag. `label` must be
//! constant within a bag. `instance_label` is either blank on every row of a
//! bag or `0`/`1` on every row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Bag, DataError, MilDataset};

pub const FIXED_COLUMNS: [&str; 3] = ["bag_id", "label", "instance_label"];

struct PendingBag {
    id: String,
    label: bool,
    first_line: u64,
    instances: Vec<Vec<f64>>,
    instance_labels: Vec<Option<bool>>,
}

fn parse_err(line: u64, message: impl Into<String>) -> DataError {
    DataError::Parse { line, message: message.into() }
}

fn parse_binary(field: &str, column: &str, line: u64) -> Result<bool, DataError> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(line, format!("{column} must be 0 or 1, got {other:?}"))),
    }
}

/// Parses bag CSV text from any reader.
pub fn read_bag_csv<R: Read>(reader: R, name: &str) -> Result<MilDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 4 {
        return Err(parse_err(1, "header needs bag_id,label,instance_label and at least one feature column"));
    }
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if header[i].trim() != *expected {
            return Err(parse_err(1, format!("column {i} must be {expected:?}, got {:?}", &header[i])));
        }
    }
    let dim = header.len() - FIXED_COLUMNS.len();
    for k in 0..dim {
        let got = header[FIXED_COLUMNS.len() + k].trim();
        if got != format!("f{k}") {
            return Err(parse_err(1, format!("feature column {k} must be named f{k}, got {got:?}")));
        }
    }

    let mut pending: Vec<PendingBag> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DataError::Ragged { line, expected: header.len(), found: record.len() });
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty bag_id"));
        }
        let label = parse_binary(&record[1], "label", line)?;
        let inst = match record[2].trim() {
            "" => None,
            _ => Some(parse_binary(&record[2], "instance_label", line)?),
        };
        let mut features = Vec::with_capacity(dim);
        for k in 0..dim {
            let field = record[FIXED_COLUMNS.len() + k].trim();
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("feature f{k} is not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature f{k} is not finite: {field:?}")));
            }
            features.push(v);
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            pending.push(PendingBag {
                id: id.clone(),
                label,
                first_line: line,
                instances: Vec::new(),
                instance_labels: Vec::new(),
            });
            pending.len() - 1
        });
        let bag = &mut pending[slot];
        if bag.label != label {
            return Err(DataError::InconsistentLabel { bag_id: id, line, first_line: bag.first_line });
        }
        bag.instances.push(features);
        bag.instance_labels.push(inst);
    }

    let bags = pending
        .into_iter()
        .map(|p| {
            let labels = if p.instance_labels.iter().all(Option::is_none) {
                None
            } else if p.instance_labels.iter().all(Option::is_some) {
                Some(p.instance_labels.into_iter().flatten().collect())
            } else {
                return Err(DataError::InvalidBag {
                    bag_id: p.id,
                    reason: "instance_label given for some rows but not others".into(),
                });
            };
            Bag::new(p.id, p.instances, p.label, labels)
        })
        .collect::<Result<Vec<_>, _>>()?;
    MilDataset::new(name, bags)
}

pub fn load_bag_csv(path: impl AsRef<Path>) -> Result<MilDataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    read_bag_csv(BufReader::new(file), name)
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn write_bag_csv<W: Write>(dataset: &MilDataset, writer: W) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..dataset.dim()).map(|k| format!("f{k}")));
    out.write_record(&header).map_err(DataError::csv)?;
    for bag in dataset.bags() {
        for (j, x) in bag.instances.iter().enumerate() {
            let mut row = Vec::with_capacity(header.len());
            row.push(bag.id.clone());
            row.push(u8::from(bag.label).to_string());
            row.push(bag.instance_labels.as_ref().map(|l| u8::from(l[j]).to_string()).unwrap_or_default());
            row.extend(x.iter().map(|&v| format_f64(v)));
            out.write_record(&row).map_err(DataError::csv)?;
        }
    }
    out.flush().map_err(|e| DataError::Io { path: String::new(), source: e })?;
    Ok(())
}

pub fn save_bag_csv(dataset: &MilDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_bag_csv(dataset, BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<MilDataset, DataError> {
        read_bag_csv(text.as_bytes(), "t")
    }

    #[test]
    fn two_rows_one_bag() {
        let ds = parse("bag_id,label,instance_label,f0,f1\na,1,,0.5,1\na,1,,2,3\n").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.bags()[0].len(), 2);
        assert_eq!(ds.bags()[0].instances[1], vec![2.0, 3.0]);
        assert!(ds.bags()[0].instance_labels.is_none());
    }

    #[test]
    fn conflicting_labels_name_the_bag() {
        let err = parse("bag_id,label,instance_label,f0\nmol7,0,,1\nmol7,1,,2\n").unwrap_err();
        assert!(matches!(err, DataError::InconsistentLabel { .. }));
        assert!(err.to_string().contains("mol7"), "{err}");
    }

    #[test]
    fn non_numeric_feature_reports_line() {
        let err = parse("bag_id,label,instance_label,f0\na,0,,1\na,0,,x\n").unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_rejected() {
        let err = parse("bag_id,label,instance_label,f0,f1\na,0,,1,2\na,0,,1\n").unwrap_err();
        assert!(matches!(err, DataError::Ragged { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse("id,label,instance_label,f0\na,0,,1\n").is_err());
        assert!(parse("bag_id,label,instance_label,x0\na,0,,1\n").is_err());
        assert!(parse("bag_id,label,instance_label\n").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn bags_keep_first_appearance_order() {
        let ds = parse("bag_id,label,instance_label,f0\nb,0,0,1\na,1,1,2\nb,0,0,3\n").unwrap();
        let ids: Vec<_> = ds.bags().iter().map(|b| b.id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
        assert_eq!(ds.bags()[0].instances, vec![vec![1.0], vec![3.0]]);
    }

    #[test]
    fn format_round_trips() {
        for v in [0.1, -1e-300, 1e300, 123456.789, 5e-324, -0.0, 1.0 / 3.0] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits(), "{v}");
        }
    }
}
