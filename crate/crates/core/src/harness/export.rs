//! Per-instance score export.

use std::io::{Read, Write};
use std::path::Path;

use super::metrics::predict_dataset;
use super::HarnessError;
use crate::data::{format_f64, MilDataset};
use crate::model::MivaeParams;

pub const INSTANCE_SCORE_COLUMNS: [&str; 4] = ["bag_id", "instance_index", "score", "label"];

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScore {
    pub bag_id: String,
    pub instance_index: usize,
    pub score: f64,
    pub label: Option<bool>,
}

pub fn instance_scores(params: &MivaeParams, dataset: &MilDataset) -> Result<Vec<InstanceScore>, HarnessError> {
    let (_, scores) = predict_dataset(params, dataset)?;
    let mut out = Vec::with_capacity(dataset.num_instances());
    for (bag, s) in dataset.bags().iter().zip(scores) {
        for (j, score) in s.into_iter().enumerate() {
            let label = bag.instance_labels.as_ref().map(|l| l[j]);
            out.push(InstanceScore { bag_id: bag.id.clone(), instance_index: j, score, label });
        }
    }
    Ok(out)
}

pub fn write_instance_scores<W: Write>(rows: &[InstanceScore], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(INSTANCE_SCORE_COLUMNS).map_err(HarnessError::csv)?;
    for r in rows {
        w.write_record([
            r.bag_id.clone(),
            r.instance_index.to_string(),
            format_f64(r.score),
            r.label.map(|l| u8::from(l).to_string()).unwrap_or_default(),
        ])
        .map_err(HarnessError::csv)?;
    }
    w.flush().map_err(|e| HarnessError::io("instance scores", e))?;
    Ok(())
}

pub fn read_instance_scores<R: Read>(reader: R) -> Result<Vec<InstanceScore>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(HarnessError::csv)?;
    if header.iter().ne(INSTANCE_SCORE_COLUMNS) {
        return Err(HarnessError::Format(format!("instance score header must be {}", INSTANCE_SCORE_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(HarnessError::csv)?;
        let line = i + 2;
        let bad = |what: &str| HarnessError::Format(format!("line {line}: invalid {what}"));
        let instance_index = rec[1].parse().map_err(|_| bad("instance_index"))?;
        let score: f64 = rec[2].parse().map_err(|_| bad("score"))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(bad("score"));
        }
        let label = match &rec[3] {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            _ => return Err(bad("label")),
        };
        out.push(InstanceScore { bag_id: rec[0].to_string(), instance_index, score, label });
    }
    Ok(out)
}

/// Writes one row per instance with its posterior-mean score.
pub fn export_instance_scores(params: &MivaeParams, dataset: &MilDataset, path: impl AsRef<Path>) -> Result<usize, HarnessError> {
    let rows = instance_scores(params, dataset)?;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_instance_scores(&rows, std::io::BufWriter::new(file))?;
    Ok(rows.len())
}
