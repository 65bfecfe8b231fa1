//! Run records and their CSV encoding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::noise::ChannelOrder;

/// One finished run. `size` is the sample count (offline) or the number of
/// rounds (online).
///
/// `gap` is the headline suboptimality: unregularized `J(pi*) - J(pi_hat)`
/// for offline solvers, `J_beta(pi*_beta) - J_beta(pi_hat)` for online ones.
/// Both variants are also kept in their own columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: usize,
    pub solver: String,
    pub size: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub ordering: ChannelOrder,
    pub adversary: String,
    pub beta: f64,
    pub gamma: f64,
    pub replicate: usize,
    pub seed: u64,
    pub class_size: usize,
    pub chosen_index: usize,
    pub comparator_index: usize,
    pub gap: f64,
    pub unregularized_gap: f64,
    pub regularized_gap: f64,
    pub flip_rate: f64,
    #[serde(skip)]
    pub wall_time: f64,
}

impl RunRecord {
    /// Numeric view of a column, for fits and plots.
    pub fn numeric(&self, field: &str) -> Option<f64> {
        Some(match field {
            "run_id" => self.run_id as f64,
            "size" | "n" | "rounds" => self.size as f64,
            "epsilon" => self.epsilon,
            "alpha" => self.alpha,
            "beta" => self.beta,
            "gamma" => self.gamma,
            "replicate" => self.replicate as f64,
            "class_size" => self.class_size as f64,
            "chosen_index" => self.chosen_index as f64,
            "comparator_index" => self.comparator_index as f64,
            "gap" => self.gap,
            "unregularized_gap" => self.unregularized_gap,
            "regularized_gap" => self.regularized_gap,
            "flip_rate" => self.flip_rate,
            "wall_time" => self.wall_time,
            _ => return None,
        })
    }

    /// Text view of a column, for series labels.
    pub fn text(&self, field: &str) -> Option<String> {
        match field {
            "solver" => Some(self.solver.clone()),
            "ordering" => Some(self.ordering.name().to_string()),
            "adversary" => Some(self.adversary.clone()),
            "seed" => Some(self.seed.to_string()),
            other => self.numeric(other).map(|v| v.to_string()),
        }
    }
}

pub const RECORD_HEADER: [&str; 18] = [
    "run_id",
    "solver",
    "size",
    "epsilon",
    "alpha",
    "ordering",
    "adversary",
    "beta",
    "gamma",
    "replicate",
    "seed",
    "class_size",
    "chosen_index",
    "comparator_index",
    "gap",
    "unregularized_gap",
    "regularized_gap",
    "flip_rate",
];

/// Appends records one line at a time, flushing after each, so a killed
/// run leaves only complete lines behind.
pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl RecordWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        RecordWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> RecordWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(RECORD_HEADER)?;
        inner.flush()?;
        Ok(RecordWriter { inner })
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads a records file, ignoring an unterminated last line left by an
/// interrupted writer.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut reader = csv::Reader::from_reader(complete.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
