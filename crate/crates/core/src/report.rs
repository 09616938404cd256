//! Evaluation reports, config hashing and report serialization.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{self, EmbeddingSet, TextClassifier};

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub shots: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Fraction of correct top-1 predictions; serialized to 4 decimals.
    #[serde(serialize_with = "four_decimals")]
    pub top1: f64,
    pub num_test: usize,
    pub seed: u64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub config_hash: String,
}

fn four_decimals<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round4(*v))
}

pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config is serializable");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

/// The checksum stored in the trailer of an encoding, i.e. the CRC32 of
/// everything before it. Hashing the whole encoding instead would always give
/// the same CRC residue.
fn trailer_crc(bytes: &[u8]) -> String {
    let tail: [u8; 4] = bytes[bytes.len() - 4..].try_into().expect("trailer");
    format!("{:08x}", u32::from_le_bytes(tail))
}

/// CRC32 of the set's TIPEMB encoding, as 8 hex digits.
pub fn fingerprint(set: &EmbeddingSet) -> String {
    trailer_crc(&store::encode_embeddings(set))
}

pub fn classifier_fingerprint(clf: &TextClassifier) -> String {
    trailer_crc(&store::encode_classifier(clf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn write_reports<W: io::Write>(
    reports: &[EvalReport],
    format: ReportFormat,
    mut w: W,
) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, reports)
                .map_err(|e| Error::Serialize(e.to_string()))?;
            writeln!(w)?;
        }
        ReportFormat::Csv => {
            let mut out = csv::Writer::from_writer(w);
            for r in reports {
                out.serialize(r)
                    .map_err(|e| Error::Serialize(e.to_string()))?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

pub fn reports_to_string(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    let mut buf = Vec::new();
    write_reports(reports, format, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn read_reports_json(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))
}

pub fn read_reports_csv(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Malformed(e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Malformed(e.to_string())))
        .collect()
}

/// Maps config hashes to a description of the inputs that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReportIndex(pub BTreeMap<String, serde_json::Value>);

impl ReportIndex {
    pub fn insert(&mut self, hash: &str, inputs: serde_json::Value) {
        self.0.insert(hash.to_owned(), inputs);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))
    }

    /// Merges into an existing index file if present.
    pub fn merge_into(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut existing = if path.exists() {
            Self::load(path)?
        } else {
            Self::default()
        };
        existing.0.extend(self.0.clone());
        let text =
            serde_json::to_string_pretty(&existing).map_err(|e| Error::Serialize(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}
