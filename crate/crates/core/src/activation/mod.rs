//! The `APF1` activation container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          4 bytes  "APF1"
//! version        u32      1
//! num_layers     u32      L
//! hidden_dim     u32      H
//! num_classes    u32      K
//! num_examples   u64      N
//! dtype_code     u32      0 = f32
//! metadata_len   u32
//! metadata       metadata_len bytes of UTF-8 JSON (object of strings)
//! offsets        N x u64, absolute byte offset of each record
//! records        example_id u64, label u32, span_len u32,
//!                span_len * L * H f32 values in [layer][token][dim] order
//! ```
//!
//! Only the span tokens are stored. A record never carries context outside
//! the labeled span, so a probe reading it cannot either.

mod format;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use format::{read_activation_set, write_activation_set, ActivationWriter, FORMAT_VERSION, MAGIC};
pub use synth::{synth_activations, SynthSpec};

/// `dtype_code` for 32-bit IEEE floats, the only supported storage type.
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationHeader {
    pub version: u32,
    /// Representation rows per token, embedding layer included.
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub num_classes: u32,
    pub num_examples: u64,
    pub dtype_code: u32,
    pub metadata: BTreeMap<String, String>,
}

impl ActivationHeader {
    pub fn new(num_layers: u32, hidden_dim: u32, num_classes: u32, num_examples: u64) -> Self {
        ActivationHeader {
            version: FORMAT_VERSION,
            num_layers,
            hidden_dim,
            num_classes,
            num_examples,
            dtype_code: DTYPE_F32,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_owned(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", self.version)));
        }
        if self.dtype_code != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {}", self.dtype_code)));
        }
        if self.num_layers < 1 || self.hidden_dim < 1 {
            return Err(Error::Format("num_layers and hidden_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Format(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_examples < 1 {
            return Err(Error::Format("num_examples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.num_layers as usize
    }

    pub fn hidden(&self) -> usize {
        self.hidden_dim as usize
    }

    /// Values stored per span token (L * H).
    pub fn token_stride(&self) -> usize {
        self.layers() * self.hidden()
    }

    /// Validates one record against this header. `index` is only used to
    /// locate the error.
    pub fn check_record(&self, index: usize, record: &ActivationRecord) -> Result<()> {
        if record.span_len < 1 {
            return Err(Error::invalid(format!("record {index}: span_len must be >= 1")));
        }
        if record.label >= self.num_classes {
            return Err(Error::invalid(format!(
                "record {index}: label {} out of range for {} classes",
                record.label, self.num_classes
            )));
        }
        let expected = record.span_len as usize * self.token_stride();
        if record.values.len() != expected {
            return Err(Error::Dimension {
                index,
                expected,
                found: record.values.len(),
            });
        }
        if let Some(position) = record.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index, position });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub example_id: u64,
    pub label: u32,
    pub span_len: u32,
    /// `span_len * L * H` values, layer-major: `[layer][token][dim]`.
    pub values: Vec<f32>,
}

impl ActivationRecord {
    /// Values of one token at one layer.
    pub fn token(&self, layer: usize, token: usize, hidden: usize) -> &[f32] {
        let start = (layer * self.span_len as usize + token) * hidden;
        &self.values[start..start + hidden]
    }

    /// Byte length of the record in an `APF1` file.
    pub fn encoded_len(&self) -> u64 {
        16 + 4 * self.values.len() as u64
    }
}

#[derive(Clone)]
enum Storage {
    Memory(Vec<ActivationRecord>),
    File { bytes: Vec<u8>, offsets: Vec<u64> },
}

/// A header plus random access to its records.
///
/// File-backed sets keep the raw bytes and decode a record on each access.
/// The set is `Sync`, so any number of threads may read from it.
#[derive(Clone)]
pub struct ActivationSet {
    header: ActivationHeader,
    storage: Storage,
}

impl std::fmt::Debug for ActivationSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationSet")
            .field("header", &self.header)
            .field("len", &self.len())
            .finish()
    }
}

impl ActivationSet {
    /// Builds an in-memory set, validating every record.
    pub fn from_records(header: ActivationHeader, records: Vec<ActivationRecord>) -> Result<Self> {
        header.validate()?;
        if records.len() as u64 != header.num_examples {
            return Err(Error::invalid(format!(
                "header declares {} examples, got {}",
                header.num_examples,
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            header.check_record(i, r)?;
        }
        Ok(ActivationSet {
            header,
            storage: Storage::Memory(records),
        })
    }

    pub(crate) fn from_file_parts(header: ActivationHeader, bytes: Vec<u8>, offsets: Vec<u64>) -> Self {
        ActivationSet {
            header,
            storage: Storage::File { bytes, offsets },
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        read_activation_set(path)
    }

    pub fn header(&self) -> &ActivationHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.num_examples as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, index: usize) -> Result<ActivationRecord> {
        if index >= self.len() {
            return Err(Error::OutOfRange {
                index,
                len: self.len(),
            });
        }
        match &self.storage {
            Storage::Memory(records) => Ok(records[index].clone()),
            Storage::File { bytes, offsets } => {
                format::decode_record(&self.header, bytes, offsets[index], index)
            }
        }
    }

    pub fn records(&self) -> impl Iterator<Item = Result<ActivationRecord>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }

    pub fn to_records(&self) -> Result<Vec<ActivationRecord>> {
        self.records().collect()
    }

    /// Example id to record index.
    pub fn id_index(&self) -> Result<HashMap<u64, usize>> {
        let mut index = HashMap::with_capacity(self.len());
        for i in 0..self.len() {
            let id = match &self.storage {
                Storage::Memory(records) => records[i].example_id,
                Storage::File { bytes, offsets } => format::peek_example_id(bytes, offsets[i]),
            };
            if index.insert(id, i).is_some() {
                return Err(Error::invalid(format!("duplicate example id {id} in activation set")));
            }
        }
        Ok(index)
    }

    /// Records for `ids`, in the order given.
    pub fn select(&self, ids: &[u64]) -> Result<RecordSet> {
        let index = self.id_index()?;
        let records = ids
            .iter()
            .map(|id| {
                let i = index
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("example id {id} not found in activation set")))?;
                self.record(*i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.record_set(records))
    }

    pub fn all(&self) -> Result<RecordSet> {
        Ok(self.record_set(self.to_records()?))
    }

    fn record_set(&self, records: Vec<ActivationRecord>) -> RecordSet {
        RecordSet {
            num_layers: self.header.layers(),
            hidden_dim: self.header.hidden(),
            num_classes: self.header.num_classes as usize,
            records,
        }
    }
}

/// Decoded records sharing one `(L, H, K)` shape; the unit probes train on.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub records: Vec<ActivationRecord>,
}

impl RecordSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.example_id).collect()
    }

    /// A set with the same shape holding `records`.
    pub fn with_records(&self, records: Vec<ActivationRecord>) -> RecordSet {
        RecordSet {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            records,
        }
    }

    pub fn prefix(&self, n: usize) -> RecordSet {
        self.with_records(self.records[..n].to_vec())
    }
}
