use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{ActivationHeader, ActivationRecord, ActivationSet};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APF1";
pub const FORMAT_VERSION: u32 = 1;

/// Bytes before the metadata blob.
const FIXED_HEADER_LEN: u64 = 4 + 4 * 4 + 8 + 4 + 4;

fn encode_header(header: &ActivationHeader) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&header.metadata)
        .map_err(|e| Error::Format(format!("metadata not serializable: {e}")))?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| Error::Format("metadata blob exceeds 4 GiB".into()))?;
    let mut buf = Vec::with_capacity(FIXED_HEADER_LEN as usize + meta.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header.version.to_le_bytes());
    buf.extend_from_slice(&header.num_layers.to_le_bytes());
    buf.extend_from_slice(&header.hidden_dim.to_le_bytes());
    buf.extend_from_slice(&header.num_classes.to_le_bytes());
    buf.extend_from_slice(&header.num_examples.to_le_bytes());
    buf.extend_from_slice(&header.dtype_code.to_le_bytes());
    buf.extend_from_slice(&meta_len.to_le_bytes());
    buf.extend_from_slice(&meta);
    Ok(buf)
}

/// Streams records into an `APF1` sink.
///
/// The offset table is reserved up front and patched in [`finish`](Self::finish),
/// so records may arrive one at a time. Dropping the writer without calling
/// `finish` leaves an invalid file.
pub struct ActivationWriter<W: Write + Seek> {
    sink: W,
    path: PathBuf,
    header: ActivationHeader,
    table_pos: u64,
    pos: u64,
    offsets: Vec<u64>,
}

impl ActivationWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: ActivationHeader) -> Result<Self> {
        let path = path.as_ref();
        header.validate()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufWriter::new(file), path, header)
    }
}

impl<W: Write + Seek> ActivationWriter<W> {
    /// `path` is only used to label I/O errors.
    pub fn new(mut sink: W, path: impl Into<PathBuf>, header: ActivationHeader) -> Result<Self> {
        let path = path.into();
        header.validate()?;
        let head = encode_header(&header)?;
        sink.write_all(&head).map_err(|e| Error::io(&path, e))?;
        let table_pos = head.len() as u64;
        let table_len = 8 * header.num_examples;
        // Reserve the offset table.
        let zeros = [0u8; 4096];
        let mut left = table_len;
        while left > 0 {
            let n = left.min(zeros.len() as u64) as usize;
            sink.write_all(&zeros[..n]).map_err(|e| Error::io(&path, e))?;
            left -= n as u64;
        }
        Ok(ActivationWriter {
            sink,
            path,
            table_pos,
            pos: table_pos + table_len,
            offsets: Vec::with_capacity(header.num_examples as usize),
            header,
        })
    }

    pub fn push(&mut self, record: &ActivationRecord) -> Result<()> {
        let index = self.offsets.len();
        if index as u64 >= self.header.num_examples {
            return Err(Error::invalid(format!(
                "record {index}: header declares only {} examples",
                self.header.num_examples
            )));
        }
        self.header.check_record(index, record)?;
        let mut buf = Vec::with_capacity(record.encoded_len() as usize);
        buf.extend_from_slice(&record.example_id.to_le_bytes());
        buf.extend_from_slice(&record.label.to_le_bytes());
        buf.extend_from_slice(&record.span_len.to_le_bytes());
        for v in &record.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.sink.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.offsets.push(self.pos);
        self.pos += buf.len() as u64;
        Ok(())
    }

    /// Patches the offset table and flushes. Returns the sink.
    pub fn finish(mut self) -> Result<W> {
        if self.offsets.len() as u64 != self.header.num_examples {
            return Err(Error::invalid(format!(
                "header declares {} examples, {} written",
                self.header.num_examples,
                self.offsets.len()
            )));
        }
        let mut table = Vec::with_capacity(8 * self.offsets.len());
        for o in &self.offsets {
            table.extend_from_slice(&o.to_le_bytes());
        }
        let path = &self.path;
        self.sink
            .seek(SeekFrom::Start(self.table_pos))
            .and_then(|_| self.sink.write_all(&table))
            .and_then(|_| self.sink.seek(SeekFrom::End(0)))
            .and_then(|_| self.sink.flush())
            .map_err(|e| Error::io(path, e))?;
        Ok(self.sink)
    }
}

/// Writes `records` under `header` to `path`.
///
/// Output is byte-identical for identical input.
pub fn write_activation_set<I>(path: impl AsRef<Path>, header: &ActivationHeader, records: I) -> Result<()>
where
    I: IntoIterator,
    I::Item: std::borrow::Borrow<ActivationRecord>,
{
    use std::borrow::Borrow;
    let mut writer = ActivationWriter::create(path, header.clone())?;
    for r in records {
        writer.push(r.borrow())?;
    }
    writer.finish()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len() as u64);
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos as usize..end as usize];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode_header(bytes: &[u8]) -> Result<(ActivationHeader, Vec<u64>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"APF1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let num_layers = r.u32("num_layers")?;
    let hidden_dim = r.u32("hidden_dim")?;
    let num_classes = r.u32("num_classes")?;
    let num_examples = r.u64("num_examples")?;
    let dtype_code = r.u32("dtype_code")?;
    let meta_len = r.u32("metadata length")?;
    let meta_at = r.pos;
    let meta = r.take(meta_len as u64, "metadata")?;
    let metadata = serde_json::from_slice(meta).map_err(|e| Error::Corrupt {
        offset: meta_at,
        reason: format!("metadata is not a JSON object of strings: {e}"),
    })?;
    let header = ActivationHeader {
        version,
        num_layers,
        hidden_dim,
        num_classes,
        num_examples,
        dtype_code,
        metadata,
    };
    header.validate()?;

    let table_at = r.pos;
    let table_len = num_examples.checked_mul(8).ok_or_else(|| Error::Corrupt {
        offset: table_at,
        reason: "offset table size overflows".into(),
    })?;
    let table = r.take(table_len, "offset table")?;
    let offsets: Vec<u64> = table
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    // Records must tile the rest of the file in table order.
    let stride = header.token_stride() as u64 * 4;
    let mut expected = r.pos;
    for (i, &off) in offsets.iter().enumerate() {
        if off != expected {
            return Err(Error::Corrupt {
                offset: table_at + 8 * i as u64,
                reason: format!("record {i} offset {off} does not follow previous record (expected {expected})"),
            });
        }
        let mut rr = Reader { bytes, pos: off };
        rr.take(12, "record header")?;
        let span_len = rr.u32("span_len")? as u64;
        rr.take(span_len * stride, "record tensor")?;
        expected = rr.pos;
    }
    if expected != bytes.len() as u64 {
        return Err(Error::Corrupt {
            offset: expected,
            reason: format!("{} trailing bytes after last record", bytes.len() as u64 - expected),
        });
    }
    Ok((header, offsets))
}

pub(super) fn peek_example_id(bytes: &[u8], offset: u64) -> u64 {
    let o = offset as usize;
    u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
}

pub(super) fn decode_record(header: &ActivationHeader, bytes: &[u8], offset: u64, index: usize) -> Result<ActivationRecord> {
    let mut r = Reader { bytes, pos: offset };
    let example_id = r.u64("example_id")?;
    let label = r.u32("label")?;
    let span_len = r.u32("span_len")?;
    let n = span_len as usize * header.token_stride();
    let raw = r.take(4 * n as u64, "record tensor")?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let record = ActivationRecord {
        example_id,
        label,
        span_len,
        values,
    };
    header.check_record(index, &record).map_err(|e| Error::Corrupt {
        offset,
        reason: e.to_string(),
    })?;
    Ok(record)
}

/// Opens an `APF1` file, validating its header and record layout.
pub fn read_activation_set(path: impl AsRef<Path>) -> Result<ActivationSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationSet::from_bytes(bytes)
}

impl ActivationSet {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let (header, offsets) = decode_header(&bytes)?;
        Ok(ActivationSet::from_file_parts(header, bytes, offsets))
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;

    fn encode(header: &ActivationHeader, records: &[ActivationRecord]) -> Result<Vec<u8>> {
        let mut w = ActivationWriter::new(Cursor::new(Vec::new()), "<memory>", header.clone())?;
        for r in records {
            w.push(r)?;
        }
        Ok(w.finish()?.into_inner())
    }

    fn rec(id: u64, label: u32, values: Vec<f32>) -> ActivationRecord {
        ActivationRecord {
            example_id: id,
            label,
            span_len: 1,
            values,
        }
    }

    #[test]
    fn single_record_round_trip() {
        let h = ActivationHeader::new(1, 2, 2, 1);
        let r = rec(0, 0, vec![0.0, 0.0]);
        let bytes = encode(&h, std::slice::from_ref(&r)).unwrap();
        let set = ActivationSet::from_bytes(bytes).unwrap();
        assert_eq!(set.header(), &h);
        assert_eq!(set.record(0).unwrap(), r);
    }

    #[test]
    fn layout_is_exact() {
        let h = ActivationHeader::new(1, 1, 2, 1);
        let bytes = encode(&h, &[rec(5, 1, vec![1.5])]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"APF1");
        for v in [1u32, 1, 1, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&0u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"{}");
        let first = expected.len() as u64 + 8;
        expected.extend_from_slice(&first.to_le_bytes());
        expected.extend_from_slice(&5u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn dimension_mismatch_names_record() {
        let h = ActivationHeader::new(1, 2, 2, 1);
        let err = encode(&h, &[rec(0, 0, vec![0.0, 0.0, 0.0])]).unwrap_err();
        assert!(matches!(err, Error::Dimension { index: 0, expected: 2, found: 3 }));
    }

    #[test]
    fn non_finite_rejected() {
        let h = ActivationHeader::new(1, 2, 2, 1);
        let err = encode(&h, &[rec(0, 0, vec![0.0, f32::INFINITY])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }));
    }

    #[test]
    fn count_mismatch_rejected() {
        let h = ActivationHeader::new(1, 1, 2, 2);
        assert!(encode(&h, &[rec(0, 0, vec![0.0])]).is_err());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let h = ActivationHeader::new(1, 2, 2, 1);
        let mut bytes = encode(&h, &[rec(0, 0, vec![0.0, 0.0])]).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(ActivationSet::from_bytes(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let h = ActivationHeader::new(1, 2, 2, 1);
        let mut bytes = encode(&h, &[rec(0, 0, vec![0.0, 0.0])]).unwrap();
        bytes[4] = 9;
        assert!(matches!(ActivationSet::from_bytes(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let h = ActivationHeader::new(1, 2, 2, 2);
        let bytes = encode(&h, &[rec(0, 0, vec![0.0, 1.0]), rec(1, 1, vec![2.0, 3.0])]).unwrap();
        for cut in [3usize, 20, 40, bytes.len() - 1] {
            let err = ActivationSet::from_bytes(bytes[..cut].to_vec()).unwrap_err();
            match err {
                Error::Corrupt { offset, .. } => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: expected corruption error, got {other}"),
            }
        }
    }

    #[test]
    fn out_of_range_record() {
        let h = ActivationHeader::new(1, 2, 2, 1);
        let set = ActivationSet::from_bytes(encode(&h, &[rec(0, 0, vec![0.0, 0.0])]).unwrap()).unwrap();
        assert!(matches!(set.record(1), Err(Error::OutOfRange { index: 1, len: 1 })));
    }
}
