//! Encoded datasets on disk: `<stem>.bin` holds the records back to back,
//! `<stem>.manifest` lists one `fn_id length offset` line per record.
//!
//! A record of length n is n u32 tokens, n*8 u16 value bytes, then n u32
//! each of instruction positions, operand positions and arch tags, all
//! little-endian.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::EncodedInput;

const HEADER: &str = "semtrace-encoded v1";

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EncodedDataset {
    pub fn_ids: Vec<String>,
    pub records: Vec<EncodedInput>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("record {index} runs past the end of the data file")]
    Truncated { index: usize },
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("manifest"))
}

fn record_bytes(n: usize) -> usize {
    n * (4 + 16 + 4 + 4 + 4)
}

pub fn write_dataset(stem: &Path, d: &EncodedDataset) -> io::Result<()> {
    let (bin, man) = paths(stem);
    let mut data = Vec::new();
    let mut manifest = format!("{HEADER}\nrecords {}\n", d.records.len());
    for (id, r) in d.fn_ids.iter().zip(&d.records) {
        manifest.push_str(&format!("{id} {} {}\n", r.len(), data.len()));
        for &t in &r.tokens {
            data.extend_from_slice(&t.to_le_bytes());
        }
        for v in &r.values {
            for &b in v {
                data.extend_from_slice(&b.to_le_bytes());
            }
        }
        for seq in [&r.instr_pos, &r.operand_pos, &r.arch] {
            for &x in seq {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(bin, data)?;
    fs::write(man, manifest)
}

pub fn read_dataset(stem: &Path) -> Result<EncodedDataset, DatasetError> {
    let (bin, man) = paths(stem);
    let data = fs::read(bin)?;
    let manifest = fs::read_to_string(man)?;
    let bad = |line: usize, reason: &str| DatasetError::Manifest {
        line,
        reason: reason.to_string(),
    };
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(1, "missing header"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("records "))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(2, "expected `records <count>`"))?;
    let mut out = EncodedDataset::default();
    for (k, line) in lines.enumerate() {
        let lineno = k + 3;
        let parts: Vec<&str> = line.split(' ').collect();
        let [id, n, off] = parts[..] else {
            return Err(bad(lineno, "expected `fn_id length offset`"));
        };
        let n: usize = n.parse().map_err(|_| bad(lineno, "bad length"))?;
        let off: usize = off.parse().map_err(|_| bad(lineno, "bad offset"))?;
        let end = off + record_bytes(n);
        if end > data.len() {
            return Err(DatasetError::Truncated { index: k });
        }
        let mut cur = &data[off..end];
        let u32s = |cur: &mut &[u8]| -> Vec<u32> {
            let (head, tail) = cur.split_at(4 * n);
            *cur = tail;
            head.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let tokens = u32s(&mut cur);
        let (vb, tail) = cur.split_at(16 * n);
        cur = tail;
        let values = vb
            .chunks_exact(16)
            .map(|c| {
                let mut v = [0u16; 8];
                for (j, b) in c.chunks_exact(2).enumerate() {
                    v[j] = u16::from_le_bytes([b[0], b[1]]);
                }
                v
            })
            .collect();
        let instr_pos = u32s(&mut cur);
        let operand_pos = u32s(&mut cur);
        let arch = u32s(&mut cur);
        out.fn_ids.push(id.to_string());
        out.records.push(EncodedInput {
            tokens,
            values,
            instr_pos,
            operand_pos,
            arch,
        });
    }
    if out.records.len() != count {
        return Err(bad(2, "record count does not match"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{build_vocab, tokenize_trace};
    use crate::ir::{parse_function, Dialect};
    use crate::microtrace::{trace_batch, TracerConfig};

    #[test]
    fn round_trip() {
        let f = parse_function("r1 := r2 + 0x3\nstore(r1, r15 - 0x8)\nret", Dialect::ArchA).unwrap();
        let traces = trace_batch(&f, &[1, 2], &TracerConfig::default());
        let vocab = build_vocab(&traces);
        let d = EncodedDataset {
            fn_ids: vec!["a".into(), "b".into(), "c".into()],
            records: traces.iter().map(|t| tokenize_trace(t, &vocab).unwrap()).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("train");
        write_dataset(&stem, &d).unwrap();
        assert_eq!(read_dataset(&stem).unwrap(), d);
        let man = fs::read_to_string(stem.with_extension("manifest")).unwrap();
        assert!(man.contains("records 3"));
        fs::write(stem.with_extension("bin"), b"xx").unwrap();
        assert!(matches!(read_dataset(&stem), Err(DatasetError::Truncated { index: 0 })));
    }
}
