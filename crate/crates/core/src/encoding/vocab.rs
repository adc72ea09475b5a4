use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{step_tokens, EncodeError};
use crate::microtrace::MicroTrace;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const NUM: u32 = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";
pub const NUM_TOKEN: &str = "num";

/// Closed code-token vocabulary shared by every dialect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32, EncodeError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| EncodeError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Vocab, VocabError> {
        let mut tokens = Vec::new();
        for line in r.lines() {
            tokens.push(line?);
        }
        for (i, (t, want)) in tokens.iter().zip([PAD_TOKEN, MASK_TOKEN, NUM_TOKEN]).enumerate() {
            if t != want {
                return Err(VocabError::Format {
                    line: i + 1,
                    reason: format!("expected {want:?}, found {t:?}"),
                });
            }
        }
        if tokens.len() < 3 {
            return Err(VocabError::Format {
                line: tokens.len() + 1,
                reason: "missing special tokens".into(),
            });
        }
        let v = Vocab::from_tokens(tokens);
        if v.ids.len() != v.tokens.len() {
            return Err(VocabError::Format {
                line: 0,
                reason: "duplicate token".into(),
            });
        }
        Ok(v)
    }

    /// Hex SHA-256 of the vocab file contents.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Specials first, then tokens by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<'a>(traces: impl IntoIterator<Item = &'a MicroTrace>) -> Vocab {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in traces {
        for s in &t.steps {
            // Malformed steps contribute nothing; tokenization reports them.
            for tok in step_tokens(s).unwrap_or_default() {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let specials = [PAD_TOKEN, MASK_TOKEN, NUM_TOKEN];
    let mut rest: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !specials.contains(&t.as_str()))
        .collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = specials
        .iter()
        .map(|s| s.to_string())
        .chain(rest.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_function, Dialect};
    use crate::microtrace::dummy_trace;

    #[test]
    fn single_ret() {
        let t = dummy_trace(&parse_function("ret", Dialect::ArchA).unwrap());
        let v = build_vocab([&t]);
        assert_eq!(v.tokens(), ["<pad>", "<mask>", "num", "ret"]);
    }

    #[test]
    fn ordering_and_file_round_trip() {
        let a = dummy_trace(&parse_function("r1 := r1 + 0x1\nr2 := r1\nret", Dialect::ArchA).unwrap());
        let b = dummy_trace(&parse_function("s3 := s3 minus 0x2\nleave", Dialect::ArchB).unwrap());
        let v = build_vocab([&a, &b]);
        assert_eq!(&v.tokens()[3..7], [":=", "r1", "s3", "+"]);
        for kw in ["ret", "leave", "minus", "s3"] {
            assert!(v.id(kw).is_ok(), "{kw}");
        }
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = Vocab::read(&buf[..]).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.digest(), v.digest());
        let mut buf2 = Vec::new();
        build_vocab([&a, &b]).write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Vocab::read("<pad>\nret\n".as_bytes()).is_err());
        assert!(Vocab::read("<pad>\n<mask>\nnum\nret\nret\n".as_bytes()).is_err());
    }
}
