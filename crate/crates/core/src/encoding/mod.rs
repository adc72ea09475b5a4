//! Model inputs built from micro-traces: five aligned sequences of code
//! tokens, value bytes, instruction positions, operand positions and
//! architecture tags.

mod dataset;
mod mask;
mod vocab;

use thiserror::Error;

use crate::ir::lexer::{lex, Lexeme};
use crate::ir::Dialect;
use crate::microtrace::{MicroTrace, TraceStep};

pub use dataset::{read_dataset, write_dataset, DatasetError, EncodedDataset};
pub use mask::{apply_mask, MaskedInput, DEFAULT_MASK_PERCENT, WINDOW_CHOICES};
pub use vocab::{build_vocab, Vocab, VocabError, MASK, MASK_TOKEN, NUM, NUM_TOKEN, PAD, PAD_TOKEN};

/// Byte id standing for "no value".
pub const DUMMY_BYTE: u16 = 256;
/// 256 byte values plus the dummy id.
pub const BYTE_VOCAB: usize = 257;
pub const DUMMY_VALUE: [u16; 8] = [DUMMY_BYTE; 8];

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EncodedInput {
    pub tokens: Vec<u32>,
    pub values: Vec<[u16; 8]>,
    pub instr_pos: Vec<u32>,
    pub operand_pos: Vec<u32>,
    pub arch: Vec<u32>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_aligned(&self) -> bool {
        let n = self.tokens.len();
        self.values.len() == n
            && self.instr_pos.len() == n
            && self.operand_pos.len() == n
            && self.arch.len() == n
    }

    /// Token index where each instruction starts.
    pub fn instruction_starts(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| i == 0 || self.instr_pos[i] != self.instr_pos[i - 1])
            .collect()
    }

    fn slice(&self, start: usize, end: usize) -> EncodedInput {
        EncodedInput {
            tokens: self.tokens[start..end].to_vec(),
            values: self.values[start..end].to_vec(),
            instr_pos: self.instr_pos[start..end].to_vec(),
            operand_pos: self.operand_pos[start..end].to_vec(),
            arch: self.arch[start..end].to_vec(),
        }
    }

    pub fn concat(parts: &[EncodedInput]) -> EncodedInput {
        let mut out = EncodedInput::default();
        for p in parts {
            out.tokens.extend_from_slice(&p.tokens);
            out.values.extend_from_slice(&p.values);
            out.instr_pos.extend_from_slice(&p.instr_pos);
            out.operand_pos.extend_from_slice(&p.operand_pos);
            out.arch.extend_from_slice(&p.arch);
        }
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("step {index}: {reason}")]
    Misaligned { index: usize, reason: String },
    #[error("instruction at token {start} has {len} tokens, more than max_len {max_len}")]
    InstructionTooLong { start: usize, len: usize, max_len: usize },
}

/// Big-endian, zero-padded; `None` is the dummy sequence.
pub fn encode_value_bytes(v: Option<u64>) -> [u16; 8] {
    match v {
        Some(v) => v.to_be_bytes().map(u16::from),
        None => DUMMY_VALUE,
    }
}

pub fn decode_value_bytes(b: &[u16; 8]) -> Option<u64> {
    if b.iter().any(|&x| x > 255) {
        return None;
    }
    Some(b.iter().fold(0u64, |acc, &x| (acc << 8) | u64::from(x)))
}

/// Code-token string for a lexeme: numeric literals collapse to `num`.
pub fn code_token(l: &Lexeme) -> String {
    match l {
        Lexeme::Number(_) => NUM_TOKEN.to_string(),
        other => other.text(),
    }
}

pub(crate) fn step_tokens(step: &TraceStep) -> Result<Vec<String>, EncodeError> {
    let lexemes = lex(&step.text).map_err(|e| EncodeError::Misaligned {
        index: step.index,
        reason: format!("{e:?}"),
    })?;
    if lexemes.len() != step.values.len() {
        return Err(EncodeError::Misaligned {
            index: step.index,
            reason: format!("{} tokens but {} values", lexemes.len(), step.values.len()),
        });
    }
    Ok(lexemes.iter().map(code_token).collect())
}

pub fn arch_id(d: Dialect) -> u32 {
    d.id() as u32
}

pub fn tokenize_trace(trace: &MicroTrace, vocab: &Vocab) -> Result<EncodedInput, EncodeError> {
    let mut e = EncodedInput::default();
    let arch = arch_id(trace.dialect);
    for (pos, step) in trace.steps.iter().enumerate() {
        for (o, (tok, v)) in step_tokens(step)?.iter().zip(&step.values).enumerate() {
            e.tokens.push(vocab.id(tok)?);
            e.values.push(encode_value_bytes(*v));
            e.instr_pos.push(pos as u32);
            e.operand_pos.push(o as u32);
            e.arch.push(arch);
        }
    }
    Ok(e)
}

/// Contiguous chunks of at most `max_len` tokens, cut only at instruction
/// starts. Positions are kept as in the original sequence.
pub fn split_subsequences(e: &EncodedInput, max_len: usize) -> Result<Vec<EncodedInput>, EncodeError> {
    assert!(max_len >= 1, "max_len must be positive");
    let n = e.len();
    if n <= max_len {
        return Ok(vec![e.clone()]);
    }
    let mut starts = e.instruction_starts();
    starts.push(n);
    for w in starts.windows(2) {
        if w[1] - w[0] > max_len {
            return Err(EncodeError::InstructionTooLong {
                start: w[0],
                len: w[1] - w[0],
                max_len,
            });
        }
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = *starts
            .iter()
            .rev()
            .find(|&&b| b <= start + max_len)
            .expect("instruction lengths checked");
        out.push(e.slice(start, end));
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_function, Dialect};
    use crate::microtrace::{dummy_trace, micro_execute, TracerConfig};

    #[test]
    fn value_bytes() {
        assert_eq!(encode_value_bytes(Some(2)), [0, 0, 0, 0, 0, 0, 0, 2]);
        assert_eq!(encode_value_bytes(Some(0x8b4a3f)), [0, 0, 0, 0, 0, 0x8b, 0x4a, 0x3f]);
        assert_eq!(encode_value_bytes(None), [256; 8]);
        assert_eq!(decode_value_bytes(&encode_value_bytes(Some(0x8b4a3f))), Some(0x8b4a3f));
        assert_eq!(decode_value_bytes(&DUMMY_VALUE), None);
    }

    #[test]
    fn tokenizes_register_and_number() {
        let f = parse_function("r1 := 0x8\nr1 := 0x3\nret", Dialect::ArchA).unwrap();
        let t = micro_execute(&f, 5, &TracerConfig::default());
        let vocab = build_vocab([&t]);
        let e = tokenize_trace(&t, &vocab).unwrap();
        let names: Vec<&str> = e.tokens.iter().map(|&i| vocab.token(i)).collect();
        assert_eq!(names, ["r1", ":=", "num", "r1", ":=", "num", "ret"]);
        assert_eq!(e.instr_pos, [0, 0, 0, 1, 1, 1, 2]);
        assert_eq!(e.operand_pos, [0, 1, 2, 0, 1, 2, 0]);
        // The second r1 carries the value written by the first instruction.
        assert_eq!(e.values[3], encode_value_bytes(Some(8)));
        assert_eq!(e.values[1], DUMMY_VALUE);
        assert_eq!(e.values[2], encode_value_bytes(Some(8)));
        assert!(e.arch.iter().all(|&a| a == 0));
    }

    #[test]
    fn dummy_trace_is_all_dummy() {
        let f = parse_function("s1 := s2 plus 0x4\nleave", Dialect::ArchB).unwrap();
        let t = dummy_trace(&f);
        let e = tokenize_trace(&t, &build_vocab([&t])).unwrap();
        assert!(e.values.iter().all(|v| *v == DUMMY_VALUE));
        assert!(e.arch.iter().all(|&a| a == 1));
    }

    #[test]
    fn unknown_token_is_named() {
        let f = parse_function("r1 := r2 + 0x4\nret", Dialect::ArchA).unwrap();
        let g = parse_function("ret", Dialect::ArchA).unwrap();
        let vocab = build_vocab([&dummy_trace(&g)]);
        assert_eq!(
            tokenize_trace(&dummy_trace(&f), &vocab),
            Err(EncodeError::UnknownToken("r1".into()))
        );
    }

    fn synthetic(lengths: &[usize]) -> EncodedInput {
        let mut e = EncodedInput::default();
        for (i, &l) in lengths.iter().enumerate() {
            for o in 0..l {
                e.tokens.push(3 + o as u32);
                e.values.push(DUMMY_VALUE);
                e.instr_pos.push(i as u32);
                e.operand_pos.push(o as u32);
                e.arch.push(0);
            }
        }
        e
    }

    #[test]
    fn splitting() {
        let e = synthetic(&[7; 100]);
        let parts = split_subsequences(&e, 512).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].len(), 511);
        assert_eq!(EncodedInput::concat(&parts), e);

        let e = synthetic(&[8; 64]);
        assert_eq!(split_subsequences(&e, 512).unwrap(), vec![e.clone()]);

        assert!(matches!(
            split_subsequences(&synthetic(&[2, 9, 2]), 5),
            Err(EncodeError::InstructionTooLong { start: 2, len: 9, .. })
        ));
    }
}
