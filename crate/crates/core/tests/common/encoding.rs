//! Encoding invariants checked on one trace at a time.

use semtrace::corpus::gen_function;
use semtrace::encoding::{
    apply_mask, build_vocab, split_subsequences, tokenize_trace, EncodedInput, DUMMY_VALUE, MASK, WINDOW_CHOICES,
};
use semtrace::ir::lexer::lex;
use semtrace::microtrace::{dummy_trace, micro_execute, MicroTrace, TracerConfig};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn trace(fn_seed: u64, run_seed: u64, dummy: bool) -> MicroTrace {
    let f = gen_function(fn_seed, 4..=24);
    if dummy {
        dummy_trace(&f)
    } else {
        micro_execute(&f, run_seed, &TracerConfig::default())
    }
}

pub fn encoded(t: &MicroTrace) -> EncodedInput {
    tokenize_trace(t, &build_vocab([t])).expect("own vocabulary covers the trace")
}

pub fn alignment(t: &MicroTrace) -> Check {
    let e = encoded(t);
    ensure!(e.is_aligned(), "sequences differ in length");
    let mut i = 0;
    for (pos, step) in t.steps.iter().enumerate() {
        let n = lex(&step.text).map_err(|e| format!("{e:?}"))?.len();
        ensure!(n == step.values.len(), "step {pos}: {n} lexemes, {} values", step.values.len());
        for o in 0..n {
            ensure!(e.instr_pos[i] == pos as u32, "token {i}: instruction position {}", e.instr_pos[i]);
            ensure!(e.operand_pos[i] == o as u32, "token {i}: operand position {}", e.operand_pos[i]);
            ensure!(e.arch[i] == e.arch[0], "token {i}: architecture changes");
            i += 1;
        }
    }
    ensure!(i == e.len(), "{} tokens for {i} lexemes", e.len());
    Ok(())
}

pub fn big_endian(t: &MicroTrace) -> Check {
    let e = encoded(t);
    let flat = t.steps.iter().flat_map(|s| s.values.iter().copied());
    for (i, (bytes, v)) in e.values.iter().zip(flat).enumerate() {
        match v {
            None => ensure!(*bytes == DUMMY_VALUE, "token {i}: dummy encoded as {bytes:?}"),
            Some(v) => {
                for (k, &b) in bytes.iter().enumerate() {
                    ensure!(u64::from(b) == (v >> (8 * (7 - k))) & 0xff, "token {i}: {v:#x} encoded as {bytes:?}");
                }
            }
        }
    }
    Ok(())
}

pub fn mask_roundtrip(t: &MicroTrace, percent: f64, seed: u64) -> Check {
    let e = encoded(t);
    let m = apply_mask(&e, percent, &WINDOW_CHOICES, seed);
    ensure!(m.unmask() == e, "unmasking does not restore the input");
    let want = ((percent * e.len() as f64).round() as usize).clamp(1, e.len());
    ensure!(m.positions.len() == want, "{} masked, expected {want}", m.positions.len());
    ensure!(m.positions.windows(2).all(|w| w[0] < w[1]), "positions not sorted");
    for &p in &m.positions {
        ensure!(m.input.tokens[p] == MASK && m.input.values[p] == DUMMY_VALUE, "position {p} not masked");
    }
    ensure!(m.input.instr_pos == e.instr_pos && m.input.operand_pos == e.operand_pos, "positions changed");
    ensure!(apply_mask(&e, percent, &WINDOW_CHOICES, seed) == m, "masking is not deterministic");
    Ok(())
}

pub fn partition(t: &MicroTrace, max_len: usize) -> Check {
    let e = encoded(t);
    let parts = split_subsequences(&e, max_len).map_err(|e| e.to_string())?;
    ensure!(EncodedInput::concat(&parts) == e, "chunks do not concatenate to the input");
    let starts = e.instruction_starts();
    let mut offset = 0;
    for p in &parts {
        ensure!(!p.is_empty() && p.len() <= max_len, "chunk of {} tokens", p.len());
        ensure!(starts.contains(&offset), "chunk starts mid-instruction at {offset}");
        offset += p.len();
    }
    Ok(())
}
