//! JSON-lines trace files. One record per trace:
//! `{fn_id, dialect, terminated_by, steps:[{idx, text, values}]}` where each
//! value is 16 lowercase hex digits or `"##"`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{MicroTrace, Termination, TraceStep};
use crate::ir::Dialect;

pub const DUMMY_TEXT: &str = "##";

#[derive(Debug, Error)]
pub enum TraceFormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: bad value {value:?}")]
    BadValue { line: usize, value: String },
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    idx: usize,
    text: String,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    fn_id: String,
    dialect: Dialect,
    terminated_by: Termination,
    steps: Vec<StepRecord>,
}

fn format_value(v: Option<u64>) -> String {
    match v {
        Some(v) => format!("{v:016x}"),
        None => DUMMY_TEXT.to_string(),
    }
}

fn parse_value(s: &str) -> Option<Option<u64>> {
    if s == DUMMY_TEXT {
        return Some(None);
    }
    if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(Some)
}

pub fn write_traces<'a, W: Write>(
    mut w: W,
    traces: impl IntoIterator<Item = &'a MicroTrace>,
) -> std::io::Result<()> {
    for t in traces {
        let rec = TraceRecord {
            fn_id: t.fn_id.clone(),
            dialect: t.dialect,
            terminated_by: t.terminated_by,
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    idx: s.index,
                    text: s.text.clone(),
                    values: s.values.iter().map(|v| format_value(*v)).collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<MicroTrace>, TraceFormatError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|source| TraceFormatError::Json { line: i + 1, source })?;
        let mut steps = Vec::with_capacity(rec.steps.len());
        for s in rec.steps {
            let values = s
                .values
                .iter()
                .map(|v| {
                    parse_value(v).ok_or_else(|| TraceFormatError::BadValue {
                        line: i + 1,
                        value: v.clone(),
                    })
                })
                .collect::<Result<_, _>>()?;
            steps.push(TraceStep {
                index: s.idx,
                text: s.text,
                values,
            });
        }
        out.push(MicroTrace {
            fn_id: rec.fn_id,
            dialect: rec.dialect,
            steps,
            terminated_by: rec.terminated_by,
        });
    }
    Ok(out)
}
