//! Newline-delimited JSON export of sampling traces, delta encoded.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{SampleTrace, Specials};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskEvent {
    pub slot: usize,
    pub token: u32,
}

/// Slots that left MASK on the step ending at `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: f64,
    pub unmasked: Vec<UnmaskEvent>,
}

/// One line per reverse step after the initial all-masked state.
pub fn write_trace_ndjson<W: Write>(trace: &SampleTrace, vocab_total: usize, mut w: W) -> Result<()> {
    let mask = Specials::for_total(vocab_total).mask;
    for pair in trace.states.windows(2) {
        let (before, (t, after)) = (&pair[0].1, &pair[1]);
        let unmasked = before
            .tokens
            .iter()
            .zip(&after.tokens)
            .enumerate()
            .filter(|(_, (&a, &b))| a == mask && b != mask)
            .map(|(slot, (_, &token))| UnmaskEvent { slot, token })
            .collect();
        serde_json::to_writer(&mut w, &TraceLine { t: *t, unmasked })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_ndjson<R: BufRead>(r: R) -> Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
