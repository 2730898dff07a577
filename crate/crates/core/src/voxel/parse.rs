use std::collections::HashMap;
use std::io::BufRead;

use serde::Deserialize;

use super::BlockPlacement;
use crate::error::Result;

/// All placements of one house, stably sorted by timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct House {
    pub id: String,
    pub placements: Vec<BlockPlacement>,
}

/// A rejected input line (1-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    /// Houses in order of first appearance.
    pub houses: Vec<House>,
    pub errors: Vec<LineError>,
    pub accepted: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HouseKey {
    Text(String),
    Number(i64),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    house_id: HouseKey,
    x: i64,
    y: i64,
    z: i64,
    block_id: i64,
    t: i64,
}

/// Read newline-delimited JSON placement records.
///
/// Malformed records are collected in [`ParsedLog::errors`] rather than
/// aborting the whole read; only I/O failures are fatal.
pub fn parse_placements<R: BufRead>(reader: R) -> Result<ParsedLog> {
    let mut log = ParsedLog::default();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lineno = n + 1;
        let rec: Record = match serde_json::from_str(trimmed) {
            Ok(r) => r,
            Err(e) => {
                log.errors.push(LineError {
                    line: lineno,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let block_id = match u8::try_from(rec.block_id) {
            Ok(id) => id,
            Err(_) => {
                log.errors.push(LineError {
                    line: lineno,
                    message: format!("block_id {} outside [0, 255]", rec.block_id),
                });
                continue;
            }
        };
        let house_id = match rec.house_id {
            HouseKey::Text(s) => s,
            HouseKey::Number(n) => n.to_string(),
        };
        let slot = *index.entry(house_id.clone()).or_insert_with(|| {
            log.houses.push(House {
                id: house_id.clone(),
                placements: Vec::new(),
            });
            log.houses.len() - 1
        });
        log.houses[slot].placements.push(BlockPlacement {
            house_id,
            x: rec.x,
            y: rec.y,
            z: rec.z,
            block_id,
            timestamp: rec.t,
        });
        log.accepted += 1;
    }

    for house in &mut log.houses {
        house.placements.sort_by_key(|p| p.timestamp);
    }
    if !log.errors.is_empty() {
        log::warn!(
            "{} malformed record(s), {} accepted",
            log.errors.len(),
            log.accepted
        );
    }
    Ok(log)
}
