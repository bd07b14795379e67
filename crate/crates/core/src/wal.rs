//! Write-ahead log of accepted proposals and the replay decision a restarting
//! validator takes from it.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{decode_block_from, encode_block_into, BlockValue, Decoder, Encoder, TypeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WalEntryType {
    ProposalEntry,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalEntry {
    pub height: u64,
    pub entry_type: WalEntryType,
    pub payload: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WalMode {
    #[default]
    WalWrite,
    NonWalWrite,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WalState {
    pub mode: WalMode,
    pub entries: Vec<WalEntry>,
}

#[derive(Debug, Error)]
pub enum WalError {
    #[error("invalid WAL mode {0:?}")]
    InvalidMode(String),
    #[error("WAL append out of order: last height {last}, got {got}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("WAL file is corrupt: {0}")]
    Corrupt(&'static str),
    #[error("WAL i/o: {0}")]
    Io(#[from] io::Error),
}

/// Acknowledgement of a mode change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeSet;

impl WalMode {
    pub fn parse(s: &str) -> Result<WalMode, WalError> {
        match s {
            "WalWrite" => Ok(WalMode::WalWrite),
            "NonWalWrite" => Ok(WalMode::NonWalWrite),
            other => Err(WalError::InvalidMode(other.to_string())),
        }
    }
}

pub fn set_mode(state: &mut WalState, mode: &str) -> Result<ModeSet, WalError> {
    state.mode = WalMode::parse(mode)?;
    Ok(ModeSet)
}

/// Appends `entry`; a no-op when logging is disabled. Heights never decrease.
pub fn wal_append(state: &mut WalState, entry: WalEntry) -> Result<(), WalError> {
    if state.mode == WalMode::NonWalWrite {
        return Ok(());
    }
    if let Some(last) = state.entries.last() {
        if entry.height < last.height {
            return Err(WalError::OutOfOrder {
                last: last.height,
                got: entry.height,
            });
        }
    }
    state.entries.push(entry);
    Ok(())
}

/// Payload of a proposal entry: the accepted proposal, its round, and the lock
/// held when the entry was written.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalRecord {
    pub round: u64,
    pub proposal: BlockValue,
    pub locked: Option<(u64, BlockValue)>,
}

impl WalRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u64(self.round);
        encode_block_into(&mut enc, &self.proposal);
        match &self.locked {
            Some((r, v)) => {
                enc.u8(1).u64(*r);
                encode_block_into(&mut enc, v);
            }
            None => {
                enc.u8(0);
            }
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<WalRecord, TypeError> {
        let mut dec = Decoder::new(bytes);
        let round = dec.u64()?;
        let proposal = decode_block_from(&mut dec)?;
        let locked = match dec.u8()? {
            0 => None,
            1 => {
                let r = dec.u64()?;
                Some((r, decode_block_from(&mut dec)?))
            }
            _ => return Err(TypeError::Decode("bad lock flag")),
        };
        if !dec.is_empty() {
            return Err(TypeError::Decode("trailing bytes"));
        }
        Ok(WalRecord {
            round,
            proposal,
            locked,
        })
    }

    pub fn entry(&self) -> WalEntry {
        WalEntry {
            height: self.proposal.height,
            entry_type: WalEntryType::ProposalEntry,
            payload: self.encode(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoreReason {
    NoWriteMode,
    IteratorFail,
    ChainAhead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayError {
    WalHeightInconsistent,
    ReplayFail,
    InvalidEntryType,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplyWal {
    /// Nothing to replay; continue from the chain height.
    WalRestored { reason: RestoreReason, height: u64 },
    /// Resume inside the logged round of the next height.
    EnterPrecommit(WalRecord),
    Error(ReplayError),
}

impl ReplyWal {
    pub fn label(&self) -> &'static str {
        match self {
            ReplyWal::WalRestored { reason: RestoreReason::NoWriteMode, .. } => "no_write_mode",
            ReplyWal::WalRestored { reason: RestoreReason::IteratorFail, .. } => "iterator_fail",
            ReplyWal::WalRestored { reason: RestoreReason::ChainAhead, .. } => "chain_ahead",
            ReplyWal::EnterPrecommit(_) => "enter_precommit",
            ReplyWal::Error(ReplayError::WalHeightInconsistent) => "wal_height_inconsistent",
            ReplyWal::Error(ReplayError::ReplayFail) => "replay_fail",
            ReplyWal::Error(ReplayError::InvalidEntryType) => "invalid_entry_type",
        }
    }
}

/// Decides how a validator whose chain is at `current_height` resumes. Reads
/// the log without modifying it.
pub fn reply_wal(state: &WalState, current_height: u64) -> ReplyWal {
    if state.mode == WalMode::NonWalWrite {
        return ReplyWal::WalRestored {
            reason: RestoreReason::NoWriteMode,
            height: current_height,
        };
    }
    let Some(last) = state.entries.last() else {
        return ReplyWal::WalRestored {
            reason: RestoreReason::IteratorFail,
            height: current_height,
        };
    };
    if current_height + 1 < last.height {
        return ReplyWal::Error(ReplayError::WalHeightInconsistent);
    }
    if current_height >= last.height {
        return ReplyWal::WalRestored {
            reason: RestoreReason::ChainAhead,
            height: current_height,
        };
    }
    match last.entry_type {
        WalEntryType::ProposalEntry => match WalRecord::decode(&last.payload) {
            Ok(rec) => ReplyWal::EnterPrecommit(rec),
            Err(_) => ReplyWal::Error(ReplayError::ReplayFail),
        },
        WalEntryType::Other => ReplyWal::Error(ReplayError::InvalidEntryType),
    }
}

pub fn wal_path(dir: &Path, node: usize) -> PathBuf {
    dir.join(format!("wal-{node}.bin"))
}

fn encode_entry(e: &WalEntry) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u64(e.height);
    enc.u8(match e.entry_type {
        WalEntryType::ProposalEntry => 0,
        WalEntryType::Other => 1,
    });
    enc.bytes(&e.payload);
    enc.finish()
}

/// Writes the log as a sequence of `[u32 length][record]` frames.
pub fn save(state: &WalState, dir: &Path, node: usize) -> Result<PathBuf, WalError> {
    let path = wal_path(dir, node);
    let mut file = fs::File::create(&path)?;
    for e in &state.entries {
        let rec = encode_entry(e);
        let len = u32::try_from(rec.len()).map_err(|_| WalError::Corrupt("record too large"))?;
        file.write_all(&len.to_le_bytes())?;
        file.write_all(&rec)?;
    }
    file.sync_all()?;
    Ok(path)
}

/// Reads a log written by [`save`]. A missing file is an empty log.
pub fn load(dir: &Path, node: usize, mode: WalMode) -> Result<WalState, WalError> {
    let path = wal_path(dir, node);
    let mut bytes = Vec::new();
    match fs::File::open(&path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    let mut entries = Vec::new();
    let mut rest = &bytes[..];
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(WalError::Corrupt("truncated frame header"));
        }
        let len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(WalError::Corrupt("truncated frame"));
        }
        let mut dec = Decoder::new(&rest[..len]);
        let height = dec.u64().map_err(|_| WalError::Corrupt("bad height"))?;
        let entry_type = match dec.u8().map_err(|_| WalError::Corrupt("bad type"))? {
            0 => WalEntryType::ProposalEntry,
            1 => WalEntryType::Other,
            _ => return Err(WalError::Corrupt("unknown entry type")),
        };
        let payload = dec.bytes().map_err(|_| WalError::Corrupt("bad payload"))?.to_vec();
        entries.push(WalEntry {
            height,
            entry_type,
            payload,
        });
        rest = &rest[len..];
    }
    Ok(WalState { mode, entries })
}
