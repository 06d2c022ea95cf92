//! Append-only JSON Lines event log, snapshots and replay.
//!
//! The log is the only persisted state. Records carry their own timestamps,
//! so replay is a pure fold over the records.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use strum::{IntoStaticStr, VariantNames};
use thiserror::Error;

use crate::kernel::{EventRecord, Timestamp};

#[derive(Debug, Error, IntoStaticStr, VariantNames)]
pub enum PersistenceError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("seq {requested} is beyond the last seq {last}")]
    SeqOutOfRange { requested: u64, last: u64 },
}

impl PersistenceError {
    pub fn code(&self) -> &'static str {
        self.into()
    }
}

impl From<std::io::Error> for PersistenceError {
    fn from(e: std::io::Error) -> Self {
        PersistenceError::StorageFailure(e.to_string())
    }
}

/// State that can be rebuilt by folding log records.
pub trait Replay: Default {
    /// Applies one record. An error means the record could not be decoded.
    fn apply_record(&mut self, record: &EventRecord) -> Result<(), String>;
}

/// Rebuilds state from scratch.
pub fn replay<S: Replay>(records: &[EventRecord]) -> Result<S, PersistenceError> {
    replay_onto(S::default(), 0, records)
}

/// Applies the records after `as_of_seq` on top of `state`.
pub fn replay_onto<S: Replay>(mut state: S, as_of_seq: u64, records: &[EventRecord]) -> Result<S, PersistenceError> {
    for (rec, expected) in records.iter().filter(|r| r.seq > as_of_seq).zip(as_of_seq + 1..) {
        if rec.seq != expected {
            return Err(PersistenceError::CorruptLog {
                seq: expected,
                reason: format!("expected seq {expected}, found {}", rec.seq),
            });
        }
        state
            .apply_record(rec)
            .map_err(|reason| PersistenceError::CorruptLog { seq: rec.seq, reason })?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot<S> {
    pub as_of_seq: u64,
    pub state: S,
}

/// State as of `as_of_seq`, built by replaying the prefix.
pub fn snapshot<S: Replay>(records: &[EventRecord], as_of_seq: u64) -> Result<Snapshot<S>, PersistenceError> {
    let last = records.last().map_or(0, |r| r.seq);
    if as_of_seq > last {
        return Err(PersistenceError::SeqOutOfRange {
            requested: as_of_seq,
            last,
        });
    }
    let prefix: Vec<EventRecord> = records.iter().take_while(|r| r.seq <= as_of_seq).cloned().collect();
    Ok(Snapshot {
        as_of_seq,
        state: replay(&prefix)?,
    })
}

/// Snapshot state plus the tail after it.
pub fn restore<S: Replay>(snapshot: Snapshot<S>, records: &[EventRecord]) -> Result<S, PersistenceError> {
    let last = records.last().map_or(0, |r| r.seq);
    if snapshot.as_of_seq > last {
        return Err(PersistenceError::SeqOutOfRange {
            requested: snapshot.as_of_seq,
            last,
        });
    }
    replay_onto(snapshot.state, snapshot.as_of_seq, records)
}

pub fn snapshot_path(log_path: &Path) -> PathBuf {
    let mut name = log_path.as_os_str().to_owned();
    name.push(".snapshot.json");
    PathBuf::from(name)
}

/// Writes the snapshot next to the log via a temp file and rename.
pub fn write_snapshot<S: Serialize>(log_path: &Path, snap: &Snapshot<S>) -> Result<(), PersistenceError> {
    let target = snapshot_path(log_path);
    let mut tmp = target.clone().into_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let bytes = serde_json::to_vec(snap).map_err(|e| PersistenceError::StorageFailure(e.to_string()))?;
    let mut f = File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, &target)?;
    Ok(())
}

pub fn read_snapshot<S: DeserializeOwned>(log_path: &Path) -> Result<Option<Snapshot<S>>, PersistenceError> {
    let path = snapshot_path(log_path);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path)?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| PersistenceError::StorageFailure(format!("unreadable snapshot: {e}")))
}

/// Parses a JSON Lines log, requiring seqs to run 1, 2, 3, ... with no gaps.
pub fn parse_log(text: &str) -> Result<Vec<EventRecord>, PersistenceError> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let expected = out.len() as u64 + 1;
        let rec: EventRecord = serde_json::from_str(line).map_err(|e| PersistenceError::CorruptLog {
            seq: expected,
            reason: e.to_string(),
        })?;
        if rec.seq != expected {
            return Err(PersistenceError::CorruptLog {
                seq: expected,
                reason: format!("expected seq {expected}, found {}", rec.seq),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, PersistenceError> {
    let text = fs::read_to_string(path)?;
    parse_log(&text)
}

#[derive(Debug)]
struct Sink {
    file: File,
    path: PathBuf,
}

/// The append-only log, in memory and optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct EventLog {
    records: Vec<EventRecord>,
    sink: Option<Sink>,
}

/// What `open_recovering` dropped from the end of a log file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TornTail {
    pub at_seq: u64,
    pub bytes_dropped: u64,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog::default()
    }

    pub fn from_records(records: Vec<EventRecord>) -> Result<Self, PersistenceError> {
        for (i, r) in records.iter().enumerate() {
            if r.seq != i as u64 + 1 {
                return Err(PersistenceError::CorruptLog {
                    seq: i as u64 + 1,
                    reason: format!("found seq {}", r.seq),
                });
            }
        }
        Ok(EventLog { records, sink: None })
    }

    /// Opens an existing log strictly, or creates an empty one.
    pub fn open(path: &Path) -> Result<Self, PersistenceError> {
        let records = if path.exists() { read_log(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            records,
            sink: Some(Sink {
                file,
                path: path.to_owned(),
            }),
        })
    }

    /// Opens a log after a crash: a final line that is incomplete or
    /// undecodable is cut off. Corruption anywhere earlier is still an error.
    pub fn open_recovering(path: &Path) -> Result<(Self, Option<TornTail>), PersistenceError> {
        let mut records = Vec::new();
        let mut good_len = 0u64;
        let mut torn = None;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                let expected = records.len() as u64 + 1;
                let complete = line.ends_with('\n');
                let parsed = serde_json::from_str::<EventRecord>(line.trim_end())
                    .ok()
                    .filter(|r| r.seq == expected);
                match parsed {
                    Some(rec) if complete => {
                        records.push(rec);
                        good_len += n as u64;
                    }
                    _ if line.trim().is_empty() && complete => good_len += n as u64,
                    _ => {
                        let total = fs::metadata(path)?.len();
                        if good_len + n as u64 != total {
                            return Err(PersistenceError::CorruptLog {
                                seq: expected,
                                reason: "undecodable record before end of log".into(),
                            });
                        }
                        torn = Some(TornTail {
                            at_seq: expected,
                            bytes_dropped: n as u64,
                        });
                        break;
                    }
                }
            }
            if torn.is_some() {
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(good_len)?;
                f.sync_all()?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            EventLog {
                records,
                sink: Some(Sink {
                    file,
                    path: path.to_owned(),
                }),
            },
            torn,
        ))
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|s| s.path.as_path())
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn last_seq(&self) -> u64 {
        self.records.len() as u64
    }

    /// Appends and, when file-backed, syncs before returning the new seq.
    pub fn append(
        &mut self,
        occurred_at: Timestamp,
        kind: &str,
        payload: serde_json::Value,
    ) -> Result<u64, PersistenceError> {
        let record = EventRecord {
            seq: self.last_seq() + 1,
            occurred_at,
            kind: kind.to_owned(),
            payload,
        };
        if let Some(sink) = self.sink.as_mut() {
            let mut line = serde_json::to_vec(&record).map_err(|e| PersistenceError::StorageFailure(e.to_string()))?;
            line.push(b'\n');
            sink.file.write_all(&line)?;
            sink.file.sync_data()?;
        }
        let seq = record.seq;
        self.records.push(record);
        Ok(seq)
    }

    pub fn flush(&mut self) -> Result<(), PersistenceError> {
        if let Some(sink) = self.sink.as_mut() {
            sink.file.flush()?;
            sink.file.sync_all()?;
        }
        Ok(())
    }
}
