//! Event-sourced persistence: an append-only JSON-lines log with periodic
//! world snapshots.
//!
//! The log starts with a header line
//! `{"format":"clusterslice-eventlog","version":1}` followed by one
//! [`EventRecord`] per line. A torn final line (a crash mid-append) is
//! dropped on open; any other unreadable line is fatal.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EventRecord, FoldError, RecordSink, WorldState};

pub const LOG_FORMAT: &str = "clusterslice-eventlog";
pub const LOG_VERSION: u32 = 1;
pub const SNAPSHOT_EVERY: u64 = 1000;

const LOG_FILE: &str = "events.log";
const LOCK_FILE: &str = "lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage error: {0}")]
    Io(#[from] io::Error),
    #[error("sequence gap: expected {expected}, got {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("corrupt log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("unsupported log format: {0}")]
    UnsupportedFormat(String),
    #[error("state directory {0} is locked by another process")]
    Locked(PathBuf),
}

impl From<FoldError> for StoreError {
    fn from(e: FoldError) -> Self {
        StoreError::CorruptLog {
            line: e.seq as usize + 1,
            message: e.message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

impl Header {
    fn current() -> Self {
        Header {
            format: LOG_FORMAT.to_string(),
            version: LOG_VERSION,
        }
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.format != LOG_FORMAT || self.version != LOG_VERSION {
            return Err(StoreError::UnsupportedFormat(format!("{} v{}", self.format, self.version)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    /// The record the snapshot was taken after, to recognize its log.
    last: Option<EventRecord>,
    world: WorldState,
}

/// Contents of a log file as read from disk.
#[derive(Debug, Clone, Default)]
pub struct LoadedLog {
    pub records: Vec<EventRecord>,
    /// Byte length of the well-formed prefix.
    pub valid_len: u64,
    /// Set when a torn final line was ignored.
    pub torn_tail: bool,
}

/// Read a log without modifying it. A torn final line is reported, not repaired.
pub fn read_log(path: &Path) -> Result<LoadedLog, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(LoadedLog::default()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut out = LoadedLog::default();
    let mut line = String::new();
    let mut index = 0usize;
    let mut expected_seq = 1u64;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        index += 1;
        let complete = line.ends_with('\n');
        let text = line.trim_end_matches('\n');
        let parsed = if index == 1 {
            serde_json::from_str::<Header>(text).map(|h| (Some(h), None))
        } else {
            serde_json::from_str::<EventRecord>(text).map(|r| (None, Some(r)))
        };
        match parsed {
            Ok(_) if !complete => {
                out.torn_tail = true;
                break;
            }
            Ok((Some(header), _)) => header.check()?,
            Ok((_, Some(record))) => {
                if record.seq != expected_seq {
                    return Err(StoreError::CorruptLog {
                        line: index,
                        message: format!("expected seq {expected_seq}, found {}", record.seq),
                    });
                }
                expected_seq += 1;
                out.records.push(record);
            }
            Ok((None, None)) => unreachable!(),
            // without a newline this is necessarily the last line
            Err(_) if !complete => {
                out.torn_tail = true;
                break;
            }
            Err(e) => {
                return Err(StoreError::CorruptLog {
                    line: index,
                    message: e.to_string(),
                })
            }
        }
        out.valid_len += n as u64;
    }
    Ok(out)
}

/// Replay a log (using its snapshot when valid) into a world. Read-only.
pub fn replay(path: &Path) -> Result<WorldState, StoreError> {
    let loaded = read_log(path)?;
    world_from(path, &loaded.records)
}

fn world_from(path: &Path, records: &[EventRecord]) -> Result<WorldState, StoreError> {
    let mut world = load_snapshot(&snapshot_path(path))
        .filter(|s| match &s.last {
            Some(last) => (last.seq as usize).checked_sub(1).and_then(|i| records.get(i)) == Some(last),
            None => true,
        })
        .map(|s| s.world)
        .unwrap_or_default();
    for r in &records[world.last_seq as usize..] {
        world.apply(r)?;
    }
    Ok(world)
}

fn snapshot_path(log: &Path) -> PathBuf {
    let mut s = log.as_os_str().to_owned();
    s.push(".snapshot");
    PathBuf::from(s)
}

fn load_snapshot(path: &Path) -> Option<Snapshot> {
    let text = fs::read_to_string(path).ok()?;
    let snap: Snapshot = match serde_json::from_str(&text) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("ignoring unreadable snapshot {}: {e}", path.display());
            return None;
        }
    };
    (snap.format == LOG_FORMAT && snap.version == LOG_VERSION).then_some(snap)
}

/// The single writer of a log file.
pub struct PersistentLog {
    path: PathBuf,
    file: File,
    world: WorldState,
    records: Vec<EventRecord>,
    snapshot_every: u64,
    fsync: bool,
    dropped_tail: bool,
}

impl PersistentLog {
    /// Open or create the log at `path`, dropping a torn final record.
    pub fn open(path: &Path) -> Result<PersistentLog, StoreError> {
        let loaded = read_log(path)?;
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(path)?;
        if loaded.torn_tail {
            log::warn!(
                "{}: dropping torn record after byte {}",
                path.display(),
                loaded.valid_len
            );
        }
        file.set_len(loaded.valid_len)?;
        file.seek(SeekFrom::End(0))?;
        if loaded.valid_len == 0 {
            let header = serde_json::to_string(&Header::current()).expect("header serializes");
            writeln!(file, "{header}")?;
            file.flush()?;
        }
        let world = world_from(path, &loaded.records)?;
        Ok(PersistentLog {
            path: path.to_path_buf(),
            file,
            world,
            records: loaded.records,
            snapshot_every: SNAPSHOT_EVERY,
            fsync: false,
            dropped_tail: loaded.torn_tail,
        })
    }

    /// Also fsync after every append.
    pub fn set_fsync(&mut self, on: bool) {
        self.fsync = on;
    }

    pub fn set_snapshot_every(&mut self, n: u64) {
        self.snapshot_every = n.max(1);
    }

    /// Whether opening discarded a torn final record.
    pub fn dropped_tail(&self) -> bool {
        self.dropped_tail
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.records.last().map_or(0, |r| r.seq)
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<(), StoreError> {
        let expected = self.last_seq() + 1;
        if record.seq != expected {
            return Err(StoreError::SequenceGap {
                expected,
                found: record.seq,
            });
        }
        self.world.apply(record)?;
        let mut line = record.to_json();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.records.push(record.clone());
        if record.seq.is_multiple_of(self.snapshot_every) {
            self.write_snapshot()?;
        }
        Ok(())
    }

    /// Atomically replace the snapshot with the current world.
    pub fn write_snapshot(&self) -> Result<(), StoreError> {
        let target = snapshot_path(&self.path);
        let mut tmp = target.clone().into_os_string();
        tmp.push(".tmp");
        let snap = Snapshot {
            format: LOG_FORMAT.to_string(),
            version: LOG_VERSION,
            last: self.records.last().cloned(),
            world: self.world.clone(),
        };
        fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes"))?;
        fs::rename(&tmp, &target)?;
        Ok(())
    }
}

impl RecordSink for PersistentLog {
    fn append(&mut self, record: &EventRecord) -> Result<(), String> {
        PersistentLog::append(self, record).map_err(|e| e.to_string())
    }
}

/// Exclusive hold on a state directory for the life of the value.
pub struct StateDir {
    root: PathBuf,
    _lock: File,
}

impl StateDir {
    pub fn lock(root: &Path) -> Result<StateDir, StoreError> {
        fs::create_dir_all(root)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join(LOCK_FILE))?;
        match lock.try_lock() {
            Ok(()) => Ok(StateDir {
                root: root.to_path_buf(),
                _lock: lock,
            }),
            Err(fs::TryLockError::WouldBlock) => Err(StoreError::Locked(root.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(e.into()),
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

/// Log location inside a state directory, for read-only access.
pub fn log_path(root: &Path) -> PathBuf {
    root.join(LOG_FILE)
}
