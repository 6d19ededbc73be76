//! Crash-safe FIFO of sensor samples with peek / acknowledge semantics.
//!
//! Readers copy records out with [`DurableQueue::peek`] and delete them
//! only with [`DurableQueue::ack`] once the data is safe downstream.
//!
//! On disk a queue is two files:
//!
//! ```text
//! <log>       base(8, BE) then records: len(4, BE) crc32(4, BE) payload(len)
//! <log>.head  head offset (8, BE), replaced atomically on every ack
//! ```
//!
//! `base` is the offset of the first record in the log; it only moves when
//! the acknowledged prefix is compacted away. A torn final record (power
//! lost mid-append) is detected by length or checksum and truncated on
//! recovery; the writer never reported it as stored.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

const BASE_LEN: u64 = 8;
const RECORD_HEADER: usize = 8;
const UNIT_SEP: char = '\x1f';

/// Acknowledged bytes at the front of the log that trigger a rewrite.
pub const DEFAULT_COMPACTION_THRESHOLD: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("cannot acknowledge {requested} records, only {available} queued")]
    AckOverrun { requested: usize, available: usize },
    #[error("corrupt queue: {0}")]
    CorruptLog(String),
    #[error("invalid sample: {0}")]
    InvalidSample(&'static str),
}

/// One timestamped measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub sensor_id: String,
    pub metric: String,
    pub value: f64,
    /// Epoch seconds at which the measurement was taken.
    pub measured_at: u64,
}

impl DataSample {
    pub fn new(
        sensor_id: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
        measured_at: u64,
    ) -> Result<Self, QueueError> {
        let s = DataSample { sensor_id: sensor_id.into(), metric: metric.into(), value, measured_at };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), QueueError> {
        if self.measured_at == 0 {
            return Err(QueueError::InvalidSample("measured_at must be positive"));
        }
        if self.metric.is_empty() {
            return Err(QueueError::InvalidSample("metric must not be empty"));
        }
        if self.sensor_id.is_empty() {
            return Err(QueueError::InvalidSample("sensor id must not be empty"));
        }
        if self.sensor_id.contains(UNIT_SEP) || self.metric.contains(UNIT_SEP) {
            return Err(QueueError::InvalidSample("names must not contain the unit separator"));
        }
        Ok(())
    }

    /// `sensor_id \x1f metric \x1f value \x1f measured_at`
    pub fn encode(&self) -> String {
        format!("{}{UNIT_SEP}{}{UNIT_SEP}{}{UNIT_SEP}{}", self.sensor_id, self.metric, self.value, self.measured_at)
    }

    pub fn decode(payload: &str) -> Option<Self> {
        let mut parts = payload.split(UNIT_SEP);
        let sensor_id = parts.next()?.to_string();
        let metric = parts.next()?.to_string();
        let value = parts.next()?.parse().ok()?;
        let measured_at = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        let s = DataSample { sensor_id, metric, value, measured_at };
        s.validate().ok()?;
        Some(s)
    }

    /// Identity used for deduplication, minus the home id.
    pub fn key(&self) -> (String, String, u64) {
        (self.sensor_id.clone(), self.metric.clone(), self.measured_at)
    }
}

fn frame_record(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_HEADER + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

fn head_path(log_path: &Path) -> PathBuf {
    let mut name = log_path.as_os_str().to_owned();
    name.push(".head");
    PathBuf::from(name)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".tmp");
    PathBuf::from(name)
}

fn sync_parent(path: &Path) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

/// write-temp, fsync, rename, fsync directory
fn replace_file(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    sync_parent(path)
}

/// Appends a partial record for `sample`, as if power failed after
/// `keep` bytes of the append reached the disk. Recovery must discard it.
pub fn append_torn_record(log_path: &Path, sample: &DataSample, keep: usize) -> io::Result<()> {
    let record = frame_record(sample.encode().as_bytes());
    let keep = keep.min(record.len().saturating_sub(1));
    let mut f = OpenOptions::new().append(true).open(log_path)?;
    f.write_all(&record[..keep])?;
    f.sync_data()
}

#[derive(Debug)]
struct Entry {
    offset: u64,
    pos: u64,
    sample: DataSample,
}

#[derive(Debug)]
struct Inner {
    log_path: PathBuf,
    head_path: PathBuf,
    file: File,
    base: u64,
    head: u64,
    tail: u64,
    log_len: u64,
    entries: VecDeque<Entry>,
    quota: Option<u64>,
    compaction_threshold: u64,
}

/// A persistent queue. Methods take `&self`; one producer and one
/// consumer may share it across threads.
#[derive(Debug)]
pub struct DurableQueue {
    inner: Mutex<Inner>,
}

impl DurableQueue {
    /// Opens or creates the queue at `log_path`, repairing a torn tail.
    pub fn recover(log_path: impl AsRef<Path>) -> Result<Self, QueueError> {
        let log_path = log_path.as_ref().to_path_buf();
        let head_path = head_path(&log_path);

        let stored_head = match fs::read(&head_path) {
            Ok(bytes) => {
                let arr: [u8; 8] = bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| QueueError::CorruptLog(format!("head file holds {} bytes, expected 8", bytes.len())))?;
                Some(u64::from_be_bytes(arr))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(QueueError::CorruptLog(format!("head file unreadable: {e}"))),
        };

        let mut raw = Vec::new();
        match File::open(&log_path) {
            Ok(mut f) => {
                f.read_to_end(&mut raw)?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        if raw.len() < BASE_LEN as usize {
            let base = stored_head.unwrap_or(0);
            raw = base.to_be_bytes().to_vec();
            replace_file(&log_path, &raw)?;
        }
        let base = u64::from_be_bytes(raw[..8].try_into().unwrap());

        let mut entries = VecDeque::new();
        let mut pos = BASE_LEN as usize;
        let mut offset = base;
        while let Some((sample, next)) = Self::read_record(&raw, pos) {
            entries.push_back(Entry { offset, pos: pos as u64, sample });
            offset += 1;
            pos = next;
        }
        let valid_len = pos as u64;
        if valid_len < raw.len() as u64 {
            log::warn!(
                "truncating {} torn bytes at the end of {}",
                raw.len() as u64 - valid_len,
                log_path.display()
            );
            let f = OpenOptions::new().write(true).open(&log_path)?;
            f.set_len(valid_len)?;
            f.sync_all()?;
        }

        let tail = offset;
        let head = stored_head.unwrap_or(base).max(base);
        let file = OpenOptions::new().append(true).open(&log_path)?;
        let mut inner = Inner {
            log_path,
            head_path,
            file,
            base,
            head,
            tail,
            log_len: valid_len,
            entries,
            quota: None,
            compaction_threshold: DEFAULT_COMPACTION_THRESHOLD,
        };
        if head > tail {
            // acknowledged past the end of the log; restart the log at head
            inner.entries.clear();
            inner.tail = head;
            inner.compact()?;
        } else {
            while inner.entries.front().is_some_and(|e| e.offset < head) {
                inner.entries.pop_front();
            }
        }
        Ok(DurableQueue { inner: Mutex::new(inner) })
    }

    fn read_record(raw: &[u8], pos: usize) -> Option<(DataSample, usize)> {
        let header = raw.get(pos..pos + RECORD_HEADER)?;
        let len = u32::from_be_bytes(header[..4].try_into().unwrap()) as usize;
        let crc = u32::from_be_bytes(header[4..].try_into().unwrap());
        let payload = raw.get(pos + RECORD_HEADER..pos + RECORD_HEADER + len)?;
        if crc32fast::hash(payload) != crc {
            return None;
        }
        let sample = DataSample::decode(std::str::from_utf8(payload).ok()?)?;
        Some((sample, pos + RECORD_HEADER + len))
    }

    /// Caps the log file size; appends beyond it fail as a full disk would.
    pub fn with_quota(self, bytes: u64) -> Self {
        self.lock().quota = Some(bytes);
        self
    }

    pub fn with_compaction_threshold(self, bytes: u64) -> Self {
        self.lock().compaction_threshold = bytes;
        self
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Appends and syncs. Returns the record's offset.
    pub fn push(&self, sample: DataSample) -> Result<u64, QueueError> {
        sample.validate()?;
        let record = frame_record(sample.encode().as_bytes());
        let mut inner = self.lock();
        if inner.quota.is_some_and(|q| inner.log_len + record.len() as u64 > q) {
            return Err(io::Error::new(io::ErrorKind::StorageFull, "queue quota exhausted").into());
        }
        let pos = inner.log_len;
        if let Err(e) = inner.file.write_all(&record).and_then(|_| inner.file.sync_data()) {
            // best effort: hide the partial append from the next reader
            let _ = inner.file.set_len(pos);
            return Err(e.into());
        }
        let offset = inner.tail;
        inner.log_len += record.len() as u64;
        inner.tail += 1;
        inner.entries.push_back(Entry { offset, pos, sample });
        Ok(offset)
    }

    /// Up to `n` oldest unacknowledged records. Does not modify the queue.
    pub fn peek(&self, n: usize) -> Vec<(u64, DataSample)> {
        self.lock().entries.iter().take(n).map(|e| (e.offset, e.sample.clone())).collect()
    }

    /// Deletes the `n` oldest records.
    pub fn ack(&self, n: usize) -> Result<(), QueueError> {
        if n == 0 {
            return Ok(());
        }
        let mut inner = self.lock();
        let available = inner.entries.len();
        if n > available {
            return Err(QueueError::AckOverrun { requested: n, available });
        }
        let new_head = inner.head + n as u64;
        replace_file(&inner.head_path, &new_head.to_be_bytes())?;
        inner.head = new_head;
        inner.entries.drain(..n);
        let acked_bytes = inner.entries.front().map_or(inner.log_len, |e| e.pos) - BASE_LEN;
        if acked_bytes >= inner.compaction_threshold {
            inner.compact()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First unacknowledged offset.
    pub fn head(&self) -> u64 {
        self.lock().head
    }

    /// Next offset to assign.
    pub fn tail(&self) -> u64 {
        self.lock().tail
    }

    pub fn log_path(&self) -> PathBuf {
        self.lock().log_path.clone()
    }

    pub fn log_bytes(&self) -> u64 {
        self.lock().log_len
    }
}

impl Inner {
    /// Rewrites the log without the acknowledged prefix.
    fn compact(&mut self) -> Result<(), QueueError> {
        let mut out = self.head.to_be_bytes().to_vec();
        let mut positions = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            positions.push(out.len() as u64);
            out.extend_from_slice(&frame_record(e.sample.encode().as_bytes()));
        }
        replace_file(&self.log_path, &out)?;
        for (e, pos) in self.entries.iter_mut().zip(positions) {
            e.pos = pos;
        }
        self.base = self.head;
        self.log_len = out.len() as u64;
        self.file = OpenOptions::new().append(true).open(&self.log_path)?;
        Ok(())
    }
}
