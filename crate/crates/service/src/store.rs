//! On-disk layout: one directory per session holding `config.json` and an
//! append-only `events.jsonl` in the trial event format.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use adashrink::trial::{read_events, Event, TrialConfig};
use serde::{Deserialize, Serialize};

const CONFIG_FILE: &str = "config.json";
const EVENTS_FILE: &str = "events.jsonl";

/// The config sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionMeta {
    pub id: String,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub config: TrialConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt session data at {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_at(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn events_path(&self, id: &str) -> PathBuf {
        self.dir(id).join(EVENTS_FILE)
    }

    /// Writes the sidecar (temp file, fsync, rename) and an empty log.
    pub fn create(&self, meta: &SessionMeta) -> Result<(), StoreError> {
        let dir = self.dir(&meta.id);
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        let events = dir.join(EVENTS_FILE);
        File::create(&events)
            .and_then(|f| f.sync_all())
            .map_err(io_at(&events))?;
        let tmp = dir.join(format!("{CONFIG_FILE}.tmp"));
        let body = serde_json::to_vec_pretty(meta).expect("session metadata serializes");
        File::create(&tmp)
            .and_then(|mut f| {
                f.write_all(&body)?;
                f.sync_all()
            })
            .map_err(io_at(&tmp))?;
        let path = dir.join(CONFIG_FILE);
        fs::rename(&tmp, &path).map_err(io_at(&path))?;
        sync_dir(&dir).map_err(io_at(&dir))
    }

    /// Appends one event line and syncs it to disk before returning.
    pub fn append(&self, id: &str, event: &Event) -> Result<(), StoreError> {
        let path = self.events_path(id);
        let mut line = serde_json::to_vec(event).expect("event serializes");
        line.push(b'\n');
        OpenOptions::new()
            .append(true)
            .open(&path)
            .and_then(|mut f| {
                f.write_all(&line)?;
                f.sync_data()
            })
            .map_err(io_at(&path))
    }

    /// Loads every session. A trailing line without a newline is an
    /// unacknowledged write cut short by a crash; it is truncated away.
    pub fn load_all(&self) -> Result<Vec<(SessionMeta, Vec<Event>)>, StoreError> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(io_at(&self.root))?;
        for entry in entries {
            let entry = entry.map_err(io_at(&self.root))?;
            let config = entry.path().join(CONFIG_FILE);
            if !config.is_file() {
                continue;
            }
            let raw = fs::read(&config).map_err(io_at(&config))?;
            let meta: SessionMeta =
                serde_json::from_slice(&raw).map_err(|e| StoreError::Corrupt {
                    path: config.clone(),
                    message: e.to_string(),
                })?;
            let events = self.load_events(&meta.id)?;
            out.push((meta, events));
        }
        out.sort_by(|a, b| (a.0.created_at, &a.0.id).cmp(&(b.0.created_at, &b.0.id)));
        Ok(out)
    }

    fn load_events(&self, id: &str) -> Result<Vec<Event>, StoreError> {
        let path = self.events_path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_at(&path)(e)),
        };
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        if keep < bytes.len() {
            log::warn!(
                "{}: dropping {} bytes of incomplete trailing record",
                path.display(),
                bytes.len() - keep
            );
            OpenOptions::new()
                .write(true)
                .open(&path)
                .and_then(|f| {
                    f.set_len(keep as u64)?;
                    f.sync_all()
                })
                .map_err(io_at(&path))?;
        }
        read_events(BufReader::new(&bytes[..keep])).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        })
    }
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    #[cfg(unix)]
    File::open(dir)?.sync_all()?;
    #[cfg(not(unix))]
    let _ = dir;
    Ok(())
}
