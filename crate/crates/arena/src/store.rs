use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use uuid::Uuid;

use crate::error::ArenaError;
use crate::session::Event;

/// Append-only JSON-lines log, one file per session.
#[derive(Debug, Clone)]
pub struct EventLog {
    dir: PathBuf,
}

impl EventLog {
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self, ArenaError> {
        let dir = data_dir.as_ref().join("sessions");
        fs::create_dir_all(&dir)?;
        Ok(EventLog { dir })
    }

    fn path(&self, id: Uuid) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn append(&self, id: Uuid, events: &[Event]) -> Result<(), ArenaError> {
        if events.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for event in events {
            buf.push_str(&serde_json::to_string(event).expect("events serialize"));
            buf.push('\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(self.path(id))?;
        file.write_all(buf.as_bytes())?;
        file.sync_data()?;
        Ok(())
    }

    fn read(&self, path: &Path) -> Result<Vec<Event>, ArenaError> {
        let corrupt = |message: String| ArenaError::CorruptLog { path: path.display().to_string(), message };
        let mut events = Vec::new();
        for (number, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| corrupt(format!("line {}: {e}", number + 1)))?);
        }
        Ok(events)
    }

    /// Every stored session's events, in file-name order.
    pub fn load_all(&self) -> Result<Vec<Vec<Event>>, ArenaError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("jsonl"))
            .collect();
        paths.sort();
        paths.iter().map(|p| self.read(p)).collect()
    }
}
