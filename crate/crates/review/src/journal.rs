//! Append-only JSON-lines label journal.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use foamqc::RawLabel;
use serde::{Deserialize, Serialize};

use crate::error::{ReviewError, ReviewResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub seq: u64,
    pub group: String,
    pub expert_label: RawLabel,
    #[serde(default)]
    pub note: String,
    /// Model's P(defective) when the label was given, if it was known.
    #[serde(default)]
    pub prior_prediction: Option<f64>,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

pub struct Journal {
    path: PathBuf,
    file: File,
    last_seq: u64,
}

impl Journal {
    /// Opens (creating if needed) and reads the journal. A torn final line,
    /// left by a crash mid-append, is cut off; anything else malformed is an
    /// error.
    pub fn open(path: &Path) -> ReviewResult<(Self, Vec<LabelEvent>)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ReviewError::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| ReviewError::io(path, e))?;
        let (events, good_len) = parse(&mut file, path)?;
        let len = file.metadata().map_err(|e| ReviewError::io(path, e))?.len();
        if good_len < len {
            log::warn!("{}: dropping {} bytes of torn trailing record", path.display(), len - good_len);
            file.set_len(good_len).map_err(|e| ReviewError::io(path, e))?;
        }
        let last_seq = events.last().map_or(0, |e| e.seq);
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                last_seq,
            },
            events,
        ))
    }

    pub fn read(path: &Path) -> ReviewResult<Vec<LabelEvent>> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut file = File::open(path).map_err(|e| ReviewError::io(path, e))?;
        Ok(parse(&mut file, path)?.0)
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Appends one event with the next sequence number and syncs it.
    pub fn append(&mut self, group: &str, expert_label: RawLabel, note: &str, prior_prediction: Option<f64>) -> ReviewResult<LabelEvent> {
        let event = LabelEvent {
            seq: self.last_seq + 1,
            group: group.to_string(),
            expert_label,
            note: note.to_string(),
            prior_prediction,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| ReviewError::io(&self.path, e))?;
        self.last_seq = event.seq;
        Ok(event)
    }
}

// Events plus the byte length of the well-formed prefix.
fn parse(file: &mut File, path: &Path) -> ReviewResult<(Vec<LabelEvent>, u64)> {
    file.seek(SeekFrom::Start(0)).map_err(|e| ReviewError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut events: Vec<LabelEvent> = Vec::new();
    let mut good = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| ReviewError::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        if buf.trim().is_empty() {
            good += n as u64;
            continue;
        }
        let event: LabelEvent = match serde_json::from_str(buf.trim_end()) {
            Ok(e) => e,
            Err(_) if !complete => break,
            Err(e) => {
                return Err(ReviewError::Journal {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        };
        if let Some(prev) = events.last() {
            if event.seq <= prev.seq {
                return Err(ReviewError::Journal {
                    line: line_no,
                    message: format!("sequence {} does not follow {}", event.seq, prev.seq),
                });
            }
        }
        if !complete {
            break;
        }
        events.push(event);
        good += n as u64;
    }
    Ok((events, good))
}
