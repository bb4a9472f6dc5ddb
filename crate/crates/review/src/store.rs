//! Review state derived from the label journal, with periodic snapshots so
//! startup does not replay the full history.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use foamqc::RawLabel;
use serde::{Deserialize, Serialize};

use crate::error::{ReviewError, ReviewResult};
use crate::journal::{Journal, LabelEvent};

pub const JOURNAL_FILE: &str = "labels.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub expert_label: RawLabel,
    pub note: String,
    /// Sequence number of the event that set this review; the item's
    /// revision for optimistic concurrency.
    pub seq: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewState {
    pub last_seq: u64,
    pub reviews: BTreeMap<String, Review>,
}

impl ReviewState {
    pub fn apply(&mut self, e: &LabelEvent) {
        self.reviews.insert(
            e.group.clone(),
            Review {
                expert_label: e.expert_label,
                note: e.note.clone(),
                seq: e.seq,
            },
        );
        self.last_seq = e.seq;
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a LabelEvent>) -> Self {
        let mut s = Self::default();
        for e in events {
            s.apply(e);
        }
        s
    }

    /// 0 for never-reviewed items.
    pub fn revision(&self, group: &str) -> u64 {
        self.reviews.get(group).map_or(0, |r| r.seq)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelOutcome {
    Recorded(LabelEvent),
    /// Same label and note as the current review; nothing appended.
    Unchanged,
}

/// Single writer over the journal. Callers serialize access (the service
/// keeps it behind a mutex).
pub struct ReviewStore {
    dir: PathBuf,
    journal: Journal,
    state: ReviewState,
    snapshot_every: u64,
}

impl ReviewStore {
    /// Opens the store in `dir`: loads the snapshot if it is consistent with
    /// the journal and replays the events after it, else replays everything.
    pub fn open(dir: &Path, snapshot_every: u64) -> ReviewResult<Self> {
        let (journal, events) = Journal::open(&dir.join(JOURNAL_FILE))?;
        let snap = read_snapshot(&dir.join(SNAPSHOT_FILE));
        let state = match snap {
            Some(s) if s.last_seq <= journal.last_seq() && (s.last_seq == 0 || events.iter().any(|e| e.seq == s.last_seq)) => {
                let mut s = s;
                let from = s.last_seq;
                for e in events.iter().filter(|e| e.seq > from) {
                    s.apply(e);
                }
                s
            }
            Some(_) => {
                log::warn!("snapshot in {} disagrees with the journal; replaying", dir.display());
                ReviewState::replay(&events)
            }
            None => ReviewState::replay(&events),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            journal,
            state,
            snapshot_every: snapshot_every.max(1),
        })
    }

    pub fn state(&self) -> &ReviewState {
        &self.state
    }

    /// Records an expert label. `revision` is the item revision the client
    /// saw; relabeling a reviewed item without the current revision is a
    /// conflict rather than a silent overwrite. An identical repeat is
    /// accepted without a new event.
    pub fn label(&mut self, group: &str, label: RawLabel, note: &str, revision: Option<u64>, prior: Option<f64>) -> ReviewResult<LabelOutcome> {
        let current = self.state.reviews.get(group);
        if let Some(c) = current {
            if c.expert_label == label && c.note == note {
                return Ok(LabelOutcome::Unchanged);
            }
        }
        let rev = self.state.revision(group);
        let ok = match revision {
            Some(r) => r == rev,
            None => current.is_none(),
        };
        if !ok {
            return Err(ReviewError::Conflict {
                group: group.to_string(),
                current: rev,
                given: revision,
            });
        }
        let event = self.journal.append(group, label, note, prior)?;
        self.state.apply(&event);
        if event.seq % self.snapshot_every == 0 {
            self.snapshot()?;
        }
        Ok(LabelOutcome::Recorded(event))
    }

    pub fn snapshot(&self) -> ReviewResult<()> {
        let json = serde_json::to_vec(&self.state)?;
        foamqc::write_atomic(&self.dir.join(SNAPSHOT_FILE), &json)?;
        Ok(())
    }

    /// State rebuilt from the journal alone.
    pub fn rebuild(dir: &Path) -> ReviewResult<ReviewState> {
        Ok(ReviewState::replay(&Journal::read(&dir.join(JOURNAL_FILE))?))
    }
}

fn read_snapshot(path: &Path) -> Option<ReviewState> {
    let bytes = std::fs::read(path).ok()?;
    match serde_json::from_slice(&bytes) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("ignoring unreadable snapshot {}: {e}", path.display());
            None
        }
    }
}
