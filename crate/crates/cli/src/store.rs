//! Append-only annotation log. Every accepted write is one JSON line; the
//! in-memory state is rebuilt by replaying the file on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use pag_core::dataset::{canonical_json, parse_record, PhraseSpan};
use pag_core::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub annotator_id: String,
    pub spans: Vec<PhraseSpan>,
    pub unsure: bool,
    /// UTC seconds.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRequest {
    pub sample_id: String,
    pub annotator_id: String,
    pub approve: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Verified,
    Disputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationState {
    pub sample_id: String,
    pub approvals: BTreeSet<String>,
    pub status: Status,
}

impl VerificationState {
    fn new(sample_id: &str) -> Self {
        VerificationState { sample_id: sample_id.to_string(), approvals: BTreeSet::new(), status: Status::Pending }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Annotation(AnnotationRecord),
    Verify(VerifyRequest),
}

/// Span sets compared as sets: order of entry does not matter.
pub fn span_set(spans: &[PhraseSpan]) -> Vec<PhraseSpan> {
    let mut v = spans.to_vec();
    v.sort_by_key(|s| (s.start, s.end, s.object_id, s.is_target));
    v.dedup();
    v
}

#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    /// Bytes of the log this process has seen; a mismatch on write means
    /// someone else touched the file.
    len: u64,
    records: BTreeMap<String, BTreeMap<String, AnnotationRecord>>,
    states: BTreeMap<String, VerificationState>,
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        let mut store =
            Store { path: path.to_path_buf(), len: 0, records: BTreeMap::new(), states: BTreeMap::new() };
        if !path.exists() {
            File::create(path)?;
            return Ok(store);
        }
        let file = File::open(path)?;
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry = parse_record(&line, "store", k)?;
            store.apply(&entry);
        }
        store.len = std::fs::metadata(path)?.len();
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes `entry` to the log and applies it. Fails with a state error
    /// when the file changed behind this store's back.
    pub fn append(&mut self, entry: LogEntry) -> Result<()> {
        let on_disk = std::fs::metadata(&self.path)?.len();
        if on_disk != self.len {
            return Err(Error::State(format!(
                "{} changed on disk ({} bytes, expected {}); reopen the store",
                self.path.display(),
                on_disk,
                self.len
            )));
        }
        let mut line = canonical_json(&entry)?;
        line.push('\n');
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.len += line.len() as u64;
        self.apply(&entry);
        Ok(())
    }

    fn apply(&mut self, entry: &LogEntry) {
        match entry {
            LogEntry::Annotation(r) => {
                self.records.entry(r.sample_id.clone()).or_default().insert(r.annotator_id.clone(), r.clone());
                // A changed record invalidates earlier approvals.
                self.states.insert(r.sample_id.clone(), VerificationState::new(&r.sample_id));
            }
            LogEntry::Verify(v) => {
                let agree = self.records_agree(&v.sample_id);
                let state = self.states.entry(v.sample_id.clone()).or_insert_with(|| VerificationState::new(&v.sample_id));
                if !v.approve {
                    state.status = Status::Disputed;
                    return;
                }
                state.approvals.insert(v.annotator_id.clone());
                if state.approvals.len() >= 2 && state.status == Status::Pending {
                    state.status = if agree { Status::Verified } else { Status::Disputed };
                }
            }
        }
    }

    /// At least two records exist and all carry the same span set.
    fn records_agree(&self, sample_id: &str) -> bool {
        let Some(recs) = self.records.get(sample_id) else { return false };
        let mut sets = recs.values().map(|r| span_set(&r.spans));
        let Some(first) = sets.next() else { return false };
        recs.len() >= 2 && sets.all(|s| s == first)
    }

    pub fn records(&self, sample_id: &str) -> Vec<&AnnotationRecord> {
        self.records.get(sample_id).map(|m| m.values().collect()).unwrap_or_default()
    }

    pub fn has_record(&self, sample_id: &str, annotator: &str) -> bool {
        self.records.get(sample_id).is_some_and(|m| m.contains_key(annotator))
    }

    pub fn state(&self, sample_id: &str) -> Option<&VerificationState> {
        self.states.get(sample_id)
    }

    pub fn is_unsure(&self, sample_id: &str) -> bool {
        self.records(sample_id).iter().any(|r| r.unsure)
    }

    pub fn unsure_records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.values().flat_map(|m| m.values()).filter(|r| r.unsure)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(start: usize, end: usize, object_id: usize, is_target: bool) -> PhraseSpan {
        PhraseSpan { start, end, object_id, is_target }
    }

    fn record(annotator: &str, spans: Vec<PhraseSpan>) -> LogEntry {
        LogEntry::Annotation(AnnotationRecord {
            sample_id: "s1".into(),
            annotator_id: annotator.into(),
            spans,
            unsure: false,
            timestamp: 7,
        })
    }

    fn approve(annotator: &str, approve: bool) -> LogEntry {
        LogEntry::Verify(VerifyRequest { sample_id: "s1".into(), annotator_id: annotator.into(), approve })
    }

    #[test]
    fn replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut s = Store::open(&path).unwrap();
        s.append(record("a", vec![span(0, 2, 1, true), span(4, 6, 3, false)])).unwrap();
        s.append(record("b", vec![span(4, 6, 3, false), span(0, 2, 1, true)])).unwrap();
        s.append(approve("a", true)).unwrap();
        s.append(approve("b", true)).unwrap();
        assert_eq!(s.state("s1").unwrap().status, Status::Verified);
        let again = Store::open(&path).unwrap();
        assert_eq!(again.state("s1"), s.state("s1"));
        assert_eq!(again.records("s1"), s.records("s1"));
    }

    #[test]
    fn disagreement_disputes_and_new_record_requeues() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(&dir.path().join("store.jsonl")).unwrap();
        s.append(record("a", vec![span(0, 2, 1, true)])).unwrap();
        s.append(record("b", vec![span(0, 2, 2, true)])).unwrap();
        s.append(approve("a", true)).unwrap();
        assert_eq!(s.state("s1").unwrap().status, Status::Pending);
        s.append(approve("b", true)).unwrap();
        assert_eq!(s.state("s1").unwrap().status, Status::Disputed);
        s.append(record("b", vec![span(0, 2, 1, true)])).unwrap();
        assert_eq!(s.state("s1").unwrap().status, Status::Pending);
        assert!(s.state("s1").unwrap().approvals.is_empty());
    }

    #[test]
    fn external_write_is_a_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut s = Store::open(&path).unwrap();
        s.append(record("a", vec![span(0, 2, 1, true)])).unwrap();
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"\n").unwrap();
        assert!(matches!(s.append(approve("a", true)), Err(Error::State(_))));
    }
}
