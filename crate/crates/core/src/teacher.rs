//! Teacher annotation of counterfactuals.
//!
//! The teacher assigns the label it believes a counterfactual deserves. If
//! that label is the explainer's target, the edit really changed the class:
//! a true counterfactual. If it is still the source label, the classifier was
//! flipped by a feature the teacher does not consider causal: a false
//! counterfactual, i.e. evidence of a Clever-Hans solution.
//!
//! Two backends exist: an oracle [`Labeler`] and human annotators working
//! through an [`AnnotationStore`]. The store is shared between the CFKD
//! engine and the HTTP service; the first verdict for a ticket is final.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::explainer::Counterfactual;
use crate::learner::Classifier;
use crate::synthdata::Labeler;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TrueCounterfactual,
    FalseCounterfactual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Human {
        annotator_id: String,
        /// Milliseconds since the Unix epoch.
        timestamp: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub counterfactual_id: u64,
    pub source_label: u8,
    pub target_label: u8,
    pub teacher_label: u8,
    pub verdict: Verdict,
    pub provenance: Provenance,
}

impl AnnotationRecord {
    pub fn new(cf: &Counterfactual, teacher_label: u8, provenance: Provenance) -> Result<Self, AnnotationError> {
        let verdict = if teacher_label == cf.target_label {
            Verdict::TrueCounterfactual
        } else if teacher_label == cf.source_label {
            Verdict::FalseCounterfactual
        } else {
            return Err(AnnotationError::InvalidLabel {
                ticket: cf.source_id,
                label: teacher_label,
            });
        };
        Ok(Self {
            counterfactual_id: cf.source_id,
            source_label: cf.source_label,
            target_label: cf.target_label,
            teacher_label,
            verdict,
            provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown ticket {0}")]
    UnknownTicket(u64),
    #[error("ticket {0} is already resolved")]
    Conflict(u64),
    #[error("label {label} is neither the source nor the target label of ticket {ticket}")]
    InvalidLabel { ticket: u64, label: u8 },
    #[error("counterfactual {0} was already annotated")]
    AlreadyAnnotated(u64),
    #[error("annotation log: {0}")]
    Log(String),
}

pub fn oracle_annotate(cf: &Counterfactual, oracle: &dyn Labeler) -> AnnotationRecord {
    let label = oracle.label(&cf.features);
    // Binary labels: the oracle's answer is always the source or the target.
    AnnotationRecord::new(cf, label, Provenance::Oracle).expect("binary oracle label")
}

impl Labeler for Classifier {
    fn label(&self, features: &[f64]) -> u8 {
        self.predict(features)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub records: Vec<AnnotationRecord>,
    /// Counterfactuals the teacher never resolved.
    pub unresolved: usize,
}

pub trait Teacher {
    fn annotate(&self, counterfactuals: &[Counterfactual]) -> Result<Annotations>;

    /// Called by the engine when it enters a new phase.
    fn on_phase(&self, _phase: RunPhase) {}
}

pub struct OracleTeacher<L> {
    pub labeler: L,
}

impl<L: Labeler> Teacher for OracleTeacher<L> {
    fn annotate(&self, counterfactuals: &[Counterfactual]) -> Result<Annotations> {
        Ok(Annotations {
            records: counterfactuals
                .iter()
                .map(|cf| oracle_annotate(cf, &self.labeler))
                .collect(),
            unresolved: 0,
        })
    }
}

/// Human annotation through a shared store: enqueue everything, then wait for
/// verdicts until all are in or the timeout passes.
pub struct HumanTeacher<'a> {
    pub store: &'a AnnotationStore,
    pub timeout: Duration,
}

impl Teacher for HumanTeacher<'_> {
    fn annotate(&self, counterfactuals: &[Counterfactual]) -> Result<Annotations> {
        for cf in counterfactuals {
            self.store.enqueue(cf.clone())?;
        }
        self.store.set_phase(RunPhase::Annotating);
        self.store.wait_until_resolved(self.timeout);
        let mut records = Vec::new();
        let mut unresolved = 0;
        for cf in counterfactuals {
            match self.store.get(cf.source_id).and_then(|t| t.record) {
                Some(r) => records.push(r),
                None => unresolved += 1,
            }
        }
        Ok(Annotations { records, unresolved })
    }

    fn on_phase(&self, phase: RunPhase) {
        self.store.set_phase(phase);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Idle,
    Explaining,
    Annotating,
    Finetuning,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Pending,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub ticket_id: u64,
    pub counterfactual: Counterfactual,
    pub status: TicketStatus,
    pub record: Option<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub tickets: Vec<Ticket>,
    /// Pass back as `cursor` to continue; absent on the last page.
    pub next_cursor: Option<u64>,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStatus {
    pub phase: RunPhase,
    pub pending: usize,
    pub resolved: usize,
    pub true_cf: usize,
    pub false_cf: usize,
}

#[derive(Default)]
struct State {
    phase: Option<RunPhase>,
    tickets: BTreeMap<u64, Ticket>,
    pending: usize,
    true_cf: usize,
    false_cf: usize,
}

/// Ticket queue keyed by counterfactual id. All operations are atomic under
/// one lock; list and status calls see consistent snapshots.
#[derive(Default)]
pub struct AnnotationStore {
    state: Mutex<State>,
    changed: Condvar,
    log: Option<Mutex<BufWriter<File>>>,
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store that appends every resolved record as a JSON line to `path`.
    pub fn with_log(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            log: Some(Mutex::new(BufWriter::new(file))),
            ..Self::default()
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Marks a run as active (phase other than idle).
    pub fn set_phase(&self, phase: RunPhase) {
        self.lock().phase = Some(phase);
        self.changed.notify_all();
    }

    /// Adds a pending ticket. Enqueuing a pending counterfactual again returns
    /// the existing ticket.
    pub fn enqueue(&self, cf: Counterfactual) -> Result<u64, AnnotationError> {
        let mut st = self.lock();
        let id = cf.source_id;
        if let Some(t) = st.tickets.get(&id) {
            return match t.status {
                TicketStatus::Pending => Ok(id),
                TicketStatus::Resolved => Err(AnnotationError::AlreadyAnnotated(id)),
            };
        }
        st.tickets.insert(
            id,
            Ticket {
                ticket_id: id,
                counterfactual: cf,
                status: TicketStatus::Pending,
                record: None,
            },
        );
        st.pending += 1;
        if st.phase.is_none() {
            st.phase = Some(RunPhase::Annotating);
        }
        drop(st);
        self.changed.notify_all();
        Ok(id)
    }

    pub fn get(&self, ticket_id: u64) -> Option<Ticket> {
        self.lock().tickets.get(&ticket_id).cloned()
    }

    /// Pending tickets with id greater than `cursor`, in id order.
    pub fn list_pending(&self, limit: usize, cursor: Option<u64>) -> Page {
        let st = self.lock();
        let start = cursor.map_or(0, |c| c.saturating_add(1));
        let mut iter = st
            .tickets
            .range(start..)
            .map(|(_, t)| t)
            .filter(|t| t.status == TicketStatus::Pending);
        let tickets: Vec<Ticket> = iter.by_ref().take(limit).cloned().collect();
        let more = iter.next().is_some();
        Page {
            next_cursor: if more {
                tickets.last().map(|t| t.ticket_id)
            } else {
                None
            },
            tickets,
            active: st.phase.is_some_and(|p| p != RunPhase::Idle),
        }
    }

    /// Records a human verdict. The first verdict wins; later posts conflict.
    pub fn post(
        &self,
        ticket_id: u64,
        teacher_label: u8,
        annotator_id: &str,
    ) -> Result<AnnotationRecord, AnnotationError> {
        let mut st = self.lock();
        let ticket = st
            .tickets
            .get_mut(&ticket_id)
            .ok_or(AnnotationError::UnknownTicket(ticket_id))?;
        if ticket.status == TicketStatus::Resolved {
            return Err(AnnotationError::Conflict(ticket_id));
        }
        let record = AnnotationRecord::new(
            &ticket.counterfactual,
            teacher_label,
            Provenance::Human {
                annotator_id: annotator_id.to_string(),
                timestamp: now_millis(),
            },
        )?;
        if let Some(log) = &self.log {
            let mut w = log.lock().unwrap_or_else(|e| e.into_inner());
            serde_json::to_writer(&mut *w, &record)
                .map_err(|e| AnnotationError::Log(e.to_string()))
                .and_then(|_| {
                    w.write_all(b"\n")
                        .and_then(|_| w.flush())
                        .map_err(|e| AnnotationError::Log(e.to_string()))
                })?;
        }
        ticket.status = TicketStatus::Resolved;
        ticket.record = Some(record.clone());
        st.pending -= 1;
        match record.verdict {
            Verdict::TrueCounterfactual => st.true_cf += 1,
            Verdict::FalseCounterfactual => st.false_cf += 1,
        }
        drop(st);
        self.changed.notify_all();
        Ok(record)
    }

    pub fn status(&self) -> StoreStatus {
        let st = self.lock();
        StoreStatus {
            phase: st.phase.unwrap_or(RunPhase::Idle),
            pending: st.pending,
            resolved: st.true_cf + st.false_cf,
            true_cf: st.true_cf,
            false_cf: st.false_cf,
        }
    }

    /// Resolved records in ticket order.
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.lock().tickets.values().filter_map(|t| t.record.clone()).collect()
    }

    /// Blocks until no ticket is pending or `timeout` elapses. Returns whether
    /// everything was resolved.
    pub fn wait_until_resolved(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        while st.pending > 0 {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self
                .changed
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        true
    }
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Reads an annotation log written by [`AnnotationStore::with_log`].
pub fn read_log(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_log(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::CausalOracle;
    use std::sync::Arc;

    fn cf(id: u64, source: &[f64], features: &[f64], source_label: u8) -> Counterfactual {
        Counterfactual {
            source_id: id,
            source_label,
            source_confounder: 0,
            source_features: source.to_vec(),
            source_prob: 0.5,
            features: features.to_vec(),
            target_label: 1 - source_label,
            achieved_prob: 0.5,
            perturbation: features.iter().zip(source).map(|(a, b)| a - b).collect(),
            norm: 0.0,
        }
    }

    const ORACLE: CausalOracle = CausalOracle {
        causal_index: 0,
        threshold: 0.0,
    };

    #[test]
    fn causal_edit_is_true_counterfactual() {
        let r = oracle_annotate(&cf(1, &[-1.0, -1.0], &[0.5, -1.0], 0), &ORACLE);
        assert_eq!((r.teacher_label, r.verdict), (1, Verdict::TrueCounterfactual));
    }

    #[test]
    fn spurious_edit_is_false_counterfactual() {
        let r = oracle_annotate(&cf(1, &[-1.0, -1.0], &[-1.0, 3.0], 0), &ORACLE);
        assert_eq!((r.teacher_label, r.verdict), (0, Verdict::FalseCounterfactual));
    }

    #[test]
    fn zero_perturbation_keeps_source_label() {
        let r = oracle_annotate(&cf(1, &[0.7, 0.0], &[0.7, 0.0], 1), &ORACLE);
        assert_eq!(r.teacher_label, 1);
        assert_eq!(oracle_annotate(&cf(1, &[0.7, 0.0], &[0.7, 0.0], 1), &ORACLE), r);
    }

    #[test]
    fn enqueue_is_idempotent() {
        let store = AnnotationStore::new();
        store.enqueue(cf(4, &[0.0], &[1.0], 0)).unwrap();
        assert_eq!(store.status().pending, 1);
        store.enqueue(cf(4, &[0.0], &[1.0], 0)).unwrap();
        assert_eq!(store.status().pending, 1);
    }

    #[test]
    fn post_resolves_and_conflicts() {
        let store = AnnotationStore::new();
        store.enqueue(cf(4, &[0.0], &[1.0], 0)).unwrap();
        let r = store.post(4, 1, "ana").unwrap();
        assert_eq!(r.verdict, Verdict::TrueCounterfactual);
        assert!(matches!(r.provenance, Provenance::Human { .. }));
        assert!(store.list_pending(10, None).tickets.is_empty());
        assert_eq!(store.post(4, 0, "bo"), Err(AnnotationError::Conflict(4)));
        assert_eq!(store.post(5, 0, "bo"), Err(AnnotationError::UnknownTicket(5)));
        assert_eq!(
            store.enqueue(cf(4, &[0.0], &[1.0], 0)),
            Err(AnnotationError::AlreadyAnnotated(4))
        );
        let s = store.status();
        assert_eq!((s.pending, s.resolved, s.true_cf, s.false_cf), (0, 1, 1, 0));
    }

    #[test]
    fn labels_outside_the_pair_are_rejected() {
        let store = AnnotationStore::new();
        store.enqueue(cf(1, &[0.0], &[1.0], 0)).unwrap();
        assert!(matches!(
            store.post(1, 2, "x"),
            Err(AnnotationError::InvalidLabel { .. })
        ));
        assert_eq!(store.status().pending, 1);
    }

    #[test]
    fn pagination_is_stable_and_disjoint() {
        let store = AnnotationStore::new();
        for id in 0..10 {
            store.enqueue(cf(id * 3, &[0.0], &[1.0], 0)).unwrap();
        }
        let p1 = store.list_pending(5, None);
        let p2 = store.list_pending(5, p1.next_cursor);
        assert_eq!(p1.tickets.len(), 5);
        assert_eq!(p2.tickets.len(), 5);
        assert!(p2.next_cursor.is_none());
        assert!(p1
            .tickets
            .iter()
            .all(|a| p2.tickets.iter().all(|b| a.ticket_id != b.ticket_id)));
    }

    #[test]
    fn concurrent_posts_yield_one_success() {
        let store = Arc::new(AnnotationStore::new());
        store.enqueue(cf(9, &[0.0], &[1.0], 0)).unwrap();
        let handles: Vec<_> = (0..16)
            .map(|i| {
                let s = Arc::clone(&store);
                std::thread::spawn(move || s.post(9, (i % 2) as u8, "t").is_ok())
            })
            .collect();
        let ok = handles.into_iter().map(|h| h.join().unwrap()).filter(|&b| b).count();
        assert_eq!(ok, 1);
    }

    #[test]
    fn waiting_wakes_on_resolution() {
        let store = Arc::new(AnnotationStore::new());
        store.enqueue(cf(1, &[0.0], &[1.0], 0)).unwrap();
        let s = Arc::clone(&store);
        let poster = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(50));
            s.post(1, 0, "late").unwrap();
        });
        assert!(store.wait_until_resolved(Duration::from_secs(10)));
        poster.join().unwrap();
        assert!(AnnotationStore::new().wait_until_resolved(Duration::ZERO));
    }

    #[test]
    fn timeout_returns_partial() {
        let store = AnnotationStore::new();
        store.enqueue(cf(1, &[0.0], &[1.0], 0)).unwrap();
        assert!(!store.wait_until_resolved(Duration::from_millis(20)));
    }

    #[test]
    fn log_replays_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let store = AnnotationStore::with_log(&path).unwrap();
        for id in 0..3 {
            store.enqueue(cf(id, &[0.0], &[1.0], 0)).unwrap();
        }
        store.post(2, 1, "a").unwrap();
        store.post(0, 0, "a").unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].counterfactual_id, 2);
        assert_eq!(back[1].verdict, Verdict::FalseCounterfactual);
    }
}
