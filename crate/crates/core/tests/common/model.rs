//! Reference model of the entry/case rules and a random operation driver
//! checked against it.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use lostfound::notification::{NotificationKind, OUTBOX_LOG};
use chrono::Utc;
use lostfound::registry::{RegistryError, ENTRIES_LOG};
use lostfound::scenario::{demo_authority, demo_family, demo_finder, demo_intruder, synthetic_submission};
use lostfound::verification::{CaseStore, VerificationError, CASES_LOG};
use lostfound::{
    CaseId, CaseState, Disposition, EmbeddingProvider, Entry, EntryId, EntryStatus, EntryStore, FaceImage,
    Notification, Pipeline, PipelineConfig, PipelineError, Side, SyntheticFace, SyntheticProvider, VerificationCase,
};
use proptest::prelude::*;

pub fn open(dir: &Path, auto_approve: bool) -> Pipeline {
    Pipeline::open(
        dir,
        PipelineConfig {
            auto_approve,
            ..PipelineConfig::default()
        },
        Arc::new(SyntheticProvider::default()),
        Arc::new(demo_authority()),
    )
    .unwrap()
}

#[derive(Debug, PartialEq)]
pub struct Snapshot {
    pub entries: Vec<Entry>,
    pub cases: Vec<VerificationCase>,
    pub outbox: Vec<Notification>,
}

pub fn snapshot(p: &Pipeline) -> Snapshot {
    Snapshot {
        entries: p.entries().entries(),
        cases: p.cases().list(None),
        outbox: p.read_outbox(None).unwrap(),
    }
}

pub fn tear(path: &Path, junk: &str) {
    let mut f = OpenOptions::new().append(true).open(path).unwrap();
    f.write_all(junk.as_bytes()).unwrap();
}

#[derive(Debug, Clone)]
pub enum Op {
    Submit { side: Side, identity: u8, valid: bool },
    Decide { pick: usize, approve: bool },
    Redecide { pick: usize },
    Reopen { torn: bool },
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        5 => (any::<bool>(), 0u8..4, prop::bool::weighted(0.85)).prop_map(|(m, identity, valid)| Op::Submit {
            side: if m { Side::Missing } else { Side::Finding },
            identity,
            valid,
        }),
        4 => (any::<usize>(), prop::bool::weighted(0.8)).prop_map(|(pick, approve)| Op::Decide { pick, approve }),
        1 => any::<usize>().prop_map(|pick| Op::Redecide { pick }),
        1 => any::<bool>().prop_map(|torn| Op::Reopen { torn }),
    ]
}

/// What the rules say should happen, tracked per entry by identity.
#[derive(Default)]
pub struct Model {
    pub entries: BTreeMap<EntryId, (Side, u8, EntryStatus)>,
    pub links: BTreeMap<EntryId, EntryId>,
}

impl Model {
    pub fn approve(&mut self, id: EntryId) -> Disposition {
        let (side, identity, _) = self.entries[&id];
        let active = |s: Side| {
            self.entries
                .iter()
                .find(|(_, (es, ei, st))| *es == s && *ei == identity && *st == EntryStatus::Active)
                .map(|(id, _)| *id)
        };
        if active(side).is_some() {
            self.entries.get_mut(&id).unwrap().2 = EntryStatus::Rejected;
            return Disposition::RejectedDuplicate;
        }
        if let Some(other) = active(side.opposite()) {
            self.entries.get_mut(&id).unwrap().2 = EntryStatus::Matched;
            self.entries.get_mut(&other).unwrap().2 = EntryStatus::Matched;
            self.links.insert(id, other);
            self.links.insert(other, id);
            return Disposition::Matched;
        }
        self.entries.get_mut(&id).unwrap().2 = EntryStatus::Active;
        Disposition::StoredNoMatch
    }
}

pub fn check_invariants(p: &Pipeline, model: &Model) -> Result<(), TestCaseError> {
    let entries = p.entries().entries();
    let cases = p.cases().list(None);
    let outbox = p.read_outbox(None).unwrap();
    let tau = p.config().threshold.tau();

    prop_assert_eq!(entries.len(), model.entries.len());
    for e in &entries {
        let (side, _, status) = model.entries[&e.id];
        prop_assert_eq!(e.side, side);
        prop_assert_eq!(e.status, status, "entry {}", e.id);
        prop_assert_eq!(e.matched_entry_id, model.links.get(&e.id).copied());
        if matches!(e.status, EntryStatus::Active | EntryStatus::Matched) {
            prop_assert!(
                cases.iter().any(|c| c.entry_id == e.id && c.state == CaseState::Approved),
                "entry {} is {} without an approved case",
                e.id,
                e.status
            );
        }
        if let Some(other) = e.matched_entry_id {
            let o = p.entries().get_entry(other).unwrap();
            prop_assert_eq!(o.matched_entry_id, Some(e.id));
            prop_assert_eq!(o.side, e.side.opposite());
        }
    }
    // no two live records of one person, in a directory or across them
    let active: Vec<&Entry> = entries.iter().filter(|e| e.status == EntryStatus::Active).collect();
    for (i, a) in active.iter().enumerate() {
        for b in &active[i + 1..] {
            let d = lostfound::distance(&a.embedding, &b.embedding).unwrap();
            prop_assert!(d >= tau, "entries {} and {} both active at distance {d}", a.id, b.id);
        }
    }

    let count = |k: NotificationKind| outbox.iter().filter(|n| n.kind == k).count();
    let pairs = model.links.len() / 2;
    prop_assert_eq!(count(NotificationKind::MatchToParty), pairs);
    prop_assert_eq!(count(NotificationKind::MatchToPolice), pairs);
    let duplicates = entries
        .iter()
        .filter(|e| {
            e.status == EntryStatus::Rejected
                && cases.iter().any(|c| c.entry_id == e.id && c.state == CaseState::Approved)
        })
        .count();
    prop_assert_eq!(count(NotificationKind::DuplicateAlertToParty), duplicates);
    prop_assert_eq!(count(NotificationKind::DuplicateAlertToPolice), duplicates);
    prop_assert_eq!(count(NotificationKind::VerificationRequest), cases.len());
    prop_assert!(outbox.windows(2).all(|w| w[0].id < w[1].id));
    Ok(())
}

pub fn run_ops(ops: Vec<Op>) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().unwrap();
    let mut p = open(dir.path(), false);
    let mut model = Model::default();
    for (step, op) in ops.into_iter().enumerate() {
        match op {
            Op::Submit { side, identity, valid } => {
                let uploader = match (valid, side) {
                    (false, _) => demo_intruder(),
                    (true, Side::Missing) => demo_family(),
                    (true, Side::Finding) => demo_finder(),
                };
                let s = synthetic_submission(
                    side,
                    uploader,
                    "subject",
                    &format!("P{identity}"),
                    &format!("step{step}"),
                    step as u64,
                );
                let out = p.submit(s).unwrap();
                let id = out.entry_id.unwrap();
                if valid {
                    prop_assert_eq!(out.disposition, Disposition::PendingVerification);
                    model.entries.insert(id, (side, identity, EntryStatus::Ap));
                } else {
                    prop_assert_eq!(out.disposition, Disposition::RejectedInvalidInfo);
                    prop_assert_eq!(out.case_id, None);
                    model.entries.insert(id, (side, identity, EntryStatus::Rejected));
                }
            }
            Op::Decide { pick, approve } => {
                let pending = p.cases().list(Some(CaseState::Pending));
                if pending.is_empty() {
                    let err = p.decide_case(CaseId(10_000), approve).unwrap_err();
                    prop_assert!(matches!(err, PipelineError::Verification(VerificationError::UnknownCase(_))));
                    continue;
                }
                let case = &pending[pick % pending.len()];
                let out = p.decide_case(case.case_id, approve).unwrap();
                let expected = if approve {
                    model.approve(case.entry_id)
                } else {
                    model.entries.get_mut(&case.entry_id).unwrap().2 = EntryStatus::Rejected;
                    Disposition::RejectedInvalidInfo
                };
                prop_assert_eq!(out.disposition, expected);
                prop_assert_eq!(p.entry_report(case.entry_id).unwrap().outcome(), out);
            }
            Op::Redecide { pick } => {
                let decided: Vec<_> = p
                    .cases()
                    .list(None)
                    .into_iter()
                    .filter(|c| c.state != CaseState::Pending)
                    .collect();
                if decided.is_empty() {
                    continue;
                }
                let before = snapshot(&p);
                let case = &decided[pick % decided.len()];
                let err = p.decide_case(case.case_id, true).unwrap_err();
                prop_assert!(matches!(err, PipelineError::Verification(VerificationError::AlreadyDecided(_))));
                prop_assert_eq!(snapshot(&p), before);
            }
            Op::Reopen { torn } => {
                let before = snapshot(&p);
                drop(p);
                if torn {
                    tear(&dir.path().join(ENTRIES_LOG), "{\"event\":\"status\",\"id\":");
                    tear(&dir.path().join(CASES_LOG), "{\"ev");
                    tear(&dir.path().join(OUTBOX_LOG), "{");
                }
                p = open(dir.path(), false);
                prop_assert_eq!(snapshot(&p), before);
            }
        }
        check_invariants(&p, &model)?;
    }
    Ok(())
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Writes an entry straight into the store, bypassing the pipeline.
pub fn stored(store: &EntryStore, side: Side, status: EntryStatus, label: &str) -> EntryId {
    let photo = FaceImage::synthetic(&SyntheticFace::new(label, "v", 1));
    let mut w = store.writer();
    let id = w.next_id();
    let now = Utc::now();
    w.store_entry(Entry {
        id,
        side,
        uploader: if side == Side::Missing { demo_family() } else { demo_finder() },
        subject_name: "s".into(),
        embedding: SyntheticProvider::default().embed(&photo).unwrap(),
        photo,
        status,
        matched_entry_id: None,
        created_at: now,
        updated_at: now,
    })
    .unwrap()
}

/// Every (from, to) status pair against the allowed set
/// {AP->ACTIVE, AP->REJECTED, ACTIVE->MATCHED (linking only)}.
pub fn transition_table() -> Result<(), String> {
    use EntryStatus::*;
    let all = [Ap, Active, Matched, Rejected];
    let direct = |from: EntryStatus, to: EntryStatus| matches!((from, to), (Ap, Active) | (Ap, Rejected));
    let dir = tempfile::tempdir().unwrap();
    let store = EntryStore::open(dir.path()).unwrap();
    for from in all {
        for to in all {
            let id = if from == Matched {
                let a = stored(&store, Side::Missing, Active, "A");
                let b = stored(&store, Side::Finding, Active, "A");
                store.writer().link_matched(a, b).map_err(|e| e.to_string())?;
                a
            } else {
                let id = stored(&store, Side::Missing, Ap, "B");
                if from != Ap {
                    store.writer().transition_status(id, from).map_err(|e| e.to_string())?;
                }
                id
            };
            let before = store.get_entry(id);
            let result = store.writer().transition_status(id, to);
            ensure!(result.is_ok() == direct(from, to), "{from} -> {to}: {result:?}");
            if let Err(e) = result {
                ensure!(matches!(e, RegistryError::IllegalTransition { .. }), "{from} -> {to}: {e:?}");
                ensure!(store.get_entry(id) == before, "{from} -> {to} changed the entry");
            }
            let table = direct(from, to) || (from == Active && to == Matched);
            ensure!(from.can_transition_to(to) == table, "can_transition_to({from}, {to})");
        }
    }
    // linking: both ACTIVE, opposite sides
    let m = stored(&store, Side::Missing, Active, "C");
    let m2 = stored(&store, Side::Missing, Active, "D");
    let f_ap = stored(&store, Side::Finding, Ap, "E");
    ensure!(
        matches!(store.writer().link_matched(m, m2), Err(RegistryError::SameDirectoryLink { .. })),
        "same-directory link accepted"
    );
    ensure!(
        matches!(store.writer().link_matched(m, f_ap), Err(RegistryError::IllegalTransition { .. })),
        "link with an AP entry accepted"
    );
    ensure!(store.get_entry(m).unwrap().status == Active, "failed link changed entry {m}");
    Ok(())
}

/// No route to ACTIVE or MATCHED without an APPROVED case.
pub fn nothing_goes_live_without_approval() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let p = open(dir.path(), false);
    let pending = p
        .submit(synthetic_submission(Side::Missing, demo_family(), "s", "I1", "v1", 1))
        .map_err(|e| e.to_string())?;
    let id = pending.entry_id.unwrap();
    ensure!(
        matches!(p.continue_after_approval(id), Err(PipelineError::NotApproved(_))),
        "pending case continued"
    );
    p.decide_case(pending.case_id.unwrap(), false).map_err(|e| e.to_string())?;
    ensure!(
        matches!(p.continue_after_approval(id), Err(PipelineError::NotApproved(_))),
        "denied case continued"
    );
    ensure!(
        matches!(p.open_case(id), Err(PipelineError::NotInProcessing(_))),
        "case reopened for a rejected entry"
    );
    ensure!(
        p.entries().get_entry(id).unwrap().status == EntryStatus::Rejected,
        "denied entry is not REJECTED"
    );

    let intruder = p
        .submit(synthetic_submission(Side::Missing, demo_intruder(), "s", "I2", "v1", 1))
        .map_err(|e| e.to_string())?;
    let id = intruder.entry_id.unwrap();
    ensure!(
        matches!(p.open_case(id), Err(PipelineError::NotInProcessing(_))),
        "case opened for an intruder"
    );
    ensure!(p.cases().for_entry(id).is_empty(), "intruder has a case");

    let ok = p
        .submit(synthetic_submission(Side::Finding, demo_finder(), "s", "I3", "v1", 1))
        .map_err(|e| e.to_string())?;
    p.decide_case(ok.case_id.unwrap(), true).map_err(|e| e.to_string())?;
    let before = snapshot(&p);
    ensure!(
        matches!(
            p.continue_after_approval(ok.entry_id.unwrap()),
            Err(PipelineError::Registry(RegistryError::IllegalTransition { .. }))
        ),
        "continuation ran twice"
    );
    ensure!(snapshot(&p) == before, "refused continuation changed state");
    Ok(())
}

/// A decision recorded just before a crash is carried out on the next open,
/// once.
pub fn interrupted_approval_resumes_once() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let (missing_case, finder_case, denied_case) = {
        let p = open(dir.path(), false);
        let sub = |side, label: &str, variant: &str, seed| {
            let u = if side == Side::Missing { demo_family() } else { demo_finder() };
            p.submit(synthetic_submission(side, u, "s", label, variant, seed)).unwrap()
        };
        let m = sub(Side::Missing, "I1", "v1", 7);
        p.decide_case(m.case_id.unwrap(), true).map_err(|e| e.to_string())?;
        let f = sub(Side::Finding, "I1", "v2", 9);
        let d = sub(Side::Finding, "I9", "v2", 9);
        (m.case_id.unwrap(), f.case_id.unwrap(), d.case_id.unwrap())
    };
    {
        let cases = CaseStore::open(dir.path()).unwrap();
        cases.decide(finder_case, true).map_err(|e| e.to_string())?;
        cases.decide(denied_case, false).map_err(|e| e.to_string())?;
    }
    let p = open(dir.path(), false);
    let after = snapshot(&p);
    let status = |id: CaseId| {
        let case = after.cases.iter().find(|c| c.case_id == id).unwrap();
        after.entries.iter().find(|e| e.id == case.entry_id).unwrap().status
    };
    ensure!(status(missing_case) == EntryStatus::Matched, "missing entry not matched after resume");
    ensure!(status(finder_case) == EntryStatus::Matched, "finder entry not matched after resume");
    ensure!(status(denied_case) == EntryStatus::Rejected, "denied entry not rejected after resume");
    let kinds: Vec<_> = after.outbox.iter().map(|n| n.kind).collect();
    let expected = [
        NotificationKind::VerificationRequest,
        NotificationKind::VerificationRequest,
        NotificationKind::VerificationRequest,
        NotificationKind::MatchToParty,
        NotificationKind::MatchToPolice,
    ];
    ensure!(kinds == expected, "outbox after resume: {kinds:?}");
    drop(p);
    for _ in 0..2 {
        let p = open(dir.path(), false);
        ensure!(snapshot(&p) == after, "reopen changed state or re-sent notifications");
    }
    Ok(())
}
