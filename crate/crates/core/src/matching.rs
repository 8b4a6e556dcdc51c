//! The submission pipeline.
//!
//! ```text
//! submit ──► detect + encode ──► station valid? ──► citizen valid? ──► AP entry + case
//!                                     │ no               │ no               │
//!                                     └──────► REJECTED_INVALID_INFO       ▼
//!                                                              police decision
//!                                                      deny ◄──────┴──────► approve
//!                                                        │                    │
//!                                             REJECTED_INVALID_INFO   continue_after_approval:
//!                                                                      own-directory duplicate? ─► REJECTED_DUPLICATE
//!                                                                      ACTIVE, cross-directory match? ─► MATCHED
//!                                                                      otherwise STORED_NO_MATCH
//! ```
//!
//! `continue_after_approval` runs entirely inside the entry store's writer
//! context, so duplicate check, activation, cross-match and linking are atomic
//! with respect to other pipeline runs.

use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::embedding::{self, EmbeddingError, EmbeddingProvider, EmbeddingVector, FaceImage, MatchThreshold};
use crate::messages;
use crate::notification::{self, JsonlOutbox, Notification, NotificationDraft, NotificationError, NotificationKind, Outbox};
use crate::registry::{
    CandidateSource, Entry, EntryId, EntryStatus, EntryStore, RegistryError, Side, UploaderInfo,
};
use crate::verification::{
    self, CaseId, CaseState, CaseStore, IdentityAuthority, VerificationCase, VerificationError,
};

/// What an uploader sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub side: Side,
    pub uploader: UploaderInfo,
    pub subject_name: String,
    pub photo: FaceImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub query_entry_id: EntryId,
    pub matched_entry_id: EntryId,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Disposition {
    PendingVerification,
    RejectedInvalidInfo,
    RejectedDuplicate,
    StoredNoMatch,
    Matched,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::PendingVerification => "PENDING_VERIFICATION",
            Disposition::RejectedInvalidInfo => "REJECTED_INVALID_INFO",
            Disposition::RejectedDuplicate => "REJECTED_DUPLICATE",
            Disposition::StoredNoMatch => "STORED_NO_MATCH",
            Disposition::Matched => "MATCHED",
        }
    }
}

impl std::fmt::Display for Disposition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How to reach the other side of a match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub name: String,
    pub phone: String,
    pub email: String,
}

impl From<&UploaderInfo> for Contact {
    fn from(u: &UploaderInfo) -> Self {
        Contact {
            name: u.name.clone(),
            phone: u.phone.clone(),
            email: u.email.clone(),
        }
    }
}

/// The response to a submission or a police decision.
///
/// `entry_id` is absent only when the uploader details were too malformed to
/// record at all. `match` and `other_side_contact` are present iff the
/// disposition is MATCHED.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionOutcome {
    pub entry_id: Option<EntryId>,
    pub disposition: Disposition,
    pub message: String,
    pub case_id: Option<CaseId>,
    #[serde(rename = "match")]
    pub match_result: Option<MatchResult>,
    pub other_side_contact: Option<Contact>,
}

impl SubmissionOutcome {
    fn new(entry_id: Option<EntryId>, disposition: Disposition, case_id: Option<CaseId>) -> Self {
        Self {
            entry_id,
            disposition,
            message: messages::for_disposition(disposition).to_string(),
            case_id,
            match_result: None,
            other_side_contact: None,
        }
    }
}

/// Current state of an entry as seen by its uploader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub entry_id: EntryId,
    pub side: Side,
    pub directory: String,
    pub subject_name: String,
    pub status: EntryStatus,
    pub disposition: Disposition,
    pub message: String,
    pub case_id: Option<CaseId>,
    pub case_state: Option<CaseState>,
    #[serde(rename = "match")]
    pub match_result: Option<MatchResult>,
    pub other_side_contact: Option<Contact>,
    pub created_at: chrono::DateTime<Utc>,
    pub updated_at: chrono::DateTime<Utc>,
}

impl EntryReport {
    /// The outcome a submitter would have received for the entry's current state.
    pub fn outcome(&self) -> SubmissionOutcome {
        SubmissionOutcome {
            entry_id: Some(self.entry_id),
            disposition: self.disposition,
            message: self.message.clone(),
            case_id: self.case_id,
            match_result: self.match_result.clone(),
            other_side_contact: self.other_side_contact.clone(),
        }
    }
}

/// A candidate found by a directory scan.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestMatch {
    pub entry: Entry,
    pub distance: f64,
}

/// Closest candidate strictly under `threshold`; ties go to the earliest
/// created, then the smallest id. Candidates of another dimension are skipped.
pub fn best_match(
    query: &EmbeddingVector,
    candidates: impl IntoIterator<Item = Entry>,
    threshold: MatchThreshold,
) -> Option<NearestMatch> {
    let mut best: Option<NearestMatch> = None;
    for entry in candidates {
        let Ok(d) = embedding::distance(query, &entry.embedding) else {
            continue;
        };
        if d >= threshold.tau() {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => d < b.distance || (d == b.distance && entry.age_key() < b.entry.age_key()),
        };
        if better {
            best = Some(NearestMatch { entry, distance: d });
        }
    }
    best
}

/// Looks for the same person already ACTIVE in the submitter's own directory.
pub fn find_duplicate(
    source: &dyn CandidateSource,
    embedding: &EmbeddingVector,
    own: Side,
    threshold: MatchThreshold,
) -> Result<Option<NearestMatch>, RegistryError> {
    Ok(best_match(embedding, source.active_entries(own)?, threshold))
}

/// Looks for the same person ACTIVE in the opposite directory.
pub fn cross_match(
    source: &dyn CandidateSource,
    embedding: &EmbeddingVector,
    own: Side,
    threshold: MatchThreshold,
) -> Result<Option<NearestMatch>, RegistryError> {
    Ok(best_match(embedding, source.active_entries(own.opposite())?, threshold))
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
    #[error(transparent)]
    Notification(#[from] NotificationError),
    #[error("entry {0} is not in administrative processing")]
    NotInProcessing(EntryId),
    #[error("entry {0} has no approved verification case")]
    NotApproved(EntryId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub threshold: MatchThreshold,
    /// Approve every case as soon as it is opened.
    pub auto_approve: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: MatchThreshold::default(),
            auto_approve: false,
        }
    }
}

/// Owns the stores and runs submissions through verification and matching.
pub struct Pipeline {
    config: PipelineConfig,
    provider: Arc<dyn EmbeddingProvider>,
    authority: Arc<dyn IdentityAuthority>,
    entries: EntryStore,
    cases: CaseStore,
    outbox: Arc<dyn Outbox>,
    retry: Mutex<Vec<NotificationDraft>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("data_dir", &self.entries.dir())
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Opens the stores under `data_dir` with a file-backed outbox and
    /// finishes any run interrupted between a decision and its continuation.
    pub fn open(
        data_dir: &Path,
        config: PipelineConfig,
        provider: Arc<dyn EmbeddingProvider>,
        authority: Arc<dyn IdentityAuthority>,
    ) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(data_dir).map_err(RegistryError::from)?;
        let outbox = Arc::new(JsonlOutbox::open(data_dir)?);
        Self::with_outbox(data_dir, config, provider, authority, outbox)
    }

    pub fn with_outbox(
        data_dir: &Path,
        config: PipelineConfig,
        provider: Arc<dyn EmbeddingProvider>,
        authority: Arc<dyn IdentityAuthority>,
        outbox: Arc<dyn Outbox>,
    ) -> Result<Self, PipelineError> {
        let pipeline = Self {
            config,
            provider,
            authority,
            entries: EntryStore::open(data_dir)?,
            cases: CaseStore::open(data_dir)?,
            outbox,
            retry: Mutex::new(Vec::new()),
        };
        pipeline.recover()?;
        Ok(pipeline)
    }

    fn recover(&self) -> Result<(), PipelineError> {
        for case in self.cases.list(None) {
            let Some(entry) = self.entries.get_entry(case.entry_id) else {
                continue;
            };
            if entry.status != EntryStatus::Ap {
                continue;
            }
            match case.state {
                CaseState::Approved => {
                    tracing::info!(entry = %entry.id, "resuming interrupted pipeline run");
                    self.continue_after_approval(entry.id)?;
                }
                CaseState::Denied => {
                    self.entries.writer().transition_status(entry.id, EntryStatus::Rejected)?;
                }
                CaseState::Pending => {}
            }
        }
        Ok(())
    }

    pub fn config(&self) -> PipelineConfig {
        self.config
    }

    pub fn entries(&self) -> &EntryStore {
        &self.entries
    }

    pub fn cases(&self) -> &CaseStore {
        &self.cases
    }

    pub fn authority(&self) -> &dyn IdentityAuthority {
        self.authority.as_ref()
    }

    pub fn read_outbox(&self, kind: Option<NotificationKind>) -> Result<Vec<Notification>, PipelineError> {
        Ok(self.outbox.read(kind)?)
    }

    pub fn find_duplicate(&self, embedding: &EmbeddingVector, own: Side) -> Result<Option<NearestMatch>, PipelineError> {
        Ok(find_duplicate(&self.entries, embedding, own, self.config.threshold)?)
    }

    pub fn cross_match(&self, embedding: &EmbeddingVector, own: Side) -> Result<Option<NearestMatch>, PipelineError> {
        Ok(cross_match(&self.entries, embedding, own, self.config.threshold)?)
    }

    /// Emits drafts; failures are logged and parked for [`Pipeline::retry_notifications`].
    fn emit(&self, drafts: Vec<NotificationDraft>) -> Vec<Notification> {
        let mut sent = Vec::new();
        for draft in drafts {
            match self.outbox.append(draft.clone()) {
                Ok(n) => sent.push(n),
                Err(e) => {
                    tracing::error!(kind = %draft.kind, to = %draft.to_email, error = %e, "notification not recorded");
                    self.retry.lock().unwrap_or_else(|p| p.into_inner()).push(draft);
                }
            }
        }
        sent
    }

    fn emit_or_park(&self, drafts: Result<Vec<NotificationDraft>, NotificationError>) {
        match drafts {
            Ok(d) => {
                self.emit(d);
            }
            Err(e) => tracing::error!(error = %e, "could not prepare notifications"),
        }
    }

    /// Notifications that could not be recorded so far.
    pub fn pending_notifications(&self) -> usize {
        self.retry.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    /// Re-attempts parked notifications; returns how many were recorded.
    pub fn retry_notifications(&self) -> usize {
        let drafts = std::mem::take(&mut *self.retry.lock().unwrap_or_else(|p| p.into_inner()));
        self.emit(drafts).len()
    }

    /// Runs a new submission up to the police gate (or, with auto-approve,
    /// all the way through matching).
    pub fn submit(&self, submission: Submission) -> Result<SubmissionOutcome, PipelineError> {
        let embedding = embedding::encode_face(&submission.photo, self.provider.as_ref())?;

        if let Err(e) = submission.uploader.validate() {
            tracing::info!(error = %e, "submission rejected before recording");
            return Ok(SubmissionOutcome::new(None, Disposition::RejectedInvalidInfo, None));
        }
        let station_ok = verification::validate_police_station(self.authority(), &submission.uploader.police_station_id)?;
        let citizen_ok = station_ok && {
            let u = &submission.uploader;
            verification::validate_citizen(self.authority(), &u.nid, &u.name, &u.phone)?
        };

        let now = Utc::now();
        let entry_id = {
            let mut writer = self.entries.writer();
            let id = writer.next_id();
            writer.store_entry(Entry {
                id,
                side: submission.side,
                uploader: submission.uploader,
                subject_name: submission.subject_name,
                photo: submission.photo,
                embedding,
                status: EntryStatus::Ap,
                matched_entry_id: None,
                created_at: now,
                updated_at: now,
            })?;
            if !citizen_ok {
                writer.transition_status(id, EntryStatus::Rejected)?;
                return Ok(SubmissionOutcome::new(Some(id), Disposition::RejectedInvalidInfo, None));
            }
            id
        };

        let case = self.open_case(entry_id)?;
        if self.config.auto_approve {
            return self.decide_case(case.case_id, true);
        }
        Ok(SubmissionOutcome::new(
            Some(entry_id),
            Disposition::PendingVerification,
            Some(case.case_id),
        ))
    }

    /// Opens a PENDING case for an AP entry at the uploader's station and
    /// asks the station to verify.
    pub fn open_case(&self, entry_id: EntryId) -> Result<VerificationCase, PipelineError> {
        let entry = self
            .entries
            .get_entry(entry_id)
            .ok_or(RegistryError::UnknownEntry(entry_id))?;
        if entry.status != EntryStatus::Ap {
            return Err(PipelineError::NotInProcessing(entry_id));
        }
        let station = &entry.uploader.police_station_id;
        if !verification::validate_police_station(self.authority(), station)? {
            return Err(VerificationError::InvalidStation(station.clone()).into());
        }
        let case = self.cases.open_case(entry_id, station)?;
        self.emit_or_park(notification::verification_request_draft(self.authority(), &case, &entry).map(|d| vec![d]));
        Ok(case)
    }

    /// Records a police decision and runs its consequence.
    pub fn decide_case(&self, case_id: CaseId, approve: bool) -> Result<SubmissionOutcome, PipelineError> {
        let case = self.cases.decide(case_id, approve)?;
        if approve {
            return self.continue_after_approval(case.entry_id);
        }
        self.entries
            .writer()
            .transition_status(case.entry_id, EntryStatus::Rejected)?;
        Ok(SubmissionOutcome::new(
            Some(case.entry_id),
            Disposition::RejectedInvalidInfo,
            Some(case_id),
        ))
    }

    /// Duplicate check, activation, cross-match and linking for an approved
    /// AP entry.
    pub fn continue_after_approval(&self, entry_id: EntryId) -> Result<SubmissionOutcome, PipelineError> {
        let case = self
            .cases
            .for_entry(entry_id)
            .into_iter()
            .find(|c| c.state == CaseState::Approved)
            .ok_or(PipelineError::NotApproved(entry_id))?;

        let mut writer = self.entries.writer();
        let entry = writer.get_entry(entry_id)?;
        if entry.status != EntryStatus::Ap {
            return Err(RegistryError::IllegalTransition {
                id: entry_id,
                from: entry.status,
                to: EntryStatus::Active,
            }
            .into());
        }
        let threshold = self.config.threshold;

        if let Some(original) = find_duplicate(&writer, &entry.embedding, entry.side, threshold)? {
            let attempt = writer.transition_status(entry_id, EntryStatus::Rejected)?;
            self.emit_or_park(notification::duplicate_drafts(self.authority(), &original.entry, &attempt));
            return Ok(SubmissionOutcome::new(
                Some(entry_id),
                Disposition::RejectedDuplicate,
                Some(case.case_id),
            ));
        }

        writer.transition_status(entry_id, EntryStatus::Active)?;
        let Some(hit) = cross_match(&writer, &entry.embedding, entry.side, threshold)? else {
            return Ok(SubmissionOutcome::new(
                Some(entry_id),
                Disposition::StoredNoMatch,
                Some(case.case_id),
            ));
        };
        let (new_entry, prior_entry) = writer.link_matched(entry_id, hit.entry.id)?;
        self.emit_or_park(notification::match_drafts(self.authority(), &new_entry, &prior_entry));
        drop(writer);

        let mut outcome = SubmissionOutcome::new(Some(entry_id), Disposition::Matched, Some(case.case_id));
        outcome.match_result = Some(MatchResult {
            query_entry_id: entry_id,
            matched_entry_id: prior_entry.id,
            distance: hit.distance,
        });
        outcome.other_side_contact = Some(Contact::from(&prior_entry.uploader));
        Ok(outcome)
    }

    /// Derives the uploader-facing state of an entry from the stores.
    pub fn entry_report(&self, entry_id: EntryId) -> Result<EntryReport, PipelineError> {
        let entry = self
            .entries
            .get_entry(entry_id)
            .ok_or(RegistryError::UnknownEntry(entry_id))?;
        let case = self.cases.for_entry(entry_id).into_iter().last();
        let disposition = match entry.status {
            EntryStatus::Ap => Disposition::PendingVerification,
            EntryStatus::Active => Disposition::StoredNoMatch,
            EntryStatus::Matched => Disposition::Matched,
            // approved-then-rejected only happens on a duplicate
            EntryStatus::Rejected => match case.as_ref().map(|c| c.state) {
                Some(CaseState::Approved) => Disposition::RejectedDuplicate,
                _ => Disposition::RejectedInvalidInfo,
            },
        };
        let (match_result, other_side_contact) = match entry.matched_entry_id {
            Some(other_id) => {
                let other = self
                    .entries
                    .get_entry(other_id)
                    .ok_or(RegistryError::UnknownEntry(other_id))?;
                (
                    Some(MatchResult {
                        query_entry_id: entry.id,
                        matched_entry_id: other.id,
                        distance: embedding::distance(&entry.embedding, &other.embedding)?,
                    }),
                    Some(Contact::from(&other.uploader)),
                )
            }
            None => (None, None),
        };
        Ok(EntryReport {
            entry_id,
            side: entry.side,
            directory: entry.side.directory().to_string(),
            subject_name: entry.subject_name,
            status: entry.status,
            disposition,
            message: messages::for_disposition(disposition).to_string(),
            case_id: case.as_ref().map(|c| c.case_id),
            case_state: case.as_ref().map(|c| c.state),
            match_result,
            other_side_contact,
            created_at: entry.created_at,
            updated_at: entry.updated_at,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{SyntheticFace, SyntheticProvider};
    use crate::verification::FixtureAuthority;
    use std::cell::RefCell;

    fn authority() -> Arc<FixtureAuthority> {
        Arc::new(
            FixtureAuthority::from_json(
                Path::new("citizens.json"),
                r#"[{"nid":"111111","full_name":"Abdul Karim","phone":"01711000001"},
                    {"nid":"222222","full_name":"Nasrin Akter","phone":"01811000002"},
                    {"nid":"333333","full_name":"Shafiq Rahman","phone":"01911000003"}]"#,
                Path::new("police_stations.json"),
                r#"[{"station_id":"PS-DHK-01","name":"Mirpur","email":"mirpur@police.example"},
                    {"station_id":"PS-CTG-01","name":"Kotwali","email":"kotwali@police.example"}]"#,
            )
            .unwrap(),
        )
    }

    fn family() -> UploaderInfo {
        UploaderInfo {
            name: "Abdul Karim".into(),
            nid: "111111".into(),
            phone: "01711000001".into(),
            email: "karim@example.com".into(),
            address: "Mirpur, Dhaka".into(),
            police_station_id: "PS-DHK-01".into(),
        }
    }

    fn finder() -> UploaderInfo {
        UploaderInfo {
            name: "Nasrin Akter".into(),
            nid: "222222".into(),
            phone: "01811000002".into(),
            email: "nasrin@example.com".into(),
            address: "Kotwali, Chattogram".into(),
            police_station_id: "PS-CTG-01".into(),
        }
    }

    fn submission(side: Side, uploader: UploaderInfo, label: &str, variant: &str, seed: u64) -> Submission {
        Submission {
            side,
            uploader,
            subject_name: format!("Subject {label}"),
            photo: FaceImage::synthetic(&SyntheticFace::new(label, variant, seed)),
        }
    }

    fn pipeline(dir: &Path, auto_approve: bool) -> Pipeline {
        Pipeline::open(
            dir,
            PipelineConfig {
                threshold: MatchThreshold::default(),
                auto_approve,
            },
            Arc::new(SyntheticProvider::default()),
            authority(),
        )
        .unwrap()
    }

    #[test]
    fn intruder_is_rejected_without_activation() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), true);
        let mut u = finder();
        u.nid = "99999".into();
        let out = p.submit(submission(Side::Finding, u, "I1", "v1", 7)).unwrap();
        assert_eq!(out.disposition, Disposition::RejectedInvalidInfo);
        assert_eq!(out.message, messages::INVALID_INFO);
        assert!(p.entries().active_entries(Side::Finding).is_empty());
        assert!(p.entries().active_entries(Side::Missing).is_empty());
        assert!(p.cases().list(None).is_empty());
        assert!(p.read_outbox(None).unwrap().is_empty());
        let report = p.entry_report(out.entry_id.unwrap()).unwrap();
        assert_eq!(report.status, EntryStatus::Rejected);
        assert_eq!(report.outcome(), out);
    }

    #[test]
    fn unknown_station_is_rejected_before_citizen_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), false);
        let mut u = family();
        u.police_station_id = "PS-XX-99".into();
        let out = p.submit(submission(Side::Missing, u, "I1", "v1", 7)).unwrap();
        assert_eq!(out.disposition, Disposition::RejectedInvalidInfo);
        assert!(p.cases().list(None).is_empty());
    }

    #[test]
    fn malformed_uploader_is_not_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), true);
        let mut u = family();
        u.email = "karim.example.com".into();
        let out = p.submit(submission(Side::Missing, u, "I1", "v1", 7)).unwrap();
        assert_eq!(out.disposition, Disposition::RejectedInvalidInfo);
        assert_eq!(out.entry_id, None);
        assert!(p.entries().entries().is_empty());
    }

    #[test]
    fn unrecognizable_photo_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), true);
        let mut s = submission(Side::Missing, family(), "I1", "v1", 7);
        s.photo = FaceImage::new(crate::ImageFormat::Synthetic, b"not json".to_vec());
        assert!(matches!(
            p.submit(s),
            Err(PipelineError::Embedding(EmbeddingError::UndecodableImage(_)))
        ));
        assert!(p.entries().entries().is_empty());
    }

    #[test]
    fn manual_verification_gates_activation() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), false);
        let out = p.submit(submission(Side::Missing, family(), "I1", "v1", 7)).unwrap();
        assert_eq!(out.disposition, Disposition::PendingVerification);
        let id = out.entry_id.unwrap();
        let case_id = out.case_id.unwrap();
        assert_eq!(p.cases().get(case_id).unwrap().state, CaseState::Pending);
        assert!(p.entries().active_entries(Side::Missing).is_empty());
        assert!(matches!(p.continue_after_approval(id), Err(PipelineError::NotApproved(_))));

        let vr = p.read_outbox(Some(NotificationKind::VerificationRequest)).unwrap();
        assert_eq!(vr.len(), 1);
        assert_eq!(vr[0].to_email, "mirpur@police.example");

        let decided = p.decide_case(case_id, true).unwrap();
        assert_eq!(decided.disposition, Disposition::StoredNoMatch);
        assert_eq!(decided.message, messages::SAVED_FOR_FURTHER_USAGE);
        assert!(matches!(
            p.decide_case(case_id, true),
            Err(PipelineError::Verification(VerificationError::AlreadyDecided(_)))
        ));
        assert!(matches!(p.open_case(id), Err(PipelineError::NotInProcessing(_))));
    }

    #[test]
    fn denial_rejects_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), false);
        let out = p.submit(submission(Side::Finding, finder(), "I1", "v1", 7)).unwrap();
        let decided = p.decide_case(out.case_id.unwrap(), false).unwrap();
        assert_eq!(decided.disposition, Disposition::RejectedInvalidInfo);
        let report = p.entry_report(out.entry_id.unwrap()).unwrap();
        assert_eq!(report.status, EntryStatus::Rejected);
        assert_eq!(report.case_state, Some(CaseState::Denied));
        assert!(p.entries().active_entries(Side::Finding).is_empty());
    }

    #[test]
    fn finder_after_family_matches() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), true);
        let first = p.submit(submission(Side::Missing, family(), "I1", "v1", 7)).unwrap();
        assert_eq!(first.disposition, Disposition::StoredNoMatch);
        let second = p.submit(submission(Side::Finding, finder(), "I1", "v2", 9)).unwrap();
        assert_eq!(second.disposition, Disposition::Matched);
        assert_eq!(second.message, messages::MATCH_FOUND);
        assert_eq!(second.other_side_contact, Some(Contact::from(&family())));
        let m = second.match_result.clone().unwrap();
        assert_eq!(m.matched_entry_id, first.entry_id.unwrap());
        assert!(m.distance < 0.3);

        let a = p.entries().get_entry(first.entry_id.unwrap()).unwrap();
        let b = p.entries().get_entry(second.entry_id.unwrap()).unwrap();
        assert_eq!(a.matched_entry_id, Some(b.id));
        assert_eq!(b.matched_entry_id, Some(a.id));
        assert_eq!(p.entry_report(b.id).unwrap().outcome(), second);
        // the earlier uploader sees the finder once linked
        assert_eq!(
            p.entry_report(a.id).unwrap().other_side_contact,
            Some(Contact::from(&finder()))
        );
    }

    #[test]
    fn duplicate_in_own_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), true);
        p.submit(submission(Side::Missing, family(), "I1", "v1", 7)).unwrap();
        let again = p.submit(submission(Side::Missing, family(), "I1", "v3", 11)).unwrap();
        assert_eq!(again.disposition, Disposition::RejectedDuplicate);
        assert_eq!(again.message, messages::ALREADY_LISTED);
        assert_eq!(p.entries().active_entries(Side::Missing).len(), 1);
        assert_eq!(p.entry_report(again.entry_id.unwrap()).unwrap().outcome(), again);
        let alerts: Vec<_> = p
            .read_outbox(None)
            .unwrap()
            .into_iter()
            .filter(|n| {
                matches!(
                    n.kind,
                    NotificationKind::DuplicateAlertToParty | NotificationKind::DuplicateAlertToPolice
                )
            })
            .collect();
        assert_eq!(alerts.len(), 2);
        assert_eq!(alerts[0].to_email, "karim@example.com");
        assert_eq!(alerts[1].to_email, "mirpur@police.example");
    }

    #[test]
    fn distinct_people_do_not_interact() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), true);
        p.submit(submission(Side::Missing, family(), "I1", "v1", 7)).unwrap();
        let out = p.submit(submission(Side::Finding, finder(), "I2", "v1", 7)).unwrap();
        assert_eq!(out.disposition, Disposition::StoredNoMatch);
        let out = p.submit(submission(Side::Missing, family(), "I3", "v1", 7)).unwrap();
        assert_eq!(out.disposition, Disposition::StoredNoMatch);
        assert_eq!(p.entries().active_entries(Side::Missing).len(), 2);
    }

    struct Recording<'a> {
        inner: &'a EntryStore,
        sides: RefCell<Vec<Side>>,
    }

    impl CandidateSource for Recording<'_> {
        fn active_entries(&self, side: Side) -> Result<Vec<Entry>, RegistryError> {
            self.sides.borrow_mut().push(side);
            Ok(self.inner.active_entries(side))
        }
    }

    #[test]
    fn scans_touch_only_their_directory() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), true);
        p.submit(submission(Side::Missing, family(), "I1", "v1", 7)).unwrap();
        let probe = SyntheticProvider::default().synthetic_embed("I1", "v9", 1).unwrap();
        let rec = Recording {
            inner: p.entries(),
            sides: RefCell::new(vec![]),
        };
        let tau = MatchThreshold::default();
        assert!(find_duplicate(&rec, &probe, Side::Missing, tau).unwrap().is_some());
        assert!(cross_match(&rec, &probe, Side::Missing, tau).unwrap().is_none());
        assert!(find_duplicate(&rec, &probe, Side::Finding, tau).unwrap().is_none());
        assert!(cross_match(&rec, &probe, Side::Finding, tau).unwrap().is_some());
        assert_eq!(
            *rec.sides.borrow(),
            vec![Side::Missing, Side::Finding, Side::Finding, Side::Missing]
        );
    }

    struct BrokenOutbox;

    impl Outbox for BrokenOutbox {
        fn append(&self, _: NotificationDraft) -> Result<Notification, NotificationError> {
            Err(NotificationError::OutboxFailure("disk full".into()))
        }
        fn read(&self, _: Option<NotificationKind>) -> Result<Vec<Notification>, NotificationError> {
            Ok(vec![])
        }
    }

    #[test]
    fn outbox_failure_does_not_undo_the_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::with_outbox(
            dir.path(),
            PipelineConfig {
                auto_approve: true,
                ..Default::default()
            },
            Arc::new(SyntheticProvider::default()),
            authority(),
            Arc::new(BrokenOutbox),
        )
        .unwrap();
        p.submit(submission(Side::Missing, family(), "I1", "v1", 7)).unwrap();
        let again = p.submit(submission(Side::Missing, family(), "I1", "v2", 8)).unwrap();
        assert_eq!(again.disposition, Disposition::RejectedDuplicate);
        // 2 verification requests + 2 duplicate alerts parked
        assert_eq!(p.pending_notifications(), 4);
        assert_eq!(p.retry_notifications(), 0);
        assert_eq!(p.pending_notifications(), 4);
    }

    #[test]
    fn best_match_prefers_distance_then_age_then_id() {
        let prov = SyntheticProvider::default();
        let q = prov.synthetic_embed("I1", "q", 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = EntryStore::open(dir.path()).unwrap();
        let mut w = store.writer();
        let t0 = Utc::now();
        let mut mk = |id: u64, variant: &str, secs: i64| {
            let photo = FaceImage::synthetic(&SyntheticFace::new("I1", variant, 1));
            let at = t0 + chrono::Duration::seconds(secs);
            w.store_entry(Entry {
                id: EntryId(id),
                side: Side::Finding,
                uploader: finder(),
                subject_name: "x".into(),
                embedding: prov.embed(&photo).unwrap(),
                photo,
                status: EntryStatus::Active,
                matched_entry_id: None,
                created_at: at,
                updated_at: at,
            })
            .unwrap();
        };
        mk(5, "same", 10);
        mk(3, "same", 10);
        mk(4, "same", 5);
        mk(1, "other", 0);
        drop(w);
        let cands = store.active_entries(Side::Finding);
        let d_same = embedding::distance(&q, &store.get_entry(EntryId(4)).unwrap().embedding).unwrap();
        let d_other = embedding::distance(&q, &store.get_entry(EntryId(1)).unwrap().embedding).unwrap();
        let hit = best_match(&q, cands.clone(), MatchThreshold::default()).unwrap();
        if d_same < d_other {
            assert_eq!(hit.entry.id, EntryId(4));
        } else {
            assert_eq!(hit.entry.id, EntryId(1));
        }
        // exact tie at equal time goes to the smaller id
        let tied: Vec<Entry> = cands.into_iter().filter(|e| e.id != EntryId(4) && e.id != EntryId(1)).collect();
        assert_eq!(best_match(&q, tied, MatchThreshold::default()).unwrap().entry.id, EntryId(3));
        assert!(best_match(&q, Vec::new(), MatchThreshold::default()).is_none());
    }
}
