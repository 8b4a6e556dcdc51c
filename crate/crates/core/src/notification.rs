//! Outbox of email-shaped notifications.
//!
//! The outbox (`outbox.log`, one [`Notification`] per line) is the record of
//! everything the system intends to send. Delivery is a separate concern: an
//! optional SMTP relay drains the outbox with at-least-once semantics, keeping
//! its progress in `outbox.delivered`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError, JsonlWriter};
use crate::registry::{Entry, EntryId, EntryStatus, Side};
use crate::verification::{IdentityAuthority, VerificationCase};

pub const OUTBOX_LOG: &str = "outbox.log";
pub const DELIVERED_LOG: &str = "outbox.delivered";

/// Bumped whenever the wording of any template below changes.
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NotificationId(pub u64);

impl fmt::Display for NotificationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NotificationKind {
    MatchToParty,
    MatchToPolice,
    DuplicateAlertToParty,
    DuplicateAlertToPolice,
    VerificationRequest,
}

impl NotificationKind {
    pub const ALL: [NotificationKind; 5] = [
        NotificationKind::MatchToParty,
        NotificationKind::MatchToPolice,
        NotificationKind::DuplicateAlertToParty,
        NotificationKind::DuplicateAlertToPolice,
        NotificationKind::VerificationRequest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NotificationKind::MatchToParty => "MATCH_TO_PARTY",
            NotificationKind::MatchToPolice => "MATCH_TO_POLICE",
            NotificationKind::DuplicateAlertToParty => "DUPLICATE_ALERT_TO_PARTY",
            NotificationKind::DuplicateAlertToPolice => "DUPLICATE_ALERT_TO_POLICE",
            NotificationKind::VerificationRequest => "VERIFICATION_REQUEST",
        }
    }
}

impl fmt::Display for NotificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NotificationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NotificationKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown notification kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub id: NotificationId,
    pub kind: NotificationKind,
    pub to_email: String,
    pub subject: String,
    pub body: String,
    pub related_entry_ids: Vec<EntryId>,
    pub created_at: DateTime<Utc>,
}

/// A notification before the outbox has assigned it an id and timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotificationDraft {
    pub kind: NotificationKind,
    pub to_email: String,
    pub subject: String,
    pub body: String,
    pub related_entry_ids: Vec<EntryId>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NotificationError {
    #[error("unknown police station {0:?}")]
    UnknownStation(String),
    #[error("outbox failure: {0}")]
    OutboxFailure(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("delivery failed for notification {id}: {message}")]
    Delivery { id: NotificationId, message: String },
}

impl From<JsonlError> for NotificationError {
    fn from(e: JsonlError) -> Self {
        NotificationError::OutboxFailure(e.to_string())
    }
}

pub trait Outbox: Send + Sync {
    fn append(&self, draft: NotificationDraft) -> Result<Notification, NotificationError>;

    /// Notifications in emission order, optionally of one kind.
    fn read(&self, kind: Option<NotificationKind>) -> Result<Vec<Notification>, NotificationError>;
}

/// File-backed outbox; see the module docs for the format.
#[derive(Debug)]
pub struct JsonlOutbox {
    inner: Mutex<(Vec<Notification>, JsonlWriter)>,
}

impl JsonlOutbox {
    pub fn open(dir: &Path) -> Result<Self, NotificationError> {
        let path = dir.join(OUTBOX_LOG);
        let sent = jsonl::replay::<Notification>(&path)?;
        Ok(Self {
            inner: Mutex::new((sent, JsonlWriter::open(&path)?)),
        })
    }
}

impl Outbox for JsonlOutbox {
    fn append(&self, draft: NotificationDraft) -> Result<Notification, NotificationError> {
        if draft.to_email.trim().is_empty() || draft.related_entry_ids.is_empty() {
            return Err(NotificationError::Precondition(
                "notification needs a recipient and at least one related entry".into(),
            ));
        }
        let mut guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let (sent, log) = &mut *guard;
        let n = Notification {
            id: NotificationId(sent.last().map_or(1, |n| n.id.0 + 1)),
            kind: draft.kind,
            to_email: draft.to_email,
            subject: draft.subject,
            body: draft.body,
            related_entry_ids: draft.related_entry_ids,
            created_at: Utc::now(),
        };
        log.append(&n)?;
        sent.push(n.clone());
        Ok(n)
    }

    fn read(&self, kind: Option<NotificationKind>) -> Result<Vec<Notification>, NotificationError> {
        let guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        Ok(guard
            .0
            .iter()
            .filter(|n| kind.is_none_or(|k| n.kind == k))
            .cloned()
            .collect())
    }
}

fn party_role(side: Side) -> &'static str {
    match side {
        Side::Missing => "family member",
        Side::Finding => "finder",
    }
}

fn station_email(authority: &dyn IdentityAuthority, station_id: &str) -> Result<String, NotificationError> {
    authority
        .station(station_id)
        .map_err(|e| NotificationError::UnknownStation(format!("{station_id}: {e}")))?
        .map(|s| s.email)
        .ok_or_else(|| NotificationError::UnknownStation(station_id.to_string()))
}

fn contact_block(entry: &Entry) -> String {
    let u = &entry.uploader;
    format!(
        "Name: {}\nPhone: {}\nEmail: {}\nAddress: {}",
        u.name, u.phone, u.email, u.address
    )
}

/// Drafts for a freshly linked pair: the uploader of the entry that was
/// already listed, and their station, each receive the new uploader's contact
/// details. With manual verification the listed entry may have been created
/// after the new one, so creation time is not consulted.
pub fn match_drafts(
    authority: &dyn IdentityAuthority,
    new_entry: &Entry,
    prior_entry: &Entry,
) -> Result<Vec<NotificationDraft>, NotificationError> {
    let linked = new_entry.status == EntryStatus::Matched
        && prior_entry.status == EntryStatus::Matched
        && new_entry.matched_entry_id == Some(prior_entry.id)
        && prior_entry.matched_entry_id == Some(new_entry.id);
    if !linked {
        return Err(NotificationError::Precondition(format!(
            "entries {} and {} are not a linked pair",
            new_entry.id, prior_entry.id
        )));
    }
    let police = station_email(authority, &prior_entry.uploader.police_station_id)?;
    let related = vec![prior_entry.id, new_entry.id];
    let other_role = party_role(new_entry.side);
    let subject_name = &prior_entry.subject_name;
    Ok(vec![
        NotificationDraft {
            kind: NotificationKind::MatchToParty,
            to_email: prior_entry.uploader.email.clone(),
            subject: format!("Match found for {subject_name}"),
            body: format!(
                "Dear {},\n\nThe photo in your {} entry #{} for {} matches a {} entry recorded as #{}.\n\
                 You can reach the {} directly:\n{}\n\n-- lostfound template v{}",
                prior_entry.uploader.name,
                prior_entry.side.as_str().to_lowercase(),
                prior_entry.id,
                subject_name,
                new_entry.side.as_str().to_lowercase(),
                new_entry.id,
                other_role,
                contact_block(new_entry),
                TEMPLATE_VERSION,
            ),
            related_entry_ids: related.clone(),
        },
        NotificationDraft {
            kind: NotificationKind::MatchToPolice,
            to_email: police,
            subject: format!("Match found for entry #{} ({subject_name})", prior_entry.id),
            body: format!(
                "Entry #{} ({}, {}) recorded at your station by {} has been matched with entry #{} ({}).\n\
                 Person: {}\nContact of the {}:\n{}\n\n-- lostfound template v{}",
                prior_entry.id,
                prior_entry.side.directory(),
                prior_entry.side.as_str().to_lowercase(),
                prior_entry.uploader.name,
                new_entry.id,
                new_entry.side.directory(),
                subject_name,
                other_role,
                contact_block(new_entry),
                TEMPLATE_VERSION,
            ),
            related_entry_ids: related,
        },
    ])
}

/// Drafts alerting the original uploader and their station that someone tried
/// to record the same person again. The attempter's contact is named; the
/// original uploader's details are never sent to the attempter.
pub fn duplicate_drafts(
    authority: &dyn IdentityAuthority,
    original: &Entry,
    attempt: &Entry,
) -> Result<Vec<NotificationDraft>, NotificationError> {
    if original.side != attempt.side || original.id == attempt.id {
        return Err(NotificationError::Precondition(format!(
            "entry {} is not another entry in the directory of {}",
            original.id, attempt.id
        )));
    }
    let police = station_email(authority, &original.uploader.police_station_id)?;
    let a = &attempt.uploader;
    let related = vec![original.id, attempt.id];
    let dir = original.side.directory();
    Ok(vec![
        NotificationDraft {
            kind: NotificationKind::DuplicateAlertToParty,
            to_email: original.uploader.email.clone(),
            subject: format!("Repeated entry attempt for {}", original.subject_name),
            body: format!(
                "Dear {},\n\n{} (phone {}, email {}) attempted to record another {} entry for {}, \
                 who is already listed under your entry #{}. The attempt (#{}) was denied.\n\n-- lostfound template v{}",
                original.uploader.name,
                a.name,
                a.phone,
                a.email,
                dir,
                original.subject_name,
                original.id,
                attempt.id,
                TEMPLATE_VERSION,
            ),
            related_entry_ids: related.clone(),
        },
        NotificationDraft {
            kind: NotificationKind::DuplicateAlertToPolice,
            to_email: police,
            subject: format!("Repeated entry attempt for entry #{}", original.id),
            body: format!(
                "A second {} entry (#{}) for {} was attempted by {} (NID {}, phone {}, email {}, station {}). \
                 The original entry #{} was recorded at your station by {}. The attempt was denied.\n\n-- lostfound template v{}",
                dir,
                attempt.id,
                original.subject_name,
                a.name,
                a.nid,
                a.phone,
                a.email,
                a.police_station_id,
                original.id,
                original.uploader.name,
                TEMPLATE_VERSION,
            ),
            related_entry_ids: related,
        },
    ])
}

/// Request to a police station to verify an uploader and record the diary.
pub fn verification_request_draft(
    authority: &dyn IdentityAuthority,
    case: &VerificationCase,
    entry: &Entry,
) -> Result<NotificationDraft, NotificationError> {
    let to = station_email(authority, &case.station_id)?;
    let u = &entry.uploader;
    Ok(NotificationDraft {
        kind: NotificationKind::VerificationRequest,
        to_email: to,
        subject: format!("Verification request #{} ({})", case.case_id, entry.side.directory()),
        body: format!(
            "Please verify the uploader of {} entry #{} and record the diary.\n\
             Person: {}\nUploader: {}\nNID: {}\nPhone: {}\nEmail: {}\nAddress: {}\n\
             Decide via POST /api/verifications/{}/decision.\n\n-- lostfound template v{}",
            entry.side.as_str().to_lowercase(),
            entry.id,
            entry.subject_name,
            u.name,
            u.nid,
            u.phone,
            u.email,
            u.address,
            case.case_id,
            TEMPLATE_VERSION,
        ),
        related_entry_ids: vec![entry.id],
    })
}

fn emit_all(outbox: &dyn Outbox, drafts: Vec<NotificationDraft>) -> Result<Vec<Notification>, NotificationError> {
    drafts.into_iter().map(|d| outbox.append(d)).collect()
}

pub fn notify_match(
    outbox: &dyn Outbox,
    authority: &dyn IdentityAuthority,
    new_entry: &Entry,
    prior_entry: &Entry,
) -> Result<Vec<Notification>, NotificationError> {
    emit_all(outbox, match_drafts(authority, new_entry, prior_entry)?)
}

pub fn notify_duplicate_attempt(
    outbox: &dyn Outbox,
    authority: &dyn IdentityAuthority,
    original: &Entry,
    attempt: &Entry,
) -> Result<Vec<Notification>, NotificationError> {
    emit_all(outbox, duplicate_drafts(authority, original, attempt)?)
}

pub fn read_outbox(
    outbox: &dyn Outbox,
    kind: Option<NotificationKind>,
) -> Result<Vec<Notification>, NotificationError> {
    outbox.read(kind)
}

/// Something that can put a notification in front of its recipient.
pub trait MailTransport {
    fn deliver(&self, notification: &Notification) -> Result<(), NotificationError>;
}

/// Plain SMTP relay, intended for a local MTA.
pub struct SmtpRelay {
    from: lettre::message::Mailbox,
    transport: lettre::SmtpTransport,
}

impl SmtpRelay {
    pub fn new(
        host: &str,
        port: u16,
        from: &str,
        credentials: Option<(String, String)>,
    ) -> Result<Self, NotificationError> {
        let from = from
            .parse()
            .map_err(|e| NotificationError::OutboxFailure(format!("invalid sender {from:?}: {e}")))?;
        let mut builder = lettre::SmtpTransport::builder_dangerous(host).port(port);
        if let Some((user, pass)) = credentials {
            builder = builder.credentials(lettre::transport::smtp::authentication::Credentials::new(user, pass));
        }
        Ok(Self {
            from,
            transport: builder.build(),
        })
    }
}

impl MailTransport for SmtpRelay {
    fn deliver(&self, n: &Notification) -> Result<(), NotificationError> {
        use lettre::Transport as _;
        let fail = |message: String| NotificationError::Delivery { id: n.id, message };
        let to = n.to_email.parse().map_err(|e| fail(format!("recipient: {e}")))?;
        let message = lettre::Message::builder()
            .from(self.from.clone())
            .to(to)
            .subject(n.subject.clone())
            .body(n.body.clone())
            .map_err(|e| fail(e.to_string()))?;
        self.transport.send(&message).map_err(|e| fail(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DrainReport {
    pub delivered: usize,
    pub failed: usize,
}

#[derive(Serialize, Deserialize)]
struct Delivered {
    id: NotificationId,
}

/// Sends every notification not yet recorded in `outbox.delivered`.
///
/// A notification is marked only after the transport accepts it, so a crash
/// in between can cause a resend but never a loss.
pub fn drain_outbox(
    outbox: &dyn Outbox,
    transport: &dyn MailTransport,
    dir: &Path,
) -> Result<DrainReport, NotificationError> {
    let path = dir.join(DELIVERED_LOG);
    let done: BTreeSet<NotificationId> = jsonl::replay::<Delivered>(&path)?.into_iter().map(|d| d.id).collect();
    let mut cursor = JsonlWriter::open(&path)?;
    let mut report = DrainReport::default();
    for n in outbox.read(None)?.into_iter().filter(|n| !done.contains(&n.id)) {
        match transport.deliver(&n) {
            Ok(()) => {
                cursor.append(&Delivered { id: n.id })?;
                report.delivered += 1;
            }
            Err(e) => {
                tracing::warn!(id = %n.id, error = %e, "notification delivery failed; will retry");
                report.failed += 1;
            }
        }
    }
    Ok(report)
}
