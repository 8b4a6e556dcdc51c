//! Replays of the four reference cases.
//!
//! | Case  | Sequence                                             | Expected                                  |
//! |-------|------------------------------------------------------|-------------------------------------------|
//! | CASE1 | missing entry, then finding entry of the same person | match; family + family's station notified |
//! | CASE2 | finding entry, then missing entry                    | match; finder + finder's station notified |
//! | CASE3 | missing entry, then the same missing entry again     | duplicate denied; two alerts              |
//! | CASE4 | missing entry with an unregistered NID (99999)       | rejected; nothing activated               |
//!
//! A scenario talks to the system through a [`Driver`], either in-process
//! ([`LocalDriver`]) or over HTTP ([`HttpDriver`]). Reports contain no
//! timestamps and ids are sequential, so a run against a fresh data directory
//! is byte-for-byte reproducible.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::api::{self, CaseView, DecisionBody};
use crate::embedding::{FaceImage, SyntheticFace, SyntheticProvider};
use crate::matching::{Disposition, EntryReport, Pipeline, PipelineConfig, Submission, SubmissionOutcome};
use crate::messages;
use crate::notification::{Notification, NotificationKind};
use crate::registry::{EntryId, EntryStatus, Side, UploaderInfo};
use crate::verification::{CaseId, CaseState, FixtureAuthority, IdentityAuthority};

/// Demo citizen registry shipped with the crate.
pub const DEMO_CITIZENS_JSON: &str = include_str!("../fixtures/citizens.json");
/// Demo police-station registry shipped with the crate.
pub const DEMO_STATIONS_JSON: &str = include_str!("../fixtures/police_stations.json");

pub fn demo_authority() -> FixtureAuthority {
    FixtureAuthority::from_json(
        Path::new("fixtures/citizens.json"),
        DEMO_CITIZENS_JSON,
        Path::new("fixtures/police_stations.json"),
        DEMO_STATIONS_JSON,
    )
    .expect("shipped fixtures are valid")
}

/// Family member of the missing person, registered at PS-DHK-01.
pub fn demo_family() -> UploaderInfo {
    UploaderInfo {
        name: "Abdul Karim".into(),
        nid: "111111".into(),
        phone: "+880 1711-000001".into(),
        email: "karim.family@example.com".into(),
        address: "House 12, Road 3, Mirpur, Dhaka".into(),
        police_station_id: "PS-DHK-01".into(),
    }
}

/// A finder registered at PS-CTG-01.
pub fn demo_finder() -> UploaderInfo {
    UploaderInfo {
        name: "Nasrin Akter".into(),
        nid: "222222".into(),
        phone: "+880 1811-000002".into(),
        email: "nasrin.finder@example.com".into(),
        address: "Kotwali, Chattogram".into(),
        police_station_id: "PS-CTG-01".into(),
    }
}

/// Someone presenting an NID that no citizen holds.
pub fn demo_intruder() -> UploaderInfo {
    UploaderInfo {
        name: "Unknown Person".into(),
        nid: "99999".into(),
        phone: "+880 1999-999999".into(),
        email: "intruder@example.com".into(),
        address: "Unknown".into(),
        police_station_id: "PS-DHK-01".into(),
    }
}

pub fn synthetic_submission(
    side: Side,
    uploader: UploaderInfo,
    subject_name: &str,
    identity_label: &str,
    variant: &str,
    noise_seed: u64,
) -> Submission {
    Submission {
        side,
        uploader,
        subject_name: subject_name.into(),
        photo: FaceImage::synthetic(&SyntheticFace::new(identity_label, variant, noise_seed)),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error("service unreachable: {0}")]
    Unreachable(String),
    #[error("unexpected HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("{0}")]
    Failed(String),
}

/// The operations a scenario needs from the system under test.
pub trait Driver {
    fn submit(&self, submission: &Submission) -> Result<SubmissionOutcome, DriverError>;
    fn pending_cases(&self) -> Result<Vec<CaseView>, DriverError>;
    fn decide(&self, case_id: CaseId, approve: bool) -> Result<SubmissionOutcome, DriverError>;
    fn entry(&self, id: EntryId) -> Result<EntryReport, DriverError>;
    fn outbox(&self, kind: Option<NotificationKind>) -> Result<Vec<Notification>, DriverError>;
}

/// Drives a [`Pipeline`] directly.
pub struct LocalDriver<'a>(pub &'a Pipeline);

fn failed(e: impl fmt::Display) -> DriverError {
    DriverError::Failed(e.to_string())
}

impl Driver for LocalDriver<'_> {
    fn submit(&self, submission: &Submission) -> Result<SubmissionOutcome, DriverError> {
        self.0.submit(submission.clone()).map_err(failed)
    }

    fn pending_cases(&self) -> Result<Vec<CaseView>, DriverError> {
        Ok(api::case_views(self.0, Some(CaseState::Pending)))
    }

    fn decide(&self, case_id: CaseId, approve: bool) -> Result<SubmissionOutcome, DriverError> {
        self.0.decide_case(case_id, approve).map_err(failed)
    }

    fn entry(&self, id: EntryId) -> Result<EntryReport, DriverError> {
        self.0.entry_report(id).map_err(failed)
    }

    fn outbox(&self, kind: Option<NotificationKind>) -> Result<Vec<Notification>, DriverError> {
        self.0.read_outbox(kind).map_err(failed)
    }
}

/// Drives a running service over its HTTP API.
pub struct HttpDriver {
    base: String,
    client: reqwest::blocking::Client,
}

impl HttpDriver {
    pub fn new(base_url: &str) -> Result<Self, DriverError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(failed)?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }

    fn send<T: serde::de::DeserializeOwned>(
        &self,
        req: reqwest::blocking::RequestBuilder,
        ok: &[u16],
    ) -> Result<T, DriverError> {
        let resp = req.send().map_err(|e| {
            if e.is_connect() || e.is_timeout() {
                DriverError::Unreachable(e.to_string())
            } else {
                failed(e)
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(failed)?;
        if !ok.contains(&status) {
            return Err(DriverError::Http { status, body });
        }
        serde_json::from_str(&body).map_err(failed)
    }
}

impl Driver for HttpDriver {
    fn submit(&self, submission: &Submission) -> Result<SubmissionOutcome, DriverError> {
        self.send(
            self.client.post(format!("{}/api/entries", self.base)).json(submission),
            &[201, 202, 422],
        )
    }

    fn pending_cases(&self) -> Result<Vec<CaseView>, DriverError> {
        self.send(
            self.client.get(format!("{}/api/verifications?state=PENDING", self.base)),
            &[200],
        )
    }

    fn decide(&self, case_id: CaseId, approve: bool) -> Result<SubmissionOutcome, DriverError> {
        self.send(
            self.client
                .post(format!("{}/api/verifications/{case_id}/decision", self.base))
                .json(&DecisionBody { approve }),
            &[200],
        )
    }

    fn entry(&self, id: EntryId) -> Result<EntryReport, DriverError> {
        self.send(self.client.get(format!("{}/api/entries/{id}", self.base)), &[200])
    }

    fn outbox(&self, kind: Option<NotificationKind>) -> Result<Vec<Notification>, DriverError> {
        let url = match kind {
            Some(k) => format!("{}/api/outbox?kind={k}", self.base),
            None => format!("{}/api/outbox", self.base),
        };
        self.send(self.client.get(url), &[200])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CaseName {
    Case1,
    Case2,
    Case3,
    Case4,
}

impl CaseName {
    pub const ALL: [CaseName; 4] = [CaseName::Case1, CaseName::Case2, CaseName::Case3, CaseName::Case4];
}

impl fmt::Display for CaseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseName::Case1 => "CASE1",
            CaseName::Case2 => "CASE2",
            CaseName::Case3 => "CASE3",
            CaseName::Case4 => "CASE4",
        })
    }
}

impl FromStr for CaseName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CaseName::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scenario {s:?}, expected case1..case4"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub action: String,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub case_name: CaseName,
    pub manual_verify: bool,
    pub steps: Vec<Step>,
    pub passed: bool,
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {}{}",
            self.case_name,
            if self.passed { "PASS" } else { "FAIL" },
            if self.manual_verify { " (manual verification)" } else { "" }
        )?;
        for s in &self.steps {
            writeln!(f, "  [{}] {}", if s.pass { "ok" } else { "FAIL" }, s.action)?;
            if !s.pass {
                writeln!(f, "       expected: {}", s.expected)?;
                writeln!(f, "       observed: {}", s.observed)?;
            }
        }
        Ok(())
    }
}

struct Run<'d> {
    driver: &'d dyn Driver,
    manual_verify: bool,
    steps: Vec<Step>,
    entries: Vec<EntryId>,
}

impl Run<'_> {
    fn check(&mut self, action: impl Into<String>, expected: impl fmt::Display, observed: impl fmt::Display) {
        let (expected, observed) = (expected.to_string(), observed.to_string());
        self.steps.push(Step {
            action: action.into(),
            pass: expected == observed,
            expected,
            observed,
        });
    }

    /// Submits, and in manual mode approves the resulting case as the police would.
    fn file(&mut self, action: &str, submission: Submission) -> Result<SubmissionOutcome, DriverError> {
        let outcome = self.driver.submit(&submission)?;
        if let Some(id) = outcome.entry_id {
            self.entries.push(id);
        }
        if !self.manual_verify {
            return Ok(outcome);
        }
        if outcome.disposition != Disposition::PendingVerification {
            return Ok(outcome);
        }
        let pending = self.driver.pending_cases()?;
        let case = pending.iter().find(|c| Some(c.case.entry_id) == outcome.entry_id);
        self.check(
            format!("{action}: case is waiting in the police queue"),
            "PENDING",
            case.map_or("absent".to_string(), |c| format!("{:?}", c.case.state).to_uppercase()),
        );
        match case {
            Some(c) => self.driver.decide(c.case.case_id, true),
            None => Ok(outcome),
        }
    }

    fn outcome_line(o: &SubmissionOutcome) -> String {
        format!("{} | {}", o.disposition.as_str(), o.message)
    }

    fn count_active(&self, side: Side) -> Result<usize, DriverError> {
        let mut n = 0;
        for id in &self.entries {
            let r = self.driver.entry(*id)?;
            if r.side == side && r.status == EntryStatus::Active {
                n += 1;
            }
        }
        Ok(n)
    }

    fn kinds(list: &[Notification]) -> String {
        list.iter().map(|n| n.kind.as_str()).collect::<Vec<_>>().join(",")
    }

    fn recipients(list: &[Notification]) -> String {
        list.iter().map(|n| n.to_email.as_str()).collect::<Vec<_>>().join(",")
    }
}

fn station_email(authority: &dyn IdentityAuthority, uploader: &UploaderInfo) -> String {
    authority
        .station(&uploader.police_station_id)
        .ok()
        .flatten()
        .map(|s| s.email)
        .unwrap_or_default()
}

fn contact_line(u: &UploaderInfo) -> String {
    format!("{} / {} / {}", u.name, u.phone, u.email)
}

/// Runs one case against `driver`, which must front a fresh system loaded
/// with the demo fixtures.
pub fn run_scenario(case: CaseName, driver: &dyn Driver, manual_verify: bool) -> Result<ScenarioReport, DriverError> {
    let authority = demo_authority();
    let mut run = Run {
        driver,
        manual_verify,
        steps: Vec::new(),
        entries: Vec::new(),
    };
    let subject = "Rafi Karim";
    let no_match = format!("{} | {}", Disposition::StoredNoMatch.as_str(), messages::SAVED_FOR_FURTHER_USAGE);

    match case {
        CaseName::Case1 | CaseName::Case2 => {
            let (first_side, first_up, second_side, second_up) = if case == CaseName::Case1 {
                (Side::Missing, demo_family(), Side::Finding, demo_finder())
            } else {
                (Side::Finding, demo_finder(), Side::Missing, demo_family())
            };
            let first_action = format!("{} files a {} entry", first_up.name, first_side.as_str().to_lowercase());
            let first = run.file(
                &first_action,
                synthetic_submission(first_side, first_up.clone(), subject, "I1", "v1", 7),
            )?;
            run.check(&first_action, &no_match, Run::outcome_line(&first));

            let second_action = format!("{} files a {} entry", second_up.name, second_side.as_str().to_lowercase());
            let second = run.file(
                &second_action,
                synthetic_submission(second_side, second_up.clone(), subject, "I1", "v2", 9),
            )?;
            run.check(
                &second_action,
                format!("{} | {}", Disposition::Matched.as_str(), messages::MATCH_FOUND),
                Run::outcome_line(&second),
            );
            run.check(
                "response shows the earlier uploader's contact",
                contact_line(&first_up),
                second
                    .other_side_contact
                    .as_ref()
                    .map_or("none".into(), |c| format!("{} / {} / {}", c.name, c.phone, c.email)),
            );

            let (a, b) = (first.entry_id, second.entry_id);
            let link = |id: Option<EntryId>| -> Result<String, DriverError> {
                Ok(match id {
                    Some(id) => {
                        let r = driver.entry(id)?;
                        format!(
                            "{}->{}",
                            r.status,
                            r.match_result.map_or("none".into(), |m| m.matched_entry_id.to_string())
                        )
                    }
                    None => "unrecorded".into(),
                })
            };
            let show = |id: Option<EntryId>| id.map_or("?".into(), |i| i.to_string());
            run.check(
                "both entries are MATCHED with reciprocal links",
                format!("MATCHED->{} MATCHED->{}", show(b), show(a)),
                format!("{} {}", link(a)?, link(b)?),
            );

            let all = driver.outbox(None)?;
            run.check(
                "outbox holds two verification requests then the match pair",
                "VERIFICATION_REQUEST,VERIFICATION_REQUEST,MATCH_TO_PARTY,MATCH_TO_POLICE",
                Run::kinds(&all),
            );
            let party = driver.outbox(Some(NotificationKind::MatchToParty))?;
            run.check(
                format!("{} is emailed", first_up.name),
                &first_up.email,
                Run::recipients(&party),
            );
            let police = driver.outbox(Some(NotificationKind::MatchToPolice))?;
            run.check(
                format!("{}'s police station is emailed", first_up.name),
                station_email(&authority, &first_up),
                Run::recipients(&police),
            );
            run.check(
                "emails carry the later uploader's phone and email",
                "true",
                party
                    .iter()
                    .chain(&police)
                    .all(|n| n.body.contains(&second_up.phone) && n.body.contains(&second_up.email)),
            );
        }
        CaseName::Case3 => {
            let family = demo_family();
            let first = run.file(
                "family files a missing entry",
                synthetic_submission(Side::Missing, family.clone(), subject, "I1", "v1", 7),
            )?;
            run.check("family files a missing entry", &no_match, Run::outcome_line(&first));
            let again = run.file(
                "NID 111111 files the same missing person again",
                synthetic_submission(Side::Missing, family.clone(), subject, "I1", "v3", 11),
            )?;
            run.check(
                "NID 111111 files the same missing person again",
                format!("{} | {}", Disposition::RejectedDuplicate.as_str(), messages::ALREADY_LISTED),
                Run::outcome_line(&again),
            );
            let alerts: Vec<Notification> = driver
                .outbox(None)?
                .into_iter()
                .filter(|n| {
                    matches!(
                        n.kind,
                        NotificationKind::DuplicateAlertToParty | NotificationKind::DuplicateAlertToPolice
                    )
                })
                .collect();
            run.check(
                "family and their station are alerted",
                format!(
                    "DUPLICATE_ALERT_TO_PARTY->{},DUPLICATE_ALERT_TO_POLICE->{}",
                    family.email,
                    station_email(&authority, &family)
                ),
                alerts
                    .iter()
                    .map(|n| format!("{}->{}", n.kind, n.to_email))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            run.check("LostPeople still holds one active entry", 1, run.count_active(Side::Missing)?);
            let matches = driver.outbox(Some(NotificationKind::MatchToParty))?.len()
                + driver.outbox(Some(NotificationKind::MatchToPolice))?.len();
            run.check("no match notifications", 0, matches);
        }
        CaseName::Case4 => {
            let out = run.file(
                "intruder files with NID 99999",
                synthetic_submission(Side::Missing, demo_intruder(), subject, "I1", "v1", 7),
            )?;
            run.check(
                "intruder files with NID 99999",
                format!("{} | {}", Disposition::RejectedInvalidInfo.as_str(), messages::INVALID_INFO),
                Run::outcome_line(&out),
            );
            let active = run.count_active(Side::Missing)? + run.count_active(Side::Finding)?;
            run.check("no entry is active in either directory", 0, active);
            let alerts = driver
                .outbox(None)?
                .iter()
                .filter(|n| n.kind != NotificationKind::VerificationRequest)
                .count();
            run.check("no match or duplicate notifications", 0, alerts);
            let requests = driver.outbox(Some(NotificationKind::VerificationRequest))?.len();
            run.check("police are never asked to verify the intruder", 0, requests);
        }
    }

    let passed = run.steps.iter().all(|s| s.pass);
    Ok(ScenarioReport {
        case_name: case,
        manual_verify,
        steps: run.steps,
        passed,
    })
}

/// A fresh in-process system on the demo fixtures, in a temporary directory.
pub struct Sandbox {
    pub pipeline: Arc<Pipeline>,
    _dir: tempfile::TempDir,
}

impl Sandbox {
    pub fn new(auto_approve: bool) -> Result<Self, DriverError> {
        let dir = tempfile::tempdir().map_err(failed)?;
        let pipeline = Pipeline::open(
            dir.path(),
            PipelineConfig {
                auto_approve,
                ..PipelineConfig::default()
            },
            Arc::new(SyntheticProvider::default()),
            Arc::new(demo_authority()),
        )
        .map_err(failed)?;
        Ok(Self {
            pipeline: Arc::new(pipeline),
            _dir: dir,
        })
    }
}

/// Runs a case against a fresh embedded HTTP service.
pub fn run_embedded(case: CaseName, manual_verify: bool) -> Result<ScenarioReport, DriverError> {
    let sandbox = Sandbox::new(!manual_verify)?;
    let server = api::ServerHandle::spawn(api::app(sandbox.pipeline.clone(), None), "127.0.0.1:0").map_err(failed)?;
    let driver = HttpDriver::new(&server.base_url())?;
    let report = run_scenario(case, &driver, manual_verify);
    server.shutdown();
    report
}
