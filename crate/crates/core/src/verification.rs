//! Administrative processing: who may file, and the police decision.
//!
//! Citizen and police-station registries are loaded from JSON fixtures and
//! consulted through [`IdentityAuthority`], so a client for a real national
//! registry can replace them. Police decisions are recorded as
//! [`VerificationCase`]s in `cases.log`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError, JsonlWriter};
use crate::registry::EntryId;

pub const CASES_LOG: &str = "cases.log";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitizenRecord {
    pub nid: String,
    pub full_name: String,
    pub phone: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoliceStation {
    pub station_id: String,
    pub name: String,
    pub email: String,
}

#[derive(Debug, thiserror::Error)]
pub enum VerificationError {
    #[error("identity registry unavailable: {0}")]
    RegistryUnavailable(String),
    #[error("unknown verification case {0}")]
    UnknownCase(CaseId),
    #[error("verification case {0} has already been decided")]
    AlreadyDecided(CaseId),
    #[error("invalid police station {0:?}")]
    InvalidStation(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl From<JsonlError> for VerificationError {
    fn from(e: JsonlError) -> Self {
        VerificationError::Storage(e.to_string())
    }
}

/// Lookup interface over the national citizen registry and the list of
/// police stations.
pub trait IdentityAuthority: Send + Sync {
    fn citizen(&self, nid: &str) -> Result<Option<CitizenRecord>, VerificationError>;
    fn station(&self, station_id: &str) -> Result<Option<PoliceStation>, VerificationError>;
}

pub fn validate_police_station(
    authority: &dyn IdentityAuthority,
    station_id: &str,
) -> Result<bool, VerificationError> {
    if station_id.is_empty() {
        return Ok(false);
    }
    Ok(authority.station(station_id)?.is_some())
}

/// True iff the NID is registered and name and phone agree with the record.
/// Names compare case-insensitively (surrounding whitespace ignored), phones
/// by their digits only.
pub fn validate_citizen(
    authority: &dyn IdentityAuthority,
    nid: &str,
    name: &str,
    phone: &str,
) -> Result<bool, VerificationError> {
    let Some(record) = authority.citizen(nid)? else {
        return Ok(false);
    };
    Ok(normalize_name(&record.full_name) == normalize_name(name)
        && digits(&record.phone) == digits(phone)
        && !digits(phone).is_empty())
}

fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

fn digits(phone: &str) -> String {
    phone.chars().filter(char::is_ascii_digit).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed record at line {line}, column {column}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: duplicate nid {nid:?}")]
    DuplicateNid { path: PathBuf, nid: String },
    #[error("{path}: duplicate station_id {station_id:?}")]
    DuplicateStation { path: PathBuf, station_id: String },
    #[error("{path}: invalid record {index}: {message}")]
    Invalid {
        path: PathBuf,
        index: usize,
        message: String,
    },
}

fn read_array<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, FixtureError> {
    let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_array(path, &text)
}

fn parse_array<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>, FixtureError> {
    serde_json::from_str(text).map_err(|e| FixtureError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Citizen and station registries held in memory, loaded from
/// `citizens.json` and `police_stations.json`.
#[derive(Debug, Clone, Default)]
pub struct FixtureAuthority {
    citizens: HashMap<String, CitizenRecord>,
    stations: BTreeMap<String, PoliceStation>,
}

impl FixtureAuthority {
    pub fn load(citizens_path: &Path, stations_path: &Path) -> Result<Self, FixtureError> {
        let citizens = read_array(citizens_path)?;
        let stations = read_array(stations_path)?;
        Self::from_records(citizens_path, citizens, stations_path, stations)
    }

    /// Parses fixture text already in memory; paths are only used in errors.
    pub fn from_json(
        citizens_path: &Path,
        citizens_json: &str,
        stations_path: &Path,
        stations_json: &str,
    ) -> Result<Self, FixtureError> {
        let citizens = parse_array(citizens_path, citizens_json)?;
        let stations = parse_array(stations_path, stations_json)?;
        Self::from_records(citizens_path, citizens, stations_path, stations)
    }

    fn from_records(
        citizens_path: &Path,
        citizens: Vec<CitizenRecord>,
        stations_path: &Path,
        stations: Vec<PoliceStation>,
    ) -> Result<Self, FixtureError> {
        let mut out = Self::default();
        for (index, c) in citizens.into_iter().enumerate() {
            if c.nid.trim().is_empty() {
                return Err(FixtureError::Invalid {
                    path: citizens_path.to_path_buf(),
                    index,
                    message: "nid must not be empty".into(),
                });
            }
            if out.citizens.contains_key(&c.nid) {
                return Err(FixtureError::DuplicateNid {
                    path: citizens_path.to_path_buf(),
                    nid: c.nid,
                });
            }
            out.citizens.insert(c.nid.clone(), c);
        }
        for (index, s) in stations.into_iter().enumerate() {
            if s.station_id.trim().is_empty() || s.email.trim().is_empty() {
                return Err(FixtureError::Invalid {
                    path: stations_path.to_path_buf(),
                    index,
                    message: "station_id and email must not be empty".into(),
                });
            }
            if out.stations.contains_key(&s.station_id) {
                return Err(FixtureError::DuplicateStation {
                    path: stations_path.to_path_buf(),
                    station_id: s.station_id,
                });
            }
            out.stations.insert(s.station_id.clone(), s);
        }
        Ok(out)
    }

    pub fn citizen_count(&self) -> usize {
        self.citizens.len()
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn stations(&self) -> impl Iterator<Item = &PoliceStation> {
        self.stations.values()
    }
}

impl IdentityAuthority for FixtureAuthority {
    fn citizen(&self, nid: &str) -> Result<Option<CitizenRecord>, VerificationError> {
        Ok(self.citizens.get(nid).cloned())
    }

    fn station(&self, station_id: &str) -> Result<Option<PoliceStation>, VerificationError> {
        Ok(self.stations.get(station_id).cloned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaseId(pub u64);

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for CaseId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(CaseId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaseState {
    Pending,
    Approved,
    Denied,
}

impl FromStr for CaseState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PENDING" => Ok(CaseState::Pending),
            "APPROVED" => Ok(CaseState::Approved),
            "DENIED" => Ok(CaseState::Denied),
            _ => Err(format!("unknown case state {s:?}")),
        }
    }
}

/// A police decision waiting to happen, or one that has happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationCase {
    pub case_id: CaseId,
    pub entry_id: EntryId,
    pub station_id: String,
    pub state: CaseState,
    pub opened_at: DateTime<Utc>,
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum CaseEvent {
    Opened {
        at: DateTime<Utc>,
        case_id: CaseId,
        entry_id: EntryId,
        station_id: String,
    },
    Decided {
        at: DateTime<Utc>,
        case_id: CaseId,
        approve: bool,
    },
}

#[derive(Debug, Default)]
struct CaseIndex {
    cases: BTreeMap<CaseId, VerificationCase>,
}

impl CaseIndex {
    fn apply(&mut self, event: CaseEvent) -> Result<(), VerificationError> {
        match event {
            CaseEvent::Opened {
                at,
                case_id,
                entry_id,
                station_id,
            } => {
                self.cases.insert(
                    case_id,
                    VerificationCase {
                        case_id,
                        entry_id,
                        station_id,
                        state: CaseState::Pending,
                        opened_at: at,
                        decided_at: None,
                    },
                );
            }
            CaseEvent::Decided { at, case_id, approve } => {
                let case = self
                    .cases
                    .get_mut(&case_id)
                    .ok_or(VerificationError::UnknownCase(case_id))?;
                if case.state != CaseState::Pending {
                    return Err(VerificationError::AlreadyDecided(case_id));
                }
                case.state = if approve {
                    CaseState::Approved
                } else {
                    CaseState::Denied
                };
                case.decided_at = Some(at);
            }
        }
        Ok(())
    }
}

/// Durable record of verification cases. Decisions are serialized: of several
/// concurrent decisions on one case exactly one succeeds.
#[derive(Debug)]
pub struct CaseStore {
    inner: Mutex<(CaseIndex, JsonlWriter)>,
}

impl CaseStore {
    pub fn open(dir: &Path) -> Result<Self, VerificationError> {
        fs::create_dir_all(dir).map_err(|e| VerificationError::Storage(e.to_string()))?;
        let path = dir.join(CASES_LOG);
        let mut index = CaseIndex::default();
        for event in jsonl::replay::<CaseEvent>(&path)? {
            index.apply(event)?;
        }
        Ok(Self {
            inner: Mutex::new((index, JsonlWriter::open(&path)?)),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, (CaseIndex, JsonlWriter)> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Records a new PENDING case. Callers check the entry and station first.
    pub fn open_case(&self, entry_id: EntryId, station_id: &str) -> Result<VerificationCase, VerificationError> {
        let mut guard = self.lock();
        let (index, log) = &mut *guard;
        let case_id = CaseId(index.cases.keys().next_back().map_or(1, |c| c.0 + 1));
        let event = CaseEvent::Opened {
            at: Utc::now(),
            case_id,
            entry_id,
            station_id: station_id.to_string(),
        };
        log.append(&event)?;
        index.apply(event)?;
        Ok(index.cases[&case_id].clone())
    }

    pub fn decide(&self, case_id: CaseId, approve: bool) -> Result<VerificationCase, VerificationError> {
        let mut guard = self.lock();
        let (index, log) = &mut *guard;
        match index.cases.get(&case_id) {
            None => return Err(VerificationError::UnknownCase(case_id)),
            Some(c) if c.state != CaseState::Pending => return Err(VerificationError::AlreadyDecided(case_id)),
            Some(_) => {}
        }
        let event = CaseEvent::Decided {
            at: Utc::now(),
            case_id,
            approve,
        };
        log.append(&event)?;
        index.apply(event)?;
        Ok(index.cases[&case_id].clone())
    }

    pub fn get(&self, case_id: CaseId) -> Option<VerificationCase> {
        self.lock().0.cases.get(&case_id).cloned()
    }

    /// Cases referencing an entry, oldest first.
    pub fn for_entry(&self, entry_id: EntryId) -> Vec<VerificationCase> {
        self.lock()
            .0
            .cases
            .values()
            .filter(|c| c.entry_id == entry_id)
            .cloned()
            .collect()
    }

    pub fn list(&self, state: Option<CaseState>) -> Vec<VerificationCase> {
        self.lock()
            .0
            .cases
            .values()
            .filter(|c| state.is_none_or(|s| c.state == s))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> FixtureAuthority {
        FixtureAuthority::from_json(
            Path::new("citizens.json"),
            r#"[{"nid":"111111","full_name":"Abdul Karim","phone":"+880 1711-000001"},
                {"nid":"222222","full_name":"Nasrin Akter","phone":"01811000002"}]"#,
            Path::new("police_stations.json"),
            r#"[{"station_id":"PS-DHK-01","name":"Mirpur","email":"mirpur@police.example"}]"#,
        )
        .unwrap()
    }

    #[test]
    fn station_membership() {
        let a = demo();
        assert!(validate_police_station(&a, "PS-DHK-01").unwrap());
        assert!(!validate_police_station(&a, "PS-XX-99").unwrap());
        assert!(!validate_police_station(&a, "").unwrap());
    }

    #[test]
    fn citizen_matching_rules() {
        let a = demo();
        assert!(validate_citizen(&a, "111111", "Abdul Karim", "+880 1711-000001").unwrap());
        assert!(validate_citizen(&a, "111111", "  abdul KARIM ", "8801711000001").unwrap());
        assert!(!validate_citizen(&a, "99999", "Abdul Karim", "+880 1711-000001").unwrap());
        assert!(!validate_citizen(&a, "111111", "Abdul Karim", "01711000009").unwrap());
        assert!(!validate_citizen(&a, "111111", "Abdul Rahim", "+880 1711-000001").unwrap());
    }

    #[test]
    fn fixture_errors_name_the_problem() {
        let err = FixtureAuthority::from_json(
            Path::new("c.json"),
            r#"[{"nid":"1","full_name":"A","phone":"1"},{"nid":"1","full_name":"B","phone":"2"}]"#,
            Path::new("s.json"),
            "[]",
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate nid \"1\""), "{err}");

        let err = FixtureAuthority::from_json(
            Path::new("c.json"),
            "[\n{\"nid\":\"1\",\"full_name\":\"A\",\"phone\":\"1\"},\n{\"nid\":2}\n]",
            Path::new("s.json"),
            "[]",
        )
        .unwrap_err();
        assert!(matches!(err, FixtureError::Malformed { line: 3, .. }), "{err}");

        let empty = FixtureAuthority::from_json(Path::new("c"), "[]", Path::new("s"), "[]").unwrap();
        assert_eq!((empty.citizen_count(), empty.station_count()), (0, 0));
    }

    #[test]
    fn case_lifecycle_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store = CaseStore::open(dir.path()).unwrap();
        let c1 = store.open_case(EntryId(1), "PS-DHK-01").unwrap();
        let c2 = store.open_case(EntryId(2), "PS-DHK-01").unwrap();
        assert_eq!((c1.case_id, c1.state, c1.decided_at), (CaseId(1), CaseState::Pending, None));
        let d = store.decide(c1.case_id, true).unwrap();
        assert_eq!(d.state, CaseState::Approved);
        assert!(d.decided_at.is_some());
        assert!(matches!(store.decide(c1.case_id, false), Err(VerificationError::AlreadyDecided(_))));
        assert!(matches!(store.decide(CaseId(9), true), Err(VerificationError::UnknownCase(_))));
        store.decide(c2.case_id, false).unwrap();
        let before = store.list(None);
        drop(store);

        let store = CaseStore::open(dir.path()).unwrap();
        assert_eq!(store.list(None), before);
        assert!(store.list(Some(CaseState::Pending)).is_empty());
        assert_eq!(store.for_entry(EntryId(2))[0].state, CaseState::Denied);
        assert_eq!(store.open_case(EntryId(3), "PS-DHK-01").unwrap().case_id, CaseId(3));
    }

    #[test]
    fn concurrent_decisions_have_one_winner() {
        let dir = tempfile::tempdir().unwrap();
        let store = CaseStore::open(dir.path()).unwrap();
        let case = store.open_case(EntryId(1), "PS-DHK-01").unwrap();
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let store = &store;
                    s.spawn(move || store.decide(case.case_id, i % 2 == 0))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results
            .iter()
            .filter_map(|r| r.as_ref().err())
            .all(|e| matches!(e, VerificationError::AlreadyDecided(_))));
    }
}
