//! Access-event data model: validation, JSON Lines parsing with per-identity
//! ordering enforcement, per-identity running state, and salted
//! pseudonymization of identifiers written to persisted artifacts.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fmt;
use std::io::BufRead;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Login locations kept per identity; oldest entries are evicted.
pub const LOGIN_HISTORY_CAP: usize = 100;

/// A point on the globe in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// What the identity attempted to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Login,
    Read,
    Write,
    Admin,
}

/// One authenticated action attempt: who, when, what, from where, on which device.
///
/// Wire format is one JSON object per line; `lat`/`lon` are top-level keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub event_id: String,
    pub identity_id: String,
    /// UTC seconds since epoch.
    pub timestamp: i64,
    pub resource_id: String,
    pub action: Action,
    pub lat: f64,
    pub lon: f64,
    pub device_id: String,
    pub source_ip: String,
    pub success: bool,
}

impl AccessEvent {
    pub fn geo(&self) -> GeoPoint {
        GeoPoint::new(self.lat, self.lon)
    }
}

/// A named invariant violation found by [`validate_event`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    LatitudeOutOfRange,
    LongitudeOutOfRange,
    NonPositiveTimestamp,
    EmptyIdentityId,
    EmptyResourceId,
    EmptyDeviceId,
    InvalidSourceIp,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Violation::LatitudeOutOfRange => "latitude out of range",
            Violation::LongitudeOutOfRange => "longitude out of range",
            Violation::NonPositiveTimestamp => "timestamp must be positive",
            Violation::EmptyIdentityId => "identity_id is empty",
            Violation::EmptyResourceId => "resource_id is empty",
            Violation::EmptyDeviceId => "device_id is empty",
            Violation::InvalidSourceIp => "source_ip is not an IPv4 dotted quad",
        };
        f.write_str(msg)
    }
}

/// Checks every per-event invariant; total over all inputs.
///
/// Returns an empty list when the event is well-formed, otherwise one entry
/// per violated invariant. Violations are data, not faults.
pub fn validate_event(event: &AccessEvent) -> Vec<Violation> {
    let mut violations = Vec::new();
    if !(-90.0..=90.0).contains(&event.lat) || !event.lat.is_finite() {
        violations.push(Violation::LatitudeOutOfRange);
    }
    if !(-180.0..=180.0).contains(&event.lon) || !event.lon.is_finite() {
        violations.push(Violation::LongitudeOutOfRange);
    }
    if event.timestamp <= 0 {
        violations.push(Violation::NonPositiveTimestamp);
    }
    if event.identity_id.is_empty() {
        violations.push(Violation::EmptyIdentityId);
    }
    if event.resource_id.is_empty() {
        violations.push(Violation::EmptyResourceId);
    }
    if event.device_id.is_empty() {
        violations.push(Violation::EmptyDeviceId);
    }
    if event.source_ip.parse::<Ipv4Addr>().is_err() {
        violations.push(Violation::InvalidSourceIp);
    }
    violations
}

/// Event-log parse failure, with the 1-based line it occurred on.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: malformed event: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid event {event_id}: {}", format_violations(.violations))]
    Invalid {
        line: usize,
        event_id: String,
        violations: Vec<Violation>,
    },
    #[error("line {line}: event {event_id} out of order for identity {identity_id}")]
    OutOfOrder {
        line: usize,
        event_id: String,
        identity_id: String,
    },
    #[error("line {line}: duplicate event_id {event_id}")]
    DuplicateId { line: usize, event_id: String },
    #[error("read failed at line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Parses a JSON Lines event log, enforcing per-event invariants, event-id
/// uniqueness, and nondecreasing per-identity timestamps. Blank lines are
/// skipped. Cross-identity interleaving is unconstrained.
pub fn parse_event_log(reader: impl BufRead) -> Result<Vec<AccessEvent>, ParseError> {
    let mut events = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    let mut last_ts: BTreeMap<String, i64> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| ParseError::Io {
            line: line_no,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let event: AccessEvent =
            serde_json::from_str(&line).map_err(|e| ParseError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let violations = validate_event(&event);
        if !violations.is_empty() {
            return Err(ParseError::Invalid {
                line: line_no,
                event_id: event.event_id,
                violations,
            });
        }
        if !seen_ids.insert(event.event_id.clone()) {
            return Err(ParseError::DuplicateId {
                line: line_no,
                event_id: event.event_id,
            });
        }
        if let Some(&prev) = last_ts.get(&event.identity_id) {
            if event.timestamp < prev {
                return Err(ParseError::OutOfOrder {
                    line: line_no,
                    event_id: event.event_id,
                    identity_id: event.identity_id,
                });
            }
        }
        last_ts.insert(event.identity_id.clone(), event.timestamp);
        events.push(event);
    }
    Ok(events)
}

/// Serializes events as JSON Lines, one object per line. Inverse of
/// [`parse_event_log`] on well-formed lists.
pub fn serialize_events(events: &[AccessEvent]) -> String {
    let mut out = String::new();
    for event in events {
        out.push_str(&serde_json::to_string(event).expect("event serialization is infallible"));
        out.push('\n');
    }
    out
}

/// Salted, non-reversible token standing in for an identifier in persisted
/// artifacts: the first 32 hex characters of SHA-256(salt ":" identifier).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pseudonym {
    pub token: String,
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PseudonymError {
    #[error("pseudonymization salt must be non-empty")]
    EmptySalt,
}

/// Deterministic pseudonymization; joinable across artifacts that share a salt.
pub fn pseudonymize(identifier: &str, salt: &str) -> Result<Pseudonym, PseudonymError> {
    if salt.is_empty() {
        return Err(PseudonymError::EmptySalt);
    }
    let mut hasher = Sha256::new();
    hasher.update(salt.as_bytes());
    hasher.update(b":");
    hasher.update(identifier.as_bytes());
    let digest = hasher.finalize();
    let mut token = String::with_capacity(32);
    for byte in &digest[..16] {
        use fmt::Write;
        write!(token, "{byte:02x}").expect("writing to a String cannot fail");
    }
    Ok(Pseudonym { token })
}

/// First/last-seen bookkeeping for one device of one identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceRecord {
    pub first_seen: i64,
    pub last_seen: i64,
    pub times_seen: u64,
}

/// Running per-identity state the scoring pipeline reads and updates.
///
/// Mutated by at most one worker at a time; distinct identities are
/// independent.
#[derive(Debug, Clone, Default)]
pub struct IdentityState {
    pub identity_id: String,
    known_devices: BTreeMap<String, DeviceRecord>,
    login_locations: VecDeque<(i64, GeoPoint)>,
    resource_counts: BTreeMap<String, u64>,
    event_count: u64,
    pub quarantined: bool,
    last_timestamp: Option<i64>,
}

impl IdentityState {
    pub fn new(identity_id: impl Into<String>) -> Self {
        Self {
            identity_id: identity_id.into(),
            ..Self::default()
        }
    }

    pub fn event_count(&self) -> u64 {
        self.event_count
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.last_timestamp
    }

    pub fn knows_device(&self, device_id: &str) -> bool {
        self.known_devices.contains_key(device_id)
    }

    pub fn device_times_seen(&self, device_id: &str) -> u64 {
        self.known_devices
            .get(device_id)
            .map(|r| r.times_seen)
            .unwrap_or(0)
    }

    pub fn device_record(&self, device_id: &str) -> Option<&DeviceRecord> {
        self.known_devices.get(device_id)
    }

    pub fn resource_count(&self, resource_id: &str) -> u64 {
        self.resource_counts.get(resource_id).copied().unwrap_or(0)
    }

    /// Login history, oldest first, capped at [`LOGIN_HISTORY_CAP`].
    pub fn login_locations(&self) -> impl Iterator<Item = &(i64, GeoPoint)> {
        self.login_locations.iter()
    }

    pub fn last_login(&self) -> Option<&(i64, GeoPoint)> {
        self.login_locations.back()
    }

    /// Registers a device sighting without counting an event. The static
    /// baseline engine learns nothing else.
    pub fn note_device(&mut self, device_id: &str, timestamp: i64) {
        self.known_devices
            .entry(device_id.to_string())
            .and_modify(|r| {
                r.last_seen = timestamp;
                r.times_seen += 1;
            })
            .or_insert(DeviceRecord {
                first_seen: timestamp,
                last_seen: timestamp,
                times_seen: 1,
            });
    }

    /// Folds a processed event into the state. Logins extend the location
    /// history; only non-login actions count toward resource usage.
    pub fn observe(&mut self, event: &AccessEvent) {
        self.event_count += 1;
        self.last_timestamp = Some(event.timestamp);
        self.note_device(&event.device_id, event.timestamp);
        match event.action {
            Action::Login => {
                self.login_locations.push_back((event.timestamp, event.geo()));
                if self.login_locations.len() > LOGIN_HISTORY_CAP {
                    self.login_locations.pop_front();
                }
            }
            _ => {
                *self
                    .resource_counts
                    .entry(event.resource_id.clone())
                    .or_insert(0) += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    pub(crate) fn event(id: &str, identity: &str, ts: i64) -> AccessEvent {
        AccessEvent {
            event_id: id.to_string(),
            identity_id: identity.to_string(),
            timestamp: ts,
            resource_id: "r1".to_string(),
            action: Action::Read,
            lat: 51.5074,
            lon: -0.1278,
            device_id: "d1".to_string(),
            source_ip: "10.0.0.1".to_string(),
            success: true,
        }
    }

    #[test]
    fn well_formed_event_is_ok() {
        assert!(validate_event(&event("e1", "u1", 100)).is_empty());
    }

    #[test]
    fn latitude_out_of_range_is_named() {
        let mut e = event("e1", "u1", 100);
        e.lat = 91.0;
        assert_eq!(validate_event(&e), vec![Violation::LatitudeOutOfRange]);
    }

    #[test]
    fn two_violations_are_both_reported() {
        let mut e = event("e1", "", 100);
        e.lon = 200.0;
        let violations = validate_event(&e);
        assert_eq!(violations.len(), 2);
        assert!(violations.contains(&Violation::LongitudeOutOfRange));
        assert!(violations.contains(&Violation::EmptyIdentityId));
    }

    #[test]
    fn empty_input_parses_to_empty_list() {
        let events = parse_event_log(Cursor::new("")).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn three_lines_parse_in_order() {
        let log = serialize_events(&[
            event("e1", "u1", 100),
            event("e2", "u2", 50),
            event("e3", "u1", 150),
        ]);
        let events = parse_event_log(Cursor::new(log)).unwrap();
        assert_eq!(events.len(), 3);
        assert_eq!(events[0].event_id, "e1");
        assert_eq!(events[2].event_id, "e3");
    }

    #[test]
    fn per_identity_regression_is_an_ordering_error() {
        let log = serialize_events(&[event("e1", "u1", 100), event("e2", "u1", 50)]);
        match parse_event_log(Cursor::new(log)) {
            Err(ParseError::OutOfOrder { event_id, line, .. }) => {
                assert_eq!(event_id, "e2");
                assert_eq!(line, 2);
            }
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let log = format!("{}not json\n", serialize_events(&[event("e1", "u1", 1)]));
        match parse_event_log(Cursor::new(log)) {
            Err(ParseError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_event_id_is_rejected() {
        let log = serialize_events(&[event("e1", "u1", 100), event("e1", "u2", 100)]);
        assert!(matches!(
            parse_event_log(Cursor::new(log)),
            Err(ParseError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn equal_timestamps_for_one_identity_are_allowed() {
        let log = serialize_events(&[event("e1", "u1", 100), event("e2", "u1", 100)]);
        assert_eq!(parse_event_log(Cursor::new(log)).unwrap().len(), 2);
    }

    #[test]
    fn pseudonym_is_deterministic() {
        let a = pseudonymize("alice", "s1").unwrap();
        let b = pseudonymize("alice", "s1").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_salts_give_distinct_tokens() {
        let a = pseudonymize("alice", "s1").unwrap();
        let b = pseudonymize("alice", "s2").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn pseudonym_matches_sha256_reference() {
        // First 32 hex chars of SHA-256("s1:alice"), computed with an
        // independent implementation.
        let p = pseudonymize("alice", "s1").unwrap();
        assert_eq!(p.token, "84087d4ff1b420780f1e4f4ae9bc7248");
        assert_eq!(p.token.len(), 32);
    }

    #[test]
    fn pseudonym_never_echoes_identifier_and_rejects_empty_salt() {
        let p = pseudonymize("alice", "pepper").unwrap();
        assert_ne!(p.token, "alice");
        assert_eq!(pseudonymize("alice", ""), Err(PseudonymError::EmptySalt));
    }

    #[test]
    fn pseudonym_injective_on_large_corpus() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..100_000 {
            let p = pseudonymize(&format!("identity-{i}"), "salt").unwrap();
            assert!(seen.insert(p.token), "collision at identity-{i}");
        }
    }

    #[test]
    fn identity_state_tracks_devices_and_resources() {
        let mut state = IdentityState::new("u1");
        let mut e = event("e1", "u1", 100);
        e.action = Action::Login;
        state.observe(&e);
        assert_eq!(state.event_count(), 1);
        assert_eq!(state.device_times_seen("d1"), 1);
        assert_eq!(state.resource_count("r1"), 0); // logins carry no resource
        assert_eq!(state.login_locations().count(), 1);

        let e2 = event("e2", "u1", 200);
        state.observe(&e2);
        assert_eq!(state.resource_count("r1"), 1);
        assert_eq!(state.device_times_seen("d1"), 2);
    }

    #[test]
    fn login_history_is_capped() {
        let mut state = IdentityState::new("u1");
        for i in 0..150 {
            let mut e = event(&format!("e{i}"), "u1", 100 + i);
            e.action = Action::Login;
            state.observe(&e);
        }
        assert_eq!(state.login_locations().count(), LOGIN_HISTORY_CAP);
        // Oldest evicted: history starts at the 51st login.
        assert_eq!(state.login_locations().next().unwrap().0, 150);
    }
}
