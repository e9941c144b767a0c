//! Raw keystroke logs: canonical CSV, Aalto-style tab-separated logs and
//! profile metadata.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use thiserror::Error;

pub const CANONICAL_HEADER: [&str; 5] =
    ["user_id", "session_id", "keycode", "press_ms", "release_ms"];

/// One key press/release pair. Timestamps are integer milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KeyEvent {
    pub keycode: u8,
    pub press_ms: i64,
    pub release_ms: i64,
}

impl KeyEvent {
    pub fn new(keycode: u8, press_ms: i64, release_ms: i64) -> Result<Self, SequenceError> {
        if release_ms < press_ms {
            return Err(SequenceError::NegativeHold {
                press_ms,
                release_ms,
            });
        }
        Ok(Self {
            keycode,
            press_ms,
            release_ms,
        })
    }

    pub fn hold_ms(&self) -> i64 {
        self.release_ms - self.press_ms
    }

    fn sort_key(&self) -> (i64, i64, u8) {
        (self.press_ms, self.release_ms, self.keycode)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SequenceError {
    #[error("keystroke sequence has no events")]
    Empty,
    #[error("release time {release_ms} precedes press time {press_ms}")]
    NegativeHold { press_ms: i64, release_ms: i64 },
}

/// All keystrokes of one typed sentence, in press order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeystrokeSequence {
    user_id: String,
    session_id: String,
    events: Vec<KeyEvent>,
}

impl KeystrokeSequence {
    /// Validates the events and sorts them by `(press, release, keycode)`.
    pub fn new(
        user_id: impl Into<String>,
        session_id: impl Into<String>,
        mut events: Vec<KeyEvent>,
    ) -> Result<Self, SequenceError> {
        if events.is_empty() {
            return Err(SequenceError::Empty);
        }
        if let Some(bad) = events.iter().find(|e| e.release_ms < e.press_ms) {
            return Err(SequenceError::NegativeHold {
                press_ms: bad.press_ms,
                release_ms: bad.release_ms,
            });
        }
        events.sort_by_key(KeyEvent::sort_key);
        Ok(Self {
            user_id: user_id.into(),
            session_id: session_id.into(),
            events,
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn events(&self) -> &[KeyEvent] {
        &self.events
    }

    /// Number of keystrokes, `L`.
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Auxiliary attributes of a user (country, age, keyboard type, ...).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProfileMeta {
    pub user_id: String,
    pub attributes: BTreeMap<String, String>,
}

impl ProfileMeta {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowProblem {
    MalformedRow(String),
    NegativeHold { press_ms: i64, release_ms: i64 },
}

impl fmt::Display for RowProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowProblem::MalformedRow(why) => write!(f, "malformed row: {why}"),
            RowProblem::NegativeHold {
                press_ms,
                release_ms,
            } => {
                write!(f, "negative hold: release {release_ms} < press {press_ms}")
            }
        }
    }
}

/// A problem found on a specific (1-based) line of an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub problem: RowProblem,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.problem)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{} invalid row(s); first: {}", .0.len(), .0[0])]
    Rows(Vec<RowError>),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("missing `user_id` header column")]
    MissingHeader,
    #[error("duplicate user `{0}`")]
    DuplicateUser(String),
    #[error("invalid column mapping: {0}")]
    BadColumnMap(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl IngestError {
    /// Row-level errors, if this is a row error listing.
    pub fn rows(&self) -> &[RowError] {
        match self {
            IngestError::Rows(rows) => rows,
            _ => &[],
        }
    }
}

type GroupKey = (String, String);

#[derive(Default)]
struct Grouper {
    groups: BTreeMap<GroupKey, Vec<KeyEvent>>,
    errors: Vec<RowError>,
}

impl Grouper {
    fn push_row(
        &mut self,
        line: u64,
        user: &str,
        session: &str,
        keycode: &str,
        press: &str,
        release: &str,
    ) {
        let parsed = parse_event_fields(keycode, press, release);
        match parsed {
            Ok(event) => self
                .groups
                .entry((user.to_string(), session.to_string()))
                .or_default()
                .push(event),
            Err(problem) => self.errors.push(RowError { line, problem }),
        }
    }

    fn finish(self) -> Result<Vec<KeystrokeSequence>, IngestError> {
        if !self.errors.is_empty() {
            return Err(IngestError::Rows(self.errors));
        }
        Ok(self
            .groups
            .into_iter()
            .map(|((user, session), events)| {
                KeystrokeSequence::new(user, session, events)
                    .expect("rows validated before grouping")
            })
            .collect())
    }
}

fn parse_event_fields(keycode: &str, press: &str, release: &str) -> Result<KeyEvent, RowProblem> {
    let keycode: u8 = keycode.trim().parse().map_err(|_| {
        RowProblem::MalformedRow(format!(
            "keycode `{}` is not an integer in [0, 255]",
            keycode.trim()
        ))
    })?;
    let press_ms: i64 = press.trim().parse().map_err(|_| {
        RowProblem::MalformedRow(format!("press time `{}` is not an integer", press.trim()))
    })?;
    let release_ms: i64 = release.trim().parse().map_err(|_| {
        RowProblem::MalformedRow(format!(
            "release time `{}` is not an integer",
            release.trim()
        ))
    })?;
    if release_ms < press_ms {
        return Err(RowProblem::NegativeHold {
            press_ms,
            release_ms,
        });
    }
    Ok(KeyEvent {
        keycode,
        press_ms,
        release_ms,
    })
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Parses the canonical `user_id,session_id,keycode,press_ms,release_ms`
/// CSV. All row errors in the stream are collected; any error fails the
/// whole file.
pub fn parse_canonical<R: Read>(input: R) -> Result<Vec<KeystrokeSequence>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut grouper = Grouper::default();
    let mut seen_header = false;
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        if !seen_header {
            seen_header = true;
            if record.iter().eq(CANONICAL_HEADER.iter().copied()) {
                continue;
            }
        }
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != CANONICAL_HEADER.len() {
            grouper.errors.push(RowError {
                line,
                problem: RowProblem::MalformedRow(format!(
                    "expected 5 columns, found {}",
                    record.len()
                )),
            });
            continue;
        }
        grouper.push_row(
            line, &record[0], &record[1], &record[2], &record[3], &record[4],
        );
    }
    grouper.finish()
}

/// Writes sequences in the canonical CSV format, header included.
pub fn write_canonical<W: Write>(
    out: W,
    sequences: &[KeystrokeSequence],
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CANONICAL_HEADER)?;
    for seq in sequences {
        for e in seq.events() {
            writer.write_record([
                seq.user_id(),
                seq.session_id(),
                &e.keycode.to_string(),
                &e.press_ms.to_string(),
                &e.release_ms.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Column names used by the Aalto-style adapter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AaltoColumns {
    pub participant: String,
    pub section: String,
    pub keycode: String,
    pub press: String,
    pub release: String,
}

impl AaltoColumns {
    pub const KEYS: [&'static str; 5] = [
        "participant_col",
        "section_col",
        "keycode_col",
        "press_col",
        "release_col",
    ];

    /// Builds a mapping from `key=value` entries. All five keys are required.
    pub fn from_entries<'a, I>(entries: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        for (k, v) in entries {
            if !Self::KEYS.contains(&k) {
                return Err(IngestError::BadColumnMap(format!("unknown key `{k}`")));
            }
            map.insert(k, v.to_string());
        }
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| IngestError::MissingColumn(k.to_string()))
        };
        Ok(Self {
            participant: take("participant_col")?,
            section: take("section_col")?,
            keycode: take("keycode_col")?,
            press: take("press_col")?,
            release: take("release_col")?,
        })
    }
}

impl Default for AaltoColumns {
    fn default() -> Self {
        Self {
            participant: "PARTICIPANT_ID".into(),
            section: "TEST_SECTION_ID".into(),
            keycode: "KEYCODE".into(),
            press: "PRESS_TIME".into(),
            release: "RELEASE_TIME".into(),
        }
    }
}

/// Parses a tab-separated keystroke log with a header row, grouping rows by
/// (participant, section).
pub fn parse_aalto<R: Read>(
    input: R,
    columns: &AaltoColumns,
) -> Result<Vec<KeystrokeSequence>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let idx = [
        find(&columns.participant)?,
        find(&columns.section)?,
        find(&columns.keycode)?,
        find(&columns.press)?,
        find(&columns.release)?,
    ];
    let mut grouper = Grouper::default();
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if record.len() != headers.len() {
            grouper.errors.push(RowError {
                line,
                problem: RowProblem::MalformedRow(format!(
                    "expected {} columns, found {}",
                    headers.len(),
                    record.len()
                )),
            });
            continue;
        }
        let f = |i: usize| record[idx[i]].trim();
        grouper.push_row(line, f(0), f(1), f(2), f(3), f(4));
    }
    grouper.finish()
}

/// Reads profile metadata: a `user_id` column plus arbitrary attribute
/// columns. Empty attribute cells are omitted.
pub fn load_profiles<R: Read>(input: R) -> Result<Vec<ProfileMeta>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "user_id")
        .ok_or(IngestError::MissingHeader)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let user = record.get(id_col).unwrap_or_default().to_string();
        if user.is_empty() {
            return Err(IngestError::Rows(vec![RowError {
                line: record_line(&record),
                problem: RowProblem::MalformedRow("empty user_id".into()),
            }]));
        }
        if !seen.insert(user.clone()) {
            return Err(IngestError::DuplicateUser(user));
        }
        let mut meta = ProfileMeta::new(user);
        for (i, (name, value)) in headers.iter().zip(record.iter()).enumerate() {
            if i != id_col && !value.is_empty() {
                meta.attributes.insert(name.to_string(), value.to_string());
            }
        }
        out.push(meta);
    }
    Ok(out)
}

/// Writes profile metadata with the union of all attribute names as columns.
pub fn write_profiles<W: Write>(out: W, profiles: &[ProfileMeta]) -> Result<(), IngestError> {
    let mut names: Vec<&str> = profiles
        .iter()
        .flat_map(|p| p.attributes.keys().map(String::as_str))
        .collect();
    names.sort_unstable();
    names.dedup();
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(std::iter::once("user_id").chain(names.iter().copied()))?;
    for p in profiles {
        writer.write_record(
            std::iter::once(p.user_id.as_str()).chain(names.iter().map(|n| p.get(n).unwrap_or(""))),
        )?;
    }
    writer.flush()?;
    Ok(())
}

/// Groups sequences by user, preserving the input order within each user.
pub fn group_by_user(
    sequences: Vec<KeystrokeSequence>,
) -> BTreeMap<String, Vec<KeystrokeSequence>> {
    let mut out: BTreeMap<String, Vec<KeystrokeSequence>> = BTreeMap::new();
    for seq in sequences {
        out.entry(seq.user_id.clone()).or_default().push(seq);
    }
    out
}
