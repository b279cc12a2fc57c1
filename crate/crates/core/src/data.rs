//! Interaction corpora: ingestion, k-core filtering, session splits and
//! selection of the interactions to forget.
//!
//! Items are densely indexed from 1; id 0 is the padding token and never
//! appears inside a stored session.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Dense item identifier. `ItemId(0)` is reserved for padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u32);

impl ItemId {
    pub const PADDING: ItemId = ItemId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: u64,
    pub items: Vec<ItemId>,
}

impl Session {
    pub fn new(id: u64, items: Vec<ItemId>) -> Self {
        Session { id, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sessions: Vec<Session>,
    pub item_count: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// `user<TAB>item<TAB>timestamp`, one interaction per row.
    UserItemTime,
    /// One session per line, space separated item tokens.
    SessionLines,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus exhausted by {min_count}-core filtering")]
    CorpusExhausted { min_count: usize },
    #[error("split needs at least 10 sessions, got {0}")]
    TooFewSessions(usize),
    #[error("unlearn ratio must lie in (0, 0.5], got {0}")]
    BadRatio(f64),
    #[error("no eligible (session, position) pairs to unlearn")]
    NoEligiblePositions,
    #[error("cannot select {wanted} samples with at most {per_session} per session (only {got} reachable)")]
    UnlearnCapacity {
        wanted: usize,
        got: usize,
        per_session: usize,
    },
    #[error("invalid corpus: {0}")]
    Invalid(String),
}

impl Corpus {
    /// Builds a corpus and stamps it with a digest of its content.
    pub fn new(sessions: Vec<Session>, item_count: usize, source: impl Into<String>) -> Self {
        let mut corpus = Corpus {
            sessions,
            item_count,
            provenance: Provenance {
                source: source.into(),
                digest: String::new(),
            },
        };
        corpus.provenance.digest = corpus.content_digest();
        corpus
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn interaction_count(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_canonical_string().as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut ids = HashSet::with_capacity(self.sessions.len());
        for s in &self.sessions {
            if !ids.insert(s.id) {
                return Err(DataError::Invalid(format!("duplicate session id {}", s.id)));
            }
            for &item in &s.items {
                if item == ItemId::PADDING || item.index() > self.item_count {
                    return Err(DataError::Invalid(format!(
                        "session {} holds item {} outside 1..={}",
                        s.id, item, self.item_count
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical persisted form: a header line followed by
    /// `session_id<TAB>item item ...` per session.
    pub fn to_canonical_string(&self) -> String {
        let mut out = format!("items={} sessions={}\n", self.item_count, self.sessions.len());
        for s in &self.sessions {
            out.push_str(&s.id.to_string());
            out.push('\t');
            let mut first = true;
            for item in &s.items {
                if !first {
                    out.push(' ');
                }
                first = false;
                out.push_str(&item.0.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_canonical_str(text: &str, source: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DataError::EmptyCorpus)?;
        let mut item_count = None;
        let mut session_count = None;
        for field in header.split_whitespace() {
            let parse = |v: &str| {
                v.parse::<usize>().map_err(|_| DataError::Parse {
                    line: 1,
                    message: format!("bad header field {field:?}"),
                })
            };
            if let Some(v) = field.strip_prefix("items=") {
                item_count = Some(parse(v)?);
            } else if let Some(v) = field.strip_prefix("sessions=") {
                session_count = Some(parse(v)?);
            }
        }
        let (item_count, session_count) = match (item_count, session_count) {
            (Some(i), Some(s)) => (i, s),
            _ => {
                return Err(DataError::Parse {
                    line: 1,
                    message: "header must read items=<n> sessions=<n>".into(),
                })
            }
        };
        let mut sessions = Vec::with_capacity(session_count);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            let (id, items) = line.split_once('\t').ok_or_else(|| DataError::Parse {
                line: line_no,
                message: "expected session_id<TAB>items".into(),
            })?;
            let id = id.trim().parse::<u64>().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("bad session id {id:?}"),
            })?;
            let items = parse_items(items, line_no)?;
            sessions.push(Session::new(id, items.into_iter().map(ItemId).collect()));
        }
        if sessions.len() != session_count {
            return Err(DataError::Parse {
                line: 1,
                message: format!("header announces {session_count} sessions, found {}", sessions.len()),
            });
        }
        let corpus = Corpus::new(sessions, item_count, source);
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_canonical_string()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = read_to_string(path)?;
        Corpus::from_canonical_str(&text, &path.display().to_string())
    }
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_items(text: &str, line: usize) -> Result<Vec<u32>, DataError> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>().map_err(|_| DataError::Parse {
                line,
                message: format!("item {tok:?} is not a non-negative integer"),
            })
        })
        .collect()
}

/// Maps raw item tokens onto 1..=n in ascending raw order.
fn densify(sessions: Vec<(u64, Vec<u32>)>, source: &str) -> Corpus {
    let mut raw: Vec<u32> = sessions.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    raw.sort_unstable();
    raw.dedup();
    let index: HashMap<u32, u32> = raw
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, i as u32 + 1))
        .collect();
    let sessions = sessions
        .into_iter()
        .map(|(id, items)| Session::new(id, items.iter().map(|r| ItemId(index[r])).collect()))
        .collect();
    Corpus::new(sessions, raw.len(), source)
}

/// Reads raw interactions and re-indexes items densely from 1.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<Corpus, DataError> {
    let text = read_to_string(path)?;
    parse_interactions(&text, format, &path.display().to_string())
}

pub fn parse_interactions(text: &str, format: InputFormat, source: &str) -> Result<Corpus, DataError> {
    let sessions = match format {
        InputFormat::SessionLines => {
            let mut sessions = Vec::new();
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let items = parse_items(line, idx + 1)?;
                sessions.push((sessions.len() as u64, items));
            }
            sessions
        }
        InputFormat::UserItemTime => {
            let mut by_user: BTreeMap<u64, Vec<(i64, usize, u32)>> = BTreeMap::new();
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let line_no = idx + 1;
                let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
                if fields.len() != 3 {
                    return Err(DataError::Parse {
                        line: line_no,
                        message: format!("expected 3 tab-separated fields, got {}", fields.len()),
                    });
                }
                let bad = |what: &str, tok: &str| DataError::Parse {
                    line: line_no,
                    message: format!("{what} {tok:?} is not an integer"),
                };
                let user = fields[0].parse::<u64>().map_err(|_| bad("user", fields[0]))?;
                let item = fields[1].parse::<u32>().map_err(|_| bad("item", fields[1]))?;
                let time = fields[2].parse::<i64>().map_err(|_| bad("timestamp", fields[2]))?;
                by_user.entry(user).or_default().push((time, line_no, item));
            }
            by_user
                .into_iter()
                .map(|(user, mut rows)| {
                    // ties keep file order
                    rows.sort_by_key(|&(time, line, _)| (time, line));
                    (user, rows.into_iter().map(|(_, _, item)| item).collect())
                })
                .collect()
        }
    };
    if sessions.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(densify(sessions, source))
}

/// Iterated k-core filter over users (sessions) and items.
///
/// Items with fewer than `min_count` interactions are removed from every
/// session, then sessions shorter than `max(min_count, 2)` are dropped; the
/// two passes repeat until nothing changes. Surviving items are re-indexed
/// densely in ascending order of their previous ids.
pub fn preprocess(raw: &Corpus, min_count: usize) -> Result<Corpus, DataError> {
    if raw.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let min_session = min_count.max(2);
    let mut sessions: Vec<Session> = raw.sessions.clone();
    loop {
        let mut counts = vec![0usize; raw.item_count + 1];
        for s in &sessions {
            for item in &s.items {
                counts[item.index()] += 1;
            }
        }
        let mut changed = false;
        for s in &mut sessions {
            let before = s.items.len();
            s.items.retain(|item| counts[item.index()] >= min_count);
            changed |= s.items.len() != before;
        }
        let before = sessions.len();
        sessions.retain(|s| s.items.len() >= min_session);
        changed |= sessions.len() != before;
        if !changed {
            break;
        }
    }
    if sessions.is_empty() {
        return Err(DataError::CorpusExhausted { min_count });
    }

    let mut present = vec![false; raw.item_count + 1];
    for s in &sessions {
        for item in &s.items {
            present[item.index()] = true;
        }
    }
    let mut remap = vec![0u32; raw.item_count + 1];
    let mut next = 0u32;
    for (old, &keep) in present.iter().enumerate().skip(1) {
        if keep {
            next += 1;
            remap[old] = next;
        }
    }
    for s in &mut sessions {
        for item in &mut s.items {
            *item = ItemId(remap[item.index()]);
        }
    }
    Ok(Corpus::new(
        sessions,
        next as usize,
        format!("{}|core{}", raw.provenance.source, min_count),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    pub seed: u64,
}

/// Seeded shuffle then an 8:1:1 partition by session. Validation and test
/// each take `floor(n / 10)` sessions; the remainder goes to training.
pub fn split(corpus: &Corpus, seed: u64) -> Result<SplitCorpus, DataError> {
    let n = corpus.len();
    if n < 10 {
        return Err(DataError::TooFewSessions(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = n / 10;
    let n_test = n / 10;
    let n_train = n - n_valid - n_test;
    let take = |range: std::ops::Range<usize>, part: &str| {
        let sessions = order[range].iter().map(|&i| corpus.sessions[i].clone()).collect();
        Corpus::new(
            sessions,
            corpus.item_count,
            format!("{}|{}@{}", corpus.provenance.source, part, seed),
        )
    };
    Ok(SplitCorpus {
        train: take(0..n_train, "train"),
        valid: take(n_train..n_train + n_valid, "valid"),
        test: take(n_train + n_valid..n, "test"),
        seed,
    })
}

/// One interaction selected for removal, with the context the unlearning
/// losses need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlearnSample {
    pub session_id: u64,
    /// 1-based position of the target inside its session.
    pub position: usize,
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
    pub successor: ItemId,
}

impl UnlearnSample {
    /// Builds the sample for 1-based `position`; `None` unless
    /// `2 <= position <= len - 1`.
    pub fn from_session(session: &Session, position: usize) -> Option<Self> {
        if position < 2 || position + 1 > session.len() {
            return None;
        }
        Some(UnlearnSample {
            session_id: session.id,
            position,
            prefix: session.items[..position - 1].to_vec(),
            target: session.items[position - 1],
            successor: session.items[position],
        })
    }
}

fn eligible_positions(train: &Corpus) -> Vec<(usize, usize)> {
    train
        .sessions
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (2..s.len()).map(move |t| (si, t)))
        .collect()
}

/// Uniformly draws `ceil(ratio * eligible)` interactions to forget.
/// Result is ordered by `(session_id, position)`.
pub fn select_unlearn(
    train: &Corpus,
    ratio: f64,
    seed: u64,
    max_per_session: usize,
) -> Result<Vec<UnlearnSample>, DataError> {
    if !(ratio > 0.0 && ratio <= 0.5) {
        return Err(DataError::BadRatio(ratio));
    }
    let mut eligible = eligible_positions(train);
    if eligible.is_empty() {
        return Err(DataError::NoEligiblePositions);
    }
    let wanted = (ratio * eligible.len() as f64).ceil() as usize;
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut per_session: HashMap<usize, usize> = HashMap::new();
    let mut chosen = Vec::with_capacity(wanted);
    for (si, t) in eligible {
        if chosen.len() == wanted {
            break;
        }
        let used = per_session.entry(si).or_insert(0);
        if *used >= max_per_session {
            continue;
        }
        *used += 1;
        chosen.push((si, t));
    }
    if chosen.len() < wanted {
        return Err(DataError::UnlearnCapacity {
            wanted,
            got: chosen.len(),
            per_session: max_per_session,
        });
    }
    let mut samples: Vec<UnlearnSample> = chosen
        .into_iter()
        .map(|(si, t)| UnlearnSample::from_session(&train.sessions[si], t).expect("eligible position"))
        .collect();
    samples.sort_by_key(|s| (s.session_id, s.position));
    Ok(samples)
}

/// Removes every forgotten target from its session (later items shift left)
/// and drops sessions left with fewer than two items.
pub fn splice_out(train: &Corpus, forget: &[UnlearnSample]) -> Corpus {
    let mut drop: HashMap<u64, HashSet<usize>> = HashMap::new();
    for s in forget {
        drop.entry(s.session_id).or_default().insert(s.position);
    }
    let sessions = train
        .sessions
        .iter()
        .filter_map(|s| {
            let items: Vec<ItemId> = match drop.get(&s.id) {
                None => s.items.clone(),
                Some(positions) => s
                    .items
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !positions.contains(&(i + 1)))
                    .map(|(_, &item)| item)
                    .collect(),
            };
            (items.len() >= 2).then(|| Session::new(s.id, items))
        })
        .collect();
    Corpus::new(
        sessions,
        train.item_count,
        format!("{}|minus-forget", train.provenance.source),
    )
}

/// `session_id<TAB>position_t` per line.
pub fn unlearn_set_to_string(samples: &[UnlearnSample]) -> String {
    samples
        .iter()
        .map(|s| format!("{}\t{}\n", s.session_id, s.position))
        .collect()
}

/// Resolves a persisted unlearn set against the corpus it was drawn from.
pub fn parse_unlearn_set(text: &str, train: &Corpus) -> Result<Vec<UnlearnSample>, DataError> {
    let by_id: HashMap<u64, &Session> = train.sessions.iter().map(|s| (s.id, s)).collect();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let err = |message: String| DataError::Parse { line: line_no, message };
        let (sid, pos) = line
            .split_once('\t')
            .ok_or_else(|| err("expected session_id<TAB>position".into()))?;
        let sid = sid.trim().parse::<u64>().map_err(|_| err(format!("bad session id {sid:?}")))?;
        let pos = pos.trim().parse::<usize>().map_err(|_| err(format!("bad position {pos:?}")))?;
        let session = by_id
            .get(&sid)
            .ok_or_else(|| err(format!("unknown session {sid}")))?;
        let sample = UnlearnSample::from_session(session, pos)
            .ok_or_else(|| err(format!("position {pos} not eligible in session {sid}")))?;
        out.push(sample);
    }
    Ok(out)
}
