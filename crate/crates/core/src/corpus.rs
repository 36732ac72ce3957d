//! On-disk corpus formats and the in-memory data model.
//!
//! A corpus directory holds five files, all UTF-8 with `\n` line endings:
//!
//! * `facts.jsonl` — one JSON object per line:
//!   `{"uid": "...", "events": [{"fid": "...", "ts": 123}, ...]}`
//! * `fid_url.tsv` — `fid \t url`
//! * `fid_title.tsv` — `fid \t space-separated tokens`
//! * `pairs.tsv` — `uid1 \t uid2` matching pairs for training
//! * `test_uids.txt` — one uid per line
//!
//! Parsers normalize into canonical form (sorted users, sorted events,
//! lexicographically ordered pairs); the writers emit exactly that canonical
//! form, so `write(parse(x))` is a fixed point.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const FACTS_FILE: &str = "facts.jsonl";
pub const FID_URL_FILE: &str = "fid_url.tsv";
pub const FID_TITLE_FILE: &str = "fid_title.tsv";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const TEST_UIDS_FILE: &str = "test_uids.txt";

/// Default cap on events per user; users above it are rejected at load.
pub const DEFAULT_MAX_EVENTS: usize = 2000;

/// One browse event: an opaque event id and a Unix timestamp (UTC seconds).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub fid: String,
    pub ts: i64,
}

/// A device-level user's event log, sorted ascending by `(ts, fid)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserLog {
    pub uid: String,
    pub events: Vec<Event>,
}

/// Mappings from event ids to URL strings and title tokens.
#[derive(Debug, Clone, Default)]
pub struct FidMaps {
    pub fid_to_url: HashMap<String, String>,
    pub fid_to_tokens: HashMap<String, Vec<String>>,
}

impl FidMaps {
    /// Title tokens for a fid; fids without a title row have no tokens.
    pub fn tokens(&self, fid: &str) -> &[String] {
        self.fid_to_tokens.get(fid).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// A set of unordered uid pairs stored canonically (smaller uid first).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchPairs {
    pairs: BTreeSet<(String, String)>,
}

/// Order a pair canonically: lexicographically smaller uid first.
pub fn canonical_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl MatchPairs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a pair; self-pairs are rejected.
    pub fn insert(&mut self, a: &str, b: &str) -> Result<bool> {
        if a == b {
            return Err(Error::invalid(format!("self-pair ({a}, {a})")));
        }
        Ok(self.pairs.insert(canonical_pair(a, b)))
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        if a == b {
            return false;
        }
        self.pairs.contains(&canonical_pair(a, b))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, String)> {
        self.pairs.iter()
    }

    /// Uids adjacent to `uid` through any pair.
    pub fn partners_of(&self, uid: &str) -> BTreeSet<&str> {
        self.pairs
            .iter()
            .filter_map(|(a, b)| {
                if a == uid {
                    Some(b.as_str())
                } else if b == uid {
                    Some(a.as_str())
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn intersection_count(&self, other: &MatchPairs) -> usize {
        if self.len() <= other.len() {
            self.pairs.iter().filter(|p| other.pairs.contains(*p)).count()
        } else {
            other.pairs.iter().filter(|p| self.pairs.contains(*p)).count()
        }
    }
}

impl FromIterator<(String, String)> for MatchPairs {
    fn from_iter<T: IntoIterator<Item = (String, String)>>(iter: T) -> Self {
        let mut out = MatchPairs::new();
        for (a, b) in iter {
            out.insert(&a, &b).expect("self-pair in iterator");
        }
        out
    }
}

/// A fully loaded corpus, immutable after load and safe to share read-only.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub logs: BTreeMap<String, UserLog>,
    pub maps: FidMaps,
    pub train_pairs: MatchPairs,
    pub test_uids: BTreeSet<String>,
}

impl Corpus {
    /// Load a corpus directory, validating all cross-file invariants.
    pub fn load(dir: &Path) -> Result<Corpus> {
        Self::load_with_cap(dir, DEFAULT_MAX_EVENTS)
    }

    pub fn load_with_cap(dir: &Path, max_events: usize) -> Result<Corpus> {
        let logs = parse_facts(&dir.join(FACTS_FILE), max_events)?;
        let maps = parse_fid_maps(&dir.join(FID_URL_FILE), &dir.join(FID_TITLE_FILE))?;
        let train_pairs = parse_pairs(&dir.join(PAIRS_FILE))?;
        let test_uids = parse_uid_list(&dir.join(TEST_UIDS_FILE))?;

        for log in logs.values() {
            for event in &log.events {
                if !maps.fid_to_url.contains_key(&event.fid) {
                    return Err(Error::invalid(format!(
                        "fid {} of user {} has no URL mapping",
                        event.fid, log.uid
                    )));
                }
            }
        }
        for (a, b) in train_pairs.iter() {
            for uid in [a, b] {
                if !logs.contains_key(uid) {
                    return Err(Error::UnknownUid(uid.clone()));
                }
            }
        }
        for uid in &test_uids {
            if !logs.contains_key(uid) {
                return Err(Error::UnknownUid(uid.clone()));
            }
        }

        Ok(Corpus {
            logs,
            maps,
            train_pairs,
            test_uids,
        })
    }

    /// Uids whose matches are known for training: everything not held out.
    pub fn train_uids(&self) -> Vec<String> {
        self.logs
            .keys()
            .filter(|uid| !self.test_uids.contains(*uid))
            .cloned()
            .collect()
    }

    pub fn total_events(&self) -> usize {
        self.logs.values().map(|l| l.events.len()).sum()
    }

    /// SHA-256 over the five corpus files, used to invalidate caches.
    pub fn checksum(dir: &Path) -> Result<String> {
        let mut hasher = Sha256::new();
        for name in [
            FACTS_FILE,
            FID_URL_FILE,
            FID_TITLE_FILE,
            PAIRS_FILE,
            TEST_UIDS_FILE,
        ] {
            let path = dir.join(name);
            let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut buf = Vec::new();
            file.read_to_end(&mut buf).map_err(|e| Error::io(&path, e))?;
            hasher.update(name.as_bytes());
            hasher.update((buf.len() as u64).to_le_bytes());
            hasher.update(&buf);
        }
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Keep the first `level` '/'-separated segments of a URL.
///
/// URLs with fewer segments than `level` are returned unchanged, so level-1
/// domains survive deeper-level profiling.
pub fn url_prefix(url: &str, level: usize) -> &str {
    assert!((1..=4).contains(&level), "url level must be in 1..=4");
    let mut end = url.len();
    let mut seen = 0usize;
    for (i, b) in url.bytes().enumerate() {
        if b == b'/' {
            seen += 1;
            if seen == level {
                end = i;
                break;
            }
        }
    }
    &url[..end]
}

#[derive(Serialize, Deserialize)]
struct FactsLine {
    uid: String,
    events: Vec<Event>,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines())
}

/// Parse `facts.jsonl` into per-user logs with sorted events.
///
/// Duplicate `(fid, ts)` events within a user are kept: repeat visits are
/// meaningful. Duplicate uids and malformed lines are errors naming the line.
pub fn parse_facts(path: &Path, max_events: usize) -> Result<BTreeMap<String, UserLog>> {
    let mut logs = BTreeMap::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FactsLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if parsed.uid.is_empty() {
            return Err(Error::parse(path, lineno, "empty uid"));
        }
        if parsed.events.len() < 2 {
            return Err(Error::parse(
                path,
                lineno,
                format!("user {} has {} events (minimum 2)", parsed.uid, parsed.events.len()),
            ));
        }
        if parsed.events.len() > max_events {
            return Err(Error::parse(
                path,
                lineno,
                format!(
                    "user {} has {} events (cap {})",
                    parsed.uid,
                    parsed.events.len(),
                    max_events
                ),
            ));
        }
        for event in &parsed.events {
            if event.fid.is_empty() {
                return Err(Error::parse(path, lineno, format!("user {}: empty fid", parsed.uid)));
            }
            if event.ts < 0 {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("user {}: negative timestamp {}", parsed.uid, event.ts),
                ));
            }
        }
        let mut events = parsed.events;
        events.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.fid.cmp(&b.fid)));
        let uid = parsed.uid;
        if logs
            .insert(uid.clone(), UserLog { uid: uid.clone(), events })
            .is_some()
        {
            return Err(Error::parse(path, lineno, format!("duplicate uid {uid}")));
        }
    }
    Ok(logs)
}

/// Write logs in canonical form: users by uid, events sorted, compact JSON.
pub fn write_facts(path: &Path, logs: &BTreeMap<String, UserLog>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for log in logs.values() {
        let line = serde_json::to_string(&FactsLine {
            uid: log.uid.clone(),
            events: log.events.clone(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse the fid→URL and fid→title-token TSV files.
///
/// Every fid in the URL file gets a token entry; fids missing from the title
/// file get an empty token list. Conflicting URLs for one fid are an error.
pub fn parse_fid_maps(url_path: &Path, title_path: &Path) -> Result<FidMaps> {
    let mut maps = FidMaps::default();
    for (idx, line) in open_lines(url_path)?.enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(url_path, e))?;
        if line.is_empty() {
            continue;
        }
        let (fid, url) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(url_path, lineno, "expected `fid\\turl`"))?;
        if fid.is_empty() || url.is_empty() {
            return Err(Error::parse(url_path, lineno, "empty fid or url"));
        }
        if let Some(old) = maps.fid_to_url.insert(fid.to_string(), url.to_string()) {
            if old != url {
                return Err(Error::parse(
                    url_path,
                    lineno,
                    format!("fid {fid} maps to both {old} and {url}"),
                ));
            }
        }
        maps.fid_to_tokens.entry(fid.to_string()).or_default();
    }
    for (idx, line) in open_lines(title_path)?.enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(title_path, e))?;
        if line.is_empty() {
            continue;
        }
        let (fid, tokens) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(title_path, lineno, "expected `fid\\ttokens`"))?;
        if fid.is_empty() {
            return Err(Error::parse(title_path, lineno, "empty fid"));
        }
        let tokens: Vec<String> = tokens.split_whitespace().map(str::to_string).collect();
        maps.fid_to_tokens.insert(fid.to_string(), tokens);
    }
    Ok(maps)
}

/// Write both map files in canonical form (fids sorted; all fids present in
/// both files, empty token lists included).
pub fn write_fid_maps(url_path: &Path, title_path: &Path, maps: &FidMaps) -> Result<()> {
    let urls: BTreeMap<&String, &String> = maps.fid_to_url.iter().collect();
    let file = File::create(url_path).map_err(|e| Error::io(url_path, e))?;
    let mut w = BufWriter::new(file);
    for (fid, url) in &urls {
        writeln!(w, "{fid}\t{url}").map_err(|e| Error::io(url_path, e))?;
    }
    w.flush().map_err(|e| Error::io(url_path, e))?;

    let file = File::create(title_path).map_err(|e| Error::io(title_path, e))?;
    let mut w = BufWriter::new(file);
    for fid in urls.keys() {
        let tokens = maps.tokens(fid).join(" ");
        writeln!(w, "{fid}\t{tokens}").map_err(|e| Error::io(title_path, e))?;
    }
    w.flush().map_err(|e| Error::io(title_path, e))
}

/// Parse a pair TSV; symmetric duplicates collapse, self-pairs are errors.
pub fn parse_pairs(path: &Path) -> Result<MatchPairs> {
    let mut pairs = MatchPairs::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno, "expected `uid1\\tuid2`"))?;
        if a.is_empty() || b.is_empty() {
            return Err(Error::parse(path, lineno, "empty uid"));
        }
        pairs
            .insert(a, b)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
    }
    Ok(pairs)
}

pub fn write_pairs(path: &Path, pairs: &MatchPairs) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (a, b) in pairs.iter() {
        writeln!(w, "{a}\t{b}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_uid_list(path: &Path) -> Result<BTreeSet<String>> {
    let mut uids = BTreeSet::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        if !uids.insert(line.clone()) {
            return Err(Error::parse(path, idx + 1, format!("duplicate uid {line}")));
        }
    }
    Ok(uids)
}

pub fn write_uid_list(path: &Path, uids: &BTreeSet<String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for uid in uids {
        writeln!(w, "{uid}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
