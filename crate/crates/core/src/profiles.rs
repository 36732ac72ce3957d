//! Per-user aggregate profiles.
//!
//! Each user gets TF-IDF weighted sparse vectors over three kinds of terms —
//! title words, event ids (fids), and URL prefixes at levels 1..4 — plus
//! hour/day-of-week/month histograms and lifespan facts. Term weights follow
//! `tf(i) = n_i / Σ n_k` and `idf(i) = ln(N_users / df_i)` with natural log
//! and no smoothing (df ≥ 1 for every observed term). Every event occurrence
//! counts toward term frequency, including repeat visits.
//!
//! Term strings are interned to dense ids in a single sequential pass over
//! users in uid order, so sparse vectors are sorted id lists and all dot
//! products accumulate in a fixed order regardless of thread count.

use std::collections::HashMap;

use chrono::{Datelike, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{url_prefix, Corpus};
use crate::{Error, Result};

pub const URL_LEVELS: usize = 4;

/// String-to-dense-id interner; ids are assigned in first-seen order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Interner {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Rebuild the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
    }
}

/// One sparse channel of a profile: sorted term ids with raw counts and
/// TF-IDF weights, plus the squared norm of the weight vector.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Channel {
    pub ids: Vec<u32>,
    pub counts: Vec<u32>,
    #[serde(skip)]
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub norm2: f64,
}

impl Channel {
    fn from_count_map(map: HashMap<u32, u32>) -> Channel {
        let mut entries: Vec<(u32, u32)> = map.into_iter().collect();
        entries.sort_unstable_by_key(|&(id, _)| id);
        Channel {
            ids: entries.iter().map(|&(id, _)| id).collect(),
            counts: entries.iter().map(|&(_, c)| c).collect(),
            weights: Vec::new(),
            norm2: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of ids present in both channels (sorted-merge intersection).
    pub fn common_count(&self, other: &Channel) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.ids.len() && j < other.ids.len() {
            match self.ids[i].cmp(&other.ids[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

/// Cosine similarity between two weighted channels; 0.0 if either is zero.
pub fn cosine(a: &Channel, b: &Channel) -> f64 {
    if a.norm2 == 0.0 || b.norm2 == 0.0 {
        return 0.0;
    }
    let (mut i, mut j) = (0, 0);
    let mut dot = 0.0;
    while i < a.ids.len() && j < b.ids.len() {
        match a.ids[i].cmp(&b.ids[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a.weights[i] * b.weights[j];
                i += 1;
                j += 1;
            }
        }
    }
    dot / (a.norm2 * b.norm2).sqrt()
}

/// Aggregate profile of one device-level user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserProfile {
    pub uid: String,
    pub doc: Channel,
    pub fid: Channel,
    pub url: [Channel; URL_LEVELS],
    pub hour_hist: [u32; 24],
    pub dow_hist: [u32; 7],
    pub month_hist: [u32; 12],
    /// First/last active day as days since the Unix epoch (UTC).
    pub first_day: i32,
    pub last_day: i32,
    /// Sorted distinct active days.
    pub active_days: Vec<i32>,
    pub event_count: u32,
}

impl UserProfile {
    /// Days between first and last activity, inclusive (≥ 1).
    pub fn lifespan_days(&self) -> i64 {
        i64::from(self.last_day) - i64::from(self.first_day) + 1
    }
}

/// Immutable store of all user profiles plus the shared interners.
#[derive(Debug)]
pub struct ProfileStore {
    pub uids: Vec<String>,
    uid_index: HashMap<String, u32>,
    pub tokens: Interner,
    pub fids: Interner,
    pub urls: [Interner; URL_LEVELS],
    profiles: Vec<UserProfile>,
}

impl ProfileStore {
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn profile(&self, uid: &str) -> Option<&UserProfile> {
        self.uid_index.get(uid).map(|&i| &self.profiles[i as usize])
    }

    pub fn require(&self, uid: &str) -> Result<&UserProfile> {
        self.profile(uid).ok_or_else(|| Error::UnknownUid(uid.to_string()))
    }

    pub fn profile_at(&self, idx: usize) -> &UserProfile {
        &self.profiles[idx]
    }

    pub fn index_of(&self, uid: &str) -> Option<u32> {
        self.uid_index.get(uid).copied()
    }

    pub fn total_events(&self) -> u64 {
        self.profiles.iter().map(|p| u64::from(p.event_count)).sum()
    }
}

fn day_of_ts(ts: i64) -> i32 {
    ts.div_euclid(86_400) as i32
}

/// Build profiles for every user in the corpus.
pub fn build_profiles(corpus: &Corpus) -> ProfileStore {
    let mut tokens = Interner::default();
    let mut fids = Interner::default();
    let mut urls: [Interner; URL_LEVELS] = Default::default();

    let mut uids = Vec::with_capacity(corpus.logs.len());
    let mut profiles = Vec::with_capacity(corpus.logs.len());

    // Sequential pass: intern terms and collect raw counts in uid order.
    for (uid, log) in &corpus.logs {
        let mut doc_counts: HashMap<u32, u32> = HashMap::new();
        let mut fid_counts: HashMap<u32, u32> = HashMap::new();
        let mut url_counts: [HashMap<u32, u32>; URL_LEVELS] = Default::default();
        let mut hour_hist = [0u32; 24];
        let mut dow_hist = [0u32; 7];
        let mut month_hist = [0u32; 12];
        let mut days: Vec<i32> = Vec::new();

        for event in &log.events {
            *fid_counts.entry(fids.intern(&event.fid)).or_insert(0) += 1;
            for token in corpus.maps.tokens(&event.fid) {
                *doc_counts.entry(tokens.intern(token)).or_insert(0) += 1;
            }
            let url = &corpus.maps.fid_to_url[&event.fid];
            for level in 0..URL_LEVELS {
                let prefix = url_prefix(url, level + 1);
                *url_counts[level].entry(urls[level].intern(prefix)).or_insert(0) += 1;
            }
            let dt = chrono::DateTime::from_timestamp(event.ts, 0)
                .expect("timestamp validated at load");
            hour_hist[dt.hour() as usize] += 1;
            let date = dt.date_naive();
            dow_hist[date.weekday().num_days_from_monday() as usize] += 1;
            month_hist[date.month0() as usize] += 1;
            days.push(day_of_ts(event.ts));
        }
        days.sort_unstable();
        days.dedup();

        profiles.push(UserProfile {
            uid: uid.clone(),
            doc: Channel::from_count_map(doc_counts),
            fid: Channel::from_count_map(fid_counts),
            url: url_counts.map(Channel::from_count_map),
            hour_hist,
            dow_hist,
            month_hist,
            first_day: *days.first().expect("≥2 events per user"),
            last_day: *days.last().expect("≥2 events per user"),
            active_days: days,
            event_count: log.events.len() as u32,
        });
        uids.push(uid.clone());
    }

    let uid_index = uids
        .iter()
        .enumerate()
        .map(|(i, u)| (u.clone(), i as u32))
        .collect();

    let mut store = ProfileStore {
        uids,
        uid_index,
        tokens,
        fids,
        urls,
        profiles,
    };
    finalize_weights(&mut store);
    store
}

/// Compute document frequencies and fill in TF-IDF weights and norms.
///
/// Weights are recomputed from raw counts, so a store rebuilt from a cache is
/// bit-identical to one built from the corpus.
pub(crate) fn finalize_weights(store: &mut ProfileStore) {
    let n_users = store.profiles.len();

    let mut doc_df = vec![0u32; store.tokens.len()];
    let mut fid_df = vec![0u32; store.fids.len()];
    let mut url_df: Vec<Vec<u32>> = (0..URL_LEVELS).map(|l| vec![0u32; store.urls[l].len()]).collect();
    for profile in &store.profiles {
        for &id in &profile.doc.ids {
            doc_df[id as usize] += 1;
        }
        for &id in &profile.fid.ids {
            fid_df[id as usize] += 1;
        }
        for level in 0..URL_LEVELS {
            for &id in &profile.url[level].ids {
                url_df[level][id as usize] += 1;
            }
        }
    }

    let weigh = |channel: &mut Channel, df: &[u32]| {
        let total: u64 = channel.counts.iter().map(|&c| u64::from(c)).sum();
        if total == 0 {
            channel.weights = Vec::new();
            channel.norm2 = 0.0;
            return;
        }
        let mut norm2 = 0.0;
        channel.weights = channel
            .ids
            .iter()
            .zip(&channel.counts)
            .map(|(&id, &count)| {
                let tf = f64::from(count) / total as f64;
                let idf = (n_users as f64 / f64::from(df[id as usize])).ln();
                let w = tf * idf;
                norm2 += w * w;
                w
            })
            .collect();
        channel.norm2 = norm2;
    };

    store.profiles.par_iter_mut().for_each(|profile| {
        weigh(&mut profile.doc, &doc_df);
        weigh(&mut profile.fid, &fid_df);
        for level in 0..URL_LEVELS {
            weigh(&mut profile.url[level], &url_df[level]);
        }
    });
}

/// Versioned profile cache, keyed by a corpus checksum.
#[derive(Serialize, Deserialize)]
pub struct ProfileCache {
    pub version: u32,
    pub corpus_checksum: String,
    uids: Vec<String>,
    tokens: Interner,
    fids: Interner,
    urls: [Interner; URL_LEVELS],
    profiles: Vec<UserProfile>,
}

pub const PROFILE_CACHE_VERSION: u32 = 1;

pub fn save_cache(store: &ProfileStore, path: &std::path::Path, checksum: &str) -> Result<()> {
    let cache = ProfileCache {
        version: PROFILE_CACHE_VERSION,
        corpus_checksum: checksum.to_string(),
        uids: store.uids.clone(),
        tokens: store.tokens.clone(),
        fids: store.fids.clone(),
        urls: store.urls.clone(),
        profiles: store.profiles.clone(),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, &cache)?;
    use std::io::Write as _;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a cached store; fails if the version or checksum does not match.
pub fn load_cache(path: &std::path::Path, expected_checksum: &str) -> Result<ProfileStore> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let cache: ProfileCache = serde_json::from_reader(std::io::BufReader::new(file))?;
    if cache.version != PROFILE_CACHE_VERSION {
        return Err(Error::ModelVersion {
            found: cache.version,
            expected: PROFILE_CACHE_VERSION,
        });
    }
    if cache.corpus_checksum != expected_checksum {
        return Err(Error::invalid(format!(
            "profile cache {} is stale: corpus checksum changed",
            path.display()
        )));
    }
    let mut tokens = cache.tokens;
    let mut fids = cache.fids;
    let mut urls = cache.urls;
    tokens.rebuild_index();
    fids.rebuild_index();
    for interner in &mut urls {
        interner.rebuild_index();
    }
    let uid_index = cache
        .uids
        .iter()
        .enumerate()
        .map(|(i, u)| (u.clone(), i as u32))
        .collect();
    let mut store = ProfileStore {
        uids: cache.uids,
        uid_index,
        tokens,
        fids,
        urls,
        profiles: cache.profiles,
    };
    finalize_weights(&mut store);
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::corpus_from;
    use proptest::prelude::*;

    fn channel(entries: &[(u32, f64)]) -> Channel {
        let mut e = entries.to_vec();
        e.sort_by_key(|&(id, _)| id);
        let norm2 = e.iter().map(|&(_, w)| w * w).sum();
        Channel {
            ids: e.iter().map(|&(id, _)| id).collect(),
            counts: vec![1; e.len()],
            weights: e.iter().map(|&(_, w)| w).collect(),
            norm2,
        }
    }

    #[test]
    fn tfidf_hand_case() {
        // u1 tokens [a,a,b]; token a appears in 1 of 2 users.
        let corpus = corpus_from(
            &[
                ("u1", &[("f1", 10), ("f2", 20)]),
                ("u2", &[("f3", 10), ("f3", 30)]),
            ],
            &[("f1", "x/y"), ("f2", "x/z"), ("f3", "q/r")],
            &[("f1", "a a"), ("f2", "b"), ("f3", "c")],
        );
        let store = build_profiles(&corpus);
        let p = store.profile("u1").unwrap();
        let a_id = store.tokens.get("a").unwrap();
        let idx = p.doc.ids.iter().position(|&i| i == a_id).unwrap();
        let expected = (2.0 / 3.0) * 2.0f64.ln();
        assert!((p.doc.weights[idx] - expected).abs() < 1e-9);
        assert!((expected - 0.46210).abs() < 1e-5);
    }

    #[test]
    fn universal_token_gets_zero_weight() {
        let corpus = corpus_from(
            &[
                ("u1", &[("f1", 10), ("f1", 20)]),
                ("u2", &[("f2", 10), ("f2", 30)]),
            ],
            &[("f1", "x"), ("f2", "y")],
            &[("f1", "shared"), ("f2", "shared")],
        );
        let store = build_profiles(&corpus);
        for uid in ["u1", "u2"] {
            let p = store.profile(uid).unwrap();
            assert_eq!(p.doc.weights.len(), 1);
            assert_eq!(p.doc.weights[0], 0.0);
        }
    }

    #[test]
    fn hour_histogram() {
        let corpus = corpus_from(
            &[("u1", &[("f1", 3 * 3600), ("f1", 3 * 3600 + 100), ("f1", 17 * 3600)])],
            &[("f1", "x")],
            &[],
        );
        let store = build_profiles(&corpus);
        let p = store.profile("u1").unwrap();
        let mut expected = [0u32; 24];
        expected[3] = 2;
        expected[17] = 1;
        assert_eq!(p.hour_hist, expected);
        assert_eq!(p.event_count, 3);
        assert_eq!(
            p.hour_hist.iter().sum::<u32>(),
            p.dow_hist.iter().sum::<u32>()
        );
        assert_eq!(
            p.hour_hist.iter().sum::<u32>(),
            p.month_hist.iter().sum::<u32>()
        );
    }

    #[test]
    fn dow_is_monday_first() {
        // 1970-01-01 was a Thursday.
        let corpus = corpus_from(
            &[("u1", &[("f1", 0), ("f1", 10)])],
            &[("f1", "x")],
            &[],
        );
        let store = build_profiles(&corpus);
        let p = store.profile("u1").unwrap();
        assert_eq!(p.dow_hist[3], 2);
    }

    #[test]
    fn cosine_examples() {
        let a = channel(&[(0, 1.0), (1, 1.0)]);
        let b = channel(&[(0, 1.0)]);
        let c = channel(&[(2, 5.0)]);
        assert_eq!(cosine(&a, &a), 1.0);
        assert_eq!(cosine(&a, &c), 0.0);
        assert!((cosine(&a, &b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(cosine(&a, &Channel::default()), 0.0);
    }

    #[test]
    fn store_totals_match_corpus() {
        let corpus = corpus_from(
            &[
                ("u1", &[("f1", 10), ("f2", 20), ("f1", 30)]),
                ("u2", &[("f3", 10), ("f3", 30)]),
            ],
            &[("f1", "x/y"), ("f2", "x/z"), ("f3", "q/r")],
            &[],
        );
        let store = build_profiles(&corpus);
        assert_eq!(store.total_events() as usize, corpus.total_events());
    }

    #[test]
    fn cache_round_trip_matches() {
        let corpus = corpus_from(
            &[
                ("u1", &[("f1", 10), ("f2", 7200)]),
                ("u2", &[("f3", 10), ("f3", 30)]),
            ],
            &[("f1", "x/y"), ("f2", "x/z"), ("f3", "q/r")],
            &[("f1", "a b"), ("f3", "c")],
        );
        let store = build_profiles(&corpus);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_cache(&store, f.path(), "sum").unwrap();
        let loaded = load_cache(f.path(), "sum").unwrap();
        assert_eq!(loaded.uids, store.uids);
        let (a, b) = (store.profile("u1").unwrap(), loaded.profile("u1").unwrap());
        assert_eq!(a.doc.ids, b.doc.ids);
        assert_eq!(a.doc.weights, b.doc.weights);
        assert_eq!(a.hour_hist, b.hour_hist);
        assert!(load_cache(f.path(), "other").is_err());
    }

    fn sparse_strategy() -> impl Strategy<Value = Vec<(u32, f64)>> {
        proptest::collection::btree_map(0u32..50, 0.01f64..10.0, 0..12)
            .prop_map(|m| m.into_iter().collect())
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(a in sparse_strategy(), b in sparse_strategy(), c in 0.01f64..100.0) {
            let ca = channel(&a);
            let cb = channel(&b);
            prop_assert_eq!(cosine(&ca, &cb), cosine(&cb, &ca));

            let scaled: Vec<(u32, f64)> = a.iter().map(|&(id, w)| (id, w * c)).collect();
            let cs = channel(&scaled);
            prop_assert!((cosine(&cs, &cb) - cosine(&ca, &cb)).abs() < 1e-12);
        }

        #[test]
        fn cosine_matches_dense_reference(a in sparse_strategy(), b in sparse_strategy()) {
            let ca = channel(&a);
            let cb = channel(&b);
            let mut da = [0.0f64; 50];
            let mut db = [0.0f64; 50];
            for &(id, w) in &a { da[id as usize] = w; }
            for &(id, w) in &b { db[id as usize] = w; }
            let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
            let na: f64 = da.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = db.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expected = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
            prop_assert!((cosine(&ca, &cb) - expected).abs() < 1e-9);
        }
    }
}
