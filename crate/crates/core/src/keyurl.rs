//! Key-URL mining: lift ratios, rank groups, and rank buckets.
//!
//! A URL "appears in a pair" when it is in both users' URL sets at the
//! configured level. The lift of a URL compares its appearance frequency in
//! matching pairs against random pairs, with Laplace smoothing `alpha` so the
//! ratio stays finite when the random-pair count is zero:
//!
//! `lift(h) = ((c_M(h)+α)/(|M|+α)) / ((c_R(h)+α)/(|R|+α))`
//!
//! URLs are ranked by lift (descending, ties broken by URL string) and the
//! rank determines a group (top 100, top 1000, ... top 5000, others) and a
//! bucket (rank/100 within the top 4000).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::corpus::MatchPairs;
use crate::profiles::ProfileStore;
use crate::seeding::derive_rng;
use crate::{Error, Result};

/// Upper rank bound of groups 0..=5; ranks beyond the last are group 6.
pub const GROUP_BOUNDARIES: [u32; 6] = [100, 1000, 2000, 3000, 4000, 5000];
pub const BUCKET_SIZE: u32 = 100;
pub const N_BUCKETS: u32 = 40;
pub const N_GROUPS: usize = 7;

/// Group index (0..=6) for a 1-based lift rank.
pub fn group_of(rank: u32) -> Result<u8> {
    if rank < 1 {
        return Err(Error::invalid("rank must be ≥ 1"));
    }
    for (g, &bound) in GROUP_BOUNDARIES.iter().enumerate() {
        if rank <= bound {
            return Ok(g as u8);
        }
    }
    Ok(6)
}

/// Bucket index (0..=39) for ranks within the top 4000; `None` beyond.
pub fn bucket_of(rank: u32) -> Result<Option<u8>> {
    if rank < 1 {
        return Err(Error::invalid("rank must be ≥ 1"));
    }
    if rank <= BUCKET_SIZE * N_BUCKETS {
        Ok(Some(((rank - 1) / BUCKET_SIZE) as u8))
    } else {
        Ok(None)
    }
}

/// Uniformly sampled non-matching pairs, used as the lift denominator.
#[derive(Debug, Clone)]
pub struct RandomPairSet {
    pub pairs: Vec<(String, String)>,
    pub seed: u64,
}

impl RandomPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sample `count` distinct unordered pairs uniformly from the non-matching
/// pairs over `uids`, deterministically for a given seed.
pub fn sample_random_pairs(
    uids: &[String],
    matches: &MatchPairs,
    count: usize,
    seed: u64,
) -> Result<RandomPairSet> {
    let mut sorted: Vec<&String> = uids.iter().collect();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let total_pairs = n.saturating_mul(n.saturating_sub(1)) / 2;
    let matches_inside = matches
        .iter()
        .filter(|(a, b)| {
            sorted.binary_search(&a).is_ok() && sorted.binary_search(&b).is_ok()
        })
        .count();
    let possible = total_pairs.saturating_sub(matches_inside);
    if count > possible {
        return Err(Error::invalid(format!(
            "cannot sample {count} non-matching pairs: only {possible} exist"
        )));
    }

    let mut rng = derive_rng(seed, "keyurl/random-pairs");
    let mut pairs: Vec<(String, String)>;
    if count * 3 >= possible {
        // Dense request: enumerate everything and take a partial shuffle.
        let mut all: Vec<(usize, usize)> = Vec::with_capacity(possible);
        for i in 0..n {
            for j in (i + 1)..n {
                if !matches.contains(sorted[i], sorted[j]) {
                    all.push((i, j));
                }
            }
        }
        for k in 0..count {
            let pick = k + rng.random_range(0..(all.len() - k));
            all.swap(k, pick);
        }
        all.truncate(count);
        all.sort_unstable();
        pairs = all
            .into_iter()
            .map(|(i, j)| (sorted[i].clone(), sorted[j].clone()))
            .collect();
    } else {
        // Sparse request: rejection sampling on index pairs.
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < count {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let (i, j) = if i < j { (i, j) } else { (j, i) };
            if matches.contains(sorted[i], sorted[j]) {
                continue;
            }
            seen.insert((i, j));
        }
        pairs = seen
            .into_iter()
            .map(|(i, j)| (sorted[i].clone(), sorted[j].clone()))
            .collect();
    }
    pairs.sort();
    Ok(RandomPairSet { pairs, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftEntry {
    pub url: String,
    pub lift: f64,
}

/// Ranked key URLs with their lift ratios. Entry `i` has rank `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftTable {
    pub level: usize,
    pub alpha: f64,
    pub n_match_pairs: usize,
    pub n_random_pairs: usize,
    pub entries: Vec<LiftEntry>,
}

impl LiftTable {
    /// 1-based rank of a URL, if ranked.
    pub fn rank_of(&self, url: &str) -> Option<u32> {
        self.entries
            .iter()
            .position(|e| e.url == url)
            .map(|i| i as u32 + 1)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, entry) in self.entries.iter().enumerate() {
            let rank = i as u32 + 1;
            let group = group_of(rank)?;
            let bucket = match bucket_of(rank)? {
                Some(b) => b.to_string(),
                None => "-".to_string(),
            };
            writeln!(w, "{rank}\t{}\t{}\t{group}\t{bucket}", entry.url, entry.lift)
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read back a table written by [`LiftTable::write_tsv`]. Metadata that
    /// is not part of the TSV (level, alpha, pair counts) must be supplied.
    pub fn read_tsv(
        path: &Path,
        level: usize,
        alpha: f64,
        n_match_pairs: usize,
        n_random_pairs: usize,
    ) -> Result<LiftTable> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::parse(path, lineno, "expected 5 tab-separated fields"));
            }
            let rank: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad rank"))?;
            if rank != entries.len() + 1 {
                return Err(Error::parse(path, lineno, "ranks must be contiguous from 1"));
            }
            let lift: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad lift"))?;
            entries.push(LiftEntry {
                url: fields[1].to_string(),
                lift,
            });
        }
        Ok(LiftTable {
            level,
            alpha,
            n_match_pairs,
            n_random_pairs,
            entries,
        })
    }
}

/// Count, for every URL at `level`, the pairs in which it appears on both
/// sides, then rank by smoothed lift.
pub fn compute_lift(
    matches: &MatchPairs,
    randoms: &RandomPairSet,
    store: &ProfileStore,
    level: usize,
    alpha: f64,
) -> Result<LiftTable> {
    if matches.is_empty() {
        return Err(Error::invalid("cannot compute lift from zero matching pairs"));
    }
    assert!((1..=4).contains(&level), "url level must be in 1..=4");
    let mut counts: HashMap<u32, (u32, u32)> = HashMap::new();

    let mut tally = |pairs: &mut dyn Iterator<Item = (&String, &String)>, is_match: bool| -> Result<()> {
        for (a, b) in pairs {
            let pa = store.require(a)?;
            let pb = store.require(b)?;
            let (ua, ub) = (&pa.url[level - 1], &pb.url[level - 1]);
            let (mut i, mut j) = (0, 0);
            while i < ua.ids.len() && j < ub.ids.len() {
                match ua.ids[i].cmp(&ub.ids[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        let slot = counts.entry(ua.ids[i]).or_insert((0, 0));
                        if is_match {
                            slot.0 += 1;
                        } else {
                            slot.1 += 1;
                        }
                        i += 1;
                        j += 1;
                    }
                }
            }
        }
        Ok(())
    };

    tally(&mut matches.iter().map(|(a, b)| (a, b)), true)?;
    tally(&mut randoms.pairs.iter().map(|(a, b)| (a, b)), false)?;

    let m = matches.len() as f64;
    let r = randoms.len() as f64;
    let mut entries: Vec<LiftEntry> = counts
        .into_iter()
        .map(|(id, (cm, cr))| {
            let p_match = (f64::from(cm) + alpha) / (m + alpha);
            let p_random = (f64::from(cr) + alpha) / (r + alpha);
            LiftEntry {
                url: store.urls[level - 1].name(id).to_string(),
                lift: p_match / p_random,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.lift
            .partial_cmp(&a.lift)
            .expect("lift is finite with alpha > 0")
            .then_with(|| a.url.cmp(&b.url))
    });

    Ok(LiftTable {
        level,
        alpha,
        n_match_pairs: matches.len(),
        n_random_pairs: randoms.len(),
        entries,
    })
}

/// Convenience for tests and diagnostics: lift of one URL straight from the
/// raw counts.
pub fn lift_from_counts(c_match: u32, n_match: usize, c_random: u32, n_random: usize, alpha: f64) -> f64 {
    let p_match = (f64::from(c_match) + alpha) / (n_match as f64 + alpha);
    let p_random = (f64::from(c_random) + alpha) / (n_random as f64 + alpha);
    p_match / p_random
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Event, FidMaps, UserLog};
    use crate::profiles::build_profiles;
    use std::collections::{BTreeMap, BTreeSet, HashSet};

    #[test]
    fn lift_hand_cases() {
        assert_eq!(lift_from_counts(2, 4, 1, 100, 0.0), 50.0);
        let v = lift_from_counts(2, 4, 1, 100, 1.0);
        assert!((v - (3.0 / 5.0) / (2.0 / 101.0)).abs() < 1e-12);
        assert!((v - 30.3).abs() < 1e-9);
        // URL in every pair on both sides with |M| = |R|: lift is exactly 1.
        for alpha in [0.0, 0.5, 1.0, 7.0] {
            assert_eq!(lift_from_counts(10, 10, 10, 10, alpha), 1.0);
        }
    }

    #[test]
    fn group_and_bucket_boundaries() {
        assert_eq!(group_of(1).unwrap(), 0);
        assert_eq!(group_of(100).unwrap(), 0);
        assert_eq!(bucket_of(100).unwrap(), Some(0));
        assert_eq!(group_of(101).unwrap(), 1);
        assert_eq!(group_of(1000).unwrap(), 1);
        assert_eq!(group_of(1001).unwrap(), 2);
        assert_eq!(group_of(3901).unwrap(), 4);
        assert_eq!(bucket_of(3901).unwrap(), Some(39));
        assert_eq!(group_of(4001).unwrap(), 5);
        assert_eq!(bucket_of(4001).unwrap(), None);
        assert_eq!(group_of(5001).unwrap(), 6);
        assert!(group_of(0).is_err());
        assert!(bucket_of(0).is_err());
    }

    fn uid_vec(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn random_pairs_forced_case() {
        let uids = uid_vec(&["a", "b", "c"]);
        let mut matches = MatchPairs::new();
        matches.insert("a", "b").unwrap();
        let set = sample_random_pairs(&uids, &matches, 2, 7).unwrap();
        let got: HashSet<_> = set.pairs.iter().cloned().collect();
        let want: HashSet<_> = [
            ("a".to_string(), "c".to_string()),
            ("b".to_string(), "c".to_string()),
        ]
        .into_iter()
        .collect();
        assert_eq!(got, want);
        assert!(sample_random_pairs(&uids, &matches, 3, 7).is_err());
    }

    #[test]
    fn random_pairs_deterministic_and_distinct() {
        let uids: Vec<String> = (0..100).map(|i| format!("u{i:03}")).collect();
        let mut matches = MatchPairs::new();
        matches.insert("u000", "u001").unwrap();
        let a = sample_random_pairs(&uids, &matches, 1000, 42).unwrap();
        let b = sample_random_pairs(&uids, &matches, 1000, 42).unwrap();
        assert_eq!(a.pairs, b.pairs);
        // Independent scan for duplicates, self-pairs, and match overlap.
        let mut seen = HashSet::new();
        for (x, y) in &a.pairs {
            assert_ne!(x, y);
            assert!(x < y, "pairs must be canonical");
            assert!(!matches.contains(x, y));
            assert!(seen.insert((x.clone(), y.clone())), "duplicate pair");
        }
        assert_eq!(a.pairs.len(), 1000);
        let c = sample_random_pairs(&uids, &matches, 1000, 43).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    /// Six users with hand-chosen URL sets; brute-force recount as oracle.
    #[test]
    fn compute_lift_matches_brute_force() {
        let users: Vec<(&str, &[(&str, i64)])> = vec![
            ("u1", &[("f1", 10), ("f2", 20)]),
            ("u2", &[("f1", 30), ("f3", 40)]),
            ("u3", &[("f2", 50), ("f3", 60)]),
            ("u4", &[("f4", 70), ("f1", 80)]),
            ("u5", &[("f4", 90), ("f5", 100)]),
            ("u6", &[("f5", 110), ("f2", 120)]),
        ];
        let url_rows = [
            ("f1", "alpha/x"),
            ("f2", "beta/y"),
            ("f3", "alpha/z"),
            ("f4", "gamma/w"),
            ("f5", "beta/q"),
        ];
        let mut logs = BTreeMap::new();
        for (uid, events) in &users {
            logs.insert(
                uid.to_string(),
                UserLog {
                    uid: uid.to_string(),
                    events: events
                        .iter()
                        .map(|&(fid, ts)| Event { fid: fid.into(), ts })
                        .collect(),
                },
            );
        }
        let mut maps = FidMaps::default();
        for (fid, url) in url_rows {
            maps.fid_to_url.insert(fid.into(), url.into());
            maps.fid_to_tokens.insert(fid.into(), vec![]);
        }
        let corpus = Corpus {
            logs,
            maps: maps.clone(),
            train_pairs: MatchPairs::new(),
            test_uids: BTreeSet::new(),
        };
        let store = build_profiles(&corpus);

        let mut matches = MatchPairs::new();
        matches.insert("u1", "u2").unwrap();
        matches.insert("u3", "u6").unwrap();
        let randoms = RandomPairSet {
            pairs: vec![
                ("u1".into(), "u4".into()),
                ("u2".into(), "u5".into()),
                ("u4".into(), "u5".into()),
            ],
            seed: 0,
        };
        let alpha = 1.0;
        let table = compute_lift(&matches, &randoms, &store, 1, alpha).unwrap();

        // Brute-force oracle straight from the raw event lists.
        let url_set = |uid: &str| -> HashSet<String> {
            users
                .iter()
                .find(|(u, _)| *u == uid)
                .unwrap()
                .1
                .iter()
                .map(|&(fid, _)| {
                    let full = url_rows.iter().find(|(f, _)| *f == fid).unwrap().1;
                    full.split('/').next().unwrap().to_string()
                })
                .collect()
        };
        let mut oracle: BTreeMap<String, (u32, u32)> = BTreeMap::new();
        for (a, b) in matches.iter() {
            for url in url_set(a).intersection(&url_set(b)) {
                oracle.entry(url.clone()).or_default().0 += 1;
            }
        }
        for (a, b) in &randoms.pairs {
            for url in url_set(a).intersection(&url_set(b)) {
                oracle.entry(url.clone()).or_default().1 += 1;
            }
        }
        let mut expected: Vec<LiftEntry> = oracle
            .into_iter()
            .map(|(url, (cm, cr))| LiftEntry {
                url,
                lift: lift_from_counts(cm, matches.len(), cr, randoms.len(), alpha),
            })
            .collect();
        expected.sort_by(|a, b| {
            b.lift
                .partial_cmp(&a.lift)
                .unwrap()
                .then_with(|| a.url.cmp(&b.url))
        });
        assert_eq!(table.entries, expected);
    }

    #[test]
    fn lift_table_invariant_under_pair_permutation() {
        let users: Vec<(&str, &[(&str, i64)])> = vec![
            ("u1", &[("f1", 10), ("f2", 20)]),
            ("u2", &[("f1", 30), ("f2", 40)]),
            ("u3", &[("f2", 50), ("f1", 60)]),
            ("u4", &[("f1", 70), ("f2", 80)]),
        ];
        let mut logs = BTreeMap::new();
        for (uid, events) in &users {
            logs.insert(
                uid.to_string(),
                UserLog {
                    uid: uid.to_string(),
                    events: events
                        .iter()
                        .map(|&(fid, ts)| Event { fid: fid.into(), ts })
                        .collect(),
                },
            );
        }
        let mut maps = FidMaps::default();
        maps.fid_to_url.insert("f1".into(), "a/x".into());
        maps.fid_to_url.insert("f2".into(), "b/y".into());
        maps.fid_to_tokens.insert("f1".into(), vec![]);
        maps.fid_to_tokens.insert("f2".into(), vec![]);
        let corpus = Corpus {
            logs,
            maps,
            train_pairs: MatchPairs::new(),
            test_uids: BTreeSet::new(),
        };
        let store = build_profiles(&corpus);
        let mut matches = MatchPairs::new();
        matches.insert("u1", "u2").unwrap();
        matches.insert("u3", "u4").unwrap();
        let fwd = RandomPairSet {
            pairs: vec![("u1".into(), "u3".into()), ("u2".into(), "u4".into())],
            seed: 0,
        };
        let rev = RandomPairSet {
            pairs: fwd.pairs.iter().rev().cloned().collect(),
            seed: 0,
        };
        let t1 = compute_lift(&matches, &fwd, &store, 1, 1.0).unwrap();
        let t2 = compute_lift(&matches, &rev, &store, 1, 1.0).unwrap();
        assert_eq!(t1, t2);

        let f1 = tempfile::NamedTempFile::new().unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        t1.write_tsv(f1.path()).unwrap();
        t2.write_tsv(f2.path()).unwrap();
        assert_eq!(
            std::fs::read(f1.path()).unwrap(),
            std::fs::read(f2.path()).unwrap()
        );
    }

    #[test]
    fn empty_matches_is_error() {
        let corpus = crate::testutil::corpus_from(
            &[("u1", &[("f1", 1), ("f1", 2)])],
            &[("f1", "x")],
            &[],
        );
        let store = build_profiles(&corpus);
        let randoms = RandomPairSet { pairs: vec![], seed: 0 };
        assert!(compute_lift(&MatchPairs::new(), &randoms, &store, 1, 1.0).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let table = LiftTable {
            level: 1,
            alpha: 1.0,
            n_match_pairs: 4,
            n_random_pairs: 100,
            entries: vec![
                LiftEntry { url: "a".into(), lift: 50.0 },
                LiftEntry { url: "b".into(), lift: 1.5 },
            ],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        table.write_tsv(f.path()).unwrap();
        let loaded = LiftTable::read_tsv(f.path(), 1, 1.0, 4, 100).unwrap();
        assert_eq!(table, loaded);
    }
}
