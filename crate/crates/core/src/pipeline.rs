//! End-to-end inference over the held-out users.
//!
//! Exhaustive N×N scoring is replaced by blocking: candidates for a test
//! user are the other test users sharing at least one fid or one URL prefix
//! at the blocking level, found through an inverted index. A cheap LR model
//! then keeps the best candidates per user, the GBDT model scores the
//! surviving pairs, and the submission selector picks the final pair set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{canonical_pair, MatchPairs};
use crate::features::{extract_pair, LiftIndex};
use crate::learners::{prf1, GbdtModel, LinearModel, Metrics};
use crate::profiles::ProfileStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    /// URL level used for the shared-item index.
    pub level: usize,
    /// Maximum candidates kept per user.
    pub cap: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig { level: 2, cap: 5000 }
    }
}

/// Per-user candidate lists, sorted by score descending then uid.
#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub per_uid: BTreeMap<String, Vec<(String, f64)>>,
}

impl CandidateSet {
    pub fn total_candidates(&self) -> usize {
        self.per_uid.values().map(Vec::len).sum()
    }

    /// Distinct canonical pairs covered by the candidate lists.
    pub fn distinct_pairs(&self) -> Vec<(String, String)> {
        let mut set = BTreeSet::new();
        for (uid, cands) in &self.per_uid {
            for (cand, _) in cands {
                set.insert(canonical_pair(uid, cand));
            }
        }
        set.into_iter().collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (uid, cands) in &self.per_uid {
            for (cand, score) in cands {
                writeln!(w, "{uid}\t{cand}\t{score}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<CandidateSet> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut per_uid: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, lineno, "expected 3 tab-separated fields"));
            }
            let score: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad score"))?;
            per_uid
                .entry(fields[0].to_string())
                .or_default()
                .push((fields[1].to_string(), score));
        }
        Ok(CandidateSet { per_uid })
    }
}

/// Build candidate lists for every test uid from shared fids and shared URL
/// prefixes at the blocking level. The blocking score is the number of
/// distinct shared items.
pub fn block_candidates(
    test_uids: &BTreeSet<String>,
    store: &ProfileStore,
    config: &BlockConfig,
) -> CandidateSet {
    assert!((1..=4).contains(&config.level));
    let uids: Vec<&String> = test_uids.iter().collect();
    let positions: HashMap<&str, u32> = uids
        .iter()
        .enumerate()
        .map(|(i, uid)| (uid.as_str(), i as u32))
        .collect();

    // Inverted index over the candidate universe (test users only; the
    // submission pairs both live in the held-out set).
    let mut fid_postings: HashMap<u32, Vec<u32>> = HashMap::new();
    let mut url_postings: HashMap<u32, Vec<u32>> = HashMap::new();
    for (i, uid) in uids.iter().enumerate() {
        let profile = store.profile(uid).expect("test uid has a profile");
        for &id in &profile.fid.ids {
            fid_postings.entry(id).or_default().push(i as u32);
        }
        for &id in &profile.url[config.level - 1].ids {
            url_postings.entry(id).or_default().push(i as u32);
        }
    }

    let lists: Vec<Vec<(String, f64)>> = uids
        .par_iter()
        .enumerate()
        .map(|(i, uid)| {
            let profile = store.profile(uid).expect("test uid has a profile");
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for &id in &profile.fid.ids {
                if let Some(post) = fid_postings.get(&id) {
                    for &other in post {
                        if other != i as u32 {
                            *counts.entry(other).or_insert(0) += 1;
                        }
                    }
                }
            }
            for &id in &profile.url[config.level - 1].ids {
                if let Some(post) = url_postings.get(&id) {
                    for &other in post {
                        if other != i as u32 {
                            *counts.entry(other).or_insert(0) += 1;
                        }
                    }
                }
            }
            let mut scored: Vec<(u32, u32)> = counts.into_iter().collect();
            scored.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            scored.truncate(config.cap);
            scored
                .into_iter()
                .map(|(other, count)| (uids[other as usize].clone(), f64::from(count)))
                .collect()
        })
        .collect();

    let per_uid = uids
        .into_iter()
        .cloned()
        .zip(lists)
        .collect::<BTreeMap<_, _>>();
    let _ = positions;
    CandidateSet { per_uid }
}

/// Rescore each candidate list with the LR model and keep the best `top`.
pub fn lr_filter(
    candidates: &CandidateSet,
    model: &LinearModel,
    store: &ProfileStore,
    lift: &LiftIndex,
    top: usize,
) -> Result<CandidateSet> {
    let entries: Vec<(&String, &Vec<(String, f64)>)> = candidates.per_uid.iter().collect();
    let filtered: Vec<(String, Vec<(String, f64)>)> = entries
        .par_iter()
        .map(|(uid, cands)| -> Result<(String, Vec<(String, f64)>)> {
            let mut scored: Vec<(String, f64)> = cands
                .iter()
                .map(|(cand, _)| {
                    let feats = extract_pair(store, lift, uid, cand)?;
                    Ok((cand.clone(), model.predict(&feats.values)))
                })
                .collect::<Result<_>>()?;
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            scored.truncate(top);
            Ok(((*uid).clone(), scored))
        })
        .collect::<Result<_>>()?;
    Ok(CandidateSet {
        per_uid: filtered.into_iter().collect(),
    })
}

/// Scored test pairs, sorted by probability descending with canonical-pair
/// tie-breaks; the ranking input to submission selection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPairs {
    pub items: Vec<(String, String, f64)>,
}

impl ScoredPairs {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sort(&mut self) {
        self.items.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| a.1.cmp(&b.1))
        });
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (a, b, score) in &self.items {
            writeln!(w, "{a}\t{b}\t{score}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<ScoredPairs> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, lineno, "expected 3 tab-separated fields"));
            }
            let score: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad score"))?;
            items.push((fields[0].to_string(), fields[1].to_string(), score));
        }
        let mut scored = ScoredPairs { items };
        scored.sort();
        Ok(scored)
    }
}

/// Score every distinct candidate pair with the GBDT model.
pub fn gbdt_score(
    candidates: &CandidateSet,
    model: &GbdtModel,
    store: &ProfileStore,
    lift: &LiftIndex,
) -> Result<ScoredPairs> {
    if model.n_features != crate::features::TOTAL_DIM {
        return Err(Error::invalid(format!(
            "model expects {} features but the schema has {}",
            model.n_features,
            crate::features::TOTAL_DIM
        )));
    }
    let pairs = candidates.distinct_pairs();
    let items: Vec<(String, String, f64)> = pairs
        .par_iter()
        .map(|(a, b)| -> Result<(String, String, f64)> {
            let feats = extract_pair(store, lift, a, b)?;
            Ok((a.clone(), b.clone(), model.predict_prob(&feats.values)))
        })
        .collect::<Result<_>>()?;
    let mut scored = ScoredPairs { items };
    scored.sort();
    Ok(scored)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubmissionConfig {
    /// Global top cutoff; `None` lets the caller derive it from corpus size.
    pub n: Option<usize>,
    /// Per-user depth.
    pub k: usize,
    /// Rank-slack multiplier: a per-user pick needs global rank < n·r.
    pub r: f64,
}

impl Default for SubmissionConfig {
    fn default() -> Self {
        SubmissionConfig {
            n: None,
            k: 2,
            r: 2.0,
        }
    }
}

/// Pick the submission set: the global top `n` pairs, plus each user's top-k
/// partners whose global rank is strictly below `n × r`.
pub fn select_submission(scored: &ScoredPairs, n: usize, k: usize, r: f64) -> MatchPairs {
    let mut selected = MatchPairs::new();
    for (a, b, _) in scored.items.iter().take(n) {
        selected.insert(a, b).expect("scored pairs are not self-pairs");
    }
    if k == 0 {
        return selected;
    }
    let slack = n as f64 * r;
    // Per-user partner lists in global rank order.
    let mut per_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (rank0, (a, b, _)) in scored.items.iter().enumerate() {
        per_user.entry(a.as_str()).or_default().push(rank0);
        per_user.entry(b.as_str()).or_default().push(rank0);
    }
    for ranks in per_user.values() {
        for &rank0 in ranks.iter().take(k) {
            let rank = (rank0 + 1) as f64;
            if rank < slack {
                let (a, b, _) = &scored.items[rank0];
                selected.insert(a, b).expect("no self-pairs");
            }
        }
    }
    selected
}

/// Metrics of a predicted pair set against the truth.
pub fn evaluate(predicted: &MatchPairs, truth: &MatchPairs) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::invalid("truth pair set is empty"));
    }
    Ok(prf1(predicted, truth))
}

/// Re-run submission selection over a grid of `n` values.
pub fn sweep_n(
    scored: &ScoredPairs,
    truth: &MatchPairs,
    grid: &[usize],
    k: usize,
    r: f64,
) -> Result<Vec<(usize, f64)>> {
    grid.iter()
        .map(|&n| {
            let selected = select_submission(scored, n, k, r);
            Ok((n, evaluate(&selected, truth)?.f1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyurl::{compute_lift, RandomPairSet};
    use crate::learners::LrConfig;
    use crate::profiles::build_profiles;
    use crate::testutil::corpus_from;

    fn scored(items: &[(&str, &str, f64)]) -> ScoredPairs {
        let mut s = ScoredPairs {
            items: items
                .iter()
                .map(|&(a, b, p)| (a.to_string(), b.to_string(), p))
                .collect(),
        };
        s.sort();
        s
    }

    #[test]
    fn select_submission_hand_trace() {
        let t = scored(&[
            ("a", "b", 0.9),
            ("c", "d", 0.8),
            ("a", "e", 0.7),
            ("c", "f", 0.6),
            ("g", "h", 0.5),
        ]);
        let p = select_submission(&t, 2, 1, 2.0);
        assert_eq!(p.len(), 3);
        assert!(p.contains("a", "b"));
        assert!(p.contains("c", "d"));
        assert!(p.contains("a", "e"));
        assert!(!p.contains("c", "f"), "rank 4 is not < 4");
        assert!(!p.contains("g", "h"));
    }

    #[test]
    fn select_submission_k0_and_saturation() {
        let t = scored(&[("a", "b", 0.9), ("c", "d", 0.8), ("a", "e", 0.7)]);
        let top_only = select_submission(&t, 2, 0, 2.0);
        assert_eq!(top_only.len(), 2);
        assert!(top_only.contains("a", "b") && top_only.contains("c", "d"));

        for k in [0usize, 1, 3] {
            let all = select_submission(&t, 10, k, 1.0);
            assert_eq!(all.len(), 3, "n ≥ |T| selects everything");
        }
    }

    #[test]
    fn select_submission_contains_top_n_and_is_permutation_invariant() {
        let t = scored(&[
            ("a", "b", 0.9),
            ("c", "d", 0.9),
            ("e", "f", 0.9),
            ("a", "d", 0.2),
        ]);
        // Equal scores ordered by canonical pair; permuting input changes nothing.
        let mut shuffled = ScoredPairs {
            items: t.items.iter().rev().cloned().collect(),
        };
        shuffled.sort();
        assert_eq!(t, shuffled);
        let p = select_submission(&t, 2, 2, 10.0);
        for (a, b, _) in t.items.iter().take(2) {
            assert!(p.contains(a, b));
        }
    }

    #[test]
    fn evaluate_and_sweep() {
        let truth: MatchPairs = [("a".to_string(), "b".to_string())].into_iter().collect();
        let m = evaluate(&truth, &truth).unwrap();
        assert_eq!(m.f1, 1.0);
        assert!(evaluate(&truth, &MatchPairs::new()).is_err());

        let t = scored(&[("a", "b", 0.9), ("c", "d", 0.8)]);
        let table = sweep_n(&t, &truth, &[1], 0, 2.0).unwrap();
        assert_eq!(table.len(), 1);
        let direct = evaluate(&select_submission(&t, 1, 0, 2.0), &truth).unwrap();
        assert_eq!(table[0], (1, direct.f1));
    }

    fn blocking_world() -> (crate::corpus::Corpus, BTreeSet<String>) {
        let corpus = corpus_from(
            &[
                ("u1", &[("f1", 1), ("f2", 2)]),
                ("u2", &[("f1", 3), ("f3", 4)]),
                ("u3", &[("f4", 5), ("f4", 6)]),
                ("u4", &[("f5", 7), ("f5", 8)]),
            ],
            &[
                ("f1", "shared/x"),
                ("f2", "a/b"),
                ("f3", "c/d"),
                ("f4", "lonely/z"),
                ("f5", "solo/q"),
            ],
            &[],
        );
        let test_uids: BTreeSet<String> =
            ["u1", "u2", "u3", "u4"].iter().map(|s| s.to_string()).collect();
        (corpus, test_uids)
    }

    #[test]
    fn blocking_links_shared_items_only() {
        let (corpus, test_uids) = blocking_world();
        let store = build_profiles(&corpus);
        let cands = block_candidates(&test_uids, &store, &BlockConfig::default());
        // u1 and u2 share fid f1 and level-2 URL "shared/x".
        assert_eq!(cands.per_uid["u1"].len(), 1);
        assert_eq!(cands.per_uid["u1"][0].0, "u2");
        assert_eq!(cands.per_uid["u1"][0].1, 2.0);
        assert_eq!(cands.per_uid["u2"][0].0, "u1");
        assert!(cands.per_uid["u3"].is_empty(), "no shared items → empty list");
        assert!(cands.per_uid["u4"].is_empty());
    }

    #[test]
    fn lr_filter_keeps_top_scored() {
        let (corpus, test_uids) = blocking_world();
        let store = build_profiles(&corpus);
        let mut matches = MatchPairs::new();
        matches.insert("u1", "u2").unwrap();
        let randoms = RandomPairSet {
            pairs: vec![("u3".into(), "u4".into())],
            seed: 0,
        };
        let table = compute_lift(&matches, &randoms, &store, 1, 1.0).unwrap();
        let lift = LiftIndex::build(&table, &store);
        let cands = block_candidates(&test_uids, &store, &BlockConfig::default());

        // With top larger than any list the sets are unchanged.
        let rows: Vec<Vec<f64>> = vec![vec![0.0; crate::features::TOTAL_DIM]; 4]
            .into_iter()
            .enumerate()
            .map(|(i, mut v)| {
                v[0] = i as f64;
                v
            })
            .collect();
        let y = vec![0, 1, 0, 1];
        let model =
            crate::learners::train_lr(&crate::learners::Matrix::from_rows(&rows), &y, &LrConfig::default())
                .unwrap();
        let filtered = lr_filter(&cands, &model, &store, &lift, 100).unwrap();
        for (uid, cands) in &cands.per_uid {
            let kept: BTreeSet<&String> = filtered.per_uid[uid].iter().map(|(c, _)| c).collect();
            let orig: BTreeSet<&String> = cands.iter().map(|(c, _)| c).collect();
            assert_eq!(kept, orig);
        }

        let filtered = lr_filter(&cands, &model, &store, &lift, 0).unwrap();
        assert_eq!(filtered.total_candidates(), 0);
    }

    #[test]
    fn gbdt_score_dedupes_and_sorts() {
        let (corpus, test_uids) = blocking_world();
        let store = build_profiles(&corpus);
        let mut matches = MatchPairs::new();
        matches.insert("u1", "u2").unwrap();
        let randoms = RandomPairSet {
            pairs: vec![("u3".into(), "u4".into())],
            seed: 0,
        };
        let table = compute_lift(&matches, &randoms, &store, 1, 1.0).unwrap();
        let lift = LiftIndex::build(&table, &store);
        let cands = block_candidates(&test_uids, &store, &BlockConfig::default());
        assert_eq!(cands.total_candidates(), 2, "pair visible from both sides");

        let model = GbdtModel {
            version: 1,
            n_features: crate::features::TOTAL_DIM,
            base_score: 0.3,
            learning_rate: 0.1,
            config: Default::default(),
            trees: vec![],
            train_loss: vec![],
        };
        let scored = gbdt_score(&cands, &model, &store, &lift).unwrap();
        assert_eq!(scored.len(), 1, "deduplicated to one pair");
        assert_eq!(scored.items[0].0, "u1");

        let empty = gbdt_score(&CandidateSet::default(), &model, &store, &lift).unwrap();
        assert!(empty.is_empty());

        let bad = GbdtModel { n_features: 3, ..model };
        assert!(gbdt_score(&cands, &bad, &store, &lift).is_err());
    }

    #[test]
    fn scored_pairs_tsv_round_trip_keeps_order() {
        let t = scored(&[("a", "b", 0.9), ("c", "d", 0.8), ("a", "e", 0.7)]);
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write_tsv(f.path()).unwrap();
        let loaded = ScoredPairs::read_tsv(f.path()).unwrap();
        assert_eq!(t, loaded);
        // The written order matches an independent sort of the rows.
        let content = std::fs::read_to_string(f.path()).unwrap();
        let mut rows: Vec<(f64, String)> = content
            .lines()
            .map(|l| {
                let mut it = l.split('\t');
                let a = it.next().unwrap();
                let b = it.next().unwrap();
                let s: f64 = it.next().unwrap().parse().unwrap();
                (s, format!("{a}\t{b}"))
            })
            .collect();
        rows.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
        let expected: Vec<String> = rows
            .into_iter()
            .map(|(s, ab)| format!("{ab}\t{s}"))
            .collect();
        assert_eq!(content.lines().collect::<Vec<_>>(), expected);
    }
}
