//! Shared builders for unit tests.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{Corpus, Event, FidMaps, MatchPairs, UserLog};

/// Build an in-memory corpus from `(uid, [(fid, ts)])`, `(fid, url)`, and
/// `(fid, "tok tok")` rows.
pub(crate) fn corpus_from(
    users: &[(&str, &[(&str, i64)])],
    urls: &[(&str, &str)],
    titles: &[(&str, &str)],
) -> Corpus {
    let mut logs = BTreeMap::new();
    for (uid, events) in users {
        let mut evs: Vec<Event> = events
            .iter()
            .map(|&(fid, ts)| Event { fid: fid.to_string(), ts })
            .collect();
        evs.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.fid.cmp(&b.fid)));
        logs.insert(uid.to_string(), UserLog { uid: uid.to_string(), events: evs });
    }
    let mut maps = FidMaps::default();
    for (fid, url) in urls {
        maps.fid_to_url.insert(fid.to_string(), url.to_string());
        maps.fid_to_tokens.entry(fid.to_string()).or_default();
    }
    for (fid, toks) in titles {
        maps.fid_to_tokens.insert(
            fid.to_string(),
            toks.split_whitespace().map(str::to_string).collect(),
        );
    }
    Corpus {
        logs,
        maps,
        train_pairs: MatchPairs::new(),
        test_uids: BTreeSet::new(),
    }
}
