//! Pairwise feature extraction across three pillars.
//!
//! For a user pair (canonicalized so the lexicographically smaller uid comes
//! first) the extractor emits a fixed 657-dimensional vector:
//!
//! * **general** (24): TF-IDF cosines over words/fids/URL levels 1-4, common
//!   fid/URL counts, Pearson correlation and two-directional cross entropy
//!   of hour/day-of-week/month histograms, date-gap and overlap-day counts,
//!   and the lifespan skewness ratio.
//! * **keyurl** (7): counts of common URLs per lift-rank group.
//! * **footprint** (626): 40 lift-bucket counts of common URLs, a 500-wide
//!   indicator of which top-ranked key URLs both users visited, and the raw
//!   hour/day/month histograms of both users.
//!
//! Correlations use raw histograms and return 0.0 when either side has zero
//! variance. Cross entropy smooths each histogram by +1 per bin before
//! normalizing, so it is always finite.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::keyurl::{bucket_of, group_of, LiftTable, N_BUCKETS, N_GROUPS};
use crate::profiles::{cosine, Channel, ProfileStore, UserProfile};
use crate::{Error, Result};

pub const GENERAL_DIM: usize = 24;
pub const KEYURL_DIM: usize = N_GROUPS;
pub const TOP_HIT_DIM: usize = 500;
pub const TEMPORAL_DIM: usize = 2 * (24 + 7 + 12);
pub const FOOTPRINT_DIM: usize = N_BUCKETS as usize + TOP_HIT_DIM + TEMPORAL_DIM;
pub const TOTAL_DIM: usize = GENERAL_DIM + KEYURL_DIM + FOOTPRINT_DIM;

/// Pearson correlation of two equal-length count histograms.
pub fn pearson(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mean_a = a.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let mean_b = b.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = f64::from(x) - mean_a;
        let dy = f64::from(y) - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    cov / (var_a.sqrt() * var_b.sqrt())
}

/// Cross entropy `-Σ p_i ln q_i` of two histograms, each smoothed by +1 per
/// bin and normalized.
pub fn cross_entropy(p: &[u32], q: &[u32]) -> f64 {
    assert_eq!(p.len(), q.len());
    let bins = p.len() as f64;
    let p_total = p.iter().map(|&x| f64::from(x)).sum::<f64>() + bins;
    let q_total = q.iter().map(|&x| f64::from(x)).sum::<f64>() + bins;
    let mut ce = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let ps = (f64::from(pi) + 1.0) / p_total;
        let qs = (f64::from(qi) + 1.0) / q_total;
        ce -= ps * qs.ln();
    }
    ce
}

/// General-similarity pillar; writes exactly [`GENERAL_DIM`] values.
pub fn general_sim(u: &UserProfile, v: &UserProfile, out: &mut [f64]) {
    assert_eq!(out.len(), GENERAL_DIM);
    out[0] = cosine(&u.doc, &v.doc);
    out[1] = cosine(&u.fid, &v.fid);
    for level in 0..4 {
        out[2 + level] = cosine(&u.url[level], &v.url[level]);
    }
    out[6] = u.fid.common_count(&v.fid) as f64;
    for level in 0..4 {
        out[7 + level] = u.url[level].common_count(&v.url[level]) as f64;
    }
    out[11] = pearson(&u.hour_hist, &v.hour_hist);
    out[12] = cross_entropy(&u.hour_hist, &v.hour_hist);
    out[13] = cross_entropy(&v.hour_hist, &u.hour_hist);
    out[14] = pearson(&u.dow_hist, &v.dow_hist);
    out[15] = cross_entropy(&u.dow_hist, &v.dow_hist);
    out[16] = cross_entropy(&v.dow_hist, &u.dow_hist);
    out[17] = pearson(&u.month_hist, &v.month_hist);
    out[18] = cross_entropy(&u.month_hist, &v.month_hist);
    out[19] = cross_entropy(&v.month_hist, &u.month_hist);
    out[20] = (i64::from(u.first_day) - i64::from(v.first_day)).abs() as f64;
    out[21] = (i64::from(u.last_day) - i64::from(v.last_day)).abs() as f64;
    out[22] = overlap_days(&u.active_days, &v.active_days) as f64;
    let (lu, lv) = (u.lifespan_days() as f64, v.lifespan_days() as f64);
    out[23] = lu.min(lv) / lu.max(lv);
}

fn overlap_days(a: &[i32], b: &[i32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
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

/// A lift table resolved against a profile store for O(1) rank lookups.
#[derive(Debug)]
pub struct LiftIndex {
    pub level: usize,
    /// 1-based rank per url-interner id; 0 = unranked.
    rank_by_id: Vec<u32>,
    /// Interner ids of the top-500 URLs by rank, where resolvable.
    top_ids: Vec<Option<u32>>,
}

impl LiftIndex {
    pub fn build(table: &LiftTable, store: &ProfileStore) -> LiftIndex {
        let interner = &store.urls[table.level - 1];
        let mut rank_by_id = vec![0u32; interner.len()];
        let mut top_ids = vec![None; TOP_HIT_DIM];
        for (i, entry) in table.entries.iter().enumerate() {
            let rank = i as u32 + 1;
            if let Some(id) = interner.get(&entry.url) {
                rank_by_id[id as usize] = rank;
                if (rank as usize) <= TOP_HIT_DIM {
                    top_ids[rank as usize - 1] = Some(id);
                }
            }
        }
        LiftIndex {
            level: table.level,
            rank_by_id,
            top_ids,
        }
    }

    /// Rank of an interned URL id; `None` when the URL is unranked.
    pub fn rank_of_id(&self, id: u32) -> Option<u32> {
        match self.rank_by_id.get(id as usize) {
            Some(&r) if r > 0 => Some(r),
            _ => None,
        }
    }
}

fn lift_channel<'a>(u: &'a UserProfile, idx: &LiftIndex) -> &'a Channel {
    &u.url[idx.level - 1]
}

fn for_each_common_url(u: &UserProfile, v: &UserProfile, idx: &LiftIndex, mut f: impl FnMut(u32)) {
    let (ua, ub) = (lift_channel(u, idx), lift_channel(v, idx));
    let (mut i, mut j) = (0, 0);
    while i < ua.ids.len() && j < ub.ids.len() {
        match ua.ids[i].cmp(&ub.ids[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                f(ua.ids[i]);
                i += 1;
                j += 1;
            }
        }
    }
}

/// Key-URL pillar: common-URL counts per lift group. Unranked URLs fall in
/// the final "others" group.
pub fn key_url_counts(u: &UserProfile, v: &UserProfile, idx: &LiftIndex, out: &mut [f64]) {
    assert_eq!(out.len(), KEYURL_DIM);
    out.fill(0.0);
    for_each_common_url(u, v, idx, |id| {
        let group = match idx.rank_of_id(id) {
            Some(rank) => group_of(rank).expect("rank ≥ 1"),
            None => 6,
        };
        out[group as usize] += 1.0;
    });
}

/// Footprint pillar; `u` must be the lexicographically smaller uid.
pub fn footprints(u: &UserProfile, v: &UserProfile, idx: &LiftIndex, out: &mut [f64]) {
    assert_eq!(out.len(), FOOTPRINT_DIM);
    out.fill(0.0);
    let (buckets, rest) = out.split_at_mut(N_BUCKETS as usize);
    let (top_hits, temporal) = rest.split_at_mut(TOP_HIT_DIM);

    for_each_common_url(u, v, idx, |id| {
        if let Some(rank) = idx.rank_of_id(id) {
            if let Some(bucket) = bucket_of(rank).expect("rank ≥ 1") {
                buckets[bucket as usize] += 1.0;
            }
        }
    });
    let (cu, cv) = (lift_channel(u, idx), lift_channel(v, idx));
    for (slot, id) in top_hits.iter_mut().zip(&idx.top_ids) {
        if let Some(id) = id {
            if cu.contains(*id) && cv.contains(*id) {
                *slot = 1.0;
            }
        }
    }
    let mut pos = 0;
    for profile in [u, v] {
        for &c in &profile.hour_hist {
            temporal[pos] = f64::from(c);
            pos += 1;
        }
        for &c in &profile.dow_hist {
            temporal[pos] = f64::from(c);
            pos += 1;
        }
        for &c in &profile.month_hist {
            temporal[pos] = f64::from(c);
            pos += 1;
        }
    }
}

/// Which pillar a feature belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pillar {
    General,
    Keyurl,
    Footprint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDef {
    pub index: usize,
    pub name: String,
    pub pillar: Pillar,
}

/// The fixed feature layout; serialized next to any feature matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub entries: Vec<FeatureDef>,
}

impl FeatureSchema {
    pub fn standard() -> FeatureSchema {
        let mut names: Vec<(String, Pillar)> = Vec::with_capacity(TOTAL_DIM);
        let mut push = |n: String, p: Pillar| names.push((n, p));

        push("DocSim".into(), Pillar::General);
        push("FidSim".into(), Pillar::General);
        for level in 1..=4 {
            push(format!("URLSimL{level}"), Pillar::General);
        }
        push("FidComCnt".into(), Pillar::General);
        for level in 1..=4 {
            push(format!("URLComCntL{level}"), Pillar::General);
        }
        for gran in ["Hour", "Day", "Month"] {
            push(format!("{gran}Cor"), Pillar::General);
            push(format!("{gran}CeAb"), Pillar::General);
            push(format!("{gran}CeBa"), Pillar::General);
        }
        push("FirstDateGap".into(), Pillar::General);
        push("LastDateGap".into(), Pillar::General);
        push("OverlapDay".into(), Pillar::General);
        push("Skewness".into(), Pillar::General);

        for g in 0..KEYURL_DIM {
            push(format!("KeyURLGroup{g}"), Pillar::Keyurl);
        }

        for b in 0..N_BUCKETS {
            push(format!("KeyURLDist{b:02}"), Pillar::Footprint);
        }
        for i in 0..TOP_HIT_DIM {
            push(format!("TopURLHit{i:03}"), Pillar::Footprint);
        }
        for side in ["A", "B"] {
            for h in 0..24 {
                push(format!("Hour{side}{h:02}"), Pillar::Footprint);
            }
            for d in 0..7 {
                push(format!("Day{side}{d}"), Pillar::Footprint);
            }
            for m in 0..12 {
                push(format!("Month{side}{m:02}"), Pillar::Footprint);
            }
        }

        let entries = names
            .into_iter()
            .enumerate()
            .map(|(index, (name, pillar))| FeatureDef { index, name, pillar })
            .collect::<Vec<_>>();
        assert_eq!(entries.len(), TOTAL_DIM);
        FeatureSchema { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Feature indices belonging to the given pillars, in schema order.
    pub fn indices_of(&self, pillars: &[Pillar]) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| pillars.contains(&e.pillar))
            .map(|e| e.index)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FeatureSchema> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Feature vector for one canonical user pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub uid_a: String,
    pub uid_b: String,
    pub values: Vec<f64>,
    pub label: Option<u8>,
}

/// Extract the full feature vector for a pair; order of arguments does not
/// matter because the pair is canonicalized first.
pub fn extract_pair(
    store: &ProfileStore,
    idx: &LiftIndex,
    uid_a: &str,
    uid_b: &str,
) -> Result<PairFeatures> {
    let (a, b) = if uid_a <= uid_b { (uid_a, uid_b) } else { (uid_b, uid_a) };
    let pa = store.require(a)?;
    let pb = store.require(b)?;
    let mut values = vec![0.0; TOTAL_DIM];
    general_sim(pa, pb, &mut values[..GENERAL_DIM]);
    key_url_counts(pa, pb, idx, &mut values[GENERAL_DIM..GENERAL_DIM + KEYURL_DIM]);
    footprints(pa, pb, idx, &mut values[GENERAL_DIM + KEYURL_DIM..]);
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(PairFeatures {
        uid_a: a.to_string(),
        uid_b: b.to_string(),
        values,
        label: None,
    })
}

/// Extract features for many pairs; row `i` of the output corresponds to
/// input pair `i` regardless of how the work is parallelized.
pub fn extract_batch(
    store: &ProfileStore,
    idx: &LiftIndex,
    pairs: &[(String, String)],
) -> Result<Vec<PairFeatures>> {
    pairs
        .par_iter()
        .map(|(a, b)| extract_pair(store, idx, a, b))
        .collect()
}

/// Write a labeled feature matrix as CSV with the canonical header.
pub fn write_features_csv(path: &Path, rows: &[PairFeatures]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("uid_a,uid_b,label");
    for i in 0..TOTAL_DIM {
        header.push_str(&format!(",f{i:03}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        debug_assert_eq!(row.values.len(), TOTAL_DIM);
        let mut line = format!(
            "{},{},{}",
            row.uid_a,
            row.uid_b,
            row.label.map(|l| l.to_string()).unwrap_or_default()
        );
        for v in &row.values {
            line.push(',');
            line.push_str(&format_value(*v));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn read_features_csv(path: &Path) -> Result<Vec<PairFeatures>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "missing header")),
    };
    let expected_cols = 3 + TOTAL_DIM;
    if header.split(',').count() != expected_cols {
        return Err(Error::parse(path, 1, "unexpected column count in header"));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let uid_a = fields.next().unwrap_or_default().to_string();
        let uid_b = fields.next().unwrap_or_default().to_string();
        let label_field = fields.next().unwrap_or_default();
        let label = if label_field.is_empty() {
            None
        } else {
            Some(
                label_field
                    .parse::<u8>()
                    .map_err(|_| Error::parse(path, lineno, "bad label"))?,
            )
        };
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::parse(path, lineno, "bad feature value"))
            })
            .collect::<Result<_>>()?;
        if values.len() != TOTAL_DIM {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {TOTAL_DIM} features, got {}", values.len()),
            ));
        }
        rows.push(PairFeatures { uid_a, uid_b, values, label });
    }
    Ok(rows)
}
