//! Iterative negative sampling.
//!
//! The training set starts from one round of uniformly random negatives per
//! user. Each iteration retrains a cheap logistic-regression kernel on the
//! current sample and, from the next round on, every user contributes half
//! hard negatives (the top-scoring non-matching candidates under the current
//! model) and half fresh random negatives. The sample is rebuilt from
//! scratch each iteration; only the final round is returned, together with
//! all matching pairs labeled positive.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{canonical_pair, MatchPairs};
use crate::features::{extract_pair, LiftIndex};
use crate::learners::LinearModel;
use crate::profiles::ProfileStore;
use crate::seeding::derive_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Negatives drawn per user per iteration; must be even and ≥ 2.
    pub n: usize,
    /// Iterations; 1 means purely random negatives.
    pub k: usize,
    /// Candidates scored per user when mining hard negatives; 0 scores all.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n: 10,
            k: 2,
            pool_size: 1000,
            seed: 0,
        }
    }
}

/// One labeled training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleInstance {
    pub uid_a: String,
    pub uid_b: String,
    pub label: u8,
    /// Iteration that produced a negative; `None` for positives.
    pub iteration: Option<u32>,
    /// Whether a negative was model-selected rather than random.
    pub hard: bool,
}

/// The final labeled sample: all matches plus the last round of negatives.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub instances: Vec<SampleInstance>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.instances.iter().filter(|i| i.label == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.instances.iter().filter(|i| i.label == 0).count()
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.instances
            .iter()
            .map(|i| (i.uid_a.clone(), i.uid_b.clone()))
            .collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for inst in &self.instances {
            let iteration = match inst.iteration {
                Some(i) => i.to_string(),
                None => "-".to_string(),
            };
            writeln!(w, "{}\t{}\t{}\t{}", inst.uid_a, inst.uid_b, inst.label, iteration)
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<SampleSet> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut instances = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(path, lineno, "expected 4 tab-separated fields"));
            }
            let label: u8 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad label"))?;
            let iteration = if fields[3] == "-" {
                None
            } else {
                Some(
                    fields[3]
                        .parse::<u32>()
                        .map_err(|_| Error::parse(path, lineno, "bad iteration"))?,
                )
            };
            instances.push(SampleInstance {
                uid_a: fields[0].to_string(),
                uid_b: fields[1].to_string(),
                label,
                iteration,
                hard: false,
            });
        }
        Ok(SampleSet { instances })
    }
}

/// Models retrained after each iteration, exposed for diagnostics.
pub struct SamplingOutcome {
    pub sample: SampleSet,
    pub models: Vec<LinearModel>,
}

fn draw_distinct<'a>(
    rng: &mut impl Rng,
    universe: &'a [String],
    exclude: &BTreeSet<&str>,
    count: usize,
) -> Vec<&'a String> {
    let mut picked: BTreeSet<usize> = BTreeSet::new();
    let mut order = Vec::with_capacity(count);
    let available = universe.len() - exclude.len();
    assert!(count <= available, "caller checked feasibility");
    while order.len() < count {
        let i = rng.random_range(0..universe.len());
        if exclude.contains(universe[i].as_str()) {
            continue;
        }
        if picked.insert(i) {
            order.push(&universe[i]);
        }
    }
    order
}

/// Run the iterative sampler. `trainer` turns a sample into the kernel model
/// used for hard-negative selection on the following iteration.
pub fn iterative_negative_sample(
    train_uids: &[String],
    matches: &MatchPairs,
    config: &SamplerConfig,
    store: &ProfileStore,
    lift: &LiftIndex,
    mut trainer: impl FnMut(&SampleSet) -> Result<LinearModel>,
) -> Result<SamplingOutcome> {
    if config.n < 2 || config.n % 2 != 0 {
        return Err(Error::invalid("sampler n must be even and ≥ 2"));
    }
    if config.k < 1 {
        return Err(Error::invalid("sampler k must be ≥ 1"));
    }
    let mut universe: Vec<String> = train_uids.to_vec();
    universe.sort();
    universe.dedup();

    // Feasibility: every user must find n negatives outside itself and its
    // match partners.
    for uid in &universe {
        let partners = matches.partners_of(uid);
        if universe.len().saturating_sub(1 + partners.len()) < config.n {
            return Err(Error::invalid(format!(
                "user {uid} cannot supply {} negatives from {} candidates",
                config.n,
                universe.len()
            )));
        }
    }

    let mut model: Option<LinearModel> = None;
    let mut models = Vec::new();
    let mut final_sample = SampleSet::default();

    for iteration in 0..config.k {
        // Per-user negatives, computed independently (and in parallel) with
        // per-user RNG streams so the result is thread-count invariant.
        let per_user: Vec<Vec<SampleInstance>> = universe
            .par_iter()
            .map(|uid| -> Result<Vec<SampleInstance>> {
                let mut rng = derive_rng(
                    config.seed,
                    &format!("sampler/iter{iteration}/{uid}"),
                );
                let partners = matches.partners_of(uid);
                let mut exclude: BTreeSet<&str> = partners.clone();
                exclude.insert(uid.as_str());
                let mut out = Vec::with_capacity(config.n);

                match &model {
                    None => {
                        for cand in draw_distinct(&mut rng, &universe, &exclude, config.n) {
                            let (a, b) = canonical_pair(uid, cand);
                            out.push(SampleInstance {
                                uid_a: a,
                                uid_b: b,
                                label: 0,
                                iteration: Some(iteration as u32),
                                hard: false,
                            });
                        }
                    }
                    Some(model) => {
                        let half = config.n / 2;
                        let pool: Vec<&String> = if config.pool_size == 0
                            || config.pool_size >= universe.len() - exclude.len()
                        {
                            universe
                                .iter()
                                .filter(|c| !exclude.contains(c.as_str()))
                                .collect()
                        } else {
                            draw_distinct(&mut rng, &universe, &exclude, config.pool_size)
                        };
                        let mut scored: Vec<(f64, &String)> = pool
                            .iter()
                            .map(|cand| {
                                let feats = extract_pair(store, lift, uid, cand)?;
                                Ok((model.predict(&feats.values), *cand))
                            })
                            .collect::<Result<_>>()?;
                        scored.sort_by(|a, b| {
                            b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
                        });
                        for &(_, cand) in scored.iter().take(half) {
                            let (a, b) = canonical_pair(uid, cand);
                            out.push(SampleInstance {
                                uid_a: a,
                                uid_b: b,
                                label: 0,
                                iteration: Some(iteration as u32),
                                hard: true,
                            });
                        }
                        for cand in draw_distinct(&mut rng, &universe, &exclude, half) {
                            let (a, b) = canonical_pair(uid, cand);
                            out.push(SampleInstance {
                                uid_a: a,
                                uid_b: b,
                                label: 0,
                                iteration: Some(iteration as u32),
                                hard: false,
                            });
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        // Collapse duplicates (a pair reachable from both endpoints),
        // keeping the earliest provenance: hard selections win over random.
        let mut dedup: BTreeMap<(String, String), SampleInstance> = BTreeMap::new();
        for inst in per_user.into_iter().flatten() {
            let key = (inst.uid_a.clone(), inst.uid_b.clone());
            match dedup.get(&key) {
                Some(existing) if existing.hard || !inst.hard => {}
                _ => {
                    dedup.insert(key, inst);
                }
            }
        }

        let mut sample = SampleSet::default();
        for (a, b) in matches.iter() {
            sample.instances.push(SampleInstance {
                uid_a: a.clone(),
                uid_b: b.clone(),
                label: 1,
                iteration: None,
                hard: false,
            });
        }
        sample.instances.extend(dedup.into_values());

        let trained = trainer(&sample)?;
        models.push(trained.clone());
        model = Some(trained);
        final_sample = sample;
    }

    Ok(SamplingOutcome {
        sample: final_sample,
        models,
    })
}

/// Default kernel trainer: extract features for the sample and fit LR.
pub fn lr_trainer<'a>(
    store: &'a ProfileStore,
    lift: &'a LiftIndex,
    lr_config: crate::learners::LrConfig,
) -> impl FnMut(&SampleSet) -> Result<LinearModel> + 'a {
    move |sample: &SampleSet| {
        let rows = crate::features::extract_batch(store, lift, &sample.pairs())?;
        let matrix = crate::learners::Matrix::from_rows(
            &rows.into_iter().map(|r| r.values).collect::<Vec<_>>(),
        );
        crate::learners::train_lr(&matrix, &sample.labels(), &lr_config)
    }
}
