//! Gradient boosted decision trees with binary logistic loss.
//!
//! Each round fits a regression tree to the negative gradients with exact
//! greedy splits (no histogram binning): every feature is scanned in
//! pre-sorted order, split gain is the usual second-order reduction
//! `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)]`, and leaf values are Newton
//! steps `−ΣG/(ΣH+λ)` applied with shrinkage. Ties between candidate splits
//! break toward the lowest feature index, then the lowest threshold, so a
//! feature-parallel search returns exactly the sequential winner.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clamp_prob, sigmoid, softplus_neg, Matrix};
use crate::{Error, Result};

pub const GBDT_MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub step: f64,
    pub min_leaf: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_trees: 200,
            max_depth: 6,
            step: 0.1,
            min_leaf: 20,
            lambda: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        gain: f64,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Value of the leaf this row falls into. Rows go left when
    /// `x[feature] < threshold`.
    pub fn leaf_value(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    at = if row[*feature as usize] < *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtModel {
    pub version: u32,
    pub n_features: usize,
    /// Prior log-odds of the positive class on the training set.
    pub base_score: f64,
    pub learning_rate: f64,
    pub config: GbdtConfig,
    pub trees: Vec<Tree>,
    /// Mean training logistic loss before any tree and after each round.
    pub train_loss: Vec<f64>,
}

impl GbdtModel {
    pub fn predict_margin(&self, row: &[f64]) -> f64 {
        assert_eq!(row.len(), self.n_features);
        let mut margin = self.base_score;
        for tree in &self.trees {
            margin += self.learning_rate * tree.leaf_value(row);
        }
        margin
    }

    pub fn predict_prob(&self, row: &[f64]) -> f64 {
        clamp_prob(sigmoid(self.predict_margin(row)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GbdtModel> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let model: GbdtModel = serde_json::from_reader(BufReader::new(file))?;
        if model.version != GBDT_MODEL_VERSION {
            return Err(Error::ModelVersion {
                found: model.version,
                expected: GBDT_MODEL_VERSION,
            });
        }
        Ok(model)
    }
}

/// Total split gain per feature name, scaled so the top feature is 1.0.
pub fn feature_importance(model: &GbdtModel, names: &[String]) -> BTreeMap<String, f64> {
    assert_eq!(names.len(), model.n_features);
    let mut gains = vec![0.0f64; model.n_features];
    for tree in &model.trees {
        for node in &tree.nodes {
            if let Node::Split { feature, gain, .. } = node {
                gains[*feature as usize] += gain;
            }
        }
    }
    let max = gains.iter().cloned().fold(0.0f64, f64::max);
    names
        .iter()
        .zip(&gains)
        .map(|(name, &g)| (name.clone(), if max > 0.0 { g / max } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct SplitCand {
    gain: f64,
    feature: u32,
    threshold: f64,
    left_count: u32,
    left_g: f64,
    left_h: f64,
}

/// Total order used to pick the winner among candidate splits.
fn better(a: &SplitCand, b: &SplitCand) -> bool {
    if a.gain != b.gain {
        return a.gain > b.gain;
    }
    if a.feature != b.feature {
        return a.feature < b.feature;
    }
    a.threshold < b.threshold
}

fn merge_candidates(
    mut acc: Vec<Option<SplitCand>>,
    other: Vec<Option<SplitCand>>,
) -> Vec<Option<SplitCand>> {
    for (slot, cand) in acc.iter_mut().zip(other) {
        match (&slot, cand) {
            (None, c) => *slot = c,
            (Some(old), Some(new)) if better(&new, old) => *slot = Some(new),
            _ => {}
        }
    }
    acc
}

struct ColumnData {
    cols: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl ColumnData {
    fn build(x: &Matrix) -> ColumnData {
        let mut cols = vec![vec![0.0f64; x.rows]; x.cols];
        for r in 0..x.rows {
            let row = x.row(r);
            for (c, col) in cols.iter_mut().enumerate() {
                col[r] = row[c];
            }
        }
        let sorted = cols
            .par_iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_unstable_by(|&a, &b| {
                    col[a as usize]
                        .total_cmp(&col[b as usize])
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        ColumnData { cols, sorted }
    }
}

const NODE_DONE: u32 = u32::MAX;

fn newton_gain(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

fn fit_tree(
    data: &ColumnData,
    grads: &[f64],
    hess: &[f64],
    config: &GbdtConfig,
    node_of: &mut [u32],
) -> Tree {
    let n = grads.len();
    let mut nodes: Vec<Node> = Vec::new();
    // Per tree node: (G, H, count) totals.
    let mut totals: Vec<(f64, f64, u32)> = Vec::new();

    let mut root = (0.0, 0.0, 0u32);
    for i in 0..n {
        node_of[i] = 0;
        root.0 += grads[i];
        root.1 += hess[i];
        root.2 += 1;
    }
    nodes.push(Node::Leaf { value: 0.0 });
    totals.push(root);
    let mut active: Vec<u32> = vec![0];

    for _depth in 0..config.max_depth {
        if active.is_empty() {
            break;
        }
        // Slot lookup for this level: node id → dense slot index.
        let mut slot_of: Vec<i32> = vec![-1; nodes.len()];
        for (slot, &nid) in active.iter().enumerate() {
            slot_of[nid as usize] = slot as i32;
        }
        let n_slots = active.len();
        let min_leaf = config.min_leaf as u32;

        let best: Vec<Option<SplitCand>> = (0..data.cols.len())
            .into_par_iter()
            .map(|f| {
                let col = &data.cols[f];
                let order = &data.sorted[f];
                let mut cnt = vec![0u32; n_slots];
                let mut gl = vec![0.0f64; n_slots];
                let mut hl = vec![0.0f64; n_slots];
                let mut last = vec![0.0f64; n_slots];
                let mut best: Vec<Option<SplitCand>> = vec![None; n_slots];
                for &i in order {
                    let nid = node_of[i as usize];
                    if nid == NODE_DONE {
                        continue;
                    }
                    let slot = slot_of[nid as usize];
                    if slot < 0 {
                        continue;
                    }
                    let slot = slot as usize;
                    let value = col[i as usize];
                    let (g_tot, h_tot, n_tot) = totals[nid as usize];
                    if cnt[slot] > 0 && value > last[slot] {
                        let right_cnt = n_tot - cnt[slot];
                        if cnt[slot] >= min_leaf && right_cnt >= min_leaf {
                            let gain = 0.5
                                * (newton_gain(gl[slot], hl[slot], config.lambda)
                                    + newton_gain(g_tot - gl[slot], h_tot - hl[slot], config.lambda)
                                    - newton_gain(g_tot, h_tot, config.lambda));
                            if gain > 1e-12 {
                                let mut threshold = 0.5 * (last[slot] + value);
                                if !(threshold > last[slot]) {
                                    threshold = value;
                                }
                                let cand = SplitCand {
                                    gain,
                                    feature: f as u32,
                                    threshold,
                                    left_count: cnt[slot],
                                    left_g: gl[slot],
                                    left_h: hl[slot],
                                };
                                match &best[slot] {
                                    Some(old) if !better(&cand, old) => {}
                                    _ => best[slot] = Some(cand),
                                }
                            }
                        }
                    }
                    cnt[slot] += 1;
                    gl[slot] += grads[i as usize];
                    hl[slot] += hess[i as usize];
                    last[slot] = value;
                }
                best
            })
            .reduce(|| vec![None; n_slots], merge_candidates);

        // Materialize the chosen splits; everything else becomes a leaf.
        let mut next_active = Vec::new();
        let mut split_info: Vec<Option<(u32, f64, u32, u32)>> = vec![None; nodes.len()];
        for (slot, &nid) in active.iter().enumerate() {
            let (g_tot, h_tot, n_tot) = totals[nid as usize];
            match best[slot] {
                Some(cand) => {
                    let left = nodes.len() as u32;
                    let right = left + 1;
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes.push(Node::Leaf { value: 0.0 });
                    totals.push((cand.left_g, cand.left_h, cand.left_count));
                    totals.push((
                        g_tot - cand.left_g,
                        h_tot - cand.left_h,
                        n_tot - cand.left_count,
                    ));
                    nodes[nid as usize] = Node::Split {
                        feature: cand.feature,
                        threshold: cand.threshold,
                        left,
                        right,
                        gain: cand.gain,
                    };
                    split_info[nid as usize] = Some((cand.feature, cand.threshold, left, right));
                    next_active.push(left);
                    next_active.push(right);
                }
                None => {
                    nodes[nid as usize] = Node::Leaf {
                        value: -g_tot / (h_tot + config.lambda),
                    };
                }
            }
        }
        for i in 0..n {
            let nid = node_of[i];
            if nid == NODE_DONE {
                continue;
            }
            match split_info.get(nid as usize).copied().flatten() {
                Some((feature, threshold, left, right)) => {
                    node_of[i] = if data.cols[feature as usize][i] < threshold {
                        left
                    } else {
                        right
                    };
                }
                None => {
                    if slot_of[nid as usize] >= 0 {
                        node_of[i] = NODE_DONE;
                    }
                }
            }
        }
        active = next_active;
    }

    // Depth limit reached: remaining active nodes become leaves.
    for &nid in &active {
        let (g_tot, h_tot, _) = totals[nid as usize];
        nodes[nid as usize] = Node::Leaf {
            value: -g_tot / (h_tot + config.lambda),
        };
    }

    Tree { nodes }
}

/// Train a boosted ensemble on binary labels.
pub fn train_gbdt(x: &Matrix, y: &[u8], config: &GbdtConfig) -> Result<GbdtModel> {
    if x.rows == 0 || x.rows != y.len() {
        return Err(Error::invalid("training set is empty or misaligned"));
    }
    let positives = y.iter().filter(|&&l| l == 1).count() as f64;
    if positives == 0.0 || positives == y.len() as f64 {
        return Err(Error::invalid("training labels contain a single class"));
    }
    let prior = (positives / y.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prior / (1.0 - prior)).ln();

    let data = ColumnData::build(x);
    let n = x.rows;
    let mut margins = vec![base_score; n];
    let mut grads = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];
    let mut node_of = vec![0u32; n];

    let mean_loss = |margins: &[f64]| -> f64 {
        margins
            .iter()
            .zip(y)
            .map(|(&m, &label)| {
                let sign = if label == 1 { 1.0 } else { -1.0 };
                softplus_neg(sign * m)
            })
            .sum::<f64>()
            / n as f64
    };

    let mut train_loss = Vec::with_capacity(config.n_trees + 1);
    train_loss.push(mean_loss(&margins));

    let mut trees = Vec::with_capacity(config.n_trees);
    for _ in 0..config.n_trees {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grads[i] = p - f64::from(y[i]);
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let tree = fit_tree(&data, &grads, &hess, config, &mut node_of);
        for i in 0..n {
            margins[i] += config.step * tree.leaf_value(x.row(i));
        }
        trees.push(tree);
        train_loss.push(mean_loss(&margins));
    }

    Ok(GbdtModel {
        version: GBDT_MODEL_VERSION,
        n_features: x.cols,
        base_score,
        learning_rate: config.step,
        config: config.clone(),
        trees,
        train_loss,
    })
}
