//! Random-forest diagnosis of CN vs MCI-or-worse.
//!
//! A from-scratch classification forest (bootstrap aggregation of greedy
//! Gini-gain trees) maps a visit's marker values plus covariates to a
//! diagnosis label. The forest is trained against a synthetic labeler that
//! stands in for the clinician: a weighted score of the three most
//! diagnosis-relevant markers compared against a calibrated threshold.

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::transforms::{Outcome, N_OUTCOMES};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Cn,
    MciPlus,
}

impl Diagnosis {
    fn index(self) -> usize {
        match self {
            Diagnosis::Cn => 0,
            Diagnosis::MciPlus => 1,
        }
    }
}

/// Gini impurity `1 - sum p_c^2` of a class-count vector.
pub fn gini_impurity(class_counts: &[u64]) -> Result<f64> {
    let total: u64 = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("gini impurity of all-zero counts".into()));
    }
    let t = total as f64;
    let sum_sq: f64 = class_counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * p
        })
        .sum();
    Ok(1.0 - sum_sq)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        class: Diagnosis,
    },
    Split {
        feature: u16,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

/// A single decision tree over a flat node arena (root at index 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    /// Bootstrap-sample indices this tree was grown on. Training-time
    /// bookkeeping only; not persisted in artifacts.
    #[serde(skip)]
    pub in_bag: Vec<u32>,
}

impl DecisionTree {
    pub fn predict(&self, features: &[f64]) -> Diagnosis {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if features[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// One labeled training example.
#[derive(Debug, Clone)]
pub struct TrainingRow {
    pub features: Vec<f64>,
    pub label: Diagnosis,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub mtry: usize,
    pub min_node_size: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: 3,
            min_node_size: 5,
        }
    }
}

/// Trained random forest with out-of-bag bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub mtry: usize,
    pub n_features: usize,
    /// Per-training-row OOB vote tally `[cn, mci_plus]`.
    pub oob_votes: Vec<[u32; 2]>,
    pub oob_error: f64,
}

impl Forest {
    /// Majority vote over trees; ties break toward CN.
    pub fn predict(&self, features: &[f64]) -> Diagnosis {
        let mci: usize = self
            .trees
            .iter()
            .filter(|t| t.predict(features) == Diagnosis::MciPlus)
            .count();
        if 2 * mci > self.trees.len() {
            Diagnosis::MciPlus
        } else {
            Diagnosis::Cn
        }
    }
}

struct TreeBuilder<'a> {
    rows: &'a [TrainingRow],
    mtry: usize,
    min_node_size: usize,
    n_features: usize,
}

impl<'a> TreeBuilder<'a> {
    fn grow(&self, sample: Vec<u32>, rng: &mut impl Rng) -> DecisionTree {
        let mut nodes = Vec::new();
        let mut work = vec![(0usize, sample.clone())]; // (node slot, row indices)
        nodes.push(Node::Leaf {
            class: Diagnosis::Cn,
        });
        while let Some((slot, idx)) = work.pop() {
            let counts = self.counts(&idx);
            let pure = counts[0] == 0 || counts[1] == 0;
            if pure || idx.len() < self.min_node_size {
                nodes[slot] = Node::Leaf {
                    class: majority(&counts),
                };
                continue;
            }
            match self.best_split(&idx, &counts, rng) {
                Some((feature, threshold)) => {
                    let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idx
                        .into_iter()
                        .partition(|&i| self.rows[i as usize].features[feature] <= threshold);
                    let left = nodes.len() as u32;
                    nodes.push(Node::Leaf {
                        class: Diagnosis::Cn,
                    });
                    let right = nodes.len() as u32;
                    nodes.push(Node::Leaf {
                        class: Diagnosis::Cn,
                    });
                    nodes[slot] = Node::Split {
                        feature: feature as u16,
                        threshold,
                        left,
                        right,
                    };
                    work.push((left as usize, left_idx));
                    work.push((right as usize, right_idx));
                }
                None => {
                    nodes[slot] = Node::Leaf {
                        class: majority(&counts),
                    };
                }
            }
        }
        DecisionTree {
            nodes,
            in_bag: sample,
        }
    }

    fn counts(&self, idx: &[u32]) -> [u64; 2] {
        let mut c = [0u64; 2];
        for &i in idx {
            c[self.rows[i as usize].label.index()] += 1;
        }
        c
    }

    /// Best Gini-gain split over `mtry` randomly chosen features; `None` when
    /// no split improves impurity.
    fn best_split(
        &self,
        idx: &[u32],
        parent_counts: &[u64; 2],
        rng: &mut impl Rng,
    ) -> Option<(usize, f64)> {
        let n = idx.len() as f64;
        let parent_imp = gini_impurity(parent_counts).unwrap();
        // partial Fisher-Yates for mtry distinct features
        let mut feats: Vec<usize> = (0..self.n_features).collect();
        for i in 0..self.mtry.min(self.n_features) {
            let j = rng.gen_range(i..self.n_features);
            feats.swap(i, j);
        }
        let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, gain)
        let mut vals: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        for &f in feats.iter().take(self.mtry.min(self.n_features)) {
            vals.clear();
            vals.extend(
                idx.iter()
                    .map(|&i| (self.rows[i as usize].features[f], self.rows[i as usize].label.index())),
            );
            vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut left = [0u64; 2];
            for w in 0..vals.len() - 1 {
                left[vals[w].1] += 1;
                if vals[w + 1].0 <= vals[w].0 {
                    continue; // no boundary between equal values
                }
                let nl = (w + 1) as f64;
                let nr = n - nl;
                let right = [parent_counts[0] - left[0], parent_counts[1] - left[1]];
                let child_imp = (nl * gini_impurity(&left).unwrap()
                    + nr * gini_impurity(&right).unwrap())
                    / n;
                let gain = parent_imp - child_imp;
                if gain > 1e-12 && best.map_or(true, |(_, _, g)| gain > g) {
                    let threshold = 0.5 * (vals[w].0 + vals[w + 1].0);
                    best = Some((f, threshold, gain));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }
}

fn majority(counts: &[u64; 2]) -> Diagnosis {
    // ties toward CN
    if counts[1] > counts[0] {
        Diagnosis::MciPlus
    } else {
        Diagnosis::Cn
    }
}

/// Grow a forest on bootstrap samples. Trees train in parallel, each on its
/// own `(master, tag, tree index)` stream, so the result is independent of
/// thread scheduling.
pub fn train_forest(
    rows: &[TrainingRow],
    config: &ForestConfig,
    master: u64,
    tag: u64,
) -> Result<Forest> {
    if rows.len() < 2 {
        return Err(Error::Training("need at least 2 training rows".into()));
    }
    let n_features = rows[0].features.len();
    if rows.iter().any(|r| r.features.len() != n_features) {
        return Err(Error::Training("inconsistent feature lengths".into()));
    }
    let has = |d: Diagnosis| rows.iter().any(|r| r.label == d);
    if !has(Diagnosis::Cn) || !has(Diagnosis::MciPlus) {
        return Err(Error::Training(
            "training set must contain both classes".into(),
        ));
    }
    if config.mtry == 0 || config.mtry > n_features {
        return Err(Error::Training(format!(
            "mtry must be in 1..={n_features}"
        )));
    }
    if config.n_trees == 0 {
        return Err(Error::Training("need at least one tree".into()));
    }

    let builder = TreeBuilder {
        rows,
        mtry: config.mtry,
        min_node_size: config.min_node_size,
        n_features,
    };
    let n = rows.len();
    let trees: Vec<DecisionTree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(master, Domain::Tree, &[tag, t as u64]);
            let sample: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n) as u32).collect();
            builder.grow(sample, &mut rng)
        })
        .collect();

    // OOB votes: integer tallies are order-independent, so the merge is
    // deterministic under any parallel schedule.
    let mut oob_votes = vec![[0u32; 2]; n];
    let mut in_bag = vec![false; n];
    for tree in &trees {
        in_bag.iter_mut().for_each(|b| *b = false);
        for &i in &tree.in_bag {
            in_bag[i as usize] = true;
        }
        for (i, row) in rows.iter().enumerate() {
            if !in_bag[i] {
                oob_votes[i][tree.predict(&row.features).index()] += 1;
            }
        }
    }
    let mut wrong = 0usize;
    let mut voted = 0usize;
    for (votes, row) in oob_votes.iter().zip(rows) {
        if votes[0] + votes[1] == 0 {
            continue;
        }
        voted += 1;
        let pred = if votes[1] > votes[0] {
            Diagnosis::MciPlus
        } else {
            Diagnosis::Cn
        };
        if pred != row.label {
            wrong += 1;
        }
    }
    let oob_error = if voted == 0 {
        f64::NAN
    } else {
        wrong as f64 / voted as f64
    };

    Ok(Forest {
        trees,
        mtry: config.mtry,
        n_features,
        oob_votes,
        oob_error,
    })
}

/// Synthetic ground-truth labeler standing in for the clinician: a weighted
/// score of the CDR-SB, Logical Memory, and FAQ markers against a threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LabelerSpec {
    pub w_cdrsb: f64,
    pub w_logmem: f64,
    pub w_faq: f64,
    pub theta: f64,
}

impl Default for LabelerSpec {
    fn default() -> Self {
        Self {
            w_cdrsb: 0.5,
            w_logmem: 0.3,
            w_faq: 0.2,
            theta: 0.5,
        }
    }
}

impl LabelerSpec {
    pub fn score(&self, z: &[f64; N_OUTCOMES]) -> f64 {
        self.w_cdrsb * z[Outcome::Cdrsb.index()]
            + self.w_logmem * z[Outcome::LogMem.index()]
            + self.w_faq * z[Outcome::Faq.index()]
    }
}

/// MCI-or-worse iff the weighted marker score reaches the threshold.
pub fn synthetic_labeler(z: &[f64; N_OUTCOMES], spec: &LabelerSpec) -> Diagnosis {
    if spec.score(z) >= spec.theta {
        Diagnosis::MciPlus
    } else {
        Diagnosis::Cn
    }
}

/// First MCI+ visit defines the event time; otherwise censored at the last
/// visit inside the follow-up limit. The diagnosis sequence is not absorbing,
/// but the event is defined by first occurrence.
pub fn progression_time(
    sequence: &[Diagnosis],
    visit_grid: &[f64],
    follow_up_limit: f64,
) -> Result<(f64, bool)> {
    let mut last_time = None;
    for (j, &d) in sequence.iter().enumerate() {
        let t = visit_grid[j];
        if t > follow_up_limit + 1e-9 {
            break;
        }
        if d == Diagnosis::MciPlus {
            return Ok((t, true));
        }
        last_time = Some(t);
    }
    match last_time {
        Some(t) => Ok((t, false)),
        None => Err(Error::Data("empty diagnosis sequence".into())),
    }
}

/// Versioned forest artifact tying a trained forest to the labeler it was
/// trained against, so `fit-forest` output feeds `run-scenario` reproducibly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestArtifact {
    pub version: u32,
    pub labeler: LabelerSpec,
    pub n_training_rows: usize,
    pub forest: Forest,
}

pub const FOREST_ARTIFACT_VERSION: u32 = 1;

impl ForestArtifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest artifact serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: ForestArtifact =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("forest artifact: {e}")))?;
        if a.version != FOREST_ARTIFACT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported forest artifact version {}",
                a.version
            )));
        }
        Ok(a)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gini_examples() {
        assert_abs_diff_eq!(gini_impurity(&[10, 0]).unwrap(), 0.0);
        assert_abs_diff_eq!(gini_impurity(&[5, 5]).unwrap(), 0.5);
        assert_abs_diff_eq!(gini_impurity(&[3, 1]).unwrap(), 0.375);
        assert!(gini_impurity(&[0, 0]).is_err());
    }

    #[test]
    fn gini_invariances() {
        // permutation of class counts and count scaling leave it unchanged
        assert_abs_diff_eq!(
            gini_impurity(&[3, 9]).unwrap(),
            gini_impurity(&[9, 3]).unwrap()
        );
        assert_abs_diff_eq!(
            gini_impurity(&[3, 9]).unwrap(),
            gini_impurity(&[30, 90]).unwrap()
        );
    }

    fn labeled_rows(n: usize, seed: u64, separable: bool) -> Vec<TrainingRow> {
        use rand::Rng;
        let mut rng = stream(seed, Domain::Corpus, &[0]);
        (0..n)
            .map(|_| {
                let x: f64 = rng.gen_range(-2.0..2.0);
                let label = if separable {
                    if x > 0.0 {
                        Diagnosis::MciPlus
                    } else {
                        Diagnosis::Cn
                    }
                } else if rng.gen_bool(0.4) {
                    Diagnosis::MciPlus
                } else {
                    Diagnosis::Cn
                };
                TrainingRow {
                    features: vec![x],
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn separable_data_perfect_oob() {
        // classes separated by a margin: every bootstrap puts the split
        // inside the gap, so OOB accuracy is exactly 1 for any seed
        let rows: Vec<TrainingRow> = (0..400)
            .map(|i| {
                let x = if i % 2 == 0 {
                    -1.0 - (i % 7) as f64 * 0.2
                } else {
                    1.0 + (i % 7) as f64 * 0.2
                };
                TrainingRow {
                    features: vec![x],
                    label: if x > 0.0 {
                        Diagnosis::MciPlus
                    } else {
                        Diagnosis::Cn
                    },
                }
            })
            .collect();
        let cfg = ForestConfig {
            n_trees: 60,
            mtry: 1,
            min_node_size: 5,
        };
        for seed in [77, 78, 79] {
            let forest = train_forest(&rows, &cfg, seed, 0).unwrap();
            assert_eq!(forest.oob_error, 0.0);
        }
    }

    #[test]
    fn permutation_null_oob_matches_majority_rate() {
        // permutation null: labels carry no signal, so OOB accuracy sits at
        // the majority-class rate
        use rand::Rng;
        let mut rng = stream(22, Domain::Corpus, &[5]);
        let rows: Vec<TrainingRow> = (0..2000)
            .map(|_| TrainingRow {
                features: vec![rng.gen_range(-2.0..2.0)],
                label: if rng.gen_bool(0.5) {
                    Diagnosis::MciPlus
                } else {
                    Diagnosis::Cn
                },
            })
            .collect();
        let majority_rate = {
            let cn = rows.iter().filter(|r| r.label == Diagnosis::Cn).count() as f64
                / rows.len() as f64;
            cn.max(1.0 - cn)
        };
        let cfg = ForestConfig {
            n_trees: 300,
            mtry: 1,
            min_node_size: 5,
        };
        let forest = train_forest(&rows, &cfg, 78, 0).unwrap();
        let oob_accuracy = 1.0 - forest.oob_error;
        assert!(
            (oob_accuracy - majority_rate).abs() < 0.05,
            "oob accuracy {oob_accuracy} vs majority rate {majority_rate}"
        );
    }

    #[test]
    fn single_class_rejected() {
        let rows: Vec<TrainingRow> = (0..10)
            .map(|i| TrainingRow {
                features: vec![i as f64],
                label: Diagnosis::Cn,
            })
            .collect();
        assert!(train_forest(&rows, &ForestConfig::default(), 1, 0).is_err());
    }

    #[test]
    fn tie_breaks_toward_cn() {
        let leaf = |class| DecisionTree {
            nodes: vec![Node::Leaf { class }],
            in_bag: vec![],
        };
        let forest = Forest {
            trees: vec![
                leaf(Diagnosis::Cn),
                leaf(Diagnosis::MciPlus),
                leaf(Diagnosis::Cn),
                leaf(Diagnosis::MciPlus),
            ],
            mtry: 1,
            n_features: 1,
            oob_votes: vec![],
            oob_error: 0.0,
        };
        assert_eq!(forest.predict(&[0.0]), Diagnosis::Cn);
        let unanimous = Forest {
            trees: vec![leaf(Diagnosis::MciPlus), leaf(Diagnosis::MciPlus)],
            mtry: 1,
            n_features: 1,
            oob_votes: vec![],
            oob_error: 0.0,
        };
        assert_eq!(unanimous.predict(&[0.0]), Diagnosis::MciPlus);
    }

    #[test]
    fn predict_is_deterministic() {
        let rows = labeled_rows(300, 23, true);
        let cfg = ForestConfig {
            n_trees: 40,
            mtry: 1,
            min_node_size: 5,
        };
        let f1 = train_forest(&rows, &cfg, 5, 3).unwrap();
        let f2 = train_forest(&rows, &cfg, 5, 3).unwrap();
        for i in -12..=12 {
            let x = [i as f64 / 5.0];
            assert_eq!(f1.predict(&x), f2.predict(&x));
        }
    }

    #[test]
    fn forest_beats_single_tree() {
        // averaged over 10 seeds, held-out forest accuracy >= single-tree accuracy
        use rand::Rng;
        let mut forest_acc = 0.0;
        let mut tree_acc = 0.0;
        for seed in 0..10u64 {
            let mut rng = stream(seed, Domain::Corpus, &[9]);
            let gen_rows = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<TrainingRow> {
                (0..n)
                    .map(|_| {
                        let a: f64 = rng.gen_range(-1.5..1.5);
                        let b: f64 = rng.gen_range(-1.5..1.5);
                        let noisy = a + 0.7 * b + rng.gen_range(-0.4..0.4);
                        TrainingRow {
                            features: vec![a, b],
                            label: if noisy > 0.1 {
                                Diagnosis::MciPlus
                            } else {
                                Diagnosis::Cn
                            },
                        }
                    })
                    .collect()
            };
            let train = gen_rows(&mut rng, 400);
            let test = gen_rows(&mut rng, 400);
            let cfg = ForestConfig {
                n_trees: 50,
                mtry: 1,
                min_node_size: 5,
            };
            let forest = train_forest(&train, &cfg, seed, 1).unwrap();
            let acc = |pred: &dyn Fn(&[f64]) -> Diagnosis| {
                test.iter().filter(|r| pred(&r.features) == r.label).count() as f64
                    / test.len() as f64
            };
            forest_acc += acc(&|x| forest.predict(x));
            tree_acc += acc(&|x| forest.trees[0].predict(x));
        }
        assert!(
            forest_acc >= tree_acc,
            "forest {forest_acc} vs tree {tree_acc}"
        );
    }

    #[test]
    fn labeler_examples() {
        let spec = LabelerSpec::default();
        let zeros = [0.0; N_OUTCOMES];
        assert_eq!(synthetic_labeler(&zeros, &spec), Diagnosis::Cn);
        let mut z = zeros;
        z[Outcome::Cdrsb.index()] = 2.0;
        assert_abs_diff_eq!(spec.score(&z), 1.0);
        assert_eq!(synthetic_labeler(&z, &spec), Diagnosis::MciPlus);
        let degenerate = LabelerSpec {
            theta: f64::NEG_INFINITY,
            ..spec
        };
        assert_eq!(synthetic_labeler(&zeros, &degenerate), Diagnosis::MciPlus);
    }

    #[test]
    fn progression_time_cases() {
        let grid: Vec<f64> = (0..=16).map(|i| i as f64 * 0.5).collect();
        let all_cn = vec![Diagnosis::Cn; 10]; // through 4.5 years
        assert_eq!(
            progression_time(&all_cn, &grid, 4.5).unwrap(),
            (4.5, false)
        );
        let mut seq = vec![Diagnosis::Cn; 10];
        seq[4] = Diagnosis::MciPlus; // first MCI+ at 2.0
        assert_eq!(progression_time(&seq, &grid, 4.5).unwrap(), (2.0, true));
        // reversion after the first MCI+ does not move the event
        seq[5] = Diagnosis::Cn;
        assert_eq!(progression_time(&seq, &grid, 4.5).unwrap(), (2.0, true));
        assert!(progression_time(&[], &grid, 4.5).is_err());
    }

    #[test]
    fn progression_time_monotone_in_follow_up() {
        let grid: Vec<f64> = (0..=16).map(|i| i as f64 * 0.5).collect();
        let mut seq = vec![Diagnosis::Cn; 17];
        seq[9] = Diagnosis::MciPlus;
        let (t_short, e_short) = progression_time(&seq, &grid, 3.0).unwrap();
        let (t_long, e_long) = progression_time(&seq, &grid, 8.0).unwrap();
        assert!(!e_short && t_short == 3.0);
        assert!(e_long && t_long == 4.5);
        // an event inside the shorter window stays put when extended
        let mut early = vec![Diagnosis::Cn; 17];
        early[2] = Diagnosis::MciPlus;
        let a = progression_time(&early, &grid, 3.0).unwrap();
        let b = progression_time(&early, &grid, 8.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn artifact_round_trip() {
        let rows = labeled_rows(120, 31, true);
        let cfg = ForestConfig {
            n_trees: 12,
            mtry: 1,
            min_node_size: 5,
        };
        let forest = train_forest(&rows, &cfg, 3, 0).unwrap();
        let artifact = ForestArtifact {
            version: FOREST_ARTIFACT_VERSION,
            labeler: LabelerSpec::default(),
            n_training_rows: rows.len(),
            forest,
        };
        let text = artifact.to_json();
        let back = ForestArtifact::from_json(&text).unwrap();
        for i in -6..=6 {
            let x = [i as f64 / 3.0];
            assert_eq!(artifact.forest.predict(&x), back.forest.predict(&x));
        }
        let mut bad = artifact.clone();
        bad.version = 99;
        assert!(ForestArtifact::from_json(&bad.to_json()).is_err());
    }
}
