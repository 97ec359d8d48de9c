//! Recall@K and mean recall@K over ranked predicate candidates.
//!
//! Every relation of a scene is one ground-truth triplet. Row `p` of a scene's
//! score matrix scores relation `p`. A triplet counts as matched when its
//! `(pair, predicate)` candidate is among the scene's top `K`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::synthdata::Scene;

pub const K_VALUES: [usize; 3] = [20, 50, 100];

/// Largest `P × C` the brute-force oracle accepts.
pub const ORACLE_LIMIT: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Only each pair's top predicate is a candidate.
    Constrained,
    /// Every `(pair, predicate)` is a candidate.
    Unconstrained,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Constrained, Protocol::Unconstrained];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Constrained => "constrained",
            Protocol::Unconstrained => "unconstrained",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub pair: usize,
    pub predicate: usize,
    pub score: f64,
}

/// `true` when `a` ranks before `b`.
fn ranks_before(a: &Candidate, b: &Candidate) -> bool {
    match a.score.total_cmp(&b.score) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => (a.pair, a.predicate) < (b.pair, b.predicate),
    }
}

/// First index of the row maximum; ties go to the lower class.
fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn rank_predictions(scores: &Matrix, protocol: Protocol) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = match protocol {
        Protocol::Constrained => scores
            .iter_rows()
            .enumerate()
            .map(|(pair, row)| {
                let predicate = row_argmax(row);
                Candidate {
                    pair,
                    predicate,
                    score: row[predicate],
                }
            })
            .collect(),
        Protocol::Unconstrained => scores
            .iter_rows()
            .enumerate()
            .flat_map(|(pair, row)| {
                row.iter().enumerate().map(move |(predicate, &score)| Candidate {
                    pair,
                    predicate,
                    score,
                })
            })
            .collect(),
    };
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.pair, a.predicate).cmp(&(b.pair, b.predicate)))
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene_id: u64,
    pub scores: Matrix,
}

/// Matched and total ground-truth counts per predicate class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub matched: Vec<u64>,
    pub total: Vec<u64>,
}

impl ClassTally {
    pub fn new(num_classes: usize) -> Self {
        ClassTally {
            matched: vec![0; num_classes],
            total: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.total.len()
    }

    /// Per-class recall; `None` for classes without ground truth.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        self.matched
            .iter()
            .zip(&self.total)
            .map(|(&m, &t)| (t > 0).then(|| m as f64 / t as f64))
            .collect()
    }

    pub fn recall(&self) -> f64 {
        let t: u64 = self.total.iter().sum();
        if t == 0 {
            0.0
        } else {
            self.matched.iter().sum::<u64>() as f64 / t as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallResult {
    pub recall: f64,
    pub tally: ClassTally,
}

fn index_predictions<'a>(scenes: &[Scene], predictions: &'a [ScenePrediction]) -> Result<HashMap<u64, &'a ScenePrediction>> {
    let known: std::collections::HashSet<u64> = scenes.iter().map(|s| s.id).collect();
    let mut map = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if !known.contains(&p.scene_id) {
            return Err(Error::Input(format!("prediction for unknown scene {}", p.scene_id)));
        }
        if map.insert(p.scene_id, p).is_some() {
            return Err(Error::Input(format!("duplicate prediction for scene {}", p.scene_id)));
        }
    }
    Ok(map)
}

fn check_scores(scene: &Scene, scores: &Matrix, num_classes: usize) -> Result<()> {
    if scores.rows() != scene.relations.len() || scores.cols() != num_classes {
        return Err(Error::Input(format!(
            "scene {}: score matrix is {}x{}, expected {}x{num_classes}",
            scene.id,
            scores.rows(),
            scores.cols(),
            scene.relations.len()
        )));
    }
    Ok(())
}

fn tally_scenes(
    scenes: &[Scene],
    predictions: &[ScenePrediction],
    num_classes: usize,
    mut matched_in_scene: impl FnMut(&Scene, &Matrix) -> Vec<bool>,
) -> Result<RecallResult> {
    let preds = index_predictions(scenes, predictions)?;
    let mut tally = ClassTally::new(num_classes);
    for scene in scenes {
        for r in &scene.relations {
            if r.predicate >= num_classes {
                return Err(Error::Label {
                    label: r.predicate,
                    num_classes,
                });
            }
            tally.total[r.predicate] += 1;
        }
        // a scene without a prediction matches nothing
        let Some(pred) = preds.get(&scene.id) else { continue };
        check_scores(scene, &pred.scores, num_classes)?;
        for (r, hit) in scene.relations.iter().zip(matched_in_scene(scene, &pred.scores)) {
            if hit {
                tally.matched[r.predicate] += 1;
            }
        }
    }
    Ok(RecallResult {
        recall: tally.recall(),
        tally,
    })
}

pub fn recall_at_k(
    scenes: &[Scene],
    predictions: &[ScenePrediction],
    k: usize,
    protocol: Protocol,
    num_classes: usize,
) -> Result<RecallResult> {
    tally_scenes(scenes, predictions, num_classes, |scene, scores| {
        let ranked = rank_predictions(scores, protocol);
        let mut hit = vec![false; scene.relations.len()];
        for c in ranked.iter().take(k) {
            if scene.relations[c.pair].predicate == c.predicate {
                hit[c.pair] = true;
            }
        }
        hit
    })
}

/// Unweighted mean of per-class recall over classes with ground truth.
pub fn mean_recall_at_k(tally: &ClassTally) -> Result<f64> {
    let recalls: Vec<f64> = tally.per_class_recall().into_iter().flatten().collect();
    if recalls.is_empty() {
        return Err(Error::Input("no class has ground-truth instances".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Recall by counting, for each ground-truth triplet, the candidates that
/// outrank it.
pub fn oracle_recall(
    scenes: &[Scene],
    predictions: &[ScenePrediction],
    k: usize,
    protocol: Protocol,
    num_classes: usize,
) -> Result<RecallResult> {
    for scene in scenes {
        let size = scene.relations.len() * num_classes;
        if size > ORACLE_LIMIT {
            return Err(Error::Input(format!(
                "scene {} has {size} candidates, above the oracle limit of {ORACLE_LIMIT}",
                scene.id
            )));
        }
    }
    tally_scenes(scenes, predictions, num_classes, |scene, scores| {
        let mut all = Vec::new();
        for pair in 0..scores.rows() {
            let row = scores.row(pair);
            for predicate in 0..scores.cols() {
                let c = Candidate {
                    pair,
                    predicate,
                    score: row[predicate],
                };
                let eligible = match protocol {
                    Protocol::Unconstrained => true,
                    Protocol::Constrained => (0..scores.cols()).all(|j| {
                        row[j] < c.score || (row[j] == c.score && j >= predicate)
                    }),
                };
                if eligible {
                    all.push(c);
                }
            }
        }
        scene
            .relations
            .iter()
            .enumerate()
            .map(|(pair, r)| {
                let Some(gt) = all.iter().find(|c| c.pair == pair && c.predicate == r.predicate) else {
                    return false;
                };
                all.iter().filter(|c| ranks_before(c, gt)).count() < k
            })
            .collect()
    })
}

/// Recall figures for one protocol at every K in [`K_VALUES`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub k_values: Vec<usize>,
    /// `recall[i]` is R@`k_values[i]`.
    pub recall: Vec<f64>,
    pub mean_recall: Vec<f64>,
    /// `per_class_recall[i][c]`; `None` for classes without ground truth.
    pub per_class_recall: Vec<Vec<Option<f64>>>,
    pub gt_counts: Vec<u64>,
    /// K values at which every scene's candidate list fits within K.
    pub saturated: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn mean_recall_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&x| x == k).map(|i| self.mean_recall[i])
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn class_recall_at(&self, k: usize, class: usize) -> Option<f64> {
        let i = self.k_values.iter().position(|&x| x == k)?;
        self.per_class_recall[i].get(class).copied().flatten()
    }

    /// `class,gt_count,recall@20,recall@50,recall@100,config_hash,seed`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class".to_string(), "gt_count".to_string()];
        header.extend(self.k_values.iter().map(|k| format!("recall@{k}")));
        header.extend(["config_hash".to_string(), "seed".to_string()]);
        w.write_record(&header)?;
        for (c, &gt) in self.gt_counts.iter().enumerate() {
            let mut row = vec![c.to_string(), gt.to_string()];
            for per_k in &self.per_class_recall {
                row.push(per_k[c].map_or(String::new(), |r| r.to_string()));
            }
            row.extend([self.config_hash.clone(), self.seed.to_string()]);
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn evaluate(
    scenes: &[Scene],
    predictions: &[ScenePrediction],
    protocol: Protocol,
    num_classes: usize,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut recall = Vec::new();
    let mut mean_recall = Vec::new();
    let mut per_class_recall = Vec::new();
    let mut gt_counts = Vec::new();
    let largest = scenes
        .iter()
        .map(|s| match protocol {
            Protocol::Constrained => s.relations.len(),
            Protocol::Unconstrained => s.relations.len() * num_classes,
        })
        .max()
        .unwrap_or(0);
    for &k in &K_VALUES {
        let r = recall_at_k(scenes, predictions, k, protocol, num_classes)?;
        recall.push(r.recall);
        mean_recall.push(mean_recall_at_k(&r.tally)?);
        per_class_recall.push(r.tally.per_class_recall());
        gt_counts = r.tally.total;
    }
    Ok(EvalReport {
        protocol,
        k_values: K_VALUES.to_vec(),
        recall,
        mean_recall,
        per_class_recall,
        gt_counts,
        saturated: K_VALUES.iter().copied().filter(|&k| k >= largest).collect(),
        config_hash: config_hash.to_string(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Node, Relation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(id: u64, labels: &[usize]) -> Scene {
        let nodes = (0..=labels.len())
            .map(|i| Node {
                features: vec![i as f64],
                bbox: [0.1, 0.1, 0.5, 0.5],
                label: 0,
            })
            .collect();
        let relations = labels
            .iter()
            .enumerate()
            .map(|(i, &p)| Relation {
                subject: i,
                object: i + 1,
                predicate: p,
                noise: None,
            })
            .collect();
        Scene { id, nodes, relations }
    }

    fn pred(id: u64, rows: &[Vec<f64>]) -> ScenePrediction {
        ScenePrediction {
            scene_id: id,
            scores: Matrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn candidate_cardinality_and_ties() {
        let s = Matrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.4, 0.4, 0.2]]).unwrap();
        let c = rank_predictions(&s, Protocol::Constrained);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].pair, c[0].predicate), (0, 1));
        // tied row maximum goes to the lower class
        assert_eq!((c[1].pair, c[1].predicate), (1, 0));
        let u = rank_predictions(&s, Protocol::Unconstrained);
        assert_eq!(u.len(), 6);
        let order: Vec<(usize, usize)> = u.iter().map(|c| (c.pair, c.predicate)).collect();
        assert_eq!(order, vec![(0, 1), (1, 0), (1, 1), (0, 2), (0, 0), (1, 2)]);
    }

    #[test]
    fn hand_example_protocol_difference() {
        // classes A=0, B=1, C=2; GT pair0:A, pair1:B
        let scenes = vec![scene(0, &[0, 1])];
        let preds = vec![pred(0, &[vec![0.9, 0.05, 0.05], vec![0.0, 0.7, 0.8]])];
        let c2 = recall_at_k(&scenes, &preds, 2, Protocol::Constrained, 3).unwrap();
        assert_eq!(c2.recall, 0.5);
        let u2 = recall_at_k(&scenes, &preds, 2, Protocol::Unconstrained, 3).unwrap();
        assert_eq!(u2.recall, 0.5);
        let u3 = recall_at_k(&scenes, &preds, 3, Protocol::Unconstrained, 3).unwrap();
        assert_eq!(u3.recall, 1.0);
    }

    #[test]
    fn perfect_and_saturated() {
        let scenes = vec![scene(0, &[0, 1]), scene(1, &[2])];
        let preds = vec![
            pred(0, &[vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1]]),
            pred(1, &[vec![0.1, 0.1, 0.8]]),
        ];
        for p in Protocol::ALL {
            assert_eq!(recall_at_k(&scenes, &preds, 2, p, 3).unwrap().recall, 1.0);
        }
        // K = 1 keeps one of the two triplets in scene 0
        assert_eq!(recall_at_k(&scenes, &preds, 1, Protocol::Constrained, 3).unwrap().tally.matched, vec![1, 0, 1]);
        let wrong = vec![pred(0, &[vec![0.1, 0.8, 0.1], vec![0.8, 0.1, 0.1]]), preds[1].clone()];
        let full = recall_at_k(&scenes, &wrong, 6, Protocol::Unconstrained, 3).unwrap();
        let huge = recall_at_k(&scenes, &wrong, 1000, Protocol::Unconstrained, 3).unwrap();
        assert_eq!(full, huge);
        assert_eq!(full.recall, 1.0);
    }

    #[test]
    fn missing_and_unknown_predictions() {
        let scenes = vec![scene(0, &[0]), scene(1, &[1])];
        let preds = vec![pred(0, &[vec![0.9, 0.1]])];
        let r = recall_at_k(&scenes, &preds, 5, Protocol::Constrained, 2).unwrap();
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.tally.matched, vec![1, 0]);
        let stray = vec![pred(7, &[vec![0.9, 0.1]])];
        assert!(matches!(
            recall_at_k(&scenes, &stray, 5, Protocol::Constrained, 2),
            Err(Error::Input(_))
        ));
        assert_eq!(oracle_recall(&scenes, &[], 5, Protocol::Unconstrained, 2).unwrap().recall, 0.0);
    }

    #[test]
    fn mean_recall_hand_values() {
        let t = ClassTally {
            matched: vec![10, 0],
            total: vec![10, 1000],
        };
        assert_eq!(mean_recall_at_k(&t).unwrap(), 0.5);
        let t = ClassTally {
            matched: vec![810, 10],
            total: vec![900, 100],
        };
        assert!((t.recall() - 0.82).abs() < 1e-15);
        assert!((mean_recall_at_k(&t).unwrap() - 0.5).abs() < 1e-15);
        let t = ClassTally {
            matched: vec![0, 3, 0],
            total: vec![0, 4, 0],
        };
        assert_eq!(mean_recall_at_k(&t).unwrap(), t.recall());
        assert!(mean_recall_at_k(&ClassTally::new(3)).is_err());
    }

    #[test]
    fn k_at_pair_count_does_not_guarantee_dominance() {
        // pair 0's two tied candidates fill K = 2 ahead of pair 1's argmax
        let scenes = vec![scene(0, &[2, 0])];
        let preds = vec![pred(0, &[vec![0.45, 0.45, 0.1], vec![0.4, 0.3, 0.3]])];
        let con = recall_at_k(&scenes, &preds, 2, Protocol::Constrained, 3).unwrap();
        let unc = recall_at_k(&scenes, &preds, 2, Protocol::Unconstrained, 3).unwrap();
        assert_eq!((con.recall, unc.recall), (0.5, 0.0));
        let unc3 = recall_at_k(&scenes, &preds, 3, Protocol::Unconstrained, 3).unwrap();
        assert_eq!(unc3.recall, 0.5);
    }

    #[test]
    fn oracle_size_limit() {
        let labels = vec![0; 30];
        let scenes = vec![scene(0, &labels)];
        assert!(oracle_recall(&scenes, &[], 5, Protocol::Constrained, 7).is_err());
        assert!(oracle_recall(&scenes, &[], 5, Protocol::Constrained, 6).is_ok());
    }

    #[test]
    fn identical_scores_agree_with_oracle() {
        let scenes = vec![scene(0, &[2, 0, 1]), scene(1, &[1, 1])];
        let preds = vec![pred(0, &vec![vec![0.25; 4]; 3]), pred(1, &vec![vec![0.25; 4]; 2])];
        for p in Protocol::ALL {
            for k in [1, 2, 3, 5, 100] {
                assert_eq!(
                    recall_at_k(&scenes, &preds, k, p, 4).unwrap(),
                    oracle_recall(&scenes, &preds, k, p, 4).unwrap()
                );
            }
        }
    }

    #[test]
    fn report_and_csv() {
        let scenes = vec![scene(0, &[0, 1]), scene(1, &[0])];
        let preds = vec![
            pred(0, &[vec![0.7, 0.2, 0.1], vec![0.6, 0.3, 0.1]]),
            pred(1, &[vec![0.9, 0.05, 0.05]]),
        ];
        let r = evaluate(&scenes, &preds, Protocol::Constrained, 3, "abc", 4).unwrap();
        assert_eq!(r.gt_counts, vec![2, 1, 0]);
        assert_eq!(r.saturated, vec![20, 50, 100]);
        assert_eq!(r.mean_recall_at(100), Some(0.5));
        assert_eq!(r.class_recall_at(50, 2), None);
        let csv = r.to_csv().unwrap();
        assert_eq!(
            csv,
            "class,gt_count,recall@20,recall@50,recall@100,config_hash,seed\n0,2,1,1,1,abc,4\n1,1,0,0,0,abc,4\n2,0,,,,abc,4\n"
        );
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn random_case(seed: u64) -> (Vec<Scene>, Vec<ScenePrediction>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..=5);
        let mut scenes = Vec::new();
        let mut preds = Vec::new();
        for id in 0..rng.random_range(1..=4u64) {
            let p = rng.random_range(1..=6);
            let labels: Vec<usize> = (0..p).map(|_| rng.random_range(0..c)).collect();
            scenes.push(scene(id, &labels));
            if rng.random_bool(0.9) {
                // coarse scores produce frequent ties
                let rows: Vec<Vec<f64>> = (0..p)
                    .map(|_| (0..c).map(|_| rng.random_range(0..4) as f64 / 4.0).collect())
                    .collect();
                preds.push(pred(id, &rows));
            }
        }
        (scenes, preds, c)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn oracle_matches_ranking(seed in any::<u64>()) {
            let (scenes, preds, c) = random_case(seed);
            for p in Protocol::ALL {
                for k in [1, 2, 3, 5, 100] {
                    prop_assert_eq!(
                        recall_at_k(&scenes, &preds, k, p, c).unwrap(),
                        oracle_recall(&scenes, &preds, k, p, c).unwrap()
                    );
                }
            }
        }

        #[test]
        fn recall_is_monotone_in_k(seed in any::<u64>()) {
            let (scenes, preds, c) = random_case(seed);
            for p in Protocol::ALL {
                let mut prev: Option<RecallResult> = None;
                for k in 1..=12 {
                    let r = recall_at_k(&scenes, &preds, k, p, c).unwrap();
                    if let Some(prev) = &prev {
                        prop_assert!(r.recall >= prev.recall);
                        for (a, b) in r.tally.matched.iter().zip(&prev.tally.matched) {
                            prop_assert!(a >= b);
                        }
                    }
                    prev = Some(r);
                }
            }
        }

        #[test]
        fn unconstrained_dominates_once_argmaxes_fit(seed in any::<u64>()) {
            let (scenes, preds, c) = random_case(seed);
            // smallest K whose unconstrained top-K holds every pair's argmax
            let k_min = preds
                .iter()
                .map(|p| {
                    let ranked = rank_predictions(&p.scores, Protocol::Unconstrained);
                    rank_predictions(&p.scores, Protocol::Constrained)
                        .iter()
                        .map(|a| 1 + ranked.iter().position(|u| (u.pair, u.predicate) == (a.pair, a.predicate)).unwrap())
                        .max()
                        .unwrap_or(0)
                })
                .max()
                .unwrap_or(0);
            for k in k_min..k_min + 4 {
                let con = recall_at_k(&scenes, &preds, k, Protocol::Constrained, c).unwrap();
                let unc = recall_at_k(&scenes, &preds, k, Protocol::Unconstrained, c).unwrap();
                prop_assert!(unc.recall >= con.recall);
                for (u, cm) in unc.tally.matched.iter().zip(&con.tally.matched) {
                    prop_assert!(u >= cm);
                }
            }
        }

        #[test]
        fn mean_recall_ignores_duplication(seed in any::<u64>(), copies in 1usize..4) {
            let (mut scenes, preds, c) = random_case(seed);
            // confine class 0 to scenes made only of class 0
            for s in &mut scenes {
                if s.relations.iter().any(|r| r.predicate != 0) {
                    for r in &mut s.relations {
                        if r.predicate == 0 {
                            r.predicate = 1;
                        }
                    }
                }
            }
            let base = recall_at_k(&scenes, &preds, 3, Protocol::Constrained, c).unwrap();
            // duplicate every scene whose relations are all of class 0
            let mut more_scenes = scenes.clone();
            let mut more_preds = preds.clone();
            let mut next_id = 1000;
            for s in scenes.iter().filter(|s| s.relations.iter().all(|r| r.predicate == 0)) {
                for _ in 0..copies {
                    let mut d = s.clone();
                    d.id = next_id;
                    if let Some(p) = preds.iter().find(|p| p.scene_id == s.id) {
                        more_preds.push(ScenePrediction { scene_id: next_id, scores: p.scores.clone() });
                    }
                    more_scenes.push(d);
                    next_id += 1;
                }
            }
            let dup = recall_at_k(&more_scenes, &more_preds, 3, Protocol::Constrained, c).unwrap();
            let a = mean_recall_at_k(&base.tally).unwrap();
            let b = mean_recall_at_k(&dup.tally).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
