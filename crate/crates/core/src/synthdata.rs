//! Synthetic scenes with controllable predicate geometry.
//!
//! Every scene is a random tree over its object nodes. Each tree edge carries
//! a predicate class `c` and ties its endpoints through
//! `x_object − x_subject = μ_c + σ_c·ξ`, so the predicate signal lives only in
//! the relative position of the two node features. A subset of the tree edges
//! is annotated as the scene's ground-truth relations. Generation of scene
//! `i` depends only on `(seed, i)`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{check_box, NodeSet, BOX_DIM};
use crate::error::{Error, Result};
use crate::numeric::{l2_distance, Matrix};

pub const DEFAULT_FEATURE_DIM: usize = 16;

const SHARE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub share: f64,
}

impl ClassSpec {
    pub fn new(class_id: usize, mean: Vec<f64>, sigma: f64, share: f64) -> Self {
        ClassSpec {
            class_id,
            mean,
            sigma,
            share,
        }
    }
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn new(min: usize, max: usize) -> Self {
        CountRange { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_scenes: usize,
    pub nodes_per_scene: CountRange,
    pub pairs_per_scene: CountRange,
    pub classes: Vec<ClassSpec>,
    /// Spread of the root node feature of each scene.
    #[serde(default = "default_root_scale")]
    pub root_scale: f64,
    #[serde(default = "default_object_labels")]
    pub num_object_labels: usize,
    pub seed: u64,
}

fn default_root_scale() -> f64 {
    1.0
}

fn default_object_labels() -> usize {
    8
}

impl GeneratorConfig {
    pub fn feature_dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mean.len())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 {
            return Err(Error::config("num_scenes", "must be at least 1"));
        }
        let n = self.nodes_per_scene;
        if n.min < 2 || n.min > n.max {
            return Err(Error::config(
                "nodes_per_scene",
                format!("need 2 <= min <= max, got {}..={}", n.min, n.max),
            ));
        }
        let p = self.pairs_per_scene;
        if p.min == 0 || p.min > p.max {
            return Err(Error::config(
                "pairs_per_scene",
                format!("need 1 <= min <= max, got {}..={}", p.min, p.max),
            ));
        }
        if p.max > n.min - 1 {
            return Err(Error::config(
                "pairs_per_scene.max",
                format!("{} exceeds the {} tree edges of the smallest scene", p.max, n.min - 1),
            ));
        }
        if !(self.root_scale >= 0.0 && self.root_scale.is_finite()) {
            return Err(Error::config("root_scale", "must be finite and non-negative"));
        }
        if self.num_object_labels == 0 {
            return Err(Error::config("num_object_labels", "must be at least 1"));
        }
        validate_classes(&self.classes)
    }
}

fn validate_classes(classes: &[ClassSpec]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::config("classes", "at least one class is required"));
    }
    let dim = classes[0].mean.len();
    if dim == 0 {
        return Err(Error::config("classes[0].mean", "must be nonempty"));
    }
    for (i, c) in classes.iter().enumerate() {
        if c.class_id != i {
            return Err(Error::config(
                format!("classes[{i}].class_id"),
                format!("expected {i}, got {}", c.class_id),
            ));
        }
        if c.mean.len() != dim {
            return Err(Error::config(
                format!("classes[{i}].mean"),
                format!("length {} differs from {dim}", c.mean.len()),
            ));
        }
        if c.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("classes[{i}].mean"), "must be finite"));
        }
        if !(c.sigma > 0.0 && c.sigma.is_finite()) {
            return Err(Error::config(format!("classes[{i}].sigma"), "must be positive"));
        }
        if !(c.share > 0.0 && c.share <= 1.0) {
            return Err(Error::config(format!("classes[{i}].share"), "must lie in (0, 1]"));
        }
    }
    let total: f64 = classes.iter().map(|c| c.share).sum();
    if (total - 1.0).abs() > SHARE_TOLERANCE {
        return Err(Error::config("classes", format!("shares sum to {total}, not 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub features: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; BOX_DIM],
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseFlag {
    pub original: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub nodes: Vec<Node>,
    pub relations: Vec<Relation>,
}

impl Scene {
    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> Result<()> {
        let ctx = |msg: String| Error::Input(format!("scene {}: {msg}", self.id));
        if self.nodes.len() < 2 {
            return Err(ctx("needs at least two nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.features.len() != feature_dim {
                return Err(ctx(format!("node {i} has {} features, expected {feature_dim}", n.features.len())));
            }
            if n.features.iter().any(|v| !v.is_finite()) {
                return Err(ctx(format!("node {i} has non-finite features")));
            }
            check_box(&n.bbox).map_err(|m| ctx(format!("node {i}: {m}")))?;
        }
        for (r, rel) in self.relations.iter().enumerate() {
            if rel.subject >= self.nodes.len() || rel.object >= self.nodes.len() {
                return Err(ctx(format!("relation {r} references a missing node")));
            }
            if rel.subject == rel.object {
                return Err(ctx(format!("relation {r} relates a node to itself")));
            }
            if rel.predicate >= num_classes {
                return Err(ctx(format!("relation {r} has predicate {} >= {num_classes}", rel.predicate)));
            }
        }
        Ok(())
    }

    pub fn node_set(&self) -> Result<NodeSet> {
        let d = self.nodes[0].features.len();
        let features = Matrix::from_vec(
            self.nodes.len(),
            d,
            self.nodes.iter().flat_map(|n| n.features.iter().copied()).collect(),
        )?;
        let boxes = Matrix::from_vec(
            self.nodes.len(),
            BOX_DIM,
            self.nodes.iter().flat_map(|n| n.bbox).collect(),
        )?;
        NodeSet::new(features, boxes)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.relations.iter().map(|r| r.predicate).collect()
    }
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    /// Transformations applied after generation, oldest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derived: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, scenes: Vec<Scene>) -> Result<Self> {
        for s in &scenes {
            s.validate(header.feature_dim, header.num_classes)?;
        }
        Ok(Dataset { header, scenes })
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.header.feature_dim
    }

    pub fn num_pairs(&self) -> usize {
        self.scenes.iter().map(|s| s.relations.len()).sum()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.scenes, self.num_classes())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for s in &self.scenes {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: DatasetHeader = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io("<dataset>", e))?;
                serde_json::from_str(&line)
                    .map_err(|e| Error::Input(format!("dataset header (line 1): {e}")))?
            }
            None => return Err(Error::Input("dataset file is empty".into())),
        };
        let mut scenes = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene =
                serde_json::from_str(&line).map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?;
            scenes.push(scene);
        }
        Dataset::new(header, scenes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_jsonl(std::io::BufReader::new(f))
    }
}

pub fn class_counts(scenes: &[Scene], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in scenes {
        for r in &s.relations {
            counts[r.predicate] += 1;
        }
    }
    counts
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn box_near(parent: Option<&[f64; BOX_DIM]>, rng: &mut impl Rng) -> [f64; BOX_DIM] {
    let (cx, cy) = match parent {
        None => (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
        Some(p) => {
            let pcx = 0.5 * (p[0] + p[2]);
            let pcy = 0.5 * (p[1] + p[3]);
            (
                (pcx + rng.random_range(-0.15..0.15)).clamp(0.05, 0.95),
                (pcy + rng.random_range(-0.15..0.15)).clamp(0.05, 0.95),
            )
        }
    };
    let hw = 0.5 * rng.random_range(0.1..0.4);
    let hh = 0.5 * rng.random_range(0.1..0.4);
    [
        (cx - hw).max(0.0),
        (cy - hh).max(0.0),
        (cx + hw).min(1.0),
        (cy + hh).min(1.0),
    ]
}

/// Generates scene `index` of `config`.
pub fn generate_scene(config: &GeneratorConfig, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let d = config.feature_dim();
    let classes = WeightedIndex::new(config.classes.iter().map(|c| c.share))
        .expect("validated shares are positive");
    let n = config.nodes_per_scene.sample(&mut rng);
    let p = config.pairs_per_scene.sample(&mut rng).min(n - 1);

    let mut nodes: Vec<Node> = Vec::with_capacity(n);
    nodes.push(Node {
        features: (0..d).map(|_| config.root_scale * gaussian(&mut rng)).collect(),
        bbox: box_near(None, &mut rng),
        label: rng.random_range(0..config.num_object_labels),
    });
    let mut edges = Vec::with_capacity(n - 1);
    for k in 1..n {
        let parent = rng.random_range(0..k);
        let c = classes.sample(&mut rng);
        let spec = &config.classes[c];
        let z: Vec<f64> = spec.mean.iter().map(|m| m + spec.sigma * gaussian(&mut rng)).collect();
        let parent_is_subject = rng.random_bool(0.5);
        let base = &nodes[parent].features;
        let features: Vec<f64> = if parent_is_subject {
            base.iter().zip(&z).map(|(b, z)| b + z).collect()
        } else {
            base.iter().zip(&z).map(|(b, z)| b - z).collect()
        };
        let (subject, object) = if parent_is_subject { (parent, k) } else { (k, parent) };
        let bbox = box_near(Some(&nodes[parent].bbox), &mut rng);
        nodes.push(Node {
            features,
            bbox,
            label: rng.random_range(0..config.num_object_labels),
        });
        edges.push(Relation {
            subject,
            object,
            predicate: c,
            noise: None,
        });
    }
    // the scene mean carries no predicate signal
    let mut mean = vec![0.0; d];
    for node in &nodes {
        for (m, v) in mean.iter_mut().zip(&node.features) {
            *m += v / n as f64;
        }
    }
    for node in &mut nodes {
        for (v, m) in node.features.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut keep = sample(&mut rng, edges.len(), p).into_vec();
    keep.sort_unstable();
    let relations = keep.into_iter().map(|i| edges[i].clone()).collect();
    Scene {
        id: index as u64,
        nodes,
        relations,
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let scenes = (0..config.num_scenes).map(|i| generate_scene(config, i)).collect();
    Ok(Dataset {
        header: DatasetHeader {
            num_classes: config.num_classes(),
            feature_dim: config.feature_dim(),
            seed: config.seed,
            generator: Some(config.clone()),
            derived: Vec::new(),
        },
        scenes,
    })
}

/// Splits scenes into `(train, validation)` with `fraction` of the scenes,
/// chosen by `seed`, held out.
pub fn split_scenes(scenes: &[Scene], fraction: f64, seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    let n = scenes.len();
    let mut n_val = (fraction * n as f64).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; n];
    for i in sample(&mut rng, n, n_val) {
        held[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (s, h) in scenes.iter().zip(held) {
        if h {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, val)
}

/// Primary class and its two companions for the two-group experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub primary: ClassSpec,
    pub strong: ClassSpec,
    pub weak: ClassSpec,
    pub num_scenes: usize,
    pub nodes_per_scene: CountRange,
    pub pairs_per_scene: CountRange,
    #[serde(default = "default_root_scale")]
    pub root_scale: f64,
}

impl ObservationSpec {
    /// Primary:companion frequency ratio implied by the shares.
    pub fn primary_ratio(&self) -> f64 {
        self.primary.share / self.strong.share
    }

    pub fn validate(&self) -> Result<()> {
        let dp_s = l2_distance(&self.primary.mean, &self.strong.mean)
            .map_err(|_| Error::config("strong.mean", "dimension differs from primary"))?;
        let dp_w = l2_distance(&self.primary.mean, &self.weak.mean)
            .map_err(|_| Error::config("weak.mean", "dimension differs from primary"))?;
        if dp_s >= dp_w {
            return Err(Error::config(
                "strong.mean",
                format!("strong companion ({dp_s}) must be closer to the primary than the weak one ({dp_w})"),
            ));
        }
        if (self.strong.share - self.weak.share).abs() > SHARE_TOLERANCE {
            return Err(Error::config("weak.share", "strong and weak companions need the same share"));
        }
        self.generator_config(0).validate()
    }

    fn generator_config(&self, seed: u64) -> GeneratorConfig {
        let mut classes = vec![self.primary.clone(), self.strong.clone(), self.weak.clone()];
        for (i, c) in classes.iter_mut().enumerate() {
            c.class_id = i;
        }
        GeneratorConfig {
            num_scenes: self.num_scenes,
            nodes_per_scene: self.nodes_per_scene,
            pairs_per_scene: self.pairs_per_scene,
            classes,
            root_scale: self.root_scale,
            num_object_labels: default_object_labels(),
            seed,
        }
    }
}

/// Label of the primary class inside each group.
pub const GROUP_PRIMARY: usize = 0;
/// Label of the companion class inside each group.
pub const GROUP_COMPANION: usize = 1;

/// Builds the strong and weak two-class groups from one shared generation.
///
/// Each group keeps only primary and companion relations, relabelled to
/// [`GROUP_PRIMARY`] and [`GROUP_COMPANION`]; scenes left without relations
/// are removed. The group with more companion relations is down-sampled at
/// random until both hold the same number.
pub fn build_observation_groups(spec: &ObservationSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let base = generate(&spec.generator_config(seed))?;
    let filter = |companion: usize| -> Vec<Scene> {
        base.scenes
            .iter()
            .filter_map(|s| {
                let relations: Vec<Relation> = s
                    .relations
                    .iter()
                    .filter(|r| r.predicate == 0 || r.predicate == companion)
                    .map(|r| Relation {
                        predicate: if r.predicate == 0 { GROUP_PRIMARY } else { GROUP_COMPANION },
                        ..r.clone()
                    })
                    .collect();
                (!relations.is_empty()).then(|| Scene {
                    relations,
                    ..s.clone()
                })
            })
            .collect()
    };
    let mut strong = filter(1);
    let mut weak = filter(2);
    let count = |scenes: &[Scene]| class_counts(scenes, 2)[GROUP_COMPANION];
    let (cs, cw) = (count(&strong), count(&weak));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f62_7365_7276_6521);
    if cs > cw {
        strong = down_sample_class(&strong, GROUP_COMPANION, cw, &mut rng);
    } else if cw > cs {
        weak = down_sample_class(&weak, GROUP_COMPANION, cs, &mut rng);
    }
    let header = |name: &str| DatasetHeader {
        num_classes: 2,
        feature_dim: base.feature_dim(),
        seed,
        generator: base.header.generator.clone(),
        derived: vec![format!("observation_group:{name}")],
    };
    Ok((
        Dataset::new(header("strong"), strong)?,
        Dataset::new(header("weak"), weak)?,
    ))
}

/// Removes random relations of `class` until `target` remain.
fn down_sample_class(scenes: &[Scene], class: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<Scene> {
    let positions: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.relations
                .iter()
                .enumerate()
                .filter(|(_, r)| r.predicate == class)
                .map(move |(ri, _)| (si, ri))
        })
        .collect();
    let mut keep = vec![true; positions.len()];
    let excess = positions.len().saturating_sub(target);
    for i in sample(rng, positions.len(), excess) {
        keep[i] = false;
    }
    let removed: std::collections::HashSet<(usize, usize)> = positions
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| !k)
        .map(|(p, _)| *p)
        .collect();
    scenes
        .iter()
        .enumerate()
        .filter_map(|(si, s)| {
            let relations: Vec<Relation> = s
                .relations
                .iter()
                .enumerate()
                .filter(|(ri, _)| !removed.contains(&(si, *ri)))
                .map(|(_, r)| r.clone())
                .collect();
            (!relations.is_empty()).then(|| Scene {
                relations,
                ..s.clone()
            })
        })
        .collect()
}

/// Reassigns exactly `round(flip_rate · pairs)` labels, chosen uniformly
/// without replacement, to a uniformly drawn different class. The original
/// label is kept in each flipped relation's noise flag.
pub fn inject_label_noise(dataset: &Dataset, flip_rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..0.5).contains(&flip_rate) {
        return Err(Error::config("flip_rate", format!("{flip_rate} is outside [0, 0.5)")));
    }
    let c = dataset.num_classes();
    let total = dataset.num_pairs();
    let flips = (flip_rate * total as f64).round() as usize;
    if flips > 0 && c < 2 {
        return Err(Error::config("flip_rate", "label noise needs at least two classes"));
    }
    let mut out = dataset.clone();
    if flips == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, total, flips).into_vec();
    chosen.sort_unstable();
    let mut targets = chosen.into_iter().peekable();
    let mut flat = 0usize;
    for scene in &mut out.scenes {
        for rel in &mut scene.relations {
            if targets.peek() == Some(&flat) {
                targets.next();
                let original = rel.noise.map_or(rel.predicate, |n| n.original);
                let draw = rng.random_range(0..c - 1);
                rel.predicate = if draw >= rel.predicate { draw + 1 } else { draw };
                rel.noise = Some(NoiseFlag { original });
            }
            flat += 1;
        }
    }
    out.header.derived.push(format!("label_noise:{flip_rate}:{seed}"));
    Ok(out)
}

/// Class means placed on scaled coordinate axes: class `i` sits at
/// `radius · e_(i mod d)`, with later wraps negated.
pub fn axis_prototypes(num_classes: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|i| {
            let mut m = vec![0.0; dim];
            let sign = if (i / dim) % 2 == 0 { 1.0 } else { -1.0 };
            m[i % dim] = sign * radius;
            m
        })
        .collect()
}

/// Three well-separated equally frequent classes.
pub fn separable_toy(seed: u64) -> GeneratorConfig {
    let shares = [1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0];
    let classes = axis_prototypes(3, DEFAULT_FEATURE_DIM, 6.0)
        .into_iter()
        .enumerate()
        .map(|(i, m)| ClassSpec::new(i, m, 0.5, shares[i]))
        .collect();
    GeneratorConfig {
        num_scenes: 200,
        nodes_per_scene: CountRange::new(4, 8),
        pairs_per_scene: CountRange::new(2, 3),
        classes,
        root_scale: 1.0,
        num_object_labels: default_object_labels(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_class(seed: u64, scenes: usize) -> GeneratorConfig {
        let shares = [0.7, 0.2, 0.1];
        let classes = axis_prototypes(3, 4, 3.0)
            .into_iter()
            .enumerate()
            .map(|(i, m)| ClassSpec::new(i, m, 1.0, shares[i]))
            .collect();
        GeneratorConfig {
            num_scenes: scenes,
            nodes_per_scene: CountRange::new(5, 8),
            pairs_per_scene: CountRange::new(2, 4),
            classes,
            root_scale: 1.0,
            num_object_labels: 4,
            seed,
        }
    }

    #[test]
    fn shares_match_targets() {
        let ds = generate(&three_class(11, 3400)).unwrap();
        let total = ds.num_pairs();
        assert!(total >= 10_000, "{total}");
        let counts = ds.class_counts();
        for (c, target) in counts.iter().zip([0.7, 0.2, 0.1]) {
            assert!((*c as f64 / total as f64 - target).abs() <= 0.02);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&three_class(5, 50)).unwrap();
        let b = generate(&three_class(5, 50)).unwrap();
        let c = generate(&three_class(6, 50)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.scenes, c.scenes);
    }

    #[test]
    fn scene_generation_is_order_independent() {
        let cfg = three_class(9, 30);
        let ds = generate(&cfg).unwrap();
        for i in (0..30).rev() {
            assert_eq!(generate_scene(&cfg, i), ds.scenes[i]);
        }
    }

    #[test]
    fn relation_signal_is_feature_difference() {
        let cfg = three_class(2, 20);
        let ds = generate(&cfg).unwrap();
        for s in &ds.scenes {
            s.validate(4, 3).unwrap();
            assert!(s.relations.len() >= 2 && s.relations.len() <= 4);
            for r in &s.relations {
                let diff: Vec<f64> = s.nodes[r.object]
                    .features
                    .iter()
                    .zip(&s.nodes[r.subject].features)
                    .map(|(o, s)| o - s)
                    .collect();
                // within 6σ of the class prototype
                let dist = l2_distance(&diff, &cfg.classes[r.predicate].mean).unwrap();
                assert!(dist < 6.0 * 2.0, "{dist}");
            }
        }
    }

    #[test]
    fn within_class_spread_below_prototype_distance() {
        let cfg = three_class(4, 400);
        let ds = generate(&cfg).unwrap();
        let mut diffs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
        for s in &ds.scenes {
            for r in &s.relations {
                let d: Vec<f64> = s.nodes[r.object]
                    .features
                    .iter()
                    .zip(&s.nodes[r.subject].features)
                    .map(|(o, s)| o - s)
                    .collect();
                diffs[r.predicate].push(d);
            }
        }
        let proto = l2_distance(&cfg.classes[0].mean, &cfg.classes[1].mean).unwrap();
        for class in &diffs {
            let mut total = 0.0;
            let mut n = 0.0;
            for a in class.iter().take(60) {
                for b in class.iter().take(60) {
                    total += l2_distance(a, b).unwrap();
                    n += 1.0;
                }
            }
            // E‖a − b‖ ≈ σ·√(2d) = √8 < 3√2
            assert!(total / n < proto, "{} vs {proto}", total / n);
        }
    }

    #[test]
    fn identical_prototypes_are_indistinguishable() {
        // the class of a pair is independent of its features, so any rule
        // scores ≈ 50% on balanced data
        let mut cfg = three_class(8, 1500);
        cfg.classes = vec![
            ClassSpec::new(0, vec![1.0, 0.0, 0.0, 0.0], 1.0, 0.5),
            ClassSpec::new(1, vec![1.0, 0.0, 0.0, 0.0], 1.0, 0.5),
        ];
        let ds = generate(&cfg).unwrap();
        // best threshold rule on the first coordinate of the difference
        let mut pts: Vec<(f64, usize)> = Vec::new();
        for s in &ds.scenes {
            for r in &s.relations {
                pts.push((s.nodes[r.object].features[0] - s.nodes[r.subject].features[0], r.predicate));
            }
        }
        let mut best: f64 = 0.0;
        for t in [-1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
            let acc = pts.iter().filter(|(x, l)| (*x > t) == (*l == 1)).count() as f64 / pts.len() as f64;
            best = best.max(acc).max(1.0 - acc);
        }
        assert!(best < 0.53, "{best}");
    }

    #[test]
    fn infeasible_configs_rejected() {
        let mut cfg = three_class(1, 10);
        cfg.classes[0].share = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = three_class(1, 10);
        cfg.classes[1].sigma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = three_class(1, 10);
        cfg.pairs_per_scene = CountRange::new(2, 5);
        assert!(cfg.validate().is_err());
        let mut cfg = three_class(1, 10);
        cfg.classes[2].class_id = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = inject_label_noise(&generate(&three_class(3, 25)).unwrap(), 0.2, 4).unwrap();
        let text = ds.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 26);
        let back = Dataset::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let ds = generate(&three_class(3, 2)).unwrap();
        let mut text = ds.to_jsonl().unwrap();
        text.push_str("{\"id\": 9}\n");
        let err = Dataset::from_jsonl(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ds = generate(&three_class(3, 50)).unwrap();
        let (tr, va) = split_scenes(&ds.scenes, 0.2, 1);
        assert_eq!(va.len(), 10);
        assert_eq!(tr.len(), 40);
        let (tr2, va2) = split_scenes(&ds.scenes, 0.2, 1);
        assert_eq!((tr, va.clone()), (tr2, va2));
        let (_, va3) = split_scenes(&ds.scenes, 0.2, 2);
        assert_ne!(va, va3);
    }

    #[test]
    fn label_noise_contract() {
        let ds = generate(&three_class(12, 3400)).unwrap();
        assert_eq!(inject_label_noise(&ds, 0.0, 1).unwrap(), ds);
        let noisy = inject_label_noise(&ds, 0.1, 1).unwrap();
        let total = ds.num_pairs();
        let mut flipped = 0;
        for (a, b) in ds.scenes.iter().zip(&noisy.scenes) {
            for (ra, rb) in a.relations.iter().zip(&b.relations) {
                match rb.noise {
                    Some(flag) => {
                        flipped += 1;
                        assert_eq!(flag.original, ra.predicate);
                        assert_ne!(rb.predicate, ra.predicate);
                    }
                    None => assert_eq!(ra, rb),
                }
            }
        }
        let expected = total as f64 * 0.1;
        assert!((flipped as f64 - expected).abs() <= 60.0);
        assert!(inject_label_noise(&ds, 0.5, 1).is_err());
        assert!(inject_label_noise(&ds, -0.1, 1).is_err());
    }

    fn observation_spec() -> ObservationSpec {
        let d = 4;
        let at = |x: f64| {
            let mut m = vec![0.0; d];
            m[0] = x;
            m
        };
        ObservationSpec {
            primary: ClassSpec::new(0, at(0.0), 1.0, 9.0 / 11.0),
            strong: ClassSpec::new(1, at(1.0), 1.0, 1.0 / 11.0),
            weak: ClassSpec::new(2, at(6.0), 1.0, 1.0 / 11.0),
            num_scenes: 600,
            nodes_per_scene: CountRange::new(5, 7),
            pairs_per_scene: CountRange::new(3, 4),
            root_scale: 1.0,
        }
    }

    #[test]
    fn observation_groups_contract() {
        let spec = observation_spec();
        assert!((spec.primary_ratio() - 9.0).abs() < 1e-12);
        let (strong, weak) = build_observation_groups(&spec, 3).unwrap();
        let cs = strong.class_counts();
        let cw = weak.class_counts();
        assert_eq!(cs[GROUP_COMPANION], cw[GROUP_COMPANION]);
        assert_eq!(cs.len(), 2);
        for ds in [&strong, &weak] {
            assert!(ds.scenes.iter().all(|s| !s.relations.is_empty()));
        }
        let ratio = cw[GROUP_PRIMARY] as f64 / cw[GROUP_COMPANION] as f64;
        assert!((ratio - 9.0).abs() < 1.5, "{ratio}");
        let (strong2, weak2) = build_observation_groups(&spec, 3).unwrap();
        assert_eq!((strong2, weak2), (strong, weak));
    }

    #[test]
    fn observation_groups_reject_swapped_distances() {
        let mut spec = observation_spec();
        std::mem::swap(&mut spec.strong.mean, &mut spec.weak.mean);
        assert!(matches!(build_observation_groups(&spec, 1), Err(Error::Config { .. })));
        let mut spec = observation_spec();
        spec.weak.share = 0.05;
        assert!(build_observation_groups(&spec, 1).is_err());
    }

    #[test]
    fn toy_is_valid() {
        let ds = generate(&separable_toy(1)).unwrap();
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.feature_dim(), DEFAULT_FEATURE_DIM);
    }
}
