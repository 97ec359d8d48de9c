//! Predicate classifier and its training loop.
//!
//! Each relation's input is `concat(ctx_subject, ctx_object, union_box)`,
//! where the context rows come from the encoder (or are the raw node
//! features when the encoder is disabled). A two-layer pair network maps the
//! input to the relationship feature `f`, and an affine classifier maps `f`
//! to predicate logits. Class centers live in the space of `f`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class_graph::{center_loss, CenterMode, ClassGraph, NormalizationMode, DEFAULT_EPSILON};
use crate::encoder::{EncoderConfig, EncoderStack, StackCache, BOX_DIM};
use crate::error::{Error, Result};
use crate::losses::{drop_mask, BatchLossResult, LossConfig, DEFAULT_DROP_LAMBDA};
use crate::metrics::{evaluate, mean_recall_at_k, recall_at_k, EvalReport, Protocol, ScenePrediction};
use crate::numeric::{relu, relu_backward, softmax_in_place, Affine, Matrix, Parameters};
use crate::synthdata::{class_counts, split_scenes, Dataset, Scene};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    /// Width of the relationship feature `f` and of the class centers.
    pub feature_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dim: 64,
            feature_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelHead {
    pub pair_in: Affine,
    pub pair_out: Affine,
    pub classifier: Affine,
}

impl RelHead {
    pub fn new(context_dim: usize, config: &HeadConfig, num_classes: usize, rng: &mut impl Rng) -> Self {
        RelHead {
            pair_in: Affine::init(pair_input_dim(context_dim), config.hidden_dim, 2.0, rng),
            pair_out: Affine::init(config.hidden_dim, config.feature_dim, 1.0, rng),
            classifier: Affine::init(config.feature_dim, num_classes, 1.0, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.pair_out.d_out()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.d_out()
    }

    pub fn context_dim(&self) -> usize {
        (self.pair_in.d_in() - BOX_DIM) / 2
    }
}

impl Parameters for RelHead {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.pair_in.param_slices();
        out.extend(self.pair_out.param_slices());
        out.extend(self.classifier.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.pair_in.param_slices_mut();
        out.extend(self.pair_out.param_slices_mut());
        out.extend(self.classifier.param_slices_mut());
        out
    }
}

pub fn pair_input_dim(context_dim: usize) -> usize {
    2 * context_dim + BOX_DIM
}

/// Smallest box containing both boxes.
pub fn union_box(a: &[f64], b: &[f64]) -> [f64; BOX_DIM] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

/// Rows `concat(context[s], context[o], union_box(s, o))`, one per pair.
pub fn build_pair_inputs(context: &Matrix, pairs: &[(usize, usize)], boxes: &Matrix) -> Result<Matrix> {
    let n = context.rows();
    if boxes.rows() != n || boxes.cols() != BOX_DIM {
        return Err(Error::dim("build_pair_inputs", "boxes do not match the context rows"));
    }
    let d = context.cols();
    let mut out = Matrix::zeros(pairs.len(), pair_input_dim(d));
    for (p, &(s, o)) in pairs.iter().enumerate() {
        if s >= n || o >= n {
            return Err(Error::Input(format!("pair {p} references node {} of {n}", s.max(o))));
        }
        if s == o {
            return Err(Error::Input(format!("pair {p} relates node {s} to itself")));
        }
        let row = out.row_mut(p);
        row[..d].copy_from_slice(context.row(s));
        row[d..2 * d].copy_from_slice(context.row(o));
        row[2 * d..].copy_from_slice(&union_box(boxes.row(s), boxes.row(o)));
    }
    Ok(out)
}

/// Relationship features `f` for the given ordered pairs.
pub fn build_pair_features(head: &RelHead, context: &Matrix, pairs: &[(usize, usize)], boxes: &Matrix) -> Result<Matrix> {
    let inputs = build_pair_inputs(context, pairs, boxes)?;
    head.pair_out.forward(&relu(&head.pair_in.forward(&inputs)?))
}

/// Encoder (optional) plus relation head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Option<EncoderStack>,
    pub head: RelHead,
}

impl Parameters for Model {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.as_ref().map_or_else(Vec::new, |e| e.param_slices());
        out.extend(self.head.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.as_mut().map_or_else(Vec::new, |e| e.param_slices_mut());
        out.extend(self.head.param_slices_mut());
        out
    }
}

fn add_into<P: Parameters>(dst: &mut P, src: &P) {
    for (d, s) in dst.param_slices_mut().into_iter().zip(src.param_slices()) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

struct SceneForward {
    cache: Option<StackCache>,
    num_nodes: usize,
    pairs: Vec<(usize, usize)>,
}

/// Forward intermediates of one batch of scenes.
pub struct BatchForward {
    scenes: Vec<SceneForward>,
    inputs: Matrix,
    pre: Matrix,
    hidden: Matrix,
    pub features: Matrix,
    pub logits: Matrix,
    pub labels: Vec<usize>,
    /// Whether each relation carries a noise flag.
    pub flagged: Vec<bool>,
}

impl Model {
    pub fn new(config: &TrainConfig, num_classes: usize, raw_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = match &config.encoder {
            Some(ec) => Some(EncoderStack::new(ec.clone(), raw_dim, rng.random())?),
            None => None,
        };
        let context_dim = encoder.as_ref().map_or(raw_dim, EncoderStack::model_dim);
        let head = RelHead::new(context_dim, &config.head, num_classes, rng);
        Ok(Model { encoder, head })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn forward_batch(&self, scenes: &[&Scene]) -> Result<BatchForward> {
        let mut per_scene = Vec::with_capacity(scenes.len());
        let mut inputs = Vec::with_capacity(scenes.len());
        let mut labels = Vec::new();
        let mut flagged = Vec::new();
        for scene in scenes {
            let nodes = scene.node_set()?;
            let (context, cache) = match &self.encoder {
                Some(enc) => {
                    let (h, c) = enc.forward_with_cache(&nodes)?;
                    (h, Some(c))
                }
                None => (nodes.features().clone(), None),
            };
            let pairs: Vec<(usize, usize)> = scene.relations.iter().map(|r| (r.subject, r.object)).collect();
            inputs.push(build_pair_inputs(&context, &pairs, nodes.boxes())?);
            labels.extend(scene.relations.iter().map(|r| r.predicate));
            flagged.extend(scene.relations.iter().map(|r| r.noise.is_some()));
            per_scene.push(SceneForward {
                cache,
                num_nodes: nodes.len(),
                pairs,
            });
        }
        let inputs = Matrix::vstack(&inputs)?;
        let pre = self.head.pair_in.forward(&inputs)?;
        let hidden = relu(&pre);
        let features = self.head.pair_out.forward(&hidden)?;
        let logits = self.head.classifier.forward(&features)?;
        Ok(BatchForward {
            scenes: per_scene,
            inputs,
            pre,
            hidden,
            features,
            logits,
            labels,
            flagged,
        })
    }

    /// Parameter gradients of a loss whose logit gradient is `d_logits`.
    pub fn backward(&self, fwd: &BatchForward, d_logits: &Matrix) -> Result<Model> {
        let mut grads = self.zeros_like();
        let h = &self.head;
        let d_f = h.classifier.backward(&fwd.features, d_logits, &mut grads.head.classifier)?;
        let d_hidden = h.pair_out.backward(&fwd.hidden, &d_f, &mut grads.head.pair_out)?;
        let d_pre = relu_backward(&fwd.pre, &d_hidden);
        let d_inputs = h.pair_in.backward(&fwd.inputs, &d_pre, &mut grads.head.pair_in)?;
        if let (Some(enc), Some(genc)) = (&self.encoder, grads.encoder.as_mut()) {
            let d = enc.model_dim();
            let mut row = 0;
            for sf in &fwd.scenes {
                let mut d_ctx = Matrix::zeros(sf.num_nodes, d);
                for &(s, o) in &sf.pairs {
                    let g = d_inputs.row(row);
                    for (a, b) in d_ctx.row_mut(s).iter_mut().zip(&g[..d]) {
                        *a += b;
                    }
                    for (a, b) in d_ctx.row_mut(o).iter_mut().zip(&g[d..2 * d]) {
                        *a += b;
                    }
                    row += 1;
                }
                let cache = sf
                    .cache
                    .as_ref()
                    .ok_or_else(|| Error::Usage("forward pass ran without the encoder".into()))?;
                add_into(genc, &enc.backward(cache, &d_ctx)?.params);
            }
        }
        Ok(grads)
    }

    /// Row-wise predicate probabilities for every relation of `scene`.
    pub fn predict(&self, scene: &Scene) -> Result<Matrix> {
        let mut logits = self.forward_batch(&[scene])?.logits;
        for r in 0..logits.rows() {
            softmax_in_place(logits.row_mut(r));
        }
        Ok(logits)
    }

    pub fn predict_all(&self, scenes: &[Scene]) -> Result<Vec<ScenePrediction>> {
        scenes
            .iter()
            .filter(|s| !s.relations.is_empty())
            .map(|s| {
                Ok(ScenePrediction {
                    scene_id: s.id,
                    scores: self.predict(s)?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Center step size; 0 freezes the centers.
    pub lr_c: f64,
    pub loss: LossConfig,
    /// Batches with uniform τ; `None` means the whole first epoch.
    #[serde(default)]
    pub warmup_batches: Option<usize>,
    pub drop_lambda: f64,
    /// Apply the noisy-sample filter (PCPL only, after warm-up).
    pub drop_noisy: bool,
    pub seed: u64,
    pub normalization: NormalizationMode,
    pub center_mode: CenterMode,
    /// `None` feeds raw node features to the head.
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
            lr_c: 0.5,
            loss: LossConfig::new(crate::losses::LossVariant::pcpl()),
            warmup_batches: None,
            drop_lambda: DEFAULT_DROP_LAMBDA,
            drop_noisy: true,
            seed: 1,
            normalization: NormalizationMode::MinMax,
            center_mode: CenterMode::Learnt,
            encoder: Some(EncoderConfig::default()),
            head: HeadConfig::default(),
            val_fraction: default_val_fraction(),
        }
    }
}

impl TrainConfig {
    /// Checks everything except class frequencies, which training derives
    /// from the data when absent.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(self.lr_c >= 0.0 && self.lr_c.is_finite()) {
            return Err(Error::config("lr_c", "must be finite and non-negative"));
        }
        if !(self.drop_lambda > 0.0 && self.drop_lambda.is_finite()) {
            return Err(Error::config("drop_lambda", "must be positive"));
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        if self.head.hidden_dim == 0 || self.head.feature_dim == 0 {
            return Err(Error::config("head", "dimensions must be positive"));
        }
        if let Some(e) = &self.encoder {
            e.validate()?;
        }
        self.loss.variant.validate()?;
        if self.loss.class_frequencies.is_some() {
            self.loss.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub center_loss: f64,
    pub samples: usize,
    pub dropped: usize,
    /// Dropped samples that carry a noise flag.
    pub dropped_flagged: usize,
    pub flagged: usize,
    pub warmup: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    pub center_loss: f64,
    pub batches: usize,
    pub warmup_batches: usize,
    pub samples: usize,
    pub dropped: usize,
    pub dropped_flagged: usize,
    pub flagged: usize,
    /// Constrained validation mR@50 and mR@100.
    pub val_mr50: Option<f64>,
    pub val_mr100: Option<f64>,
    /// Constrained validation recall@100 per class.
    pub val_class_recall100: Vec<Option<f64>>,
    /// Graph τ at the end of the epoch.
    pub tau: Vec<f64>,
    pub tau_min: f64,
    pub tau_max: f64,
}

/// Mutable training state: parameters, class graph, and schedule position.
pub struct Trainer {
    config: TrainConfig,
    loss: LossConfig,
    model: Model,
    graph: ClassGraph,
    rng: ChaCha8Rng,
    batches_done: usize,
    epoch: usize,
    epoch_features: Vec<Matrix>,
    epoch_labels: Vec<usize>,
}

impl Trainer {
    /// `class_counts` fills in loss frequencies when the config has none;
    /// classes absent from training count once.
    pub fn new(config: TrainConfig, num_classes: usize, raw_dim: usize, class_counts: &[usize]) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        let mut loss = config.loss.clone();
        if loss.variant.uses_frequencies() && loss.class_frequencies.is_none() {
            if class_counts.len() != num_classes {
                return Err(Error::dim("Trainer::new", "class counts length"));
            }
            loss.class_frequencies = Some(class_counts.iter().map(|&c| c.max(1) as f64).collect());
        }
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&config, num_classes, raw_dim, &mut rng)?;
        let graph = ClassGraph::new(
            num_classes,
            model.head.feature_dim(),
            config.normalization,
            rng.random(),
        )?;
        Ok(Trainer {
            config,
            loss,
            model,
            graph,
            rng,
            batches_done: 0,
            epoch: 0,
            epoch_features: Vec::new(),
            epoch_labels: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn graph(&self) -> &ClassGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ClassGraph {
        &mut self.graph
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Loss configuration with resolved class frequencies.
    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn batches_done(&self) -> usize {
        self.batches_done
    }

    pub fn in_warmup(&self) -> bool {
        match self.config.warmup_batches {
            Some(t) => self.batches_done < t,
            None => self.epoch == 0,
        }
    }

    /// τ the next step will use.
    pub fn step_tau(&self) -> Vec<f64> {
        if self.in_warmup() {
            vec![1.0; self.graph.num_classes()]
        } else {
            self.graph.tau().to_vec()
        }
    }

    /// Drop mask the next step will apply, if any.
    pub fn step_drop_mask(&self, fwd: &BatchForward) -> Result<Option<Vec<bool>>> {
        if self.in_warmup() || !self.config.drop_noisy || !self.loss.variant.is_pcpl() {
            return Ok(None);
        }
        drop_mask(
            &fwd.features,
            &fwd.labels,
            &self.graph,
            self.config.drop_lambda,
            self.graph.update_count(),
        )
        .map(Some)
    }

    /// Classification loss and model gradients for `batch` at fixed `tau`,
    /// without changing any state.
    pub fn gradients(&self, batch: &[&Scene], tau: &[f64], dropped: Option<&[bool]>) -> Result<(BatchLossResult, Model)> {
        let fwd = self.model.forward_batch(batch)?;
        let res = self.loss.evaluate(&fwd.logits, &fwd.labels, tau, dropped)?;
        let grads = self.model.backward(&fwd, &res.logit_gradient)?;
        Ok((res, grads))
    }

    pub fn train_step(&mut self, batch: &[&Scene]) -> Result<StepMetrics> {
        let diverged = |e: Error, step: usize| match e {
            Error::NonFinite(what) => Error::Diverged(format!("non-finite {what} at batch {step}")),
            other => other,
        };
        let step = self.batches_done;
        if batch.iter().all(|s| s.relations.is_empty()) {
            return Err(Error::Input("batch has no relations".into()));
        }
        let warmup = self.in_warmup();
        let fwd = self.model.forward_batch(batch).map_err(|e| diverged(e, step))?;
        let mask = self.step_drop_mask(&fwd)?;
        let tau = self.step_tau();
        let res = self
            .loss
            .evaluate(&fwd.logits, &fwd.labels, &tau, mask.as_deref())
            .map_err(|e| diverged(e, step))?;
        if !res.loss.is_finite() {
            return Err(Error::Diverged(format!("loss is {} at batch {step}", res.loss)));
        }
        let grads = self.model.backward(&fwd, &res.logit_gradient)?;
        if self.config.lr > 0.0 {
            self.model.sgd_step(&grads, self.config.lr);
        }
        let center_loss = center_loss(&fwd.features, &fwd.labels, self.graph.centers())?;
        match self.config.center_mode {
            CenterMode::Learnt => {
                if self.config.lr_c > 0.0 {
                    self.graph.update_centers_learnt(&fwd.features, &fwd.labels, self.config.lr_c)?;
                }
            }
            CenterMode::Average => {
                self.epoch_features.push(fwd.features.clone());
                self.epoch_labels.extend_from_slice(&fwd.labels);
            }
        }
        self.graph.refresh_edges();
        self.batches_done += 1;
        let dropped = res.dropped_mask.iter().filter(|&&d| d).count();
        let dropped_flagged = res
            .dropped_mask
            .iter()
            .zip(&fwd.flagged)
            .filter(|(&d, &f)| d && f)
            .count();
        Ok(StepMetrics {
            loss: res.loss,
            center_loss,
            samples: fwd.labels.len(),
            dropped,
            dropped_flagged,
            flagged: fwd.flagged.iter().filter(|&&f| f).count(),
            warmup,
        })
    }

    /// Closes the current epoch: average-mode centers absorb the epoch's
    /// features, then the schedule advances.
    pub fn end_epoch(&mut self) -> Result<()> {
        if self.config.center_mode == CenterMode::Average && !self.epoch_labels.is_empty() {
            let f = Matrix::vstack(&self.epoch_features)?;
            self.graph.update_centers_average(&f, &self.epoch_labels)?;
            self.graph.refresh_edges();
        }
        self.epoch_features.clear();
        self.epoch_labels.clear();
        self.epoch += 1;
        Ok(())
    }

    /// Scene batches for one epoch: shuffled scenes, each batch closed once
    /// it holds at least `batch_size` relations.
    pub fn epoch_batches<'a>(&mut self, scenes: &'a [Scene]) -> Vec<Vec<&'a Scene>> {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches = Vec::new();
        let mut current = Vec::new();
        let mut pairs = 0;
        for i in order {
            let s = &scenes[i];
            if s.relations.is_empty() {
                continue;
            }
            pairs += s.relations.len();
            current.push(s);
            if pairs >= self.config.batch_size {
                batches.push(std::mem::take(&mut current));
                pairs = 0;
            }
        }
        if !current.is_empty() {
            batches.push(current);
        }
        batches
    }

    pub fn into_parts(self) -> (TrainConfig, Model, ClassGraph) {
        (self.config, self.model, self.graph)
    }
}

/// Trained parameters, final class graph and per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub model: Model,
    pub graph: ClassGraph,
    pub log: Vec<EpochLog>,
    pub validation_scene_ids: Vec<u64>,
}

impl TrainedModel {
    pub fn predict(&self, scene: &Scene) -> Result<Matrix> {
        self.model.predict(scene)
    }

    pub fn predict_all(&self, scenes: &[Scene]) -> Result<Vec<ScenePrediction>> {
        self.model.predict_all(scenes)
    }

    pub fn evaluate(&self, scenes: &[Scene], protocol: Protocol, config_hash: &str) -> Result<EvalReport> {
        let preds = self.predict_all(scenes)?;
        evaluate(scenes, &preds, protocol, self.num_classes, config_hash, self.config.seed)
    }

    /// The held-out scenes of `dataset` recorded at training time.
    pub fn validation_scenes(&self, dataset: &Dataset) -> Vec<Scene> {
        let ids: std::collections::HashSet<u64> = self.validation_scene_ids.iter().copied().collect();
        dataset.scenes.iter().filter(|s| ids.contains(&s.id)).cloned().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `epoch,loss,mR@50,mR@100,tau_min,tau_max,config_hash,seed`
    pub fn log_csv(&self, config_hash: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "mR@50", "mR@100", "tau_min", "tau_max", "config_hash", "seed"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for e in &self.log {
            w.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                opt(e.val_mr50),
                opt(e.val_mr100),
                e.tau_min.to_string(),
                e.tau_max.to_string(),
                config_hash.to_string(),
                self.config.seed.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn validation_summary(model: &Model, val: &[Scene], num_classes: usize) -> Result<(Option<f64>, Option<f64>, Vec<Option<f64>>)> {
    if val.iter().all(|s| s.relations.is_empty()) {
        return Ok((None, None, vec![None; num_classes]));
    }
    let preds = model.predict_all(val)?;
    let r50 = recall_at_k(val, &preds, 50, Protocol::Constrained, num_classes)?;
    let r100 = recall_at_k(val, &preds, 100, Protocol::Constrained, num_classes)?;
    Ok((
        Some(mean_recall_at_k(&r50.tally)?),
        Some(mean_recall_at_k(&r100.tally)?),
        r100.tally.per_class_recall(),
    ))
}

/// Trains on a split of `dataset` holding out `config.val_fraction` of the
/// scenes, chosen by the config seed.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if dataset.num_pairs() == 0 {
        return Err(Error::Input("dataset has no relations".into()));
    }
    let (train, val) = split_scenes(&dataset.scenes, config.val_fraction, config.seed);
    fit_split(&train, &val, dataset.num_classes(), dataset.feature_dim(), config)
}

pub fn fit_split(
    train: &[Scene],
    val: &[Scene],
    num_classes: usize,
    raw_dim: usize,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let counts = class_counts(train, num_classes);
    let mut trainer = Trainer::new(config.clone(), num_classes, raw_dim, &counts)?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = trainer.epoch_batches(train);
        if batches.is_empty() {
            return Err(Error::Input("training split has no relations".into()));
        }
        let mut entry = EpochLog {
            epoch,
            loss: 0.0,
            center_loss: 0.0,
            batches: batches.len(),
            warmup_batches: 0,
            samples: 0,
            dropped: 0,
            dropped_flagged: 0,
            flagged: 0,
            val_mr50: None,
            val_mr100: None,
            val_class_recall100: Vec::new(),
            tau: Vec::new(),
            tau_min: 0.0,
            tau_max: 0.0,
        };
        for batch in &batches {
            let m = trainer
                .train_step(batch)
                .map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            entry.loss += m.loss;
            entry.center_loss += m.center_loss;
            entry.samples += m.samples;
            entry.dropped += m.dropped;
            entry.dropped_flagged += m.dropped_flagged;
            entry.flagged += m.flagged;
            entry.warmup_batches += usize::from(m.warmup);
        }
        trainer.end_epoch()?;
        entry.loss /= batches.len() as f64;
        entry.center_loss /= batches.len() as f64;
        let (mr50, mr100, per_class) = validation_summary(trainer.model(), val, num_classes)?;
        entry.val_mr50 = mr50;
        entry.val_mr100 = mr100;
        entry.val_class_recall100 = per_class;
        let tau = trainer.graph().tau().to_vec();
        entry.tau_min = tau.iter().copied().fold(f64::INFINITY, f64::min);
        entry.tau_max = tau.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        entry.tau = tau;
        log.push(entry);
    }
    let (config, model, graph) = trainer.into_parts();
    debug_assert_eq!(graph.epsilon(), DEFAULT_EPSILON);
    Ok(TrainedModel {
        config,
        num_classes,
        model,
        graph,
        log,
        validation_scene_ids: val.iter().map(|s| s.id).collect(),
    })
}
