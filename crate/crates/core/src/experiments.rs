//! Multi-seed experiment drivers behind the command-line tool.
//!
//! Every driver takes a validated [`ExperimentConfig`], runs one
//! independent training job per (variant, seed) and aggregates the
//! validation metrics into a table. Within a seed, all jobs share the
//! dataset, split and initialization; only the loss differs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class_graph::{CenterMode, NormalizationMode};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::metrics::{EvalReport, Protocol};
use crate::model::{fit, fit_split, EpochLog, TrainConfig, TrainedModel};
use crate::synthdata::{
    build_observation_groups, generate, inject_label_noise, split_scenes, Dataset, GeneratorConfig,
    ObservationSpec, GROUP_COMPANION, GROUP_PRIMARY,
};

/// Env var capping the number of concurrent training runs.
pub const THREADS_ENV: &str = "CORRBALANCE_THREADS";

/// The K that every headline table reports.
pub const HEADLINE_K: usize = 100;

pub fn default_seeds() -> Vec<u64> {
    (1..=5).collect()
}

fn default_variants() -> Vec<LossVariant> {
    vec![LossVariant::PlainCe, LossVariant::pcpl()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Regenerated per seed with the generator seed replaced by the run seed.
    Generator(GeneratorConfig),
    /// A JSON Lines dataset, relative paths resolved against the config file.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Only `reweight_n` is supported.
    pub parameter: String,
    pub values: Vec<f64>,
    #[serde(default = "yes")]
    pub include_pcpl: bool,
}

fn yes() -> bool {
    true
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            parameter: "reweight_n".into(),
            values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            include_pcpl: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub center_modes: Vec<CenterMode>,
    pub normalizations: Vec<NormalizationMode>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            center_modes: CenterMode::ALL.to_vec(),
            normalizations: NormalizationMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: Option<DataSource>,
    pub train: TrainConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<LossVariant>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Fraction of relations whose label is flipped before training.
    #[serde(default)]
    pub label_noise: Option<f64>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub observation: Option<ObservationSpec>,
    #[serde(default)]
    pub ablation: Option<AblationSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        self.train.validate()?;
        for (i, v) in self.variants.iter().enumerate() {
            v.validate().map_err(|e| prefix_field(e, &format!("variants[{i}]")))?;
        }
        if let Some(DataSource::Generator(g)) = &self.data {
            g.validate().map_err(|e| prefix_field(e, "data.generator"))?;
        }
        if let Some(rate) = self.label_noise {
            if !(0.0..0.5).contains(&rate) {
                return Err(Error::config("label_noise", format!("{rate} is outside [0, 0.5)")));
            }
        }
        if let Some(s) = &self.sweep {
            if s.parameter != "reweight_n" {
                return Err(Error::config("sweep.parameter", format!("unsupported parameter `{}`", s.parameter)));
            }
            if s.values.is_empty() {
                return Err(Error::config("sweep.values", "grid is empty"));
            }
            if let Some(v) = s.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::config("sweep.values", format!("{v} is outside [0, 1]")));
            }
        }
        if let Some(o) = &self.observation {
            o.validate().map_err(|e| prefix_field(e, "observation"))?;
        }
        if let Some(a) = &self.ablation {
            if a.center_modes.is_empty() || a.normalizations.is_empty() {
                return Err(Error::config("ablation", "both axes need at least one value"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The dataset a run with `seed` trains on.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        let ds = match &self.data {
            Some(DataSource::Generator(g)) => generate(&GeneratorConfig { seed, ..g.clone() })?,
            Some(DataSource::Path(p)) => Dataset::read(self.base_dir.join(p))?,
            None => return Err(Error::config("data", "this command needs a data source")),
        };
        match self.label_noise {
            Some(rate) if rate > 0.0 => inject_label_noise(&ds, rate, seed),
            _ => Ok(ds),
        }
    }

    pub fn train_config(&self, variant: &LossVariant, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            loss: LossConfig::new(variant.clone()),
            ..self.train.clone()
        }
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

/// A rayon pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("`{v}` is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Input(e.to_string()))
}

/// Validation outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub variant: LossVariant,
    pub seed: u64,
    pub config_hash: String,
    pub log: Vec<EpochLog>,
    pub constrained: EvalReport,
    pub unconstrained: EvalReport,
    /// Share of dropped samples whose label was flipped.
    pub drop_precision: Option<f64>,
}

impl RunResult {
    pub fn report(&self, protocol: Protocol) -> &EvalReport {
        match protocol {
            Protocol::Constrained => &self.constrained,
            Protocol::Unconstrained => &self.unconstrained,
        }
    }

    /// Constrained mR@100.
    pub fn headline(&self) -> f64 {
        self.constrained.mean_recall_at(HEADLINE_K).unwrap_or(f64::NAN)
    }

    pub fn class_recall(&self, protocol: Protocol, class: usize) -> f64 {
        self.report(protocol).class_recall_at(HEADLINE_K, class).unwrap_or(f64::NAN)
    }
}

pub fn evaluate_run(
    model: &TrainedModel,
    val: &[crate::synthdata::Scene],
    label: String,
    config_hash: &str,
) -> Result<RunResult> {
    let dropped: usize = model.log.iter().map(|e| e.dropped).sum();
    let dropped_flagged: usize = model.log.iter().map(|e| e.dropped_flagged).sum();
    Ok(RunResult {
        label,
        variant: model.config.loss.variant.clone(),
        seed: model.config.seed,
        config_hash: config_hash.to_string(),
        log: model.log.clone(),
        constrained: model.evaluate(val, Protocol::Constrained, config_hash)?,
        unconstrained: model.evaluate(val, Protocol::Unconstrained, config_hash)?,
        drop_precision: (dropped > 0).then(|| dropped_flagged as f64 / dropped as f64),
    })
}

/// Trains on `dataset` with the config's own validation split.
pub fn run_on_dataset(dataset: &Dataset, config: &TrainConfig, label: String, config_hash: &str) -> Result<(TrainedModel, RunResult)> {
    let model = fit(dataset, config)?;
    let val = model.validation_scenes(dataset);
    let result = evaluate_run(&model, &val, label, config_hash)?;
    Ok((model, result))
}

struct Job {
    seed: u64,
    label: String,
    config: TrainConfig,
}

fn run_jobs<T: Send>(
    jobs: Vec<Job>,
    per_seed_data: impl Fn(u64) -> Result<Dataset> + Sync,
    finish: impl Fn(&Dataset, &Job) -> Result<T> + Sync,
) -> Result<Vec<Result<T>>> {
    let pool = thread_pool()?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let ds = per_seed_data(job.seed)?;
                finish(&ds, job)
            })
            .collect()
    }))
}

/// One run per (variant, seed); failures stay per-run.
pub fn train_all(exp: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<(String, u64, Result<(TrainedModel, RunResult)>)>> {
    let hash = exp.hash();
    let jobs: Vec<Job> = seeds
        .iter()
        .flat_map(|&seed| {
            exp.variants.iter().map(move |v| Job {
                seed,
                label: v.label(),
                config: exp.train_config(v, seed),
            })
        })
        .collect();
    let keys: Vec<(String, u64)> = jobs.iter().map(|j| (j.label.clone(), j.seed)).collect();
    let results = run_jobs(jobs, |s| exp.dataset(s), |ds, job| {
        run_on_dataset(ds, &job.config, job.label.clone(), &hash)
    })?;
    Ok(keys.into_iter().zip(results).map(|((l, s), r)| (l, s, r)).collect())
}

fn collect_all<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// PCPL reference row label in sweep tables.
pub const PCPL_LABEL: &str = "pcpl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub label: String,
    /// Re-weighting exponent; `None` on the PCPL row.
    pub n: Option<f64>,
    /// Constrained R@100 per class.
    pub class_recall: Vec<f64>,
    pub mean_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub config_hash: String,
    pub num_classes: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    pub fn row(&self, seed: u64, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.seed == seed && r.label == label)
    }

    pub fn sweep_rows(&self, seed: u64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.seed == seed && r.n.is_some())
    }
}

pub fn sweep_label(n: f64) -> String {
    LossVariant::ReweightPow { n }.label()
}

pub fn run_sweep(exp: &ExperimentConfig, seeds: &[u64]) -> Result<SweepTable> {
    let spec = exp.sweep.clone().unwrap_or_default();
    let hash = exp.hash();
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &n in &spec.values {
            let v = LossVariant::ReweightPow { n };
            jobs.push(Job {
                seed,
                label: sweep_label(n),
                config: exp.train_config(&v, seed),
            });
        }
        if spec.include_pcpl {
            jobs.push(Job {
                seed,
                label: PCPL_LABEL.into(),
                config: exp.train_config(&LossVariant::pcpl(), seed),
            });
        }
    }
    let results = collect_all(run_jobs(jobs, |s| exp.dataset(s), |ds, job| {
        run_on_dataset(ds, &job.config, job.label.clone(), &hash).map(|(_, r)| r)
    })?)?;
    let num_classes = results.first().map_or(0, |r| r.constrained.gt_counts.len());
    let rows = results
        .into_iter()
        .map(|r| SweepRow {
            seed: r.seed,
            n: match r.variant {
                LossVariant::ReweightPow { n } => Some(n),
                _ => None,
            },
            class_recall: (0..num_classes).map(|c| r.class_recall(Protocol::Constrained, c)).collect(),
            mean_recall: r.headline(),
            label: r.label,
        })
        .collect();
    Ok(SweepTable {
        config_hash: hash,
        num_classes,
        rows,
    })
}

pub const GROUPS: [&str; 2] = ["strong", "weak"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub group: String,
    /// `primary` or `companion`.
    pub class: String,
    pub protocol: Protocol,
    /// R@100 points, re-weighting minus CE, one per seed.
    pub deltas: Vec<f64>,
    pub ce_recall: Vec<f64>,
    pub reweight_recall: Vec<f64>,
}

impl ObservationRow {
    pub fn mean_delta(&self) -> f64 {
        mean(&self.deltas)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationTable {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ObservationRow>,
}

impl ObservationTable {
    pub fn get(&self, group: &str, class: &str, protocol: Protocol) -> Option<&ObservationRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.class == class && r.protocol == protocol)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Plain CE against n = 1 re-weighting on both observation groups.
pub fn run_observation(exp: &ExperimentConfig, seeds: &[u64]) -> Result<ObservationTable> {
    let spec = exp
        .observation
        .as_ref()
        .ok_or_else(|| Error::config("observation", "this command needs an observation spec"))?;
    let hash = exp.hash();
    let variants = [LossVariant::PlainCe, LossVariant::ReweightPow { n: 1.0 }];
    let jobs: Vec<(u64, usize, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..2).flat_map(move |g| (0..2).map(move |v| (s, g, v))))
        .collect();
    let pool = thread_pool()?;
    let results: Vec<Result<RunResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, g, v)| {
                let (strong, weak) = build_observation_groups(spec, seed)?;
                let ds = if g == 0 { strong } else { weak };
                let (train, val) = split_scenes(&ds.scenes, exp.train.val_fraction, seed);
                let cfg = exp.train_config(&variants[v], seed);
                let model = fit_split(&train, &val, ds.num_classes(), ds.feature_dim(), &cfg)?;
                evaluate_run(&model, &val, format!("{}_{}", GROUPS[g], variants[v].label()), &hash)
            })
            .collect()
    });
    let results = collect_all(results)?;
    let find = |seed: u64, label: String| results.iter().find(|r| r.seed == seed && r.label == label).expect("run exists");
    let mut rows = Vec::new();
    for group in GROUPS {
        for (class, idx) in [("primary", GROUP_PRIMARY), ("companion", GROUP_COMPANION)] {
            for protocol in Protocol::ALL {
                let mut row = ObservationRow {
                    group: group.into(),
                    class: class.into(),
                    protocol,
                    deltas: Vec::new(),
                    ce_recall: Vec::new(),
                    reweight_recall: Vec::new(),
                };
                for &seed in seeds {
                    let ce = find(seed, format!("{group}_{}", variants[0].label())).class_recall(protocol, idx);
                    let rw = find(seed, format!("{group}_{}", variants[1].label())).class_recall(protocol, idx);
                    row.ce_recall.push(ce);
                    row.reweight_recall.push(rw);
                    row.deltas.push(100.0 * (rw - ce));
                }
                rows.push(row);
            }
        }
    }
    Ok(ObservationTable {
        config_hash: hash,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub center_mode: CenterMode,
    pub normalization: NormalizationMode,
    pub protocol: Protocol,
    /// Per seed.
    pub mr50: Vec<f64>,
    pub mr100: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, c: CenterMode, n: NormalizationMode, p: Protocol) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.center_mode == c && r.normalization == n && r.protocol == p)
    }

    /// Combinations ordered by mean mR@100, best first.
    pub fn ordering(&self, protocol: Protocol) -> Vec<(CenterMode, NormalizationMode, f64)> {
        let mut v: Vec<_> = self
            .rows
            .iter()
            .filter(|r| r.protocol == protocol)
            .map(|r| (r.center_mode, r.normalization, mean(&r.mr100)))
            .collect();
        v.sort_by(|a, b| b.2.total_cmp(&a.2));
        v
    }
}

/// PCPL under every (center mode, normalization) combination.
pub fn run_ablation(exp: &ExperimentConfig, seeds: &[u64]) -> Result<AblationTable> {
    let spec = exp.ablation.clone().unwrap_or_default();
    let hash = exp.hash();
    let combos: Vec<(CenterMode, NormalizationMode)> = spec
        .center_modes
        .iter()
        .flat_map(|&c| spec.normalizations.iter().map(move |&n| (c, n)))
        .collect();
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &(c, n) in &combos {
            let mut config = exp.train_config(&LossVariant::pcpl(), seed);
            config.center_mode = c;
            config.normalization = n;
            jobs.push(Job {
                seed,
                label: format!("{}_{}", c.name(), n.name()),
                config,
            });
        }
    }
    let results = collect_all(run_jobs(jobs, |s| exp.dataset(s), |ds, job| {
        run_on_dataset(ds, &job.config, job.label.clone(), &hash).map(|(_, r)| r)
    })?)?;
    let mut rows = Vec::new();
    for &(c, n) in &combos {
        for protocol in Protocol::ALL {
            let label = format!("{}_{}", c.name(), n.name());
            let mut row = AblationRow {
                center_mode: c,
                normalization: n,
                protocol,
                mr50: Vec::new(),
                mr100: Vec::new(),
            };
            for &seed in seeds {
                let r = results.iter().find(|r| r.seed == seed && r.label == label).expect("run exists");
                row.mr50.push(r.report(protocol).mean_recall_at(50).unwrap_or(f64::NAN));
                row.mr100.push(r.report(protocol).mean_recall_at(100).unwrap_or(f64::NAN));
            }
            rows.push(row);
        }
    }
    Ok(AblationTable {
        config_hash: hash,
        seeds: seeds.to_vec(),
        rows,
    })
}

/// PCPL drop-mask precision per seed on the noisy dataset.
pub fn run_noise_drop(exp: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunResult>> {
    if exp.label_noise.unwrap_or(0.0) <= 0.0 {
        return Err(Error::config("label_noise", "this experiment needs a positive noise rate"));
    }
    let hash = exp.hash();
    let jobs = seeds
        .iter()
        .map(|&seed| Job {
            seed,
            label: PCPL_LABEL.into(),
            config: exp.train_config(&LossVariant::pcpl(), seed),
        })
        .collect();
    collect_all(run_jobs(jobs, |s| exp.dataset(s), |ds, job| {
        run_on_dataset(ds, &job.config, job.label.clone(), &hash).map(|(_, r)| r)
    })?)
}
