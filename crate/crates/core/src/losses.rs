//! Classification losses over logits: the correlation-weighted cross entropy,
//! plain cross entropy and the frequency-based baselines, plus the
//! center-distance filter that flags likely mislabeled samples.
//!
//! Every loss returns the exact analytic gradient with respect to the logits
//! so training never needs automatic differentiation.

use serde::{Deserialize, Serialize};

use crate::class_graph::ClassGraph;
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, squared_distance, Matrix};

/// Default class-balanced β.
pub const DEFAULT_BETA: f64 = 0.999;
/// Default focal γ.
pub const DEFAULT_GAMMA: f64 = 2.0;
/// Default noisy-label margin divisor λ.
pub const DEFAULT_DROP_LAMBDA: f64 = 2.0;

/// How the correlation-weighted loss normalizes its per-sample weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcplDenominator {
    /// Sum of τ over the distinct classes present in the batch.
    #[default]
    DistinctClasses,
    /// Sum of τ over every sample of the batch.
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossVariant {
    PlainCe,
    Pcpl {
        #[serde(default)]
        denominator: PcplDenominator,
    },
    /// Class weights `(1/freq)ⁿ`, rescaled to a mean sample weight of 1.
    ReweightPow { n: f64 },
    /// Class weights `1/E_c` with `E_c = (1 − β^freq)/(1 − β)`, rescaled likewise.
    ClassBalanced {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Focal {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl LossVariant {
    pub fn pcpl() -> Self {
        LossVariant::Pcpl {
            denominator: PcplDenominator::DistinctClasses,
        }
    }

    pub fn uses_frequencies(&self) -> bool {
        matches!(self, LossVariant::ReweightPow { .. } | LossVariant::ClassBalanced { .. })
    }

    pub fn is_pcpl(&self) -> bool {
        matches!(self, LossVariant::Pcpl { .. })
    }

    /// Short stable label used in file names and tables.
    pub fn label(&self) -> String {
        match self {
            LossVariant::PlainCe => "plain_ce".into(),
            LossVariant::Pcpl { denominator: PcplDenominator::DistinctClasses } => "pcpl".into(),
            LossVariant::Pcpl { denominator: PcplDenominator::PerSample } => "pcpl_per_sample".into(),
            LossVariant::ReweightPow { n } => format!("reweight_n{n}"),
            LossVariant::ClassBalanced { beta } => format!("class_balanced_b{beta}"),
            LossVariant::Focal { gamma } => format!("focal_g{gamma}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossVariant::ReweightPow { n } if !(0.0..=1.0).contains(&n) => {
                Err(Error::config("loss.n", format!("{n} is outside [0, 1]")))
            }
            LossVariant::ClassBalanced { beta } if !(beta > 0.0 && beta < 1.0) => {
                Err(Error::config("loss.beta", format!("{beta} is outside (0, 1)")))
            }
            LossVariant::Focal { gamma } if !(gamma >= 0.0) || !gamma.is_finite() => {
                Err(Error::config("loss.gamma", format!("{gamma} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

/// A loss variant plus the class statistics it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_frequencies: Option<Vec<f64>>,
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        LossConfig {
            variant,
            class_frequencies: None,
        }
    }

    pub fn with_frequencies(variant: LossVariant, frequencies: Vec<f64>) -> Self {
        LossConfig {
            variant,
            class_frequencies: Some(frequencies),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if self.variant.uses_frequencies() {
            let freqs = self
                .class_frequencies
                .as_ref()
                .ok_or_else(|| Error::config("loss.class_frequencies", "required by this variant"))?;
            check_frequencies(freqs)?;
        }
        Ok(())
    }

    /// Evaluates the configured loss. Samples flagged in `dropped` are removed
    /// from the batch: their weights and gradient rows are exactly zero and
    /// the normalization runs over the kept samples only.
    pub fn evaluate(
        &self,
        logits: &Matrix,
        labels: &[usize],
        tau: &[f64],
        dropped: Option<&[bool]>,
    ) -> Result<BatchLossResult> {
        let n = logits.rows();
        let mask = match dropped {
            Some(m) if m.len() != n => {
                return Err(Error::dim("LossConfig::evaluate", "drop mask length"));
            }
            Some(m) => m.to_vec(),
            None => vec![false; n],
        };
        let kept: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
        if kept.len() == n {
            return self.evaluate_all(logits, labels, tau);
        }
        check_logits(logits, labels)?;
        let mut out = BatchLossResult {
            loss: 0.0,
            per_sample_weights: vec![0.0; n],
            logit_gradient: Matrix::zeros(n, logits.cols()),
            dropped_mask: mask,
        };
        if kept.is_empty() {
            return Ok(out);
        }
        let sub_logits = logits.select_rows(&kept);
        let sub_labels: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
        let sub = self.evaluate_all(&sub_logits, &sub_labels, tau)?;
        out.loss = sub.loss;
        for (k, &i) in kept.iter().enumerate() {
            out.per_sample_weights[i] = sub.per_sample_weights[k];
            out.logit_gradient.row_mut(i).copy_from_slice(sub.logit_gradient.row(k));
        }
        Ok(out)
    }

    fn evaluate_all(&self, logits: &Matrix, labels: &[usize], tau: &[f64]) -> Result<BatchLossResult> {
        let freqs = || {
            self.class_frequencies
                .as_deref()
                .ok_or_else(|| Error::config("loss.class_frequencies", "required by this variant"))
        };
        match self.variant {
            LossVariant::PlainCe => plain_ce(logits, labels),
            LossVariant::Pcpl { denominator } => pcpl_loss_with(logits, labels, tau, denominator),
            LossVariant::ReweightPow { n } => reweight_pow_loss(logits, labels, freqs()?, n),
            LossVariant::ClassBalanced { beta } => class_balanced_loss(logits, labels, freqs()?, beta),
            LossVariant::Focal { gamma } => focal_loss(logits, labels, gamma),
        }
    }
}

/// Loss value, weights and logit gradient for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLossResult {
    pub loss: f64,
    pub per_sample_weights: Vec<f64>,
    pub logit_gradient: Matrix,
    pub dropped_mask: Vec<bool>,
}

fn check_logits(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(
            "loss",
            format!("{} logit rows, {} labels", logits.rows(), labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Label {
            label,
            num_classes: logits.cols(),
        });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

fn check_frequencies(freqs: &[f64]) -> Result<()> {
    if let Some(bad) = freqs.iter().find(|&&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::config(
            "loss.class_frequencies",
            format!("frequency {bad} is not strictly positive"),
        ));
    }
    Ok(())
}

/// Row-wise softmax probabilities and `log p` at the label.
fn probabilities(logits: &Matrix, labels: &[usize]) -> (Matrix, Vec<f64>) {
    let mut probs = logits.clone();
    let mut log_p = Vec::with_capacity(labels.len());
    for (r, &l) in labels.iter().enumerate() {
        let row = probs.row_mut(r);
        let lse = log_sum_exp(row);
        log_p.push(row[l] - lse);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    (probs, log_p)
}

/// `L = Σᵢ wᵢ·(−log pᵢ)` with gradient rows `wᵢ·(p − onehot)`.
fn weighted_ce(logits: &Matrix, labels: &[usize], weights: Vec<f64>) -> BatchLossResult {
    let (mut grad, log_p) = probabilities(logits, labels);
    let mut loss = 0.0;
    for (r, (&l, &w)) in labels.iter().zip(&weights).enumerate() {
        loss -= w * log_p[r];
        let row = grad.row_mut(r);
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= w;
        }
    }
    BatchLossResult {
        loss,
        per_sample_weights: weights,
        logit_gradient: grad,
        dropped_mask: vec![false; labels.len()],
    }
}

/// Correlation-weighted cross entropy with the distinct-class denominator.
pub fn pcpl_loss(logits: &Matrix, labels: &[usize], tau: &[f64]) -> Result<BatchLossResult> {
    pcpl_loss_with(logits, labels, tau, PcplDenominator::DistinctClasses)
}

/// `wᵢ = τ_{lᵢ} / Σ_k τ_k`, where `k` ranges over the distinct classes in
/// the batch (or over all samples for [`PcplDenominator::PerSample`]).
pub fn pcpl_loss_with(
    logits: &Matrix,
    labels: &[usize],
    tau: &[f64],
    denominator: PcplDenominator,
) -> Result<BatchLossResult> {
    check_logits(logits, labels)?;
    if tau.len() != logits.cols() {
        return Err(Error::dim(
            "pcpl_loss",
            format!("{} factors for {} classes", tau.len(), logits.cols()),
        ));
    }
    if let Some(bad) = tau.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::config("tau", format!("correlation factor {bad} is not positive")));
    }
    let denom: f64 = match denominator {
        PcplDenominator::DistinctClasses => {
            let mut present = vec![false; tau.len()];
            for &l in labels {
                present[l] = true;
            }
            present
                .iter()
                .zip(tau)
                .filter(|(p, _)| **p)
                .map(|(_, t)| t)
                .sum()
        }
        PcplDenominator::PerSample => labels.iter().map(|&l| tau[l]).sum(),
    };
    let weights = labels.iter().map(|&l| tau[l] / denom).collect();
    Ok(weighted_ce(logits, labels, weights))
}

/// Mean cross entropy.
pub fn plain_ce(logits: &Matrix, labels: &[usize]) -> Result<BatchLossResult> {
    check_logits(logits, labels)?;
    let inv_n = 1.0 / labels.len().max(1) as f64;
    Ok(weighted_ce(logits, labels, vec![inv_n; labels.len()]))
}

/// Rescales raw class weights so the frequency-weighted mean weight is 1.
fn mean_one_rescale(raw: &[f64], freqs: &[f64]) -> Vec<f64> {
    let total: f64 = freqs.iter().sum();
    let weighted: f64 = freqs.iter().zip(raw).map(|(f, w)| f * w).sum();
    let scale = total / weighted;
    raw.iter().map(|w| w * scale).collect()
}

/// Per-class weights of the inverse-frequency power baseline.
pub fn reweight_pow_class_weights(freqs: &[f64], n: f64) -> Result<Vec<f64>> {
    check_frequencies(freqs)?;
    if !(0.0..=1.0).contains(&n) {
        return Err(Error::config("loss.n", format!("{n} is outside [0, 1]")));
    }
    let raw: Vec<f64> = freqs.iter().map(|f| (1.0 / f).powf(n)).collect();
    Ok(mean_one_rescale(&raw, freqs))
}

/// `E_c = (1 − β^freq_c) / (1 − β)`
pub fn effective_number(freq: f64, beta: f64) -> f64 {
    (1.0 - beta.powf(freq)) / (1.0 - beta)
}

/// Per-class weights of the class-balanced baseline.
pub fn class_balanced_class_weights(freqs: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_frequencies(freqs)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::config("loss.beta", format!("{beta} is outside (0, 1)")));
    }
    let raw: Vec<f64> = freqs.iter().map(|&f| 1.0 / effective_number(f, beta)).collect();
    Ok(mean_one_rescale(&raw, freqs))
}

fn class_weighted_mean_ce(logits: &Matrix, labels: &[usize], class_w: &[f64]) -> Result<BatchLossResult> {
    check_logits(logits, labels)?;
    if class_w.len() != logits.cols() {
        return Err(Error::dim(
            "class weights",
            format!("{} weights for {} classes", class_w.len(), logits.cols()),
        ));
    }
    let n = labels.len().max(1) as f64;
    let weights = labels.iter().map(|&l| class_w[l] / n).collect();
    Ok(weighted_ce(logits, labels, weights))
}

pub fn reweight_pow_loss(logits: &Matrix, labels: &[usize], freqs: &[f64], n: f64) -> Result<BatchLossResult> {
    let w = reweight_pow_class_weights(freqs, n)?;
    class_weighted_mean_ce(logits, labels, &w)
}

pub fn class_balanced_loss(
    logits: &Matrix,
    labels: &[usize],
    freqs: &[f64],
    beta: f64,
) -> Result<BatchLossResult> {
    let w = class_balanced_class_weights(freqs, beta)?;
    class_weighted_mean_ce(logits, labels, &w)
}

/// Mean of `−(1 − p)^γ · log p` at the label.
///
/// With `p` the label probability, `∂ℓ/∂z_j = [γ(1−p)^{γ−1}·p·log p − (1−p)^γ]·(δ_{jy} − p_j)`.
pub fn focal_loss(logits: &Matrix, labels: &[usize], gamma: f64) -> Result<BatchLossResult> {
    check_logits(logits, labels)?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::config("loss.gamma", format!("{gamma} must be >= 0")));
    }
    let inv_n = 1.0 / labels.len().max(1) as f64;
    let (mut grad, log_p) = probabilities(logits, labels);
    let mut loss = 0.0;
    let mut weights = Vec::with_capacity(labels.len());
    for (r, &l) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        let p = row[l];
        let lp = log_p[r];
        let q = 1.0 - p;
        let modulating = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        loss -= inv_n * modulating * lp;
        weights.push(inv_n * modulating);
        let focus_term = if gamma == 0.0 || q <= 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p * lp
        };
        let coeff = inv_n * (focus_term - modulating);
        for (j, v) in row.iter_mut().enumerate() {
            let delta = if j == l { 1.0 } else { 0.0 };
            *v = coeff * (delta - *v);
        }
    }
    Ok(BatchLossResult {
        loss,
        per_sample_weights: weights,
        logit_gradient: grad,
        dropped_mask: vec![false; labels.len()],
    })
}

/// Flags samples that sit closer to a foreign center than to their own by
/// more than `e_aj / λ`. `token` is the graph update count the caller
/// expects; a mismatch, or edges not refreshed since the last center
/// update, is a staleness error.
pub fn drop_mask(
    features: &Matrix,
    labels: &[usize],
    graph: &ClassGraph,
    lambda: f64,
    token: u64,
) -> Result<Vec<bool>> {
    Ok(drop_margins(features, labels, graph, lambda, token)?
        .into_iter()
        .map(|d| d > 0.0)
        .collect())
}

/// Per-sample `max_{j≠a} (‖f − v_a‖ − ‖f − v_j‖ − e_aj/λ)`; a sample is
/// dropped when this is strictly positive. Single-class graphs yield `-∞`.
pub fn drop_margins(
    features: &Matrix,
    labels: &[usize],
    graph: &ClassGraph,
    lambda: f64,
    token: u64,
) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::config("drop_lambda", "must be positive"));
    }
    if token != graph.update_count() || !graph.is_fresh() {
        return Err(Error::Stale {
            expected: token,
            actual: graph.update_count(),
        });
    }
    if features.rows() != labels.len() || features.cols() != graph.dim() {
        return Err(Error::dim(
            "drop_mask",
            format!(
                "features {}x{}, {} labels, graph dim {}",
                features.rows(),
                features.cols(),
                labels.len(),
                graph.dim()
            ),
        ));
    }
    let centers = graph.centers();
    let edges = graph.edges();
    let c = graph.num_classes();
    let mut margins = Vec::with_capacity(labels.len());
    for (f, &a) in features.iter_rows().zip(labels) {
        if a >= c {
            return Err(Error::Label { label: a, num_classes: c });
        }
        let own = squared_distance(f, centers.row(a)).sqrt();
        let worst = (0..c)
            .filter(|&j| j != a)
            .map(|j| (own - squared_distance(f, centers.row(j)).sqrt()) - edges.get(a, j) / lambda)
            .fold(f64::NEG_INFINITY, f64::max);
        margins.push(worst);
    }
    Ok(margins)
}
