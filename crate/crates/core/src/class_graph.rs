//! Learnable predicate-class graph.
//!
//! Each class owns a center vector living in relationship-feature space.
//! Pairwise Euclidean distances between centers form the edge matrix, the
//! row sums of that matrix are the global correlations, and a normalization
//! of the global correlations gives the per-class correlation factors used
//! as loss weights. Small edges mean strongly correlated classes; a large
//! global correlation means the class is independent of the rest.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, squared_distance, Matrix};

/// Default ε added to the min-max numerator.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Standard deviation of the seeded Gaussian center initialization.
pub const CENTER_INIT_STD: f64 = 0.01;

/// How global correlations are turned into correlation factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// `(u − min u + ε) / (max u − min u)`
    #[default]
    MinMax,
    /// `softmax(u)`
    Softmax,
    /// `u / max u`
    Scaling,
}

impl NormalizationMode {
    pub const ALL: [NormalizationMode; 3] = [
        NormalizationMode::MinMax,
        NormalizationMode::Softmax,
        NormalizationMode::Scaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormalizationMode::MinMax => "min_max",
            NormalizationMode::Softmax => "softmax",
            NormalizationMode::Scaling => "scaling",
        }
    }
}

/// How class centers are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Gradient descent on the center loss every batch.
    #[default]
    Learnt,
    /// Per-class mean of all features seen during the previous epoch.
    Average,
}

impl CenterMode {
    pub const ALL: [CenterMode; 2] = [CenterMode::Learnt, CenterMode::Average];

    pub fn name(self) -> &'static str {
        match self {
            CenterMode::Learnt => "learnt",
            CenterMode::Average => "average",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGraph {
    num_classes: usize,
    dim: usize,
    centers: Matrix,
    edges: Matrix,
    global_correlation: Vec<f64>,
    tau: Vec<f64>,
    epsilon: f64,
    normalization: NormalizationMode,
    update_count: u64,
    /// `update_count` at the time edges, `u` and `τ` were last recomputed.
    refreshed_at: u64,
}

impl ClassGraph {
    /// Centers drawn i.i.d. from N(0, 0.01²) with the given seed, then refreshed.
    pub fn new(
        num_classes: usize,
        dim: usize,
        normalization: NormalizationMode,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = Matrix::randn(num_classes, dim, CENTER_INIT_STD, &mut rng);
        Self::from_centers(centers, normalization, DEFAULT_EPSILON)
    }

    pub fn from_centers(
        centers: Matrix,
        normalization: NormalizationMode,
        epsilon: f64,
    ) -> Result<Self> {
        if centers.rows() == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::config("epsilon", "must be a positive finite number"));
        }
        let c = centers.rows();
        let mut graph = ClassGraph {
            num_classes: c,
            dim: centers.cols(),
            centers,
            edges: Matrix::zeros(c, c),
            global_correlation: vec![0.0; c],
            tau: vec![1.0; c],
            epsilon,
            normalization,
            update_count: 0,
            refreshed_at: 0,
        };
        graph.refresh_edges();
        Ok(graph)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn edges(&self) -> &Matrix {
        &self.edges
    }

    pub fn global_correlation(&self) -> &[f64] {
        &self.global_correlation
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn normalization(&self) -> NormalizationMode {
        self.normalization
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Whether edges, `u` and `τ` reflect the current centers.
    pub fn is_fresh(&self) -> bool {
        self.refreshed_at == self.update_count
    }

    /// Replaces the centers wholesale; counts as an update.
    pub fn set_centers(&mut self, centers: Matrix) -> Result<()> {
        if centers.shape() != self.centers.shape() {
            return Err(Error::dim(
                "ClassGraph::set_centers",
                format!("{:?} vs {:?}", centers.shape(), self.centers.shape()),
            ));
        }
        self.centers = centers;
        self.update_count += 1;
        Ok(())
    }

    /// One gradient step on the center loss. Edges are left stale until
    /// [`ClassGraph::refresh_edges`] runs.
    pub fn update_centers_learnt(&mut self, features: &Matrix, labels: &[usize], lr_c: f64) -> Result<()> {
        if !(lr_c > 0.0) {
            return Err(Error::config("lr_c", "must be positive"));
        }
        let grad = center_loss_grad(features, labels, &self.centers)?;
        for (v, g) in self.centers.data_mut().iter_mut().zip(grad.centers.data()) {
            *v -= lr_c * g;
        }
        self.update_count += 1;
        Ok(())
    }

    /// Sets each center to the mean of that class's features. Classes absent
    /// from the epoch keep their previous center.
    pub fn update_centers_average(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Input("epoch contained no samples".into()));
        }
        check_batch(features, labels, &self.centers)?;
        let mut sums = Matrix::zeros(self.num_classes, self.dim);
        let mut counts = vec![0usize; self.num_classes];
        for (row, &l) in features.iter_rows().zip(labels) {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
                *s += v;
            }
        }
        for (k, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let inv = 1.0 / n as f64;
            let mean: Vec<f64> = sums.row(k).iter().map(|s| s * inv).collect();
            self.centers.row_mut(k).copy_from_slice(&mean);
        }
        self.update_count += 1;
        Ok(())
    }

    /// Recomputes edges from the centers, then `u`, then `τ`.
    pub fn refresh_edges(&mut self) {
        let c = self.num_classes;
        for k in 0..c {
            self.edges.set(k, k, 0.0);
            for j in (k + 1)..c {
                let d = squared_distance(self.centers.row(k), self.centers.row(j)).sqrt();
                self.edges.set(k, j, d);
                self.edges.set(j, k, d);
            }
        }
        self.global_correlation = self.edges.iter_rows().map(|r| r.iter().sum()).collect();
        self.tau = normalize_correlation(&self.global_correlation, self.normalization, self.epsilon);
        self.refreshed_at = self.update_count;
    }
}

/// Correlation factors from global correlations.
///
/// When `max u == min u` (or, for scaling, `max u == 0`) there is no
/// correlation information and every factor is 1.
pub fn normalize_correlation(u: &[f64], mode: NormalizationMode, epsilon: f64) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = u.iter().copied().fold(f64::INFINITY, f64::min);
    if u.is_empty() || !(max > min) {
        return vec![1.0; u.len()];
    }
    match mode {
        NormalizationMode::MinMax => {
            let range = max - min;
            u.iter().map(|&x| (x - min + epsilon) / range).collect()
        }
        NormalizationMode::Softmax => {
            let mut out = u.to_vec();
            softmax_in_place(&mut out);
            out
        }
        NormalizationMode::Scaling => {
            if max <= 0.0 {
                return vec![1.0; u.len()];
            }
            u.iter().map(|&x| x / max).collect()
        }
    }
}

fn check_batch(features: &Matrix, labels: &[usize], centers: &Matrix) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::dim(
            "center_loss",
            format!("{} features, {} labels", features.rows(), labels.len()),
        ));
    }
    if features.cols() != centers.cols() {
        return Err(Error::dim(
            "center_loss",
            format!("feature dim {} vs center dim {}", features.cols(), centers.cols()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= centers.rows()) {
        return Err(Error::Label {
            label,
            num_classes: centers.rows(),
        });
    }
    Ok(())
}

/// `(1/N) Σᵢ ‖fᵢ − v_{lᵢ}‖²`
pub fn center_loss(features: &Matrix, labels: &[usize], centers: &Matrix) -> Result<f64> {
    check_batch(features, labels, centers)?;
    if labels.is_empty() {
        return Err(Error::Input("center loss needs at least one sample".into()));
    }
    let total: f64 = features
        .iter_rows()
        .zip(labels)
        .map(|(f, &l)| squared_distance(f, centers.row(l)))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Center-loss gradient. Features are treated as constants, so the
/// feature-side gradient is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterLossGrad {
    pub centers: Matrix,
    pub features: Matrix,
}

pub fn center_loss_grad(features: &Matrix, labels: &[usize], centers: &Matrix) -> Result<CenterLossGrad> {
    check_batch(features, labels, centers)?;
    if labels.is_empty() {
        return Err(Error::Input("center loss needs at least one sample".into()));
    }
    let scale = -2.0 / labels.len() as f64;
    let mut grad = Matrix::zeros(centers.rows(), centers.cols());
    for (f, &l) in features.iter_rows().zip(labels) {
        let v = centers.row(l).to_vec();
        for ((g, fi), vi) in grad.row_mut(l).iter_mut().zip(f).zip(&v) {
            *g += scale * (fi - vi);
        }
    }
    Ok(CenterLossGrad {
        centers: grad,
        features: Matrix::zeros(features.rows(), features.cols()),
    })
}
