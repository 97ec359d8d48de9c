//! Context encoder over a scene's object nodes.
//!
//! Raw node features are projected to the model width and summed with an
//! embedding of the node's box coordinates. The fused representations then
//! pass through a stack of residual blocks, each a multi-head scaled
//! dot-product self-attention over all nodes followed by a two-layer ReLU
//! feed-forward network:
//!
//! ```text
//! Ĥ = H + Attention(H)
//! H' = Ĥ + FF(Ĥ)
//! ```
//!
//! With `use_layer_norm` each sublayer sees a layer-normalized copy of its
//! input (pre-norm); the residual path is never normalized. No operation
//! depends on node order, so the stack is permutation equivariant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{relu, relu_backward, softmax_in_place, Affine, Matrix, Parameters};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Box coordinate count: normalized `x1, y1, x2, y2`.
pub const BOX_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_hidden_dim: usize,
    #[serde(default = "default_true")]
    pub use_layer_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 32,
            ff_hidden_dim: 64,
            use_layer_norm: true,
        }
    }
}

impl EncoderConfig {
    /// Six layers of twelve heads.
    pub fn full_scale() -> Self {
        EncoderConfig {
            num_layers: 6,
            num_heads: 12,
            model_dim: 96,
            ff_hidden_dim: 192,
            use_layer_norm: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("encoder.num_layers", "must be at least 1"));
        }
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "encoder.model_dim",
                format!(
                    "{} is not divisible by num_heads = {}",
                    self.model_dim, self.num_heads
                ),
            ));
        }
        if self.ff_hidden_dim == 0 {
            return Err(Error::config("encoder.ff_hidden_dim", "must be at least 1"));
        }
        Ok(())
    }
}

/// Object nodes of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSet {
    features: Matrix,
    boxes: Matrix,
}

impl NodeSet {
    pub fn new(features: Matrix, boxes: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Input("a node set needs at least one node".into()));
        }
        if boxes.rows() != features.rows() || boxes.cols() != BOX_DIM {
            return Err(Error::Input(format!(
                "expected {}x{BOX_DIM} boxes, got {}x{}",
                features.rows(),
                boxes.rows(),
                boxes.cols()
            )));
        }
        for (i, b) in boxes.iter_rows().enumerate() {
            check_box(b).map_err(|msg| Error::Input(format!("node {i}: {msg}")))?;
        }
        Ok(NodeSet { features, boxes })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn boxes(&self) -> &Matrix {
        &self.boxes
    }

    /// Reorders nodes so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> NodeSet {
        NodeSet {
            features: self.features.select_rows(perm),
            boxes: self.boxes.select_rows(perm),
        }
    }
}

pub(crate) fn check_box(b: &[f64]) -> std::result::Result<(), String> {
    if b.len() != BOX_DIM {
        return Err(format!("box has {} coordinates", b.len()));
    }
    if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(format!("box {b:?} leaves the unit square"));
    }
    if !(b[0] < b[2] && b[1] < b[3]) {
        return Err(format!("box {b:?} must satisfy x1 < x2 and y1 < y2"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, NormCache) {
        let d = x.cols();
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut out = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                normalized.set(r, c, xh);
                out.set(r, c, self.gain[c] * xh + self.bias[c]);
            }
        }
        (out, NormCache { normalized, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Matrix, grads: &mut LayerNorm) -> Matrix {
        let d = dy.cols();
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dxh = vec![0.0; d];
        for r in 0..dy.rows() {
            let g = dy.row(r);
            let xh = cache.normalized.row(r);
            for c in 0..d {
                grads.gain[c] += g[c] * xh[c];
                grads.bias[c] += g[c];
                dxh[c] = g[c] * self.gain[c];
            }
            let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
            let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[r];
            for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = is * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![&self.gain, &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// One residual attention + feed-forward block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub num_heads: usize,
    pub query: Affine,
    /// Bias-free: a key bias shifts each score row by a constant.
    pub key: Matrix,
    pub value: Affine,
    pub output: Affine,
    pub ff_in: Affine,
    pub ff_out: Affine,
    pub norm_attn: Option<LayerNorm>,
    pub norm_ff: Option<LayerNorm>,
}

/// Forward intermediates of one layer.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Matrix,
    attn_input: Matrix,
    norm_attn: Option<NormCache>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attention: Vec<Matrix>,
    heads: Matrix,
    ff_input: Matrix,
    norm_ff: Option<NormCache>,
    pre_relu: Matrix,
    hidden: Matrix,
}

impl LayerCache {
    /// Attention probabilities of head `h` (rows sum to one).
    pub fn attention(&self, h: usize) -> &Matrix {
        &self.attention[h]
    }

    pub fn num_heads(&self) -> usize {
        self.attention.len()
    }
}

fn col_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn put_col_block(dst: &mut Matrix, src: &Matrix, start: usize) {
    let w = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
    }
}

impl EncoderLayer {
    fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.model_dim;
        let residual_gain = 1.0 / config.num_layers as f64;
        let norm = || config.use_layer_norm.then(|| LayerNorm::new(d));
        EncoderLayer {
            num_heads: config.num_heads,
            query: Affine::init(d, d, 1.0, rng),
            key: Affine::init(d, d, 1.0, rng).weight,
            value: Affine::init(d, d, 1.0, rng),
            output: Affine::init(d, d, residual_gain, rng),
            ff_in: Affine::init(d, config.ff_hidden_dim, 2.0, rng),
            ff_out: Affine::init(config.ff_hidden_dim, d, residual_gain, rng),
            norm_attn: norm(),
            norm_ff: norm(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.query.d_in()
    }

    pub fn forward(&self, h: &Matrix) -> Result<(Matrix, LayerCache)> {
        let d = self.model_dim();
        if h.cols() != d {
            return Err(Error::dim(
                "encoder_layer_forward",
                format!("input width {} vs model dim {d}", h.cols()),
            ));
        }
        let (attn_input, norm_attn) = match &self.norm_attn {
            Some(ln) => {
                let (y, c) = ln.forward(h);
                (y, Some(c))
            }
            None => (h.clone(), None),
        };
        let q = self.query.forward(&attn_input)?;
        let k = attn_input.matmul(&self.key)?;
        let v = self.value.forward(&attn_input)?;
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Matrix::zeros(h.rows(), d);
        let mut attention = Vec::with_capacity(self.num_heads);
        for head in 0..self.num_heads {
            let qh = col_block(&q, head * dh, dh);
            let kh = col_block(&k, head * dh, dh);
            let vh = col_block(&v, head * dh, dh);
            let mut scores = qh.matmul_t(&kh)?.scale(scale);
            for r in 0..scores.rows() {
                softmax_in_place(scores.row_mut(r));
            }
            put_col_block(&mut heads, &scores.matmul(&vh)?, head * dh);
            attention.push(scores);
        }
        let hat = h.add(&self.output.forward(&heads)?)?;
        let (ff_input, norm_ff) = match &self.norm_ff {
            Some(ln) => {
                let (y, c) = ln.forward(&hat);
                (y, Some(c))
            }
            None => (hat.clone(), None),
        };
        let pre_relu = self.ff_in.forward(&ff_input)?;
        let hidden = relu(&pre_relu);
        let out = hat.add(&self.ff_out.forward(&hidden)?)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("encoder layer output"));
        }
        Ok((
            out,
            LayerCache {
                input: h.clone(),
                attn_input,
                norm_attn,
                q,
                k,
                v,
                attention,
                heads,
                ff_input,
                norm_ff,
                pre_relu,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂H_prev`.
    pub fn backward(&self, cache: &LayerCache, dout: &Matrix, grads: &mut EncoderLayer) -> Result<Matrix> {
        if dout.shape() != cache.input.shape() {
            return Err(Error::Usage(format!(
                "upstream gradient {:?} does not match cached layer input {:?}",
                dout.shape(),
                cache.input.shape()
            )));
        }
        let d = self.model_dim();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_hidden = self.ff_out.backward(&cache.hidden, dout, &mut grads.ff_out)?;
        let d_pre = relu_backward(&cache.pre_relu, &d_hidden);
        let d_ff_input = self.ff_in.backward(&cache.ff_input, &d_pre, &mut grads.ff_in)?;
        let mut d_hat = dout.clone();
        match (&self.norm_ff, &cache.norm_ff, grads.norm_ff.as_mut()) {
            (Some(ln), Some(c), Some(g)) => d_hat.add_assign(&ln.backward(c, &d_ff_input, g))?,
            (None, None, None) => d_hat.add_assign(&d_ff_input)?,
            _ => return Err(Error::Usage("layer norm state does not match cache".into())),
        }

        let d_heads = self.output.backward(&cache.heads, &d_hat, &mut grads.output)?;
        let n = dout.rows();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for head in 0..self.num_heads {
            let p = &cache.attention[head];
            let qh = col_block(&cache.q, head * dh, dh);
            let kh = col_block(&cache.k, head * dh, dh);
            let vh = col_block(&cache.v, head * dh, dh);
            let d_oh = col_block(&d_heads, head * dh, dh);
            let dp = d_oh.matmul_t(&vh)?;
            put_col_block(&mut dv, &p.t_matmul(&d_oh)?, head * dh);
            // softmax backward, row-wise
            let mut ds = Matrix::zeros(n, n);
            for r in 0..n {
                let pr = p.row(r);
                let dpr = dp.row(r);
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
                    *out = pr[c] * (dpr[c] - inner) * scale;
                }
            }
            put_col_block(&mut dq, &ds.matmul(&kh)?, head * dh);
            put_col_block(&mut dk, &ds.t_matmul(&qh)?, head * dh);
        }
        let mut d_attn_input = self.query.backward(&cache.attn_input, &dq, &mut grads.query)?;
        grads.key.add_assign(&cache.attn_input.t_matmul(&dk)?)?;
        d_attn_input.add_assign(&dk.matmul_t(&self.key)?)?;
        d_attn_input.add_assign(&self.value.backward(&cache.attn_input, &dv, &mut grads.value)?)?;

        let mut d_input = d_hat;
        match (&self.norm_attn, &cache.norm_attn, grads.norm_attn.as_mut()) {
            (Some(ln), Some(c), Some(g)) => d_input.add_assign(&ln.backward(c, &d_attn_input, g))?,
            (None, None, None) => d_input.add_assign(&d_attn_input)?,
            _ => return Err(Error::Usage("layer norm state does not match cache".into())),
        }
        Ok(d_input)
    }
}

impl Parameters for EncoderLayer {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        out.extend(self.query.param_slices());
        out.push(self.key.data());
        for a in [&self.value, &self.output, &self.ff_in, &self.ff_out] {
            out.extend(a.param_slices());
        }
        for ln in [&self.norm_attn, &self.norm_ff].into_iter().flatten() {
            out.extend(ln.param_slices());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        out.extend(self.query.param_slices_mut());
        out.push(self.key.data_mut());
        for a in [&mut self.value, &mut self.output, &mut self.ff_in, &mut self.ff_out] {
            out.extend(a.param_slices_mut());
        }
        for ln in [&mut self.norm_attn, &mut self.norm_ff].into_iter().flatten() {
            out.extend(ln.param_slices_mut());
        }
        out
    }
}

/// Spatial fusion plus the stacked encoder layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    /// Present when the raw feature width differs from `model_dim`.
    pub input_proj: Option<Affine>,
    pub spatial_in: Affine,
    pub spatial_out: Affine,
    pub layers: Vec<EncoderLayer>,
}

/// Forward intermediates needed by [`EncoderStack::backward`].
#[derive(Clone, Debug)]
pub struct StackCache {
    features: Matrix,
    boxes: Matrix,
    spatial_pre: Matrix,
    spatial_hidden: Matrix,
    layers: Vec<LayerCache>,
}

impl StackCache {
    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Gradients produced by [`EncoderStack::backward`].
#[derive(Clone, Debug)]
pub struct StackGrads {
    pub params: EncoderStack,
    pub features: Matrix,
}

impl EncoderStack {
    pub fn new(config: EncoderConfig, raw_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let input_proj = (raw_dim != d).then(|| Affine::init(raw_dim, d, 1.0, &mut rng));
        let spatial_in = Affine::init(BOX_DIM, d, 2.0, &mut rng);
        let spatial_out = Affine::init(d, d, 1.0, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::init(&config, &mut rng))
            .collect();
        Ok(EncoderStack {
            config,
            input_proj,
            spatial_in,
            spatial_out,
            layers,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Width of the raw node features this stack accepts.
    pub fn raw_dim(&self) -> usize {
        self.input_proj
            .as_ref()
            .map_or(self.config.model_dim, Affine::d_in)
    }

    /// A copy with every parameter zeroed, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    fn project(&self, features: &Matrix) -> Result<Matrix> {
        match &self.input_proj {
            Some(p) => p.forward(features),
            None if features.cols() == self.model_dim() => Ok(features.clone()),
            None => Err(Error::dim(
                "fuse_spatial",
                format!("feature width {} vs model dim {}", features.cols(), self.model_dim()),
            )),
        }
    }

    /// `project(features) + spatial(boxes)`
    pub fn fuse_spatial(&self, nodes: &NodeSet) -> Result<Matrix> {
        Ok(self.fuse_with_cache(nodes)?.0)
    }

    fn fuse_with_cache(&self, nodes: &NodeSet) -> Result<(Matrix, Matrix, Matrix)> {
        let projected = self.project(nodes.features())?;
        let spatial_pre = self.spatial_in.forward(nodes.boxes())?;
        let spatial_hidden = relu(&spatial_pre);
        let spatial = self.spatial_out.forward(&spatial_hidden)?;
        Ok((projected.add(&spatial)?, spatial_pre, spatial_hidden))
    }

    pub fn forward(&self, nodes: &NodeSet) -> Result<Matrix> {
        Ok(self.forward_with_cache(nodes)?.0)
    }

    pub fn forward_with_cache(&self, nodes: &NodeSet) -> Result<(Matrix, StackCache)> {
        let (mut h, spatial_pre, spatial_hidden) = self.fuse_with_cache(nodes)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&h)?;
            layers.push(cache);
            h = next;
        }
        Ok((
            h,
            StackCache {
                features: nodes.features().clone(),
                boxes: nodes.boxes().clone(),
                spatial_pre,
                spatial_hidden,
                layers,
            },
        ))
    }

    /// Exact gradients of `⟨upstream, forward(nodes)⟩` with respect to every
    /// parameter and the raw node features.
    pub fn backward(&self, cache: &StackCache, upstream: &Matrix) -> Result<StackGrads> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "cache holds {} layers, stack has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        if upstream.shape() != (cache.features.rows(), self.model_dim()) {
            return Err(Error::Usage(format!(
                "upstream gradient {:?} does not match the cached forward pass ({} nodes, width {})",
                upstream.shape(),
                cache.features.rows(),
                self.model_dim()
            )));
        }
        let mut grads = self.zeros_like();
        let mut d = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&cache.layers[i], &d, &mut grads.layers[i])?;
        }
        let d_hidden = self
            .spatial_out
            .backward(&cache.spatial_hidden, &d, &mut grads.spatial_out)?;
        let d_pre = relu_backward(&cache.spatial_pre, &d_hidden);
        self.spatial_in.backward(&cache.boxes, &d_pre, &mut grads.spatial_in)?;
        let d_features = match (&self.input_proj, grads.input_proj.as_mut()) {
            (Some(p), Some(g)) => p.backward(&cache.features, &d, g)?,
            _ => d,
        };
        Ok(StackGrads {
            params: grads,
            features: d_features,
        })
    }
}

impl Parameters for EncoderStack {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if let Some(p) = &self.input_proj {
            out.extend(p.param_slices());
        }
        out.extend(self.spatial_in.param_slices());
        out.extend(self.spatial_out.param_slices());
        for l in &self.layers {
            out.extend(l.param_slices());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.input_proj {
            out.extend(p.param_slices_mut());
        }
        out.extend(self.spatial_in.param_slices_mut());
        out.extend(self.spatial_out.param_slices_mut());
        for l in &mut self.layers {
            out.extend(l.param_slices_mut());
        }
        out
    }
}

/// Free-function form of [`EncoderStack::fuse_spatial`].
pub fn fuse_spatial(nodes: &NodeSet, stack: &EncoderStack) -> Result<Matrix> {
    stack.fuse_spatial(nodes)
}

/// Free-function form of [`EncoderLayer::forward`] without the cache.
pub fn encoder_layer_forward(h_prev: &Matrix, layer: &EncoderLayer) -> Result<Matrix> {
    Ok(layer.forward(h_prev)?.0)
}

pub fn stack_forward(nodes: &NodeSet, stack: &EncoderStack) -> Result<Matrix> {
    stack.forward(nodes)
}

/// Runs the forward pass and backpropagates `upstream` through it.
pub fn stack_backward(nodes: &NodeSet, stack: &EncoderStack, upstream: &Matrix) -> Result<StackGrads> {
    let (_, cache) = stack.forward_with_cache(nodes)?;
    stack.backward(&cache, upstream)
}
