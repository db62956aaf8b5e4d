//! Fully-connected ReLU networks whose weights carry a diagonal Gaussian
//! posterior.
//!
//! All parameters of a network live in one flat vector. Layer `l` occupies
//! `out_l * in_l` row-major weights followed by `out_l` biases, so the
//! parameter count is `sum_l (in_l + 1) * out_l`.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    pub fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let len = self.inputs * self.outputs;
        ArrayView2::from_shape(
            (self.outputs, self.inputs),
            &params[self.weight_offset..self.weight_offset + len],
        )
        .expect("layer slice matches its shape")
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[self.bias_offset..self.bias_offset + self.outputs])
    }
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "architecture needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("architecture layer sizes must be >= 1"));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    inputs: w[0],
                    outputs: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                shape
            })
            .collect()
    }
}

impl TryFrom<Vec<usize>> for Architecture {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Architecture::new(sizes)
    }
}

impl From<Architecture> for Vec<usize> {
    fn from(arch: Architecture) -> Self {
        arch.layer_sizes
    }
}

/// Diagonal Gaussian posterior `N(mu_q, diag(exp(log_sigma2_q)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mu_q: Vec<f64>,
    pub log_sigma2_q: Vec<f64>,
}

impl PosteriorParams {
    pub fn len(&self) -> usize {
        self.mu_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_q.is_empty()
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.log_sigma2_q.iter().map(|v| v.exp()).collect()
    }
}

/// Isotropic Gaussian prior `N(mu_p, sigma2_p I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub mu_p: Vec<f64>,
    pub sigma2_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub w: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// Per-layer truncated Gaussian initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// One standard deviation per dense layer.
    pub layer_stds: Vec<f64>,
    /// Truncation point in units of the layer's standard deviation.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    /// Initial prior variance; the posterior variances start here too.
    pub prior_variance: f64,
}

fn default_truncation() -> f64 {
    2.0
}

impl InitSpec {
    pub fn new(layer_stds: Vec<f64>, prior_variance: f64) -> Self {
        Self {
            layer_stds,
            truncation: default_truncation(),
            prior_variance,
        }
    }

    /// `1/sqrt(fan_in)` per layer, a reasonable default for synthetic tasks.
    pub fn fan_in(arch: &Architecture, prior_variance: f64) -> Self {
        let stds = arch
            .layers()
            .iter()
            .map(|l| 1.0 / (l.inputs as f64).sqrt())
            .collect();
        Self::new(stds, prior_variance)
    }
}

/// Samples the initial posterior means and copies them into the prior.
pub fn init_network(
    arch: &Architecture,
    spec: &InitSpec,
    seed: u64,
) -> Result<(PosteriorParams, PriorParams)> {
    let layers = arch.layers();
    if spec.layer_stds.len() != layers.len() {
        return Err(Error::config(format!(
            "init spec has {} layer stds for {} layers",
            spec.layer_stds.len(),
            layers.len()
        )));
    }
    if let Some(bad) = spec
        .layer_stds
        .iter()
        .find(|s| !(**s > 0.0) || !s.is_finite())
    {
        return Err(Error::config(format!("init std must be > 0, got {bad}")));
    }
    if !(spec.truncation > 0.0) {
        return Err(Error::config("truncation must be > 0"));
    }
    if !(spec.prior_variance > 0.0) || !spec.prior_variance.is_finite() {
        return Err(Error::config("initial prior variance must be > 0"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu = vec![0.0; arch.num_params()];
    for (layer, &std) in layers.iter().zip(&spec.layer_stds) {
        let n = layer.inputs * layer.outputs;
        for v in &mut mu[layer.weight_offset..layer.weight_offset + n] {
            *v = std * truncated_standard_normal(&mut rng, spec.truncation);
        }
        // biases stay zero
    }

    let log_s2 = spec.prior_variance.ln();
    let post = PosteriorParams {
        log_sigma2_q: vec![log_s2; mu.len()],
        mu_q: mu.clone(),
    };
    let prior = PriorParams {
        mu_p: mu,
        sigma2_p: spec.prior_variance,
    };
    Ok((post, prior))
}

fn truncated_standard_normal<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= bound {
            return z;
        }
    }
}

#[inline]
pub fn reparameterize(mu: f64, log_sigma2: f64, epsilon: f64) -> f64 {
    mu + (0.5 * log_sigma2).exp() * epsilon
}

pub fn sample_weights<R: Rng + ?Sized>(post: &PosteriorParams, rng: &mut R) -> WeightSample {
    let epsilon: Vec<f64> = (0..post.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    weights_from_noise(post, epsilon)
}

/// Builds a sample from an explicit noise vector.
pub fn weights_from_noise(post: &PosteriorParams, epsilon: Vec<f64>) -> WeightSample {
    let w = post
        .mu_q
        .iter()
        .zip(&post.log_sigma2_q)
        .zip(&epsilon)
        .map(|((&m, &ls), &e)| reparameterize(m, ls, e))
        .collect();
    WeightSample { w, epsilon }
}

/// The posterior mean, used as the deterministic network.
pub fn map_network(post: &PosteriorParams) -> Vec<f64> {
    post.mu_q.clone()
}

pub fn forward(arch: &Architecture, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_weights(arch, w)?;
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: arch.input_dim(),
            actual: x.len(),
        });
    }
    let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(forward_batch(arch, w, input).into_raw_vec_and_offset().0)
}

pub(crate) fn check_weights(arch: &Architecture, w: &[f64]) -> Result<()> {
    if w.len() != arch.num_params() {
        return Err(Error::DimensionMismatch {
            context: "weight vector",
            expected: arch.num_params(),
            actual: w.len(),
        });
    }
    Ok(())
}

/// Forward pass over the rows of `inputs`.
pub fn forward_batch(arch: &Architecture, w: &[f64], inputs: ArrayView2<f64>) -> Array2<f64> {
    let layers = arch.layers();
    let last = layers.len() - 1;
    let mut act = inputs.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        let mut z = act.dot(&layer.weights(w).t());
        z += &layer.bias(w);
        if i != last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        act = z;
    }
    act
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

pub fn forward_cached(arch: &Architecture, w: &[f64], inputs: Array2<f64>) -> ForwardCache {
    let layers = arch.layers();
    let last = layers.len() - 1;
    let mut activations = Vec::with_capacity(layers.len() + 1);
    activations.push(inputs);
    for (i, layer) in layers.iter().enumerate() {
        let mut z = activations[i].dot(&layer.weights(w).t());
        z += &layer.bias(w);
        if i != last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        activations.push(z);
    }
    ForwardCache { activations }
}

/// Accumulates `d(sum of outputs * d_out)/dw` into `grad`.
pub fn backward(
    arch: &Architecture,
    w: &[f64],
    cache: &ForwardCache,
    d_out: Array2<f64>,
    grad: &mut [f64],
) {
    let layers = arch.layers();
    let mut delta = d_out;
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &cache.activations[i];
        // delta is dL/dz for this layer's pre-activation
        let d_w = delta.t().dot(input);
        let n = layer.inputs * layer.outputs;
        for (g, d) in grad[layer.weight_offset..layer.weight_offset + n]
            .iter_mut()
            .zip(d_w.iter())
        {
            *g += d;
        }
        let d_b = delta.sum_axis(Axis(0));
        for (g, d) in grad[layer.bias_offset..layer.bias_offset + layer.outputs]
            .iter_mut()
            .zip(d_b.iter())
        {
            *g += d;
        }
        if i > 0 {
            let mut d_in = delta.dot(&layer.weights(w));
            // ReLU mask from the previous layer's (post-activation) output
            ndarray::Zip::from(&mut d_in).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = d_in;
        }
    }
}

/// A deterministic network viewed as a feature map.
#[derive(Debug, Clone, Copy)]
pub struct Network<'a> {
    pub arch: &'a Architecture,
    pub weights: &'a [f64],
}

impl<'a> Network<'a> {
    pub fn new(arch: &'a Architecture, weights: &'a [f64]) -> Result<Self> {
        check_weights(arch, weights)?;
        Ok(Self { arch, weights })
    }
}

/// Something that maps `d0`-dimensional inputs to representations.
pub trait FeatureMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn map_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64>;

    fn map(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.map_batch(view).row(0).to_vec()
    }
}

impl FeatureMap for Network<'_> {
    fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }

    fn map_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        forward_batch(self.arch, self.weights, inputs)
    }
}

/// The identity map on `R^d`.
#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl FeatureMap for Identity {
    fn input_dim(&self) -> usize {
        self.0
    }

    fn output_dim(&self) -> usize {
        self.0
    }

    fn map_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        inputs.to_owned()
    }
}

/// Max Euclidean norm of the representations of `inputs`, computed in chunks.
pub fn max_representation_norm<F: FeatureMap + ?Sized>(f: &F, inputs: ArrayView2<f64>) -> f64 {
    let mut best = 0.0f64;
    let rows = inputs.nrows();
    let mut start = 0;
    while start < rows {
        let end = (start + 4096).min(rows);
        let out = f.map_batch(inputs.slice(s![start..end, ..]));
        for row in out.rows() {
            best = best.max(row.dot(&row).sqrt());
        }
        start = end;
    }
    best
}
