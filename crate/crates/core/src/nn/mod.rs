//! Minimal dense network stack: forward passes with cached intermediates,
//! exact backward passes, and Adam.
//!
//! A [`Network`] is a sequence of [`LayerSpec`]s plus [`NetworkParameters`].
//! Dense layers own a `weight` (in × out) and a `bias` (1 × out) tensor, layer
//! norm owns `gain` and `shift`; activations own nothing.

mod adam;
mod matrix;

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::AdamState;
pub use matrix::Matrix;

/// Added to the row variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    LayerNorm {
        dim: usize,
    },
    Relu {
        dim: usize,
    },
    Tanh {
        dim: usize,
    },
    /// Softmax applied independently over each `[start, end)` group. Columns
    /// outside every group pass through unchanged.
    SoftmaxGroup {
        dim: usize,
        groups: Vec<(usize, usize)>,
    },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::LayerNorm { dim }
            | LayerSpec::Relu { dim }
            | LayerSpec::Tanh { dim }
            | LayerSpec::SoftmaxGroup { dim, .. } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            _ => self.in_dim(),
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        match self {
            LayerSpec::Dense { in_dim, out_dim } if *out_dim == 0 || *in_dim == 0 => {
                Err(Error::Config(format!("layer {index}: dense layer with zero width")))
            }
            LayerSpec::SoftmaxGroup { dim, groups } => {
                let mut sorted = groups.clone();
                sorted.sort_unstable();
                let mut cursor = 0;
                for &(start, end) in &sorted {
                    if start >= end || start < cursor || end > *dim {
                        return Err(Error::Config(format!(
                            "layer {index}: softmax group [{start}, {end}) overlaps or exceeds width {dim}"
                        )));
                    }
                    cursor = end;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn parameter_names(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::Dense { .. } => &["weight", "bias"],
            LayerSpec::LayerNorm { .. } => &["gain", "shift"],
            _ => &[],
        }
    }
}

/// Per-layer parameter tensors, in `LayerSpec::parameter_names` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParameters {
    pub layers: Vec<Vec<Matrix>>,
}

impl NetworkParameters {
    pub fn zeros_like(&self) -> Self {
        NetworkParameters {
            layers: self
                .layers
                .iter()
                .map(|ts| ts.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect())
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().flatten()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().map(|t| t.data().len()).sum()
    }

    /// Multiplies every tensor by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.tensors_mut().for_each(|t| t.scale(factor));
    }
}

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

/// A feed-forward stack of layers with its parameters.
#[derive(Debug)]
pub struct Network {
    specs: Vec<LayerSpec>,
    params: NetworkParameters,
    // Identity of the parameter snapshot, used to reject stale caches.
    id: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            specs: self.specs.clone(),
            params: self.params.clone(),
            id: fresh_id(),
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.params == other.params
    }
}

/// Intermediates recorded by [`Network::forward`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    network_id: u64,
    /// `activations[i]` is the input of layer `i`; the last entry is the output.
    activations: Vec<Matrix>,
    norms: Vec<Option<NormCache>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache always holds the input")
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    constant: Vec<bool>,
}

/// Gradients of a scalar loss with respect to parameters and input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: NetworkParameters,
    pub input: Matrix,
}

impl Network {
    /// Builds a network with seeded initialization: dense weights and biases
    /// are uniform in ±1/√fan_in, layer-norm gain 1 and shift 0.
    pub fn new(specs: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        validate_chain(&specs)?;
        let layers = specs
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let bound = 1.0 / (in_dim as f64).sqrt();
                    let mut sample = |n| -> Vec<f64> {
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    };
                    let w = Matrix::from_vec(in_dim, out_dim, sample(in_dim * out_dim))
                        .expect("sized by construction");
                    let b = Matrix::row_vector(sample(out_dim));
                    vec![w, b]
                }
                LayerSpec::LayerNorm { dim } => {
                    vec![Matrix::filled(1, dim, 1.0), Matrix::zeros(1, dim)]
                }
                _ => Vec::new(),
            })
            .collect();
        Ok(Network {
            specs,
            params: NetworkParameters { layers },
            id: fresh_id(),
        })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_parts(specs: Vec<LayerSpec>, params: NetworkParameters) -> Result<Self> {
        validate_chain(&specs)?;
        if params.layers.len() != specs.len() {
            return Err(Error::Format(format!(
                "{} parameter groups for {} layers",
                params.layers.len(),
                specs.len()
            )));
        }
        for (i, (spec, tensors)) in specs.iter().zip(&params.layers).enumerate() {
            let expected: Vec<(usize, usize)> = match *spec {
                LayerSpec::Dense { in_dim, out_dim } => vec![(in_dim, out_dim), (1, out_dim)],
                LayerSpec::LayerNorm { dim } => vec![(1, dim), (1, dim)],
                _ => Vec::new(),
            };
            let got: Vec<(usize, usize)> = tensors.iter().map(Matrix::shape).collect();
            if got != expected {
                return Err(Error::Format(format!(
                    "layer {i}: parameter shapes {got:?}, expected {expected:?}"
                )));
            }
        }
        Ok(Network {
            specs,
            params,
            id: fresh_id(),
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &NetworkParameters {
        &self.params
    }

    /// Mutable access to the parameters. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut NetworkParameters {
        self.id = fresh_id();
        &mut self.params
    }

    pub fn in_dim(&self) -> usize {
        self.specs.first().map_or(0, LayerSpec::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.specs.last().map_or(0, LayerSpec::out_dim)
    }

    /// `(name, tensor)` pairs such as `"3.weight"`, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        self.specs
            .iter()
            .zip(&self.params.layers)
            .enumerate()
            .flat_map(|(i, (spec, tensors))| {
                spec.parameter_names()
                    .iter()
                    .zip(tensors)
                    .map(move |(name, t)| (format!("{i}.{name}"), t))
            })
            .collect()
    }

    /// Inverse of [`Network::named_tensors`].
    pub fn from_named_tensors(
        specs: Vec<LayerSpec>,
        mut lookup: impl FnMut(&str) -> Option<Matrix>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut tensors = Vec::new();
            for name in spec.parameter_names() {
                let key = format!("{i}.{name}");
                let t = lookup(&key)
                    .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
                tensors.push(t);
            }
            layers.push(tensors);
        }
        Network::from_parts(specs, NetworkParameters { layers })
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            check_width(i, spec.in_dim(), &x)?;
            x = self.apply(i, spec, &x, None);
        }
        Ok(x)
    }

    /// Forward pass recording everything [`Network::backward`] needs.
    pub fn forward(&self, input: &Matrix) -> Result<ForwardCache> {
        let mut activations = Vec::with_capacity(self.specs.len() + 1);
        let mut norms = Vec::with_capacity(self.specs.len());
        activations.push(input.clone());
        for (i, spec) in self.specs.iter().enumerate() {
            let x = activations.last().expect("non-empty");
            check_width(i, spec.in_dim(), x)?;
            let mut norm = None;
            let y = self.apply(i, spec, x, Some(&mut norm));
            norms.push(norm);
            activations.push(y);
        }
        Ok(ForwardCache {
            network_id: self.id,
            activations,
            norms,
        })
    }

    fn apply(
        &self,
        index: usize,
        spec: &LayerSpec,
        x: &Matrix,
        norm_out: Option<&mut Option<NormCache>>,
    ) -> Matrix {
        let params = &self.params.layers[index];
        match spec {
            LayerSpec::Dense { .. } => {
                let mut y = x.matmul(&params[0]).expect("width checked");
                let bias = params[1].data();
                for r in 0..y.rows() {
                    y.row_mut(r).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
                }
                y
            }
            LayerSpec::LayerNorm { .. } => {
                let (y, cache) = layer_norm(x, params[0].data(), params[1].data());
                if let Some(slot) = norm_out {
                    *slot = Some(cache);
                }
                y
            }
            LayerSpec::Relu { .. } => x.map(|v| v.max(0.0)),
            LayerSpec::Tanh { .. } => x.map(bounded_tanh),
            LayerSpec::SoftmaxGroup { groups, .. } => {
                let mut y = x.clone();
                softmax_groups(&mut y, groups);
                y
            }
        }
    }

    /// Backpropagates `output_gradient` (dL/d output) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, output_gradient: &Matrix) -> Result<Gradients> {
        let (params, input) = self.backward_impl(cache, output_gradient, true, Some(0..self.in_dim()))?;
        Ok(Gradients {
            params: params.expect("requested"),
            input,
        })
    }

    /// Parameter gradients only; skips the input gradient of the first layer.
    pub fn backward_params(&self, cache: &ForwardCache, output_gradient: &Matrix) -> Result<NetworkParameters> {
        let (params, _) = self.backward_impl(cache, output_gradient, true, None)?;
        Ok(params.expect("requested"))
    }

    /// Like [`Network::backward`] but only returns the input gradient; used when
    /// this network's parameters are frozen.
    pub fn backward_input(&self, cache: &ForwardCache, output_gradient: &Matrix) -> Result<Matrix> {
        Ok(self.backward_impl(cache, output_gradient, false, Some(0..self.in_dim()))?.1)
    }

    /// Input gradient restricted to the input columns in `columns`.
    pub fn backward_input_columns(
        &self,
        cache: &ForwardCache,
        output_gradient: &Matrix,
        columns: Range<usize>,
    ) -> Result<Matrix> {
        if columns.start > columns.end || columns.end > self.in_dim() {
            return Err(Error::Dimension(format!(
                "input columns {columns:?} of a {}-wide network",
                self.in_dim()
            )));
        }
        Ok(self.backward_impl(cache, output_gradient, false, Some(columns))?.1)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        output_gradient: &Matrix,
        want_params: bool,
        input_columns: Option<Range<usize>>,
    ) -> Result<(Option<NetworkParameters>, Matrix)> {
        if cache.network_id != self.id || cache.activations.len() != self.specs.len() + 1 {
            return Err(Error::Usage(
                "forward cache does not belong to the current parameters of this network".into(),
            ));
        }
        let out = cache.output();
        if output_gradient.shape() != out.shape() {
            return Err(Error::Dimension(format!(
                "output gradient {:?} vs output {:?}",
                output_gradient.shape(),
                out.shape()
            )));
        }
        let mut grads = want_params.then(|| NetworkParameters {
            layers: vec![Vec::new(); self.specs.len()],
        });
        let mut g = output_gradient.clone();
        for (i, spec) in self.specs.iter().enumerate().rev() {
            let x = &cache.activations[i];
            let y = &cache.activations[i + 1];
            let params = &self.params.layers[i];
            g = match spec {
                LayerSpec::Dense { .. } => {
                    if let Some(grads) = grads.as_mut() {
                        grads.layers[i] = vec![x.t_matmul(&g)?, Matrix::row_vector(g.column_sums())];
                    }
                    match (i, &input_columns) {
                        (0, None) => Matrix::zeros(0, 0),
                        (0, Some(cols)) if cols.len() < spec.in_dim() => {
                            g.matmul_t(&params[0].row_range(cols.clone()))?
                        }
                        _ => g.matmul_t(&params[0])?,
                    }
                }
                LayerSpec::LayerNorm { .. } => {
                    let norm = cache.norms[i]
                        .as_ref()
                        .ok_or_else(|| Error::Usage("layer-norm cache missing".into()))?;
                    let gain = params[0].data();
                    if let Some(grads) = grads.as_mut() {
                        let mut dgain = vec![0.0; gain.len()];
                        let mut dshift = vec![0.0; gain.len()];
                        for r in 0..g.rows() {
                            for ((dg, ds), (gv, xh)) in dgain
                                .iter_mut()
                                .zip(dshift.iter_mut())
                                .zip(g.row(r).iter().zip(norm.normalized.row(r)))
                            {
                                *dg += gv * xh;
                                *ds += gv;
                            }
                        }
                        grads.layers[i] = vec![Matrix::row_vector(dgain), Matrix::row_vector(dshift)];
                    }
                    layer_norm_backward(&g, norm, gain)
                }
                LayerSpec::Relu { .. } => {
                    let mut dx = g;
                    dx.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(d, &xv)| {
                            if xv <= 0.0 {
                                *d = 0.0
                            }
                        });
                    dx
                }
                LayerSpec::Tanh { .. } => {
                    let mut dx = g;
                    dx.data_mut()
                        .iter_mut()
                        .zip(y.data())
                        .for_each(|(d, &yv)| *d *= 1.0 - yv * yv);
                    dx
                }
                LayerSpec::SoftmaxGroup { groups, .. } => {
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        let yr = y.row(r);
                        let gr = dx.row_mut(r);
                        for &(s, e) in groups {
                            let dot: f64 = gr[s..e].iter().zip(&yr[s..e]).map(|(a, b)| a * b).sum();
                            for j in s..e {
                                gr[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    dx
                }
            };
        }
        if let Some(cols) = input_columns {
            if !matches!(self.specs[0], LayerSpec::Dense { .. }) && cols.len() < g.cols() {
                g = g.columns(cols);
            }
        }
        Ok((grads, g))
    }

    /// Applies one Adam step with `grads`.
    pub fn adam_step(&mut self, grads: &NetworkParameters, state: &mut AdamState) -> Result<()> {
        state.update(self.params_mut(), grads)
    }
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (i, spec) in specs.iter().enumerate() {
        spec.validate(i)?;
        if let LayerSpec::LayerNorm { dim } = spec {
            if *dim == 0 {
                return Err(Error::Config(format!("layer {i}: empty layer norm")));
            }
        }
        if i > 0 && specs[i - 1].out_dim() != spec.in_dim() {
            return Err(Error::LayerDimension {
                layer: i,
                expected: specs[i - 1].out_dim(),
                got: spec.in_dim(),
            });
        }
    }
    Ok(())
}

fn check_width(layer: usize, expected: usize, x: &Matrix) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::LayerDimension {
            layer,
            expected,
            got: x.cols(),
        });
    }
    Ok(())
}

fn layer_norm(x: &Matrix, gain: &[f64], shift: &[f64]) -> (Matrix, NormCache) {
    let n = x.cols() as f64;
    let len = x.rows() * x.cols();
    let mut y = Vec::with_capacity(len);
    let mut normalized = Vec::with_capacity(len);
    let mut inv_std = vec![0.0; x.rows()];
    let mut constant = vec![false; x.rows()];
    for (r, row) in x.iter_rows().enumerate() {
        if row.iter().all(|&v| v == row[0]) {
            constant[r] = true;
            y.extend_from_slice(shift);
            normalized.resize(normalized.len() + row.len(), 0.0);
            continue;
        }
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for ((v, g), s) in row.iter().zip(gain).zip(shift) {
            let h = (v - mean) * is;
            normalized.push(h);
            y.push(g * h + s);
        }
    }
    let shape = |data| Matrix::from_vec(x.rows(), x.cols(), data).expect("row-sized");
    (
        shape(y),
        NormCache {
            normalized: shape(normalized),
            inv_std,
            constant,
        },
    )
}

fn layer_norm_backward(g: &Matrix, cache: &NormCache, gain: &[f64]) -> Matrix {
    let n = g.cols() as f64;
    let mut dx = Vec::with_capacity(g.rows() * g.cols());
    let mut dxh = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        if cache.constant[r] {
            dx.resize(dx.len() + g.cols(), 0.0);
            continue;
        }
        let xh = cache.normalized.row(r);
        dxh.iter_mut().zip(g.row(r).iter().zip(gain)).for_each(|(d, (a, b))| *d = a * b);
        let mean_d = dxh.iter().sum::<f64>() / n;
        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let is = cache.inv_std[r];
        dx.extend(dxh.iter().zip(xh).map(|(d, h)| is * (d - mean_d - h * mean_dx)));
    }
    Matrix::from_vec(g.rows(), g.cols(), dx).expect("row-sized")
}

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `tanh` kept strictly inside (-1, 1); plain `tanh` rounds to ±1 beyond |x| ≈ 19.
pub fn bounded_tanh(x: f64) -> f64 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

/// In-place max-subtracted softmax over each `[start, end)` column group.
pub fn softmax_groups(m: &mut Matrix, groups: &[(usize, usize)]) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        for &(s, e) in groups {
            softmax_in_place(&mut row[s..e]);
        }
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Group ranges as `Range`s, for callers that slice rows.
pub fn group_ranges(groups: &[(usize, usize)]) -> Vec<Range<usize>> {
    groups.iter().map(|&(s, e)| s..e).collect()
}
