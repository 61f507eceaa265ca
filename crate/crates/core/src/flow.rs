//! Conditional neural spline flow.
//!
//! The flow maps a parameter vector `θ` (physical units) to a standard
//! Gaussian base point `z` given a context vector `x`:
//!
//! ```text
//! θ --standardize--> u ∈ model coords --coupling layers--> z ~ N(0, I)
//! ```
//!
//! Each coupling layer keeps one subset of dims fixed and passes the others
//! through rational-quadratic splines whose parameters come from a dense
//! conditioner fed with the fixed dims and the context. Density evaluation
//! runs the layers in order (the normalizing direction, spline forward map);
//! sampling runs them in reverse with the closed-form spline inverse.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{DenseNet, ForwardCache};
use crate::param_space::{ParamSpace, Standardizer};
use crate::scalar::Scalar;
use crate::spline::{decode_into, BinPartials, DecodedSpline, SplineConfig};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub hidden: Vec<usize>,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            bins: 8,
            tail_bound: 3.0,
            hidden: vec![64, 64],
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl FlowConfig {
    pub fn spline<T: Scalar>(&self) -> SplineConfig<T> {
        SplineConfig {
            bins: self.bins,
            tail_bound: T::c(self.tail_bound),
            min_bin_width: T::c(self.min_bin_width),
            min_bin_height: T::c(self.min_bin_height),
            min_derivative: T::c(self.min_derivative),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.layers >= 1
            && self.bins >= 1
            && self.tail_bound > 0.0
            && self.min_bin_width * self.bins as f64 <= 1.0
            && self.min_bin_height * self.bins as f64 <= 1.0
            && self.min_derivative > 0.0
            && self.min_derivative < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid flow config {self:?}")))
        }
    }
}

/// Transformed-dim sets of each layer: complementary halves in pairs, with
/// the start of the first half rotating by one dim per pair.
pub fn coupling_masks(dim: usize, layers: usize) -> Vec<Vec<usize>> {
    let half = dim.div_ceil(2);
    (0..layers)
        .map(|l| {
            if dim == 1 {
                return vec![0];
            }
            let start = (l / 2) % dim;
            let first: Vec<usize> = (0..half).map(|j| (start + j) % dim).collect();
            let mut set: Vec<usize> = if l % 2 == 0 {
                first
            } else {
                (0..dim).filter(|d| !first.contains(d)).collect()
            };
            set.sort_unstable();
            set
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer<T> {
    transformed: Vec<usize>,
    identity: Vec<usize>,
    net: DenseNet<T>,
}

impl<T: Scalar> CouplingLayer<T> {
    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub fn identity(&self) -> &[usize] {
        &self.identity
    }

    pub fn conditioner(&self) -> &DenseNet<T> {
        &self.net
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFlow<T> {
    space: ParamSpace,
    context_dim: usize,
    config: FlowConfig,
    spline: SplineConfig<T>,
    standardizer: Standardizer<T>,
    layers: Vec<CouplingLayer<T>>,
}

#[derive(Debug, Clone)]
struct LayerTrace<T> {
    net_in: Vec<T>,
    cache: ForwardCache<T>,
    splines: Vec<DecodedSpline<T>>,
    partials: Vec<Option<BinPartials<T>>>,
}

/// Reusable buffers for density evaluation and gradient computation.
#[derive(Debug, Clone)]
pub struct FlowWorkspace<T> {
    traces: Vec<LayerTrace<T>>,
    state: Vec<T>,
    grad_state: Vec<T>,
    raw_grad: Vec<T>,
    input_grad: Vec<T>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl<T: Scalar> ConditionalFlow<T> {
    /// A flow over the predicted dims of `space` whose conditioners are
    /// Xavier-initialized with a zeroed output layer, so the initial flow is
    /// the identity (a standard Gaussian in model coordinates).
    pub fn new<R: Rng + ?Sized>(
        space: ParamSpace,
        context_dim: usize,
        config: FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let dim = space.n_predicted();
        let raw_len = 3 * config.bins + 1;
        let layers = coupling_masks(dim, config.layers)
            .into_iter()
            .map(|transformed| {
                let identity: Vec<usize> = (0..dim).filter(|d| !transformed.contains(d)).collect();
                let mut sizes = vec![identity.len() + context_dim];
                sizes.extend(&config.hidden);
                sizes.push(transformed.len() * raw_len);
                let mut net = DenseNet::xavier(&sizes, rng);
                net.zero_output_layer();
                CouplingLayer {
                    transformed,
                    identity,
                    net,
                }
            })
            .collect();
        Ok(Self {
            spline: config.spline(),
            standardizer: space.standardizer(),
            space,
            context_dim,
            config,
            layers,
        })
    }

    /// Rebuilds a flow from stored layer masks and conditioner parameters.
    pub fn from_parts(
        space: ParamSpace,
        context_dim: usize,
        config: FlowConfig,
        masks: Vec<Vec<usize>>,
        conditioner_params: Vec<Vec<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if masks.len() != config.layers || conditioner_params.len() != config.layers {
            return Err(Error::Format(format!(
                "expected {} layers, got {} masks and {} parameter sections",
                config.layers,
                masks.len(),
                conditioner_params.len()
            )));
        }
        let dim = space.n_predicted();
        let raw_len = 3 * config.bins + 1;
        let mut layers = Vec::with_capacity(masks.len());
        for (transformed, params) in masks.into_iter().zip(conditioner_params) {
            if transformed.is_empty() || transformed.iter().any(|&d| d >= dim) {
                return Err(Error::Format(format!("invalid mask {transformed:?}")));
            }
            let identity: Vec<usize> = (0..dim).filter(|d| !transformed.contains(d)).collect();
            let mut sizes = vec![identity.len() + context_dim];
            sizes.extend(&config.hidden);
            sizes.push(transformed.len() * raw_len);
            layers.push(CouplingLayer {
                transformed,
                identity,
                net: DenseNet::from_params(&sizes, params)?,
            });
        }
        Ok(Self {
            spline: config.spline(),
            standardizer: space.standardizer(),
            space,
            context_dim,
            config,
            layers,
        })
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn layers(&self) -> &[CouplingLayer<T>] {
        &self.layers
    }

    pub fn standardizer(&self) -> &Standardizer<T> {
        &self.standardizer
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.net.param_count()).sum()
    }

    /// All conditioner parameters, layer after layer.
    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.net.params());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.net.param_count();
            l.net.params_mut().copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn workspace(&self) -> FlowWorkspace<T> {
        FlowWorkspace {
            traces: self
                .layers
                .iter()
                .map(|l| LayerTrace {
                    net_in: Vec::with_capacity(l.net.input_dim()),
                    cache: ForwardCache::default(),
                    splines: vec![DecodedSpline::default(); l.transformed.len()],
                    partials: vec![None; l.transformed.len()],
                })
                .collect(),
            state: vec![T::zero(); self.dim()],
            grad_state: vec![T::zero(); self.dim()],
            raw_grad: Vec::new(),
            input_grad: Vec::new(),
        }
    }

    fn check_inputs(&self, theta: &[T], context: &[T]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if context.len() != self.context_dim {
            return Err(Error::ShapeMismatch {
                expected: self.context_dim,
                got: context.len(),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("theta"));
        }
        if !context.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("context"));
        }
        Ok(())
    }

    /// Runs the normalizing direction on `ws.state` (model coordinates) in
    /// place and returns the accumulated log-determinant.
    fn to_base_in_place(&self, context: &[T], ws: &mut FlowWorkspace<T>, keep_partials: bool) -> T {
        let mut logdet = T::zero();
        let FlowWorkspace { traces, state, .. } = ws;
        for (layer, trace) in self.layers.iter().zip(traces.iter_mut()) {
            trace.net_in.clear();
            trace.net_in.extend(layer.identity.iter().map(|&d| state[d]));
            trace.net_in.extend_from_slice(context);
            layer
                .net
                .forward_cached(&trace.net_in, &mut trace.cache)
                .expect("conditioner input size is fixed by construction");
            let raw = trace.cache.output();
            let rl = self.spline.raw_len();
            for (j, &d) in layer.transformed.iter().enumerate() {
                let decoded = &mut trace.splines[j];
                decode_into(&raw[j * rl..(j + 1) * rl], &self.spline, decoded);
                let (y, ld, p) = decoded.spline.forward_with_partials(state[d]);
                state[d] = y;
                logdet += ld;
                if keep_partials {
                    trace.partials[j] = p;
                }
            }
        }
        logdet
    }

    /// `(z, ln|∂z/∂u|)` for a point `u` in model coordinates.
    pub fn to_base(&self, unit: &[T], context: &[T]) -> Result<(Vec<T>, T)> {
        self.check_inputs(unit, context)?;
        let mut ws = self.workspace();
        ws.state.copy_from_slice(unit);
        let ld = self.to_base_in_place(context, &mut ws, false);
        Ok((ws.state, ld))
    }

    /// `(u, ln|∂u/∂z|)`: the sampling direction.
    pub fn from_base(&self, z: &[T], context: &[T]) -> Result<(Vec<T>, T)> {
        self.check_inputs(z, context)?;
        let mut ws = self.workspace();
        ws.state.copy_from_slice(z);
        let ld = self.base_to_unit_in_place(context, &mut ws);
        Ok((ws.state, ld))
    }

    fn base_to_unit_in_place(&self, context: &[T], ws: &mut FlowWorkspace<T>) -> T {
        let mut logdet = T::zero();
        let FlowWorkspace { traces, state, .. } = ws;
        for (layer, trace) in self.layers.iter().zip(traces.iter_mut()).rev() {
            trace.net_in.clear();
            trace.net_in.extend(layer.identity.iter().map(|&d| state[d]));
            trace.net_in.extend_from_slice(context);
            layer
                .net
                .forward_cached(&trace.net_in, &mut trace.cache)
                .expect("conditioner input size is fixed by construction");
            let raw = trace.cache.output();
            let rl = self.spline.raw_len();
            for (j, &d) in layer.transformed.iter().enumerate() {
                let decoded = &mut trace.splines[j];
                decode_into(&raw[j * rl..(j + 1) * rl], &self.spline, decoded);
                let (x, ld) = decoded.spline.inverse(state[d]);
                state[d] = x;
                logdet += ld;
            }
        }
        logdet
    }

    fn base_log_density(z: &[T]) -> T {
        let half = T::c(0.5);
        z.iter()
            .fold(T::zero(), |acc, &v| acc - half * v * v - half * T::c(LN_2PI))
    }

    /// `ln q(θ | x)` with `θ` in physical units.
    pub fn log_prob(&self, theta: &[T], context: &[T]) -> Result<T> {
        let mut ws = self.workspace();
        self.log_prob_with(theta, context, &mut ws)
    }

    /// [`log_prob`](Self::log_prob) reusing caller-owned buffers.
    pub fn log_prob_with(&self, theta: &[T], context: &[T], ws: &mut FlowWorkspace<T>) -> Result<T> {
        self.check_inputs(theta, context)?;
        self.standardizer.to_model_into(theta, &mut ws.state);
        let ld = self.to_base_in_place(context, ws, false);
        Ok(Self::base_log_density(&ws.state) + ld + self.standardizer.log_jacobian())
    }

    /// Draws `n` samples in physical units.
    pub fn sample<R: Rng + ?Sized>(&self, context: &[T], n: usize, rng: &mut R) -> Result<Vec<Vec<T>>> {
        Ok(self
            .sample_with_log_prob(context, n, rng)?
            .into_iter()
            .map(|(t, _)| t)
            .collect())
    }

    /// Samples together with their log-density, obtained from the sampling
    /// pass itself (no extra inversion).
    pub fn sample_with_log_prob<R: Rng + ?Sized>(
        &self,
        context: &[T],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(Vec<T>, T)>> {
        if context.len() != self.context_dim {
            return Err(Error::ShapeMismatch {
                expected: self.context_dim,
                got: context.len(),
            });
        }
        if !context.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("context"));
        }
        let mut ws = self.workspace();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            for s in ws.state.iter_mut() {
                *s = T::c(rng.sample::<f64, _>(StandardNormal));
            }
            let base = Self::base_log_density(&ws.state);
            let ld = self.base_to_unit_in_place(context, &mut ws);
            let theta = self.standardizer.from_model(&ws.state);
            out.push((theta, base - ld + self.standardizer.log_jacobian()));
        }
        Ok(out)
    }

    /// Adds `∂(-ln q(θ | x))/∂params` into `grad` and returns `-ln q(θ | x)`.
    pub fn accumulate_nll_grad(
        &self,
        theta: &[T],
        context: &[T],
        ws: &mut FlowWorkspace<T>,
        grad: &mut [T],
    ) -> Result<T> {
        self.check_inputs(theta, context)?;
        if grad.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                got: grad.len(),
            });
        }
        self.standardizer.to_model_into(theta, &mut ws.state);
        let ld = self.to_base_in_place(context, ws, true);
        let nll = -(Self::base_log_density(&ws.state) + ld + self.standardizer.log_jacobian());

        // d nll / dz = z ; every log-det enters with weight -1
        let FlowWorkspace {
            traces,
            state,
            grad_state,
            raw_grad,
            input_grad,
        } = ws;
        grad_state.copy_from_slice(state);
        let gl = -T::one();
        let rl = self.spline.raw_len();
        let mut end = grad.len();
        for (layer, trace) in self.layers.iter().zip(traces.iter_mut()).rev() {
            let start = end - layer.net.param_count();
            raw_grad.clear();
            raw_grad.resize(layer.net.output_dim(), T::zero());
            for (j, &d) in layer.transformed.iter().enumerate() {
                let gy = grad_state[d];
                grad_state[d] = match &trace.partials[j] {
                    Some(p) => trace.splines[j].backward(
                        &self.spline,
                        p,
                        gy,
                        gl,
                        &mut raw_grad[j * rl..(j + 1) * rl],
                    ),
                    None => gy,
                };
            }
            input_grad.clear();
            input_grad.resize(layer.net.input_dim(), T::zero());
            layer
                .net
                .backward_into(&mut trace.cache, raw_grad, &mut grad[start..end], input_grad);
            for (i, &d) in layer.identity.iter().enumerate() {
                grad_state[d] += input_grad[i];
            }
            end = start;
        }
        Ok(nll)
    }
}
