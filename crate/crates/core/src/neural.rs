//! Dense feed-forward conditioner networks with hand-written reverse mode
//! and an Adam optimizer.
//!
//! Parameters live in one flat vector per network: for each layer the
//! weight matrix (row-major, `out × in`) followed by the bias. Gradients use
//! the same layout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T> {
    sizes: Vec<usize>,
    params: Vec<T>,
}

/// Activations recorded by a forward pass, reused across calls.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache<T> {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> DenseNet<T> {
    /// All-zero network with the given layer sizes (input first).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs an input and an output layer");
        Self {
            sizes: sizes.to_vec(),
            params: vec![T::zero(); param_count(sizes)],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = T::c(limit * (2.0 * rng.random::<f64>() - 1.0));
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    /// Builds a network from explicit parameters.
    pub fn from_params(sizes: &[usize], params: Vec<T>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument("network needs at least two layer sizes".into()));
        }
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// Zeroes the last layer so the network outputs zeros for any input.
    pub fn zero_output_layer(&mut self) {
        let n = self.sizes.len();
        let last = self.sizes[n - 2] * self.sizes[n - 1] + self.sizes[n - 1];
        let len = self.params.len();
        self.params[len - last..].iter_mut().for_each(|p| *p = T::zero());
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache)?;
        Ok(cache.acts.pop().unwrap())
    }

    /// Forward pass keeping every activation in `cache` for [`backward_into`].
    ///
    /// [`backward_into`]: Self::backward_into
    pub fn forward_cached(&self, input: &[T], cache: &mut ForwardCache<T>) -> Result<()> {
        if input.len() != self.sizes[0] {
            return Err(Error::ShapeMismatch {
                expected: self.sizes[0],
                got: input.len(),
            });
        }
        let n_layers = self.sizes.len() - 1;
        cache.acts.resize_with(n_layers + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let a_in = &prev[l];
            let a_out = &mut rest[0];
            a_out.clear();
            let hidden = l + 1 < n_layers;
            for (row, &bias) in w.chunks_exact(n_in.max(1)).take(n_out).zip(b) {
                let z = if n_in == 0 { bias } else { dot(row, a_in) + bias };
                a_out.push(if hidden { z.tanh() } else { z });
            }
            if n_in == 0 {
                // chunks_exact(1) over an empty slice yields nothing
                a_out.clear();
                a_out.extend_from_slice(b);
            }
        }
        Ok(())
    }

    /// Reverse pass for the forward pass recorded in `cache`. Parameter
    /// gradients are *added* to `param_grad`; the input gradient is written
    /// to `input_grad`.
    pub fn backward_into(
        &self,
        cache: &mut ForwardCache<T>,
        upstream: &[T],
        param_grad: &mut [T],
        input_grad: &mut [T],
    ) {
        debug_assert_eq!(param_grad.len(), self.params.len());
        debug_assert_eq!(upstream.len(), self.output_dim());
        let n_layers = self.sizes.len() - 1;
        let ForwardCache {
            acts,
            delta,
            delta_prev,
        } = cache;
        delta.clear();
        delta.extend_from_slice(upstream);
        let mut end = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let start = end - (n_in * n_out + n_out);
            let w = &self.params[start..start + n_in * n_out];
            let (gw, gb) = param_grad[start..end].split_at_mut(n_in * n_out);
            let a_in = &acts[l];
            delta_prev.clear();
            delta_prev.resize(n_in, T::zero());
            for o in 0..n_out {
                let d = delta[o];
                gb[o] += d;
                if d == T::zero() {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * a_in[i];
                    delta_prev[i] += d * row[i];
                }
            }
            if l > 0 {
                for (dp, &a) in delta_prev.iter_mut().zip(a_in) {
                    *dp *= T::one() - a * a;
                }
            }
            std::mem::swap(delta, delta_prev);
            end = start;
        }
        input_grad.copy_from_slice(&delta[..input_grad.len()]);
    }

    /// Exact gradients of `upstream · net(input)` with respect to the
    /// parameters and the input.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache)?;
        let mut pg = vec![T::zero(); self.params.len()];
        let mut ig = vec![T::zero(); self.input_dim()];
        self.backward_into(&mut cache, upstream, &mut pg, &mut ig);
        Ok((pg, ig))
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Bias-corrected Adam over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    first: Vec<T>,
    second: Vec<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            epsilon: T::c(1e-8),
            first: vec![T::zero(); n_params],
            second: vec![T::zero(); n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
