//! Absolute domain characterization: a weighted bag of observations induces
//! the mixture of their posteriors, `p(θ) = Σᵢ wᵢ q(θ | xᵢ)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Density;
use crate::flow::ConditionalFlow;
use crate::scalar::{log_sum_exp, Scalar};
use crate::simulator::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub observation: Observation,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

/// Weighted multiset of observations. Weights are raw multiplicities or
/// filter coefficients; they are normalized when a characterization is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBag {
    entries: Vec<BagEntry>,
}

impl ObservationBag {
    pub fn new(entries: Vec<BagEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("bag must hold at least one observation".into()));
        }
        if let Some(e) = entries.iter().find(|e| !(e.weight > 0.0 && e.weight.is_finite())) {
            return Err(Error::InvalidWeight(e.weight));
        }
        if entries.iter().any(|e| e.observation.features.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("bag observation"));
        }
        Ok(Self { entries })
    }

    /// Every observation with weight 1.
    pub fn uniform(observations: impl IntoIterator<Item = Observation>) -> Result<Self> {
        Self::weighted(observations.into_iter().map(|o| (o, 1.0)))
    }

    pub fn weighted(items: impl IntoIterator<Item = (Observation, f64)>) -> Result<Self> {
        Self::new(
            items
                .into_iter()
                .map(|(observation, weight)| BagEntry {
                    observation,
                    weight,
                    timestamp: None,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[BagEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let total = self.total_weight();
        self.entries.iter().map(|e| e.weight / total).collect()
    }

    /// Replaces weights by exponential-decay weights of the timestamps.
    pub fn with_temporal_weights(&self, half_life: f64) -> Result<Self> {
        let ts = self
            .entries
            .iter()
            .map(|e| e.timestamp.ok_or_else(|| Error::InvalidArgument("bag entry lacks a timestamp".into())))
            .collect::<Result<Vec<_>>>()?;
        let w = temporal_weights(&ts, half_life)?;
        Self::new(
            self.entries
                .iter()
                .zip(w)
                .map(|(e, weight)| BagEntry { weight, ..e.clone() })
                .collect(),
        )
    }
}

/// `0.5^(age / half_life)` with age measured from the newest timestamp.
pub fn temporal_weights(timestamps: &[f64], half_life: f64) -> Result<Vec<f64>> {
    if !(half_life > 0.0 && half_life.is_finite()) {
        return Err(Error::InvalidArgument(format!("half-life must be positive, got {half_life}")));
    }
    if timestamps.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("timestamp"));
    }
    let newest = timestamps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(timestamps.iter().map(|t| 0.5f64.powf((newest - t) / half_life)).collect())
}

/// Mixture of flow posteriors, one per bag entry.
#[derive(Debug, Clone)]
pub struct DomainCharacterization<'a, T> {
    flow: &'a ConditionalFlow<T>,
    weights: Vec<f64>,
    log_weights: Vec<T>,
    contexts: Vec<Vec<T>>,
}

pub fn characterize<'a, T: Scalar>(flow: &'a ConditionalFlow<T>, bag: &ObservationBag) -> Result<DomainCharacterization<'a, T>> {
    if flow.context_dim() != crate::simulator::FEATURE_DIM {
        return Err(Error::ShapeMismatch {
            expected: crate::simulator::FEATURE_DIM,
            got: flow.context_dim(),
        });
    }
    let weights = bag.normalized_weights();
    Ok(DomainCharacterization {
        flow,
        log_weights: weights.iter().map(|w| T::c(w.ln())).collect(),
        weights,
        contexts: bag.entries().iter().map(|e| e.observation.to_context()).collect(),
    })
}

impl<'a, T: Scalar> DomainCharacterization<'a, T> {
    pub fn flow(&self) -> &'a ConditionalFlow<T> {
        self.flow
    }

    /// Normalized weights, summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn contexts(&self) -> &[Vec<T>] {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn log_pdf(&self, theta: &[T]) -> Result<T> {
        let mut ws = self.flow.workspace();
        let mut terms = Vec::with_capacity(self.len());
        for (lw, ctx) in self.log_weights.iter().zip(&self.contexts) {
            terms.push(*lw + self.flow.log_prob_with(theta, ctx, &mut ws)?);
        }
        Ok(log_sum_exp(&terms))
    }

    pub fn pdf(&self, theta: &[T]) -> Result<T> {
        Ok(self.log_pdf(theta)?.exp())
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Ancestral draws with the index of the entry each came from.
    pub fn sample_indexed<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(usize, Vec<T>)>> {
        if self.len() == 1 {
            return Ok(self.flow.sample(&self.contexts[0], n, rng)?.into_iter().map(|t| (0, t)).collect());
        }
        (0..n)
            .map(|_| {
                let i = self.pick(rng);
                Ok((i, self.flow.sample(&self.contexts[i], 1, rng)?.remove(0)))
            })
            .collect()
    }

    /// Draws from the domain: pick an entry by weight, then sample its
    /// posterior. A one-entry bag consumes the generator exactly like
    /// [`ConditionalFlow::sample`].
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<T>>> {
        Ok(self.sample_indexed(n, rng)?.into_iter().map(|(_, t)| t).collect())
    }
}

impl<T: Scalar> Density<T> for DomainCharacterization<'_, T> {
    fn dim(&self) -> usize {
        self.flow.dim()
    }

    fn log_density(&self, theta: &[T]) -> Result<T> {
        self.log_pdf(theta)
    }

    fn sample_with_log_density<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec<T>, T)>> {
        if self.len() == 1 {
            return self.flow.sample_with_log_prob(&self.contexts[0], n, rng);
        }
        DomainCharacterization::sample(self, n, rng)?
            .into_iter()
            .map(|t| {
                let l = self.log_pdf(&t)?;
                Ok((t, l))
            })
            .collect()
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<T>>> {
        DomainCharacterization::sample(self, n, rng)
    }
}

/// Equal-weight draws from the domain (convenience over [`DomainCharacterization::sample`]).
pub fn domain_sample<T: Scalar, R: Rng + ?Sized>(
    ch: &DomainCharacterization<'_, T>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    ch.sample(n, rng)
}

/// Mixture of axis-aligned Gaussians, used as a ground-truth density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sds: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || means.len() != weights.len() || sds.len() != weights.len() {
            return Err(Error::InvalidArgument("mixture components disagree in count".into()));
        }
        let d = means[0].len();
        if means.iter().chain(&sds).any(|v| v.len() != d) {
            return Err(Error::InvalidArgument("mixture components disagree in dimension".into()));
        }
        if let Some(&w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::InvalidWeight(w));
        }
        if sds.iter().flatten().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("standard deviations must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            sds,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                self.weights[k].ln()
                    + x.iter()
                        .zip(&self.means[k])
                        .zip(&self.sds[k])
                        .map(|((v, m), s)| -0.5 * ((v - m) / s).powi(2) - s.ln() - half_ln_2pi)
                        .sum::<f64>()
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut k = self.weights.len() - 1;
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.sds[k])
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl Density<f64> for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok(self.log_pdf(theta))
    }

    fn sample_with_log_density<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec<f64>, f64)>> {
        Ok((0..n)
            .map(|_| {
                let x = self.sample_one(rng);
                let l = self.log_pdf(&x);
                (x, l)
            })
            .collect())
    }
}
