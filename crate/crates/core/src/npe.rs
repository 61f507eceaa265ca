//! Neural posterior estimation: fit a [`ConditionalFlow`] to simulated
//! `(θ, x)` pairs by minimizing the mean negative log posterior.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::neural::Adam;
use crate::scalar::Scalar;

/// Parallel lists of parameter vectors (physical units) and contexts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet<T> {
    pub theta: Vec<Vec<T>>,
    pub context: Vec<Vec<T>>,
}

impl<T: Scalar> PairSet<T> {
    pub fn new(theta: Vec<Vec<T>>, context: Vec<Vec<T>>) -> Result<Self> {
        if theta.len() != context.len() {
            return Err(Error::ShapeMismatch {
                expected: theta.len(),
                got: context.len(),
            });
        }
        Ok(Self { theta, context })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[T], &[T])> {
        self.theta
            .iter()
            .zip(&self.context)
            .map(|(t, c)| (t.as_slice(), c.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean of `-ln q(θ | x)` over the pairs.
pub fn npe_loss<T: Scalar>(flow: &ConditionalFlow<T>, pairs: &PairSet<T>) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut ws = flow.workspace();
    let mut total = T::zero();
    for (t, c) in pairs.iter() {
        total -= flow.log_prob_with(t, c, &mut ws)?;
    }
    let loss = total / T::from_usize_lossy(pairs.len());
    if !loss.is_finite() {
        return Err(Error::NonFinite("npe loss"));
    }
    Ok(loss)
}

/// Loss and its gradient over the pairs at `indices`.
pub fn npe_loss_grad<T: Scalar>(
    flow: &ConditionalFlow<T>,
    pairs: &PairSet<T>,
    indices: &[usize],
) -> Result<(T, Vec<T>)> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut ws = flow.workspace();
    let mut grad = vec![T::zero(); flow.param_count()];
    let loss = accumulate_batch(flow, pairs, indices, &mut ws, &mut grad)?;
    Ok((loss, grad))
}

fn accumulate_batch<T: Scalar>(
    flow: &ConditionalFlow<T>,
    pairs: &PairSet<T>,
    indices: &[usize],
    ws: &mut crate::flow::FlowWorkspace<T>,
    grad: &mut [T],
) -> Result<T> {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let mut total = T::zero();
    for &i in indices {
        total += flow.accumulate_nll_grad(&pairs.theta[i], &pairs.context[i], ws, grad)?;
    }
    let inv = T::one() / T::from_usize_lossy(indices.len());
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(total * inv)
}

/// Trains `flow` with Adam over shuffled minibatches, early-stopping on the
/// validation loss. Returns the parameters of the best validation epoch.
pub fn train<T: Scalar>(
    mut flow: ConditionalFlow<T>,
    train_set: &PairSet<T>,
    val_set: &PairSet<T>,
    config: &TrainConfig,
) -> Result<(ConditionalFlow<T>, TrainReport)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and val splits".into()));
    }
    if config.batch_size == 0 || config.max_epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid train config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = flow.params_flat();
    let mut adam = Adam::new(params.len(), T::c(config.learning_rate));
    let mut grad = vec![T::zero(); params.len()];
    let mut ws = flow.workspace();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut epochs = Vec::new();
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let loss = accumulate_batch(&flow, train_set, batch, &mut ws, &mut grad)?.to_f64_lossy();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            sum += loss * batch.len() as f64;
            count += batch.len();
            adam.step(&mut params, &grad)?;
            flow.set_params_flat(&params)?;
        }
        let train_loss = sum / count as f64;
        let val_loss = match npe_loss(&flow, val_set) {
            Ok(v) => v.to_f64_lossy(),
            Err(_) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    flow.set_params_flat(&best.2)?;
    Ok((
        flow,
        TrainReport {
            epochs,
            best_epoch: best.1,
            best_val_loss: best.0,
            stopped_early,
        },
    ))
}
