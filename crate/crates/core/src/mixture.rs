//! Relative domain characterization: the target density as a convex
//! combination of source densities.
//!
//! Weights minimize the Monte Carlo mean squared gap
//! `δ(λ) = (1/M) Σᵢ (p_T(θᵢ) − Σₖ λₖ pₖ(θᵢ))²` over the simplex, with the
//! `θᵢ` drawn from the target. That is the quadratic program
//! `min λᵀAλ − 2bᵀλ` with `A = PᵀP / M`, `b = Pᵀt / M`, solved exactly by
//! enumerating active supports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::domain::{characterize, BagEntry, ObservationBag};
use crate::error::{Error, Result};
use crate::eval::{quantile_sorted, Density};
use crate::flow::ConditionalFlow;
use crate::scalar::Scalar;
use crate::simulator::mix_seed;

/// Number of evaluation points used when none is given.
pub const DEFAULT_POINTS: usize = 16;
/// Diagonal regularization used when a support's Gram block is singular.
pub const RIDGE: f64 = 1e-10;
const MAX_SOURCES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// Indices with nonzero weight.
    pub support: Vec<usize>,
    /// Whether some support's Gram block was singular and got the ridge.
    pub ridged: bool,
}

/// `λᵀAλ − 2bᵀλ`.
pub fn qp_objective(a: &[Vec<f64>], b: &[f64], lambda: &[f64]) -> f64 {
    let mut quad = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            quad += lambda[i] * v * lambda[j];
        }
    }
    quad - 2.0 * b.iter().zip(lambda).map(|(b, l)| b * l).sum::<f64>()
}

/// Solves `m x = r` in place by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot is negligible relative to `scale`.
fn solve_dense(mut m: Vec<Vec<f64>>, mut r: Vec<f64>, scale: f64) -> Option<Vec<f64>> {
    let n = r.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                r[row] -= f * r[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (r[i] - s) / m[i][i];
    }
    Some(x)
}

/// Stationary point of the QP restricted to `support` with `Σλ = 1`.
fn face_solution(a: &[Vec<f64>], b: &[f64], support: &[usize], scale: f64) -> (Option<Vec<f64>>, bool) {
    let s = support.len();
    let build = |ridge: f64| {
        let mut m = vec![vec![0.0; s + 1]; s + 1];
        let mut r = vec![0.0; s + 1];
        for (p, &i) in support.iter().enumerate() {
            for (q, &j) in support.iter().enumerate() {
                m[p][q] = a[i][j];
            }
            m[p][p] += ridge;
            m[p][s] = 1.0;
            m[s][p] = 1.0;
            r[p] = b[i];
        }
        r[s] = 1.0;
        (m, r)
    };
    let singular_gram = {
        let (m, _) = build(0.0);
        let gram: Vec<Vec<f64>> = m[..s].iter().map(|row| row[..s].to_vec()).collect();
        solve_dense(gram, vec![0.0; s], scale).is_none()
    };
    let ridge = if singular_gram { RIDGE * scale } else { 0.0 };
    let (m, r) = build(ridge);
    (solve_dense(m, r, scale).map(|x| x[..s].to_vec()), singular_gram)
}

/// Exact minimizer of `λᵀAλ − 2bᵀλ` over the probability simplex.
///
/// Every nonempty support is tried in lexicographic order; a later support
/// replaces the incumbent only when strictly better, so ties go to the
/// lexicographically smallest support.
pub fn simplex_qp(a: &[Vec<f64>], b: &[f64]) -> Result<QpSolution> {
    let s = b.len();
    if s == 0 {
        return Err(Error::InvalidArgument("no sources".into()));
    }
    if s > MAX_SOURCES {
        return Err(Error::InvalidArgument(format!("support enumeration limited to {MAX_SOURCES} sources, got {s}")));
    }
    if a.len() != s || a.iter().any(|r| r.len() != s) {
        return Err(Error::ShapeMismatch { expected: s, got: a.len() });
    }
    if a.iter().flatten().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("qp input"));
    }
    let scale = a.iter().flatten().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut supports: Vec<Vec<usize>> = (1u32..(1 << s))
        .map(|mask| (0..s).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    supports.sort();

    let mut best: Option<QpSolution> = None;
    let mut any_ridged = false;
    for support in supports {
        let (sol, ridged) = face_solution(a, b, &support, scale);
        any_ridged |= ridged;
        let Some(x) = sol else { continue };
        if x.iter().any(|&v| v < -1e-12 || !v.is_finite()) {
            continue;
        }
        let mut weights = vec![0.0; s];
        for (&i, &v) in support.iter().zip(&x) {
            weights[i] = v.max(0.0);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let objective = qp_objective(a, b, &weights);
        let better = match &best {
            None => true,
            Some(inc) => objective < inc.objective - 1e-14 * scale,
        };
        if better {
            best = Some(QpSolution {
                support: (0..s).filter(|&i| weights[i] > 0.0).collect(),
                weights,
                objective,
                ridged: false,
            });
        }
    }
    // Every vertex is a feasible one-element support, so `best` is set.
    let mut best = best.ok_or(Error::NonFinite("qp solution"))?;
    best.ridged = any_ridged;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub weights: Vec<f64>,
    pub delta: f64,
    pub points: Vec<Vec<f64>>,
    pub target_pdf: Vec<f64>,
    /// `source_pdf[i][k]` = density of source `k` at point `i`.
    pub source_pdf: Vec<Vec<f64>>,
    pub ridged: bool,
}

impl MixtureFit {
    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    pub fn source_count(&self) -> usize {
        self.weights.len()
    }

    /// Gap of arbitrary weights on this fit's points.
    pub fn gap_at(&self, lambda: &[f64]) -> f64 {
        gap_from_matrix(&self.target_pdf, &self.source_pdf, lambda)
    }

    pub fn distance_to(&self, lambda: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(lambda)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn gap_from_matrix(target_pdf: &[f64], source_pdf: &[Vec<f64>], lambda: &[f64]) -> f64 {
    let m = target_pdf.len() as f64;
    target_pdf
        .iter()
        .zip(source_pdf)
        .map(|(t, row)| {
            let mix: f64 = row.iter().zip(lambda).map(|(p, l)| p * l).sum();
            (t - mix).powi(2)
        })
        .sum::<f64>()
        / m
}

fn check_simplex(lambda: &[f64], s: usize) -> Result<()> {
    if lambda.len() != s {
        return Err(Error::ShapeMismatch { expected: s, got: lambda.len() });
    }
    if let Some(&w) = lambda.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidWeight(w));
    }
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn densities<T: Scalar, D: Density<T>>(d: &D, points: &[Vec<T>]) -> Result<Vec<f64>> {
    points.iter().map(|p| Ok(d.log_density(p)?.to_f64_lossy().exp())).collect()
}

fn source_matrix<T: Scalar, S: Density<T>>(sources: &[S], points: &[Vec<T>]) -> Result<Vec<Vec<f64>>> {
    let cols = sources.iter().map(|s| densities(s, points)).collect::<Result<Vec<_>>>()?;
    Ok((0..points.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

/// Mean squared gap at `points`.
pub fn gap<T: Scalar, D: Density<T>, S: Density<T>>(target: &D, sources: &[S], lambda: &[f64], points: &[Vec<T>]) -> Result<f64> {
    check_simplex(lambda, sources.len())?;
    if points.is_empty() {
        return Err(Error::InvalidArgument("gap needs at least one point".into()));
    }
    Ok(gap_from_matrix(&densities(target, points)?, &source_matrix(sources, points)?, lambda))
}

/// Fits simplex weights given the density table at the evaluation points.
pub fn fit_from_matrix(points: Vec<Vec<f64>>, target_pdf: Vec<f64>, source_pdf: Vec<Vec<f64>>) -> Result<MixtureFit> {
    let m = target_pdf.len();
    if m == 0 || source_pdf.len() != m {
        return Err(Error::ShapeMismatch { expected: m, got: source_pdf.len() });
    }
    let s = source_pdf[0].len();
    if s == 0 || source_pdf.iter().any(|r| r.len() != s) {
        return Err(Error::InvalidArgument("ragged source density table".into()));
    }
    if m < s {
        return Err(Error::InvalidArgument(format!("need at least as many points ({m}) as sources ({s})")));
    }
    // Common rescaling keeps the Gram entries near one; it does not move the
    // argmin.
    let scale = target_pdf
        .iter()
        .chain(source_pdf.iter().flatten())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut a = vec![vec![0.0; s]; s];
    let mut b = vec![0.0; s];
    for (t, row) in target_pdf.iter().zip(&source_pdf) {
        for i in 0..s {
            b[i] += (t / scale) * (row[i] / scale);
            for j in 0..s {
                a[i][j] += (row[i] / scale) * (row[j] / scale);
            }
        }
    }
    a.iter_mut().flatten().for_each(|v| *v /= m as f64);
    b.iter_mut().for_each(|v| *v /= m as f64);
    let sol = simplex_qp(&a, &b)?;
    let delta = gap_from_matrix(&target_pdf, &source_pdf, &sol.weights);
    Ok(MixtureFit {
        weights: sol.weights,
        delta,
        points,
        target_pdf,
        source_pdf,
        ridged: sol.ridged,
    })
}

/// Draws `m` points from the target and fits the mixture weights there.
pub fn fit_weights<T: Scalar, D: Density<T>, S: Density<T>, R: Rng + ?Sized>(
    target: &D,
    sources: &[S],
    m: usize,
    rng: &mut R,
) -> Result<MixtureFit> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no sources".into()));
    }
    if m < sources.len() {
        return Err(Error::InvalidArgument(format!("need at least as many points ({m}) as sources ({})", sources.len())));
    }
    let draws = target.sample_with_log_density(m, rng)?;
    let target_pdf: Vec<f64> = draws.iter().map(|(_, l)| l.to_f64_lossy().exp()).collect();
    let pts: Vec<Vec<T>> = draws.into_iter().map(|(p, _)| p).collect();
    let source_pdf = source_matrix(sources, &pts)?;
    let points = pts.iter().map(|p| p.iter().map(|v| v.to_f64_lossy()).collect()).collect();
    fit_from_matrix(points, target_pdf, source_pdf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub values: Vec<f64>,
}

impl GapSummary {
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no gap values".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self {
            q1: quantile_sorted(&values, 0.25),
            median: quantile_sorted(&values, 0.5),
            q3: quantile_sorted(&values, 0.75),
            values,
        })
    }

    pub fn quantile(&self, q: f64) -> f64 {
        quantile_sorted(&self.values, q)
    }
}

/// Flat-Dirichlet draw.
pub fn uniform_simplex<R: Rng + ?Sized>(s: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..s).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Gap at `trials` random simplex weights, on the fit's own points: the gap
/// achievable by chance.
pub fn baseline_from_fit<R: Rng + ?Sized>(fit: &MixtureFit, trials: usize, rng: &mut R) -> Result<GapSummary> {
    if trials < 30 {
        return Err(Error::InvalidArgument(format!("baseline needs at least 30 trials, got {trials}")));
    }
    let values = (0..trials)
        .map(|_| fit.gap_at(&uniform_simplex(fit.source_count(), rng)))
        .collect();
    GapSummary::from_values(values)
}

/// Chance-level gap on `m` fresh target points.
pub fn baseline_gap<T: Scalar, D: Density<T>, S: Density<T>, R: Rng + ?Sized>(
    target: &D,
    sources: &[S],
    m: usize,
    trials: usize,
    rng: &mut R,
) -> Result<GapSummary> {
    let fit = fit_weights(target, sources, m, rng)?;
    baseline_from_fit(&fit, trials, rng)
}

/// Distribution of the fitted gap over re-drawn evaluation points. Its 95th
/// percentile serves as the out-of-ODD threshold when the target is known to
/// be a mixture of the sources.
pub fn bootstrap_gap<T: Scalar, D: Density<T>, S: Density<T>>(
    target: &D,
    sources: &[S],
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<GapSummary> {
    if trials == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one trial".into()));
    }
    let values = (0..trials)
        .map(|t| Ok(fit_weights(target, sources, m, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, t as u64)))?.delta))
        .collect::<Result<Vec<_>>>()?;
    GapSummary::from_values(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub etas: Vec<f64>,
    pub reps: usize,
    pub points: usize,
    pub baseline_trials: usize,
    pub bootstrap_trials: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            etas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            reps: 30,
            points: DEFAULT_POINTS,
            baseline_trials: 100,
            bootstrap_trials: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub rep: usize,
    pub d_e: f64,
    pub delta: f64,
    pub baseline_median: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub etas: Vec<f64>,
    pub reps: usize,
    /// Rows in `(eta, rep)` order.
    pub rows: Vec<SweepRow>,
    /// Fitted-gap distribution of the pure in-ODD target.
    pub in_odd: GapSummary,
    pub odd_threshold: f64,
}

impl SweepResult {
    pub fn rows_at(&self, eta_index: usize) -> &[SweepRow] {
        &self.rows[eta_index * self.reps..(eta_index + 1) * self.reps]
    }

    pub fn median_of(&self, eta_index: usize, f: impl Fn(&SweepRow) -> f64) -> f64 {
        let mut v: Vec<f64> = self.rows_at(eta_index).iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        quantile_sorted(&v, 0.5)
    }

    /// Fraction of reps at `eta_index` flagged out of the ODD.
    pub fn flagged_fraction(&self, eta_index: usize) -> f64 {
        let rows = self.rows_at(eta_index);
        rows.iter().filter(|r| r.delta > self.odd_threshold).count() as f64 / rows.len() as f64
    }
}

/// Target bag `(1 − η) Σₖ λₖ Bₖ + η B_out`, each source bag normalized to unit
/// mass and the out-of-ODD entries weighted uniformly at random.
pub fn blend_bags<R: Rng + ?Sized>(
    sources: &[ObservationBag],
    lambda: &[f64],
    out: &ObservationBag,
    eta: f64,
    rng: &mut R,
) -> Result<ObservationBag> {
    check_simplex(lambda, sources.len())?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("noise proportion must lie in [0, 1], got {eta}")));
    }
    let mut entries = Vec::new();
    if eta < 1.0 {
        for (bag, &l) in sources.iter().zip(lambda) {
            if l == 0.0 {
                continue;
            }
            for (e, w) in bag.entries().iter().zip(bag.normalized_weights()) {
                entries.push(BagEntry {
                    weight: (1.0 - eta) * l * w,
                    ..e.clone()
                });
            }
        }
    }
    // Drawn even at η = 0 so every η consumes the generator alike.
    let u: Vec<f64> = out.entries().iter().map(|_| rng.random::<f64>()).collect();
    if eta > 0.0 {
        let total: f64 = u.iter().sum();
        for (e, u) in out.entries().iter().zip(u) {
            if u > 0.0 {
                entries.push(BagEntry {
                    weight: eta * u / total,
                    ..e.clone()
                });
            }
        }
    }
    ObservationBag::new(entries)
}

/// Noise-sweep experiment: for every `(η, rep)` build a target bag that is
/// a λ-mixture of the source bags contaminated by a proportion η of
/// out-of-ODD observations, characterize it and fit the weights.
pub fn noise_sweep<T: Scalar>(
    flow: &ConditionalFlow<T>,
    source_bags: &[ObservationBag],
    lambda: &[f64],
    out_bag: &ObservationBag,
    config: &SweepConfig,
) -> Result<SweepResult> {
    if config.reps == 0 {
        return Err(Error::InvalidArgument("sweep needs at least one repetition".into()));
    }
    if let Some(&e) = config.etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::InvalidArgument(format!("noise proportion {e} outside [0, 1]")));
    }
    check_simplex(lambda, source_bags.len())?;
    let sources = source_bags
        .iter()
        .map(|b| characterize(flow, b))
        .collect::<Result<Vec<_>>>()?;

    let in_bag = blend_bags(source_bags, lambda, out_bag, 0.0, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let in_ch = characterize(flow, &in_bag)?;
    let in_odd = bootstrap_gap(&in_ch, &sources, config.points, config.bootstrap_trials, mix_seed(config.seed, u64::MAX))?;
    let odd_threshold = in_odd.quantile(0.95);

    let mut rows = Vec::with_capacity(config.etas.len() * config.reps);
    for (ei, &eta) in config.etas.iter().enumerate() {
        for rep in 0..config.reps {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(config.seed, ei as u64), rep as u64));
            let bag = blend_bags(source_bags, lambda, out_bag, eta, &mut rng)?;
            let target = characterize(flow, &bag)?;
            let fit = fit_weights(&target, &sources, config.points, &mut rng)?;
            let baseline = if config.baseline_trials >= 30 {
                baseline_from_fit(&fit, config.baseline_trials, &mut rng)?.median
            } else {
                f64::NAN
            };
            rows.push(SweepRow {
                eta,
                rep,
                d_e: fit.distance_to(lambda),
                delta: fit.delta,
                baseline_median: baseline,
                weights: fit.weights,
            });
        }
    }
    Ok(SweepResult {
        etas: config.etas.clone(),
        reps: config.reps,
        rows,
        in_odd,
        odd_threshold,
    })
}
