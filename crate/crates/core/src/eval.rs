//! Posterior diagnostics: highest density regions, expected coverage, the π
//! statistic, posterior predictive checks and corner-plot data.
//!
//! Everything is sample based. An HDR at level γ is `{θ : ln q(θ) ≥ t}` with
//! `t` the `(1 − γ)` quantile of the log-densities of `n` draws from `q`.

use std::marker::PhantomData;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::npe::PairSet;
use crate::scalar::Scalar;
use crate::simulator::{mix_seed, Observation, Record, Simulator};

/// Default number of draws behind one HDR threshold.
pub const DEFAULT_HDR_SAMPLES: usize = 1024;
/// Credibility levels of the corner-plot contours (1, 2 and 3 sigma).
pub const CORNER_LEVELS: [f64; 3] = [0.6827, 0.9545, 0.9973];

/// A normalized density over parameter vectors that can also be sampled.
pub trait Density<T: Scalar> {
    fn dim(&self) -> usize;

    fn log_density(&self, theta: &[T]) -> Result<T>;

    /// Draws with their log-densities.
    fn sample_with_log_density<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec<T>, T)>>;

    /// Draws only; override when the density is costlier than sampling.
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<T>>> {
        Ok(self.sample_with_log_density(n, rng)?.into_iter().map(|(t, _)| t).collect())
    }
}

/// A family of densities indexed by an observation context.
pub trait ConditionalDensity<T: Scalar> {
    fn dim(&self) -> usize;

    fn log_density_given(&self, theta: &[T], context: &[T]) -> Result<T>;

    fn sample_given<R: Rng + ?Sized>(&self, context: &[T], n: usize, rng: &mut R) -> Result<Vec<(Vec<T>, T)>>;
}

impl<T: Scalar> ConditionalDensity<T> for ConditionalFlow<T> {
    fn dim(&self) -> usize {
        ConditionalFlow::dim(self)
    }

    fn log_density_given(&self, theta: &[T], context: &[T]) -> Result<T> {
        self.log_prob(theta, context)
    }

    fn sample_given<R: Rng + ?Sized>(&self, context: &[T], n: usize, rng: &mut R) -> Result<Vec<(Vec<T>, T)>> {
        self.sample_with_log_prob(context, n, rng)
    }
}

/// A conditional density with its context fixed.
#[derive(Debug, Clone)]
pub struct Posterior<'a, T, C = ConditionalFlow<T>> {
    model: &'a C,
    context: Vec<T>,
    _scalar: PhantomData<T>,
}

impl<'a, T: Scalar, C: ConditionalDensity<T>> Posterior<'a, T, C> {
    pub fn new(model: &'a C, context: Vec<T>) -> Self {
        Self {
            model,
            context,
            _scalar: PhantomData,
        }
    }

    pub fn context(&self) -> &[T] {
        &self.context
    }
}

impl<T: Scalar, C: ConditionalDensity<T>> Density<T> for Posterior<'_, T, C> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_density(&self, theta: &[T]) -> Result<T> {
        self.model.log_density_given(theta, &self.context)
    }

    fn sample_with_log_density<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec<T>, T)>> {
        self.model.sample_given(&self.context, n, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdrEstimate {
    pub gamma: f64,
    pub threshold: f64,
    /// Log-densities of the draws, ascending.
    pub log_densities: Vec<f64>,
}

impl HdrEstimate {
    pub fn contains(&self, log_density: f64) -> bool {
        log_density >= self.threshold
    }

    /// Fraction of the draws inside the region.
    pub fn sample_mass(&self) -> f64 {
        let inside = self.log_densities.iter().filter(|&&l| self.contains(l)).count();
        inside as f64 / self.log_densities.len() as f64
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 samples, got {n}")));
    }
    Ok(())
}

fn sorted_log_densities<T: Scalar, D: Density<T>, R: Rng + ?Sized>(d: &D, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mut lds: Vec<f64> = d
        .sample_with_log_density(n, rng)?
        .into_iter()
        .map(|(_, l)| l.to_f64_lossy())
        .collect();
    if lds.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite("sample log-density"));
    }
    lds.sort_by(f64::total_cmp);
    Ok(lds)
}

/// Index into ascending log-densities of the `(1 − γ)` quantile.
fn threshold_rank(gamma: f64, n: usize) -> usize {
    ((1.0 - gamma) * n as f64).floor() as usize
}

/// Sample-quantile HDR threshold at credibility `gamma`.
pub fn hdr_threshold<T: Scalar, D: Density<T>, R: Rng + ?Sized>(
    density: &D,
    gamma: f64,
    n: usize,
    rng: &mut R,
) -> Result<HdrEstimate> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("credibility level must lie in (0, 1), got {gamma}")));
    }
    check_samples(n)?;
    let log_densities = sorted_log_densities(density, n, rng)?;
    let k = threshold_rank(gamma, n).min(n - 1);
    Ok(HdrEstimate {
        gamma,
        threshold: log_densities[k],
        log_densities,
    })
}

/// Number of `n` draws from `density` whose log-density does not exceed
/// `log_density_star`.
pub fn pi_count<T: Scalar, D: Density<T>, R: Rng + ?Sized>(
    density: &D,
    log_density_star: f64,
    n: usize,
    rng: &mut R,
) -> Result<usize> {
    let count = density
        .sample_with_log_density(n, rng)?
        .into_iter()
        .filter(|(_, l)| l.to_f64_lossy() <= log_density_star)
        .count();
    Ok(count)
}

/// Fraction of posterior draws no more credible than the ground truth.
pub fn pi_statistic<T: Scalar, C: ConditionalDensity<T>, R: Rng + ?Sized>(
    model: &C,
    theta_star: &[T],
    context: &[T],
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    check_samples(n)?;
    let lp = model.log_density_given(theta_star, context)?.to_f64_lossy();
    let post = Posterior::new(model, context.to_vec());
    Ok(pi_count(&post, lp, n, rng)? as f64 / n as f64)
}

/// `k + 1` evenly spaced levels from 0 to 1.
pub fn uniform_levels(k: usize) -> Vec<f64> {
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    pub pairs: usize,
    pub samples_per_pair: usize,
    /// π statistic of every pair, in input order.
    pub pi: Vec<f64>,
}

impl CoverageCurve {
    /// Largest `|coverage − γ|` over the grid.
    pub fn max_deviation(&self) -> f64 {
        self.signed_deviation().into_iter().map(f64::abs).fold(0.0, f64::max)
    }

    /// `coverage − γ` per level; negative means overconfident.
    pub fn signed_deviation(&self) -> Vec<f64> {
        self.levels.iter().zip(&self.coverage).map(|(g, c)| c - g).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.coverage.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Whether a truth with `count` of `n` draws at or below its density lies
/// in the level-`gamma` HDR.
pub fn covered(count: usize, n: usize, gamma: f64) -> bool {
    if gamma >= 1.0 {
        return true;
    }
    if gamma <= 0.0 {
        return false;
    }
    count > threshold_rank(gamma, n)
}

/// Coverage curve from per-pair π counts.
pub fn coverage_from_counts(counts: &[usize], n: usize, levels: &[f64]) -> Result<CoverageCurve> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no pairs".into()));
    }
    if let Some(&g) = levels.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::InvalidArgument(format!("level {g} outside [0, 1]")));
    }
    let coverage = levels
        .iter()
        .map(|&g| counts.iter().filter(|&&c| covered(c, n, g)).count() as f64 / counts.len() as f64)
        .collect();
    Ok(CoverageCurve {
        levels: levels.to_vec(),
        coverage,
        pairs: counts.len(),
        samples_per_pair: n,
        pi: counts.iter().map(|&c| c as f64 / n as f64).collect(),
    })
}

/// Expected coverage over test pairs. Pair `i` draws its posterior samples
/// from a generator seeded by `(seed, i)`, so the result does not depend on
/// evaluation order.
pub fn expected_coverage<T: Scalar, C: ConditionalDensity<T>>(
    model: &C,
    pairs: &PairSet<T>,
    levels: &[f64],
    n: usize,
    seed: u64,
) -> Result<CoverageCurve> {
    if pairs.len() < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 test pairs, got {}", pairs.len())));
    }
    check_samples(n)?;
    let counts = pairs
        .iter()
        .enumerate()
        .map(|(i, (theta, ctx))| {
            let lp = model.log_density_given(theta, ctx)?.to_f64_lossy();
            let post = Posterior::new(model, ctx.to_vec());
            pi_count(&post, lp, n, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64)))
        })
        .collect::<Result<Vec<_>>>()?;
    coverage_from_counts(&counts, n, levels)
}

/// Linear-interpolation quantile of ascending data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Box-and-whisker summary with Tukey whiskers (most extreme data within
/// 1.5 IQR of the quartiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub count: usize,
    pub min: f64,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    pub max: f64,
    pub mean: f64,
}

impl BoxSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("box summary of no values".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("box summary input"));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&s, 0.25);
        let q3 = quantile_sorted(&s, 0.75);
        let iqr = q3 - q1;
        let lo_fence = q1 - 1.5 * iqr;
        let hi_fence = q3 + 1.5 * iqr;
        Ok(Self {
            count: s.len(),
            min: s[0],
            whisker_low: *s.iter().find(|&&v| v >= lo_fence).unwrap(),
            q1,
            median: quantile_sorted(&s, 0.5),
            q3,
            whisker_high: *s.iter().rev().find(|&&v| v <= hi_fence).unwrap(),
            max: s[s.len() - 1],
            mean: s.iter().sum::<f64>() / s.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcDraw {
    pub weather: Vec<f64>,
    pub observation: Observation,
    pub distance: f64,
}

/// Re-simulates `record` at each weather (clamped to the box), holding its
/// azimuth and noise draw fixed.
pub fn ppc_from_weathers(sim: &Simulator, record: &Record, weathers: &[Vec<f64>]) -> Result<Vec<PpcDraw>> {
    let space = sim.space();
    let clamped: Vec<Vec<f64>> = weathers.iter().map(|w| space.clamp_weather(w)).collect();
    let observations = sim.resimulate(&clamped, sim.azimuth_of(&record.params), record.noise_seed)?;
    Ok(clamped
        .into_iter()
        .zip(observations)
        .map(|(weather, observation)| PpcDraw {
            distance: observation.distance(&record.observation),
            weather,
            observation,
        })
        .collect())
}

/// Posterior predictive check of one record.
pub fn ppc<T: Scalar, R: Rng + ?Sized>(
    flow: &ConditionalFlow<T>,
    sim: &Simulator,
    record: &Record,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PpcDraw>> {
    let weathers: Vec<Vec<f64>> = flow
        .sample(&record.observation.to_context::<T>(), n, rng)?
        .into_iter()
        .map(|w| w.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    ppc_from_weathers(sim, record, &weathers)
}

/// Same as [`ppc`] with weathers drawn from the prior instead: the baseline
/// a useful posterior must beat.
pub fn prior_predictive<R: Rng + ?Sized>(sim: &Simulator, record: &Record, n: usize, rng: &mut R) -> Result<Vec<PpcDraw>> {
    let space = sim.space();
    let weathers: Vec<Vec<f64>> = space
        .sample_prior(n, rng)
        .iter()
        .map(|full| space.weather_of(full))
        .collect();
    ppc_from_weathers(sim, record, &weathers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGrid {
    pub i: usize,
    pub j: usize,
    /// Smoothed density, `resolution²` cells, index `bin_i * resolution + bin_j`.
    pub density: Vec<f64>,
    /// Density thresholds enclosing [`CORNER_LEVELS`] of the mass.
    pub levels: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerData {
    pub names: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
    pub resolution: usize,
    pub samples: usize,
    /// Fraction of samples inside the plotted range, per dim.
    pub in_range: Vec<f64>,
    /// Per-dim histogram masses.
    pub marginals: Vec<Vec<f64>>,
    pub pairs: Vec<PairGrid>,
}

impl CornerData {
    pub fn bin_width(&self, dim: usize) -> f64 {
        let (lo, hi) = self.ranges[dim];
        (hi - lo) / self.resolution as f64
    }

    pub fn bin_center(&self, dim: usize, bin: usize) -> f64 {
        self.ranges[dim].0 + (bin as f64 + 0.5) * self.bin_width(dim)
    }

    pub fn cell_area(&self, pair: &PairGrid) -> f64 {
        self.bin_width(pair.i) * self.bin_width(pair.j)
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<&PairGrid> {
        self.pairs.iter().find(|p| p.i == i && p.j == j)
    }

    /// Area of the region above `pair.levels[level]`.
    pub fn region_area(&self, pair: &PairGrid, level: usize) -> f64 {
        let t = pair.levels[level];
        pair.density.iter().filter(|&&d| d >= t).count() as f64 * self.cell_area(pair)
    }
}

fn bin_of(v: f64, (lo, hi): (f64, f64), res: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    Some((((v - lo) / (hi - lo) * res as f64) as usize).min(res - 1))
}

fn box_smooth(grid: &[f64], res: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for a in 0..res {
        for b in 0..res {
            let mut s = 0.0;
            for da in a.saturating_sub(1)..=(a + 1).min(res - 1) {
                for db in b.saturating_sub(1)..=(b + 1).min(res - 1) {
                    s += grid[da * res + db];
                }
            }
            out[a * res + b] = s / 9.0;
        }
    }
    out
}

fn hdr_levels(masses: &[f64], cell_area: f64) -> [f64; 3] {
    let mut sorted = masses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut out = [0.0; 3];
    for (slot, &level) in out.iter_mut().zip(&CORNER_LEVELS) {
        let mut acc = 0.0;
        let mut t = sorted[sorted.len() - 1];
        for &m in &sorted {
            acc += m;
            if acc >= level {
                t = m;
                break;
            }
        }
        *slot = t / cell_area;
    }
    out
}

/// Corner-plot data from samples: 1-D histograms and 3×3 box-smoothed 2-D
/// histograms with HDR iso-levels. Samples outside `ranges` are dropped.
pub fn corner_from_samples(
    samples: &[Vec<f64>],
    names: &[String],
    ranges: &[(f64, f64)],
    resolution: usize,
) -> Result<CornerData> {
    if resolution < 32 {
        return Err(Error::InvalidArgument(format!("corner resolution must be at least 32, got {resolution}")));
    }
    let d = ranges.len();
    if names.len() != d {
        return Err(Error::ShapeMismatch {
            expected: d,
            got: names.len(),
        });
    }
    if let Some(s) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: d,
            got: s.len(),
        });
    }
    if ranges.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::InvalidArgument("empty corner range".into()));
    }
    let bins: Vec<Vec<Option<usize>>> = samples
        .iter()
        .map(|s| s.iter().zip(ranges).map(|(&v, &r)| bin_of(v, r, resolution)).collect())
        .collect();

    let mut marginals = Vec::with_capacity(d);
    let mut in_range = Vec::with_capacity(d);
    for k in 0..d {
        let mut h = vec![0.0; resolution];
        let mut kept = 0usize;
        for b in bins.iter().filter_map(|b| b[k]) {
            h[b] += 1.0;
            kept += 1;
        }
        if kept == 0 {
            return Err(Error::InvalidArgument(format!("no samples inside the range of `{}`", names[k])));
        }
        h.iter_mut().for_each(|v| *v /= kept as f64);
        marginals.push(h);
        in_range.push(kept as f64 / samples.len() as f64);
    }

    let mut pairs = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            let mut g = vec![0.0; resolution * resolution];
            for b in &bins {
                if let (Some(a), Some(c)) = (b[i], b[j]) {
                    g[a * resolution + c] += 1.0;
                }
            }
            let mut g = box_smooth(&g, resolution);
            let total: f64 = g.iter().sum();
            if total == 0.0 {
                return Err(Error::InvalidArgument(format!("no samples inside the ({i}, {j}) panel")));
            }
            g.iter_mut().for_each(|v| *v /= total);
            let area = (ranges[i].1 - ranges[i].0) * (ranges[j].1 - ranges[j].0) / (resolution * resolution) as f64;
            let levels = hdr_levels(&g, area);
            g.iter_mut().for_each(|v| *v /= area);
            pairs.push(PairGrid { i, j, density: g, levels });
        }
    }
    Ok(CornerData {
        names: names.to_vec(),
        ranges: ranges.to_vec(),
        resolution,
        samples: samples.len(),
        in_range,
        marginals,
        pairs,
    })
}

/// Samples `density` and builds its corner data.
pub fn corner_data<T: Scalar, D: Density<T>, R: Rng + ?Sized>(
    density: &D,
    names: &[String],
    ranges: &[(f64, f64)],
    resolution: usize,
    n: usize,
    rng: &mut R,
) -> Result<CornerData> {
    if n == 0 {
        return Err(Error::InvalidArgument("corner data needs samples".into()));
    }
    let samples: Vec<Vec<f64>> = density
        .sample(n, rng)?
        .into_iter()
        .map(|s| s.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    corner_from_samples(&samples, names, ranges, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::param_space::ParamSpace;
    use crate::simulator::SplitFractions;
    use statrs::distribution::{ContinuousCDF, Normal, Uniform};

    /// Identity flow over a box equal to the model coordinates: a standard
    /// Gaussian that ignores its one-dim context.
    fn gaussian_flow(dim: usize) -> ConditionalFlow<f64> {
        let names: Vec<String> = (0..dim).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let space = ParamSpace::uniform_box(&refs, -1.0, 1.0).unwrap();
        let cfg = FlowConfig {
            layers: 2,
            hidden: vec![8],
            ..FlowConfig::default()
        };
        ConditionalFlow::new(space, 1, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    /// A flow narrowed by `scale` around the origin of model space.
    struct Narrowed<'a> {
        flow: &'a ConditionalFlow<f64>,
        scale: f64,
    }

    impl ConditionalDensity<f64> for Narrowed<'_> {
        fn dim(&self) -> usize {
            self.flow.dim()
        }

        fn log_density_given(&self, theta: &[f64], ctx: &[f64]) -> Result<f64> {
            let wide: Vec<f64> = theta.iter().map(|v| v / self.scale).collect();
            Ok(self.flow.log_prob(&wide, ctx)? - theta.len() as f64 * self.scale.ln())
        }

        fn sample_given<R: Rng + ?Sized>(&self, ctx: &[f64], n: usize, rng: &mut R) -> Result<Vec<(Vec<f64>, f64)>> {
            let d = self.flow.dim() as f64;
            Ok(self
                .flow
                .sample_given(ctx, n, rng)?
                .into_iter()
                .map(|(t, l)| (t.iter().map(|v| v * self.scale).collect(), l - d * self.scale.ln()))
                .collect())
        }
    }

    fn ks_uniform(values: &[f64]) -> f64 {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let u = Uniform::new(0.0, 1.0).unwrap();
        let d = s
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = u.cdf(v);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        ks_p_value(d, s.len())
    }

    /// Asymptotic Kolmogorov distribution tail with the usual small-n
    /// correction.
    fn ks_p_value(d: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        let mut p = 0.0;
        for k in 1..200 {
            let k = k as f64;
            p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    fn self_pairs(flow: &ConditionalFlow<f64>, n: usize, seed: u64) -> PairSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::new();
        let mut ctx = Vec::new();
        for _ in 0..n {
            let c = vec![rng.random_range(-1.0..1.0)];
            theta.push(flow.sample(&c, 1, &mut rng).unwrap().remove(0));
            ctx.push(c);
        }
        PairSet::new(theta, ctx).unwrap()
    }

    #[test]
    fn hdr_of_standard_gaussian_matches_one_sigma() {
        let flow = gaussian_flow(1);
        let post = Posterior::new(&flow, vec![0.0]);
        let h = hdr_threshold(&post, 0.6827, 100_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // ln φ(z) = t  ⇒  z = sqrt(−2 t − ln 2π)
        let z = (-2.0 * h.threshold - (2.0 * std::f64::consts::PI).ln()).sqrt();
        assert!((z - 1.0).abs() < 0.02, "z = {z}");
        assert!((h.sample_mass() - 0.6827).abs() <= 1.0 / 100_000.0 + 1e-12);
    }

    #[test]
    fn hdr_near_one_takes_the_minimum() {
        let flow = gaussian_flow(2);
        let post = Posterior::new(&flow, vec![0.3]);
        let h = hdr_threshold(&post, 0.9999, 1000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(h.threshold, h.log_densities[0]);
        assert!(hdr_threshold(&post, 1.0, 1000, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
        assert!(hdr_threshold(&post, 0.5, 99, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn own_samples_fall_in_the_hdr_at_rate_gamma() {
        let flow = gaussian_flow(3);
        let post = Posterior::new(&flow, vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = hdr_threshold(&post, 0.8, 20_000, &mut rng).unwrap();
        let fresh = post.sample_with_log_density(20_000, &mut rng).unwrap();
        let rate = fresh.iter().filter(|(_, l)| h.contains(*l)).count() as f64 / 20_000.0;
        assert!((rate - 0.8).abs() < 0.02, "{rate}");
    }

    #[test]
    fn self_calibration_is_on_the_diagonal() {
        let flow = gaussian_flow(2);
        let pairs = self_pairs(&flow, 2000, 4);
        let curve = expected_coverage(&flow, &pairs, &uniform_levels(10), 256, 5).unwrap();
        assert!(curve.max_deviation() <= 0.03, "{:?}", curve.coverage);
        assert!(curve.is_monotone());
        assert_eq!(curve.coverage[0], 0.0);
        assert_eq!(curve.coverage[10], 1.0);
    }

    #[test]
    fn narrowed_flow_is_overconfident() {
        let flow = gaussian_flow(2);
        let pairs = self_pairs(&flow, 500, 6);
        let narrow = Narrowed { flow: &flow, scale: 0.6 };
        let curve = expected_coverage(&narrow, &pairs, &uniform_levels(10), 256, 7).unwrap();
        let dev = curve.signed_deviation();
        assert!(dev[1..10].iter().all(|&d| d < 0.0), "{dev:?}");
        let n = 256.0;
        let hi = coverage_from_counts(&[200, 255, 256], 256, &[0.5, 1.0 - 1.0 / n]).unwrap();
        assert!(hi.coverage[1] >= hi.coverage[0]);
    }

    #[test]
    fn coverage_is_deterministic_per_seed() {
        let flow = gaussian_flow(2);
        let pairs = self_pairs(&flow, 100, 8);
        let a = expected_coverage(&flow, &pairs, &uniform_levels(10), 128, 9).unwrap();
        let b = expected_coverage(&flow, &pairs, &uniform_levels(10), 128, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pi_of_the_mode_is_one_and_of_own_draws_is_uniform() {
        let flow = gaussian_flow(2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert_eq!(pi_statistic(&flow, &[0.0, 0.0], &[0.0], 500, &mut rng).unwrap(), 1.0);

        let pairs = self_pairs(&flow, 2000, 11);
        let pis: Vec<f64> = pairs
            .iter()
            .map(|(t, c)| pi_statistic(&flow, t, c, 200, &mut rng).unwrap())
            .collect();
        // Rank statistics are discrete; jitter within the rank cell.
        let jittered: Vec<f64> = pis.iter().map(|p| (p - rng.random::<f64>() / 200.0).max(0.0)).collect();
        assert!(ks_uniform(&jittered) > 0.01);
    }

    #[test]
    fn coverage_and_pi_agree() {
        let flow = gaussian_flow(2);
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (t, c) in self_pairs(&flow, 100, 13).iter() {
            let gamma: f64 = rng.random();
            let mut r1 = ChaCha8Rng::seed_from_u64(rng.random());
            let mut r2 = r1.clone();
            let post = Posterior::new(&flow, c.to_vec());
            let h = hdr_threshold(&post, gamma, n, &mut r1).unwrap();
            let pi = pi_statistic(&flow, t, c, n, &mut r2).unwrap();
            let inside = h.contains(flow.log_prob(t, c).unwrap());
            assert_eq!(inside, covered((pi * n as f64).round() as usize, n, gamma));
            if inside {
                assert!(1.0 - pi <= gamma + 1.0 / n as f64);
            } else {
                assert!(1.0 - pi >= gamma - 1.0 / n as f64);
            }
        }
    }

    #[test]
    fn box_summary_quartiles() {
        let b = BoxSummary::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!(b.whisker_high, 4.0);
        assert_eq!(b.whisker_low, 1.0);
        assert_eq!(b.max, 100.0);
        assert!(BoxSummary::from_values(&[]).is_err());
    }

    #[test]
    fn ppc_with_the_true_weather_is_exact() {
        let sim = Simulator::new(ParamSpace::default_space()).unwrap();
        let ds = sim.generate_dataset(5, 14, SplitFractions::standard()).unwrap();
        for r in &ds.records {
            let w = ds.space.weather_of(&r.params);
            let draws = ppc_from_weathers(&sim, r, &vec![w; 10]).unwrap();
            assert!(draws.iter().all(|d| d.distance == 0.0));
            let prior = prior_predictive(&sim, r, 50, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
            assert!(prior.iter().any(|d| d.distance > 0.0));
        }
    }

    #[test]
    fn corner_marginals_of_a_gaussian() {
        let flow = gaussian_flow(2);
        let post = Posterior::new(&flow, vec![0.0]);
        let names = vec!["t0".to_string(), "t1".to_string()];
        let ranges = vec![(-5.0, 5.0); 2];
        let cd = corner_data(&post, &names, &ranges, 64, 100_000, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for (k, m) in cd.marginals.iter().enumerate() {
            assert!((m.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let mean: f64 = m.iter().enumerate().map(|(b, p)| p * cd.bin_center(k, b)).sum();
            let var: f64 = m.iter().enumerate().map(|(b, p)| p * (cd.bin_center(k, b) - mean).powi(2)).sum();
            let skew: f64 = m
                .iter()
                .enumerate()
                .map(|(b, p)| p * ((cd.bin_center(k, b) - mean) / var.sqrt()).powi(3))
                .sum();
            assert!(skew.abs() < 0.1, "skew {skew}");
            // the one-sigma bin mass matches Φ
            let within: f64 = m
                .iter()
                .enumerate()
                .filter(|(b, _)| cd.bin_center(k, *b).abs() < 1.0)
                .map(|(_, p)| p)
                .sum();
            let expected = normal.cdf(0.9375) - normal.cdf(-0.9375);
            assert!((within - expected).abs() < 0.01);
        }
        let pair = cd.pair(0, 1).unwrap();
        let mass: f64 = pair.density.iter().sum::<f64>() * cd.cell_area(pair);
        assert!((mass - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn one_sigma_region_area_matches_chi_square() {
        let flow = gaussian_flow(2);
        let post = Posterior::new(&flow, vec![0.0]);
        let names = vec!["t0".to_string(), "t1".to_string()];
        let cd = corner_data(&post, &names, &[(-4.0, 4.0); 2], 64, 100_000, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let pair = cd.pair(0, 1).unwrap();
        let area = cd.region_area(pair, 0);
        let expected = std::f64::consts::PI * -2.0 * (1.0f64 - 0.6827).ln();
        assert!((area / expected - 1.0).abs() < 0.05, "{area} vs {expected}");
        assert!(pair.levels[0] > pair.levels[1] && pair.levels[1] > pair.levels[2]);
    }

    #[test]
    fn corner_rejects_coarse_grids() {
        let names = vec!["a".to_string()];
        assert!(corner_from_samples(&[vec![0.0]], &names, &[(0.0, 1.0)], 16).is_err());
    }
}
