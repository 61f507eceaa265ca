//! Low-dimensional stochastic forward model standing in for a renderer.
//!
//! Weather (plus the sun azimuth nuisance) maps to eight bounded features.
//! The map deliberately loses information: at night the luminance carries no
//! cloud or fog signal, wind is invisible without rain, and the azimuth only
//! enters through glare. Every observation gets i.i.d. Gaussian noise drawn
//! from its own seed, so a record can be re-simulated with the noise frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npe::PairSet;
use crate::param_space::{
    ParamSpace, CLOUDINESS, FOG_DENSITY, PRECIPITATION, PRECIPITATION_DEPOSITS, SUN_ALTITUDE,
    SUN_AZIMUTH, WIND_INTENSITY,
};
use crate::scalar::Scalar;

pub const FEATURE_DIM: usize = 8;
pub const NOISE_SIGMA: f64 = 0.02;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "luminance",
    "visibility",
    "sky_grayness",
    "ground_wetness",
    "rain_streaks",
    "glare",
    "mix_a",
    "mix_b",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: [f64; FEATURE_DIM],
}

impl Observation {
    pub fn distance(&self, other: &Observation) -> f64 {
        self.features
            .iter()
            .zip(&other.features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_context<T: Scalar>(&self) -> Vec<T> {
        self.features.iter().map(|&v| T::c(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// One simulated example: all parameters, the seed of its noise draw and the
/// resulting observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub params: Vec<f64>,
    pub noise_seed: u64,
    pub observation: Observation,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    /// 10 : 2 : 1, the proportions of a 500k / 100k / 35k-style split rounded.
    pub fn standard() -> Self {
        Self::from_ratios(10.0, 2.0, 1.0).unwrap()
    }

    pub fn from_ratios(train: f64, val: f64, test: f64) -> Result<Self> {
        let total = train + val + test;
        if !(train >= 0.0 && val >= 0.0 && test >= 0.0 && total > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be non-negative with positive sum, got {train}/{val}/{test}"
            )));
        }
        Ok(Self {
            train: train / total,
            val: val / total,
            test: test / total,
        })
    }

    /// Record counts for `n` items; the test split takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64) * self.train).round() as usize;
        let val = (((n as f64) * self.val).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }

    fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::InvalidArgument(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub space: ParamSpace,
    pub seed: u64,
    pub fractions: SplitFractions,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Weather/observation pairs of one split, ready for training.
    pub fn pairs<T: Scalar>(&self, split: Split) -> PairSet<T> {
        let mut theta = Vec::new();
        let mut context = Vec::new();
        for r in self.split(split) {
            theta.push(self.space.weather_of(&r.params).iter().map(|&v| T::c(v)).collect());
            context.push(r.observation.to_context());
        }
        PairSet { theta, context }
    }
}

/// SplitMix64 finalizer, used to derive independent per-record seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NOISE_STREAM: u64 = 0x6e_6f69_7365;

#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    space: ParamSpace,
    /// Weather-vector positions of cloud, fog, rain, sun, wind, deposits.
    idx: [usize; 6],
    azimuth: usize,
    azimuth_range: (f64, f64),
}

impl Simulator {
    /// Requires the six predicted weather dims and the azimuth nuisance of
    /// the default space (by name).
    pub fn new(space: ParamSpace) -> Result<Self> {
        let find = |name: &str| {
            space
                .weather_index(name)
                .ok_or_else(|| Error::InvalidArgument(format!("space lacks predicted dim `{name}`")))
        };
        let idx = [
            find(CLOUDINESS)?,
            find(FOG_DENSITY)?,
            find(PRECIPITATION)?,
            find(SUN_ALTITUDE)?,
            find(WIND_INTENSITY)?,
            find(PRECIPITATION_DEPOSITS)?,
        ];
        let azimuth = space
            .index_of(SUN_AZIMUTH)
            .ok_or_else(|| Error::InvalidArgument("space lacks the sun azimuth dim".into()))?;
        let az = &space.dims()[azimuth];
        let azimuth_range = (az.lower, az.upper);
        Ok(Self {
            space,
            idx,
            azimuth,
            azimuth_range,
        })
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn azimuth_of(&self, full: &[f64]) -> f64 {
        full[self.azimuth]
    }

    /// Noise-free features for a weather vector and azimuth.
    pub fn noiseless(&self, weather: &[f64], azimuth: f64) -> Result<[f64; FEATURE_DIM]> {
        self.space.check_weather(weather)?;
        let (az_lo, az_hi) = self.azimuth_range;
        if !(az_lo..=az_hi).contains(&azimuth) {
            return Err(Error::OutOfBox {
                name: SUN_AZIMUTH.into(),
                value: azimuth,
                lower: az_lo,
                upper: az_hi,
            });
        }
        let dims: Vec<_> = self.space.predicted_dims().collect();
        let unit = |k: usize| {
            let d = dims[self.idx[k]];
            (weather[self.idx[k]] - d.lower) / (d.upper - d.lower)
        };
        let (c, f, r, s, w, d) = (unit(0), unit(1), unit(2), unit(3), unit(4), unit(5));
        let a = azimuth / 360.0;

        let o1 = (2.0 * s - 1.0).max(0.0) * (1.0 - 0.6 * c) * (1.0 - 0.5 * f);
        let o2 = (1.0 - f) * (1.0 - 0.3 * r);
        let o3 = c * (0.5 + 0.5 * f);
        let o4 = (0.7 * r + 0.3 * d).min(1.0);
        let o5 = r * w;
        let o6 = o1 * (1.0 - o3) * (2.0 * std::f64::consts::PI * a).cos().abs();
        let o7 = 0.5 * (o2 + o4) * (1.0 - 0.2 * c);
        let o8 = (o1 + o5 - o3).tanh();
        Ok([o1, o2, o3, o4, o5, o6, o7, o8])
    }

    /// Features plus `σ·N(0, 1)` noise drawn from `rng`.
    pub fn simulate<R: Rng + ?Sized>(&self, weather: &[f64], azimuth: f64, rng: &mut R) -> Result<Observation> {
        let mut features = self.noiseless(weather, azimuth)?;
        for v in &mut features {
            *v += NOISE_SIGMA * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(Observation { features })
    }

    /// Re-simulates weather vectors with the azimuth and the noise draw of
    /// an existing record held fixed.
    pub fn resimulate(&self, weathers: &[Vec<f64>], azimuth: f64, noise_seed: u64) -> Result<Vec<Observation>> {
        weathers
            .iter()
            .map(|w| self.simulate(w, azimuth, &mut ChaCha8Rng::seed_from_u64(noise_seed)))
            .collect()
    }

    /// Simulates one record from a full parameter vector; the noise seed is
    /// derived from `record_seed`.
    pub fn observe(&self, params: Vec<f64>, record_seed: u64, split: Split) -> Result<Record> {
        self.space.check_full(&params)?;
        let noise_seed = mix_seed(record_seed, NOISE_STREAM);
        let weather = self.space.weather_of(&params);
        let observation = self.simulate(
            &weather,
            params[self.azimuth],
            &mut ChaCha8Rng::seed_from_u64(noise_seed),
        )?;
        Ok(Record {
            params,
            noise_seed,
            observation,
            split,
        })
    }

    /// Draws `n` records from the prior of `prior` (which may be a
    /// restriction of the simulator's space). Record `i` depends only on
    /// `(seed, i)`.
    pub fn sample_records(&self, prior: &ParamSpace, n: usize, seed: u64, split: Split) -> Result<Vec<Record>> {
        (0..n)
            .map(|i| {
                let record_seed = mix_seed(seed, i as u64);
                let params = prior.sample_one(&mut ChaCha8Rng::seed_from_u64(record_seed));
                self.observe(params, record_seed, split)
            })
            .collect()
    }

    /// Simulates every full parameter vector in `params`.
    pub fn observe_all(&self, params: Vec<Vec<f64>>, seed: u64) -> Result<Vec<Record>> {
        params
            .into_iter()
            .enumerate()
            .map(|(i, p)| self.observe(p, mix_seed(seed, i as u64), Split::Test))
            .collect()
    }

    /// Prior draws split into train / val / test by `fractions`.
    pub fn generate_dataset(&self, n: usize, seed: u64, fractions: SplitFractions) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidArgument("dataset size must be positive".into()));
        }
        fractions.validate()?;
        let (n_train, n_val, _) = fractions.counts(n);
        let mut records = self.sample_records(&self.space, n, seed, Split::Train)?;
        for (i, r) in records.iter_mut().enumerate() {
            r.split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(Dataset {
            space: self.space.clone(),
            seed,
            fractions,
            records,
        })
    }
}

/// A named box of the parameter space with the number of observations to
/// simulate from it, used to build bags of a known domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub size: usize,
    /// `(dim name, lower, upper)`; unlisted dims keep their full range.
    pub bounds: Vec<(String, f64, f64)>,
}

impl Region {
    pub fn new(name: &str, size: usize, bounds: &[(&str, f64, f64)]) -> Self {
        Self {
            name: name.into(),
            size,
            bounds: bounds.iter().map(|(n, l, u)| (n.to_string(), *l, *u)).collect(),
        }
    }

    pub fn space(&self, base: &ParamSpace) -> Result<ParamSpace> {
        let b: Vec<(&str, f64, f64)> = self.bounds.iter().map(|(n, l, u)| (n.as_str(), *l, *u)).collect();
        base.restricted(&b)
    }
}

/// Three daytime, light-rain source regions separated in fog density, and
/// an out-of-ODD region of heavy rain at any fog level. Sizes follow a
/// 27 / 21 / 26 / 176 image split.
pub fn default_odd_regions() -> (Vec<Region>, Region) {
    let day = (SUN_ALTITUDE, 20.0, 90.0);
    let light = (PRECIPITATION, 0.0, 30.0);
    let sources = vec![
        Region::new("source_1", 27, &[(FOG_DENSITY, 0.0, 30.0), light, day]),
        Region::new("source_2", 21, &[(FOG_DENSITY, 35.0, 65.0), light, day]),
        Region::new("source_3", 26, &[(FOG_DENSITY, 70.0, 100.0), light, day]),
    ];
    let out = Region::new("out_of_odd", 176, &[(PRECIPITATION, 60.0, 100.0), day]);
    (sources, out)
}

impl Simulator {
    /// Simulates `region.size` records from the prior restricted to the
    /// region.
    pub fn simulate_region(&self, region: &Region, seed: u64) -> Result<Vec<Record>> {
        self.sample_records(&region.space(&self.space)?, region.size, seed, Split::Test)
    }
}
