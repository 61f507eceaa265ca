//! The box of physical weather parameters.
//!
//! A [`ParamSpace`] lists every simulator parameter with its physical range.
//! Parameters flagged `predicted` form the weather vector the flow models;
//! the others are nuisances (free, like the sun azimuth) or held at a fixed
//! value. The reference domain draws every free parameter uniformly.
//!
//! Full parameter vectors (`&[f64]` of length [`ParamSpace::len`]) follow the
//! space order. Weather vectors (length [`ParamSpace::n_predicted`]) keep only
//! the predicted dims, in the same relative order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CLOUDINESS: &str = "cloudiness";
pub const FOG_DENSITY: &str = "fog_density";
pub const PRECIPITATION: &str = "precipitation";
pub const SUN_AZIMUTH: &str = "sun_azimuth_angle";
pub const SUN_ALTITUDE: &str = "sun_altitude_angle";
pub const WIND_INTENSITY: &str = "wind_intensity";
pub const PRECIPITATION_DEPOSITS: &str = "precipitation_deposits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub fixed_value: Option<f64>,
    #[serde(default)]
    pub predicted: bool,
}

impl ParamDim {
    pub fn predicted(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_owned(),
            lower,
            upper,
            fixed_value: None,
            predicted: true,
        }
    }

    pub fn nuisance(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_owned(),
            lower,
            upper,
            fixed_value: None,
            predicted: false,
        }
    }

    pub fn fixed(name: &str, lower: f64, upper: f64, value: f64) -> Self {
        Self {
            name: name.to_owned(),
            lower,
            upper,
            fixed_value: Some(value),
            predicted: false,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::InvalidArgument(format!(
                "dim `{}` needs finite lower < upper, got [{}, {}]",
                self.name, self.lower, self.upper
            )));
        }
        if let Some(v) = self.fixed_value {
            if self.predicted {
                return Err(Error::InvalidArgument(format!(
                    "dim `{}` cannot be both fixed and predicted",
                    self.name
                )));
            }
            if !(self.lower..=self.upper).contains(&v) {
                return Err(Error::OutOfBox {
                    name: self.name.clone(),
                    value: v,
                    lower: self.lower,
                    upper: self.upper,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    dims: Vec<ParamDim>,
}

impl ParamSpace {
    pub fn new(dims: Vec<ParamDim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("parameter space has no dims".into()));
        }
        for (i, d) in dims.iter().enumerate() {
            d.validate()?;
            if dims[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::InvalidArgument(format!("duplicate dim `{}`", d.name)));
            }
        }
        if !dims.iter().any(|d| d.predicted) {
            return Err(Error::InvalidArgument("no predicted dims".into()));
        }
        Ok(Self { dims })
    }

    /// The 13 CARLA weather parameters with the ranges used for the
    /// reference domain. Six are predicted; the sun azimuth is a free
    /// nuisance; the remaining six are pinned.
    pub fn default_space() -> Self {
        let dims = vec![
            ParamDim::predicted(CLOUDINESS, 0.0, 100.0),
            ParamDim::predicted(FOG_DENSITY, 0.0, 100.0),
            ParamDim::predicted(PRECIPITATION, 0.0, 100.0),
            ParamDim::nuisance(SUN_AZIMUTH, 0.0, 360.0),
            ParamDim::predicted(SUN_ALTITUDE, -90.0, 90.0),
            ParamDim::predicted(WIND_INTENSITY, 0.0, 100.0),
            ParamDim::predicted(PRECIPITATION_DEPOSITS, 0.0, 100.0),
            ParamDim::fixed("fog_distance", 0.0, 100.0, 0.75),
            ParamDim::fixed("fog_falloff", 0.0, 5.0, 0.1),
            ParamDim::fixed("mie_scattering_scale", 0.0, 5.0, 0.03),
            ParamDim::fixed("rayleigh_scattering_scale", 0.0, 2.0, 0.033),
            ParamDim::fixed("scattering_intensity", 0.0, 2.0, 1.0),
            ParamDim::fixed("wetness", 0.0, 100.0, 0.0),
        ];
        Self::new(dims).expect("default space is valid")
    }

    /// A space of `names.len()` predicted dims, all on `[lower, upper]`.
    pub fn uniform_box(names: &[&str], lower: f64, upper: f64) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| ParamDim::predicted(n, lower, upper))
                .collect(),
        )
    }

    pub fn dims(&self) -> &[ParamDim] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn predicted_mask(&self) -> Vec<bool> {
        self.dims.iter().map(|d| d.predicted).collect()
    }

    /// Positions of the predicted dims within a full parameter vector.
    pub fn predicted_indices(&self) -> Vec<usize> {
        self.dims
            .iter()
            .enumerate()
            .filter(|(_, d)| d.predicted)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn predicted_dims(&self) -> impl Iterator<Item = &ParamDim> {
        self.dims.iter().filter(|d| d.predicted)
    }

    pub fn predicted_names(&self) -> Vec<String> {
        self.predicted_dims().map(|d| d.name.clone()).collect()
    }

    pub fn n_predicted(&self) -> usize {
        self.dims.iter().filter(|d| d.predicted).count()
    }

    /// Position of a named dim inside a weather vector.
    pub fn weather_index(&self, name: &str) -> Option<usize> {
        self.predicted_dims().position(|d| d.name == name)
    }

    /// Extracts the weather vector from a full parameter vector.
    pub fn weather_of(&self, full: &[f64]) -> Vec<f64> {
        self.predicted_indices().into_iter().map(|i| full[i]).collect()
    }

    /// Rebuilds a full parameter vector from a weather vector, taking the
    /// non-predicted entries from `template`.
    pub fn with_weather(&self, template: &[f64], weather: &[f64]) -> Vec<f64> {
        let mut full = template.to_vec();
        for (slot, &w) in self.predicted_indices().into_iter().zip(weather) {
            full[slot] = w;
        }
        full
    }

    /// Midpoint of every dim (fixed dims return their value).
    pub fn midpoint(&self) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| d.fixed_value.unwrap_or_else(|| d.midpoint()))
            .collect()
    }

    /// Returns a copy where the named dims are narrowed to new bounds. Used
    /// to carve sub-domains out of the reference box.
    pub fn restricted(&self, bounds: &[(&str, f64, f64)]) -> Result<Self> {
        let mut dims = self.dims.clone();
        for &(name, lo, hi) in bounds {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown dim `{name}`")))?;
            let d = &dims[i];
            if lo < d.lower || hi > d.upper {
                return Err(Error::InvalidArgument(format!(
                    "restriction [{lo}, {hi}] leaves the range of `{name}`"
                )));
            }
            dims[i].lower = lo;
            dims[i].upper = hi;
        }
        Self::new(dims)
    }

    /// Checks a full parameter vector against the box.
    pub fn check_full(&self, full: &[f64]) -> Result<()> {
        if full.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: full.len(),
            });
        }
        for (d, &v) in self.dims.iter().zip(full) {
            check_in(d, v)?;
        }
        Ok(())
    }

    /// Checks a weather vector against the predicted dims' bounds.
    pub fn check_weather(&self, weather: &[f64]) -> Result<()> {
        if weather.len() != self.n_predicted() {
            return Err(Error::ShapeMismatch {
                expected: self.n_predicted(),
                got: weather.len(),
            });
        }
        for (d, &v) in self.predicted_dims().zip(weather) {
            check_in(d, v)?;
        }
        Ok(())
    }

    /// Clamps a weather vector into the box.
    pub fn clamp_weather(&self, weather: &[f64]) -> Vec<f64> {
        self.predicted_dims()
            .zip(weather)
            .map(|(d, &v)| v.clamp(d.lower, d.upper))
            .collect()
    }

    /// Draws `n` i.i.d. full parameter vectors from the uniform prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| match d.fixed_value {
                Some(v) => v,
                None => d.lower + (d.upper - d.lower) * rng.random::<f64>(),
            })
            .collect()
    }

    /// Maps a weather vector from physical units onto `[-1, 1]` per dim.
    pub fn to_model(&self, weather: &[f64]) -> Vec<f64> {
        self.predicted_dims()
            .zip(weather)
            .map(|(d, &v)| (v - d.midpoint()) / d.half_width())
            .collect()
    }

    /// Inverse of [`to_model`](Self::to_model).
    pub fn from_model(&self, unit: &[f64]) -> Vec<f64> {
        self.predicted_dims()
            .zip(unit)
            .map(|(d, &u)| d.midpoint() + u * d.half_width())
            .collect()
    }

    pub fn standardizer<T: Scalar>(&self) -> Standardizer<T> {
        Standardizer::new(
            self.predicted_dims()
                .map(|d| (d.midpoint(), d.half_width())),
        )
    }
}

fn check_in(d: &ParamDim, v: f64) -> Result<()> {
    if !v.is_finite() || v < d.lower || v > d.upper {
        return Err(Error::OutOfBox {
            name: d.name.clone(),
            value: v,
            lower: d.lower,
            upper: d.upper,
        });
    }
    Ok(())
}

/// Per-dim affine map between physical and model coordinates, in the
/// scalar type of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T> {
    center: Vec<T>,
    half_width: Vec<T>,
    /// `-Σ ln half_width`: the log-Jacobian of physical → model.
    log_jacobian: T,
}

impl<T: Scalar> Standardizer<T> {
    fn new(dims: impl Iterator<Item = (f64, f64)>) -> Self {
        let (center, half_width): (Vec<T>, Vec<T>) =
            dims.map(|(c, h)| (T::c(c), T::c(h))).unzip();
        let log_jacobian = half_width.iter().fold(T::zero(), |acc, h| acc - h.ln());
        Self {
            center,
            half_width,
            log_jacobian,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn log_jacobian(&self) -> T {
        self.log_jacobian
    }

    pub fn to_model_into(&self, physical: &[T], out: &mut [T]) {
        for (((o, &x), &c), &h) in out
            .iter_mut()
            .zip(physical)
            .zip(&self.center)
            .zip(&self.half_width)
        {
            *o = (x - c) / h;
        }
    }

    pub fn to_model(&self, physical: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); physical.len()];
        self.to_model_into(physical, &mut out);
        out
    }

    pub fn from_model(&self, unit: &[T]) -> Vec<T> {
        unit.iter()
            .zip(&self.center)
            .zip(&self.half_width)
            .map(|((&u, &c), &h)| c + u * h)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_space_matches_weather_table() {
        let s = ParamSpace::default_space();
        assert_eq!(s.len(), 13);
        assert_eq!(s.n_predicted(), 6);
        let cloud = &s.dims()[s.index_of(CLOUDINESS).unwrap()];
        assert_eq!((cloud.lower, cloud.upper, cloud.predicted), (0.0, 100.0, true));
        let az = &s.dims()[s.index_of(SUN_AZIMUTH).unwrap()];
        assert_eq!((az.lower, az.upper, az.predicted), (0.0, 360.0, false));
        assert!(az.fixed_value.is_none());
        let alt = &s.dims()[s.index_of(SUN_ALTITUDE).unwrap()];
        assert_eq!((alt.lower, alt.upper), (-90.0, 90.0));
        let wet = &s.dims()[s.index_of("wetness").unwrap()];
        assert_eq!(wet.fixed_value, Some(0.0));
        let fixed: Vec<(&str, f64)> = s
            .dims()
            .iter()
            .filter_map(|d| d.fixed_value.map(|v| (d.name.as_str(), v)))
            .collect();
        assert_eq!(
            fixed,
            vec![
                ("fog_distance", 0.75),
                ("fog_falloff", 0.1),
                ("mie_scattering_scale", 0.03),
                ("rayleigh_scattering_scale", 0.033),
                ("scattering_intensity", 1.0),
                ("wetness", 0.0),
            ]
        );
        assert_eq!(
            s.predicted_names(),
            vec![
                CLOUDINESS,
                FOG_DENSITY,
                PRECIPITATION,
                SUN_ALTITUDE,
                WIND_INTENSITY,
                PRECIPITATION_DEPOSITS
            ]
        );
    }

    #[test]
    fn invalid_dims_are_rejected() {
        assert!(ParamSpace::new(vec![ParamDim::predicted("a", 1.0, 1.0)]).is_err());
        assert!(ParamSpace::new(vec![ParamDim::predicted("a", 0.0, f64::INFINITY)]).is_err());
        assert!(ParamSpace::new(vec![
            ParamDim::predicted("a", 0.0, 1.0),
            ParamDim::fixed("b", 0.0, 1.0, 2.0)
        ])
        .is_err());
        assert!(ParamSpace::new(vec![ParamDim::nuisance("a", 0.0, 1.0)]).is_err());
    }

    #[test]
    fn prior_is_uniform_and_reproducible() {
        let s = ParamSpace::default_space();
        let a = s.sample_prior(10_000, &mut ChaCha8Rng::seed_from_u64(3));
        let b = s.sample_prior(10_000, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        for (j, d) in s.dims().iter().enumerate() {
            let mean = a.iter().map(|v| v[j]).sum::<f64>() / a.len() as f64;
            match d.fixed_value {
                Some(v) => assert!(a.iter().all(|row| row[j] == v)),
                None => {
                    let tol = 0.02 * (d.upper - d.lower);
                    assert!((mean - d.midpoint()).abs() < tol, "{}: {mean}", d.name);
                }
            }
        }
        let falloff = s.index_of("fog_falloff").unwrap();
        assert!(a.iter().all(|row| row[falloff] == 0.1));
    }

    #[test]
    fn model_coordinates() {
        let s = ParamSpace::default_space();
        let mut w = s.weather_of(&s.midpoint());
        assert!(s.to_model(&w).iter().all(|&u| u == 0.0));
        w[3] = 90.0;
        assert_eq!(s.to_model(&w)[3], 1.0);
        let w = vec![12.5, 99.0, 0.0, -45.0, 33.3, 71.0];
        let back = s.from_model(&s.to_model(&w));
        for (a, b) in w.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn standardizer_matches_space_map() {
        let s = ParamSpace::default_space();
        let st = s.standardizer::<f64>();
        let w = vec![12.5, 99.0, 0.0, -45.0, 33.3, 71.0];
        assert_eq!(st.to_model(&w), s.to_model(&w));
        let expected = -(6.0 * 50f64.ln() - 50f64.ln() + 90f64.ln());
        assert!((st.log_jacobian() - expected).abs() < 1e-12);
    }

    #[test]
    fn restriction_narrows_bounds() {
        let s = ParamSpace::default_space();
        let r = s.restricted(&[(FOG_DENSITY, 0.0, 30.0)]).unwrap();
        let d = &r.dims()[r.index_of(FOG_DENSITY).unwrap()];
        assert_eq!((d.lower, d.upper), (0.0, 30.0));
        assert!(s.restricted(&[(FOG_DENSITY, -1.0, 30.0)]).is_err());
        assert!(s.restricted(&[("nope", 0.0, 1.0)]).is_err());
    }
}
