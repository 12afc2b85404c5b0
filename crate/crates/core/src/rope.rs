//! Rotary position embedding with interleaved channel pairs.
//!
//! Channel `2t` is the real part and `2t + 1` the imaginary part of the
//! `t`-th complex coordinate, rotated by `position * theta_t` where
//! `theta_t = base^(-t / (d_head / 2))`. Positions are real-valued: temporal
//! adjustment produces fractional positions whenever gamma is not an integer.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;

pub const DEFAULT_BASE: Real = 10000.0;
pub const DEFAULT_GAMMA: Real = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub d_head: usize,
    #[serde(default = "default_base")]
    pub base: Real,
    #[serde(default = "default_gamma")]
    pub gamma: Real,
}

fn default_base() -> Real {
    DEFAULT_BASE
}

fn default_gamma() -> Real {
    DEFAULT_GAMMA
}

impl RopeConfig {
    pub fn new(d_head: usize) -> Self {
        RopeConfig {
            d_head,
            base: DEFAULT_BASE,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn with_gamma(mut self, gamma: Real) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_head < 2 || !self.d_head.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "d_head must be even and at least 2, got {}",
                self.d_head
            )));
        }
        if !(self.base > 1.0 && self.base.is_finite()) {
            return Err(Error::invalid(format!("base must exceed 1, got {}", self.base)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be finite, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Per-pair rotation frequencies; `thetas[0] == 1`, strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    thetas: Vec<Real>,
}

impl FrequencyTable {
    pub fn thetas(&self) -> &[Real] {
        &self.thetas
    }

    pub fn d_head(&self) -> usize {
        self.thetas.len() * 2
    }
}

pub fn frequencies(config: &RopeConfig) -> Result<FrequencyTable> {
    config.validate()?;
    let half = (config.d_head / 2) as Real;
    let thetas = (0..config.d_head / 2)
        .map(|t| config.base.powf(-(t as Real) / half))
        .collect();
    Ok(FrequencyTable { thetas })
}

fn check_len(op: &'static str, len: usize, freqs: &FrequencyTable) -> Result<()> {
    if len != freqs.d_head() {
        return Err(Error::shape(op, freqs.d_head(), len));
    }
    Ok(())
}

/// Rotates `vec` in place. Panics if `vec.len() != freqs.d_head()`.
pub fn rotate_in_place(vec: &mut [Real], position: Real, freqs: &FrequencyTable) {
    assert_eq!(vec.len(), freqs.d_head(), "rotary input length");
    for (pair, &theta) in vec.chunks_exact_mut(2).zip(&freqs.thetas) {
        let (sin, cos) = (position * theta).sin_cos();
        let (x, y) = (pair[0], pair[1]);
        pair[0] = x * cos - y * sin;
        pair[1] = x * sin + y * cos;
    }
}

pub fn apply_rotary(vec: &[Real], position: Real, freqs: &FrequencyTable) -> Result<Vec<Real>> {
    check_len("apply_rotary", vec.len(), freqs)?;
    if !position.is_finite() {
        return Err(Error::invalid(format!("position must be finite, got {position}")));
    }
    let mut out = vec.to_vec();
    rotate_in_place(&mut out, position, freqs);
    Ok(out)
}

/// Reference rotation through explicit complex multiplication `z * e^{i phi}`.
pub fn rotary_oracle(vec: &[Real], position: Real, freqs: &FrequencyTable) -> Result<Vec<Real>> {
    check_len("rotary_oracle", vec.len(), freqs)?;
    if !position.is_finite() {
        return Err(Error::invalid(format!("position must be finite, got {position}")));
    }
    let mut out = Vec::with_capacity(vec.len());
    for (pair, &theta) in vec.chunks_exact(2).zip(&freqs.thetas) {
        let z = Complex::new(pair[0], pair[1]) * Complex::from_polar(1.0, position * theta);
        out.push(z.re);
        out.push(z.im);
    }
    Ok(out)
}

/// `<R(pos_q) q, R(pos_k) k>`; depends on positions only through `pos_q - pos_k`.
pub fn pair_score(
    q: &[Real],
    k: &[Real],
    pos_q: Real,
    pos_k: Real,
    freqs: &FrequencyTable,
) -> Result<Real> {
    if q.len() != k.len() {
        return Err(Error::shape("pair_score", q.len(), k.len()));
    }
    let qr = apply_rotary(q, pos_q, freqs)?;
    let kr = apply_rotary(k, pos_k, freqs)?;
    Ok(dot(&qr, &kr))
}

pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn table(d: usize) -> FrequencyTable {
        frequencies(&RopeConfig::new(d)).unwrap()
    }

    #[cfg(not(feature = "f32"))]
    fn norm(v: &[Real]) -> Real {
        dot(v, v).sqrt()
    }

    #[test]
    fn frequency_examples() {
        for d in [2, 4, 8, 128] {
            assert_eq!(table(d).thetas()[0], 1.0);
        }
        assert!((table(4).thetas()[1] - 0.01).abs() < 1e-15);
        assert!((table(128).thetas()[16] - 0.1).abs() < 1e-15);
        let t = table(64);
        assert!(t.thetas().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(frequencies(&RopeConfig::new(3)).is_err());
        assert!(frequencies(&RopeConfig::new(0)).is_err());
        let mut c = RopeConfig::new(4);
        c.base = 1.0;
        assert!(frequencies(&c).is_err());
    }

    #[test]
    fn zero_position_is_identity() {
        let v = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(apply_rotary(&v, 0.0, &table(4)).unwrap(), v.to_vec());
        assert_eq!(rotary_oracle(&v, 0.0, &table(4)).unwrap(), v.to_vec());
    }

    #[test]
    fn single_pair_rotation() {
        let out = apply_rotary(&[1.0, 0.0], 1.0, &table(2)).unwrap();
        assert!((out[0] - (1.0 as Real).cos()).abs() < 1e-15);
        assert!((out[1] - (1.0 as Real).sin()).abs() < 1e-15);
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn quarter_turn_oracle() {
        let out = rotary_oracle(&[0.0, 1.0], std::f64::consts::FRAC_PI_2, &table(2)).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(apply_rotary(&[1.0, 2.0], 1.0, &table(4)).is_err());
        assert!(rotary_oracle(&[1.0, 2.0], 1.0, &table(4)).is_err());
        assert!(pair_score(&[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0], 0.0, 0.0, &table(4)).is_err());
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn pair_score_examples() {
        let f = table(2);
        let s = pair_score(&[1.0, 0.0], &[1.0, 0.0], 3.0, 2.0, &f).unwrap();
        assert!((s - (1.0 as Real).cos()).abs() < 1e-15);
        let q = [0.5, -0.25, 1.0, 2.0];
        let k = [1.5, 0.75, -1.0, 0.5];
        let s = pair_score(&q, &k, 7.25, 7.25, &table(4)).unwrap();
        assert!((s - dot(&q, &k)).abs() < 1e-12);
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn oracle_agrees_on_random_inputs() {
        let mut rng = Rng::seeded(11);
        for i in 0..1000 {
            let d = [2, 8, 64, 128][i % 4];
            let v: Vec<Real> = (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let p = rng.uniform(-500.0, 500.0);
            let a = apply_rotary(&v, p, &table(d)).unwrap();
            let b = rotary_oracle(&v, p, &table(d)).unwrap();
            let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max);
            assert!(err < 1e-12, "case {i}: {err}");
        }
    }

    #[test]
    #[cfg(feature = "f32")]
    fn oracle_agrees_single_precision() {
        let mut rng = Rng::seeded(11);
        for i in 0..1000 {
            let d = [2, 8, 64, 128][i % 4];
            let v: Vec<Real> = (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let p = rng.uniform(-50.0, 50.0);
            let a = apply_rotary(&v, p, &table(d)).unwrap();
            let b = rotary_oracle(&v, p, &table(d)).unwrap();
            let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max);
            assert!(err < 1e-5, "case {i}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        #[cfg(not(feature = "f32"))]
        fn rotation_properties(seed: u64, half in 1usize..33, a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let d = half * 2;
            let f = table(d);
            let mut rng = Rng::seeded(seed);
            let v: Vec<Real> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let r = apply_rotary(&v, a, &f).unwrap();
            prop_assert!((norm(&r) - norm(&v)).abs() < 1e-12);
            let twice = apply_rotary(&r, b, &f).unwrap();
            let once = apply_rotary(&v, a + b, &f).unwrap();
            let err = twice.iter().zip(&once).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-12);
        }

        #[test]
        #[cfg(not(feature = "f32"))]
        fn score_depends_on_offset_only(seed: u64, pq in -50.0f64..50.0, pk in -50.0f64..50.0, s in -1000.0f64..1000.0) {
            let f = table(8);
            let mut rng = Rng::seeded(seed);
            let q: Vec<Real> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let k: Vec<Real> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let a = pair_score(&q, &k, pq, pk, &f).unwrap();
            let b = pair_score(&q, &k, pq + s, pk + s, &f).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
