//! Sinusoidal embedding of scalar time stamps.
//!
//! Component `2k` is `sin(t / nu^(2k/tau))` and component `2k+1` the matching
//! cosine, for `k = 0 .. tau/2`. Each sine/cosine pair rotates under a time
//! shift, so `encode(t + dt)` is a fixed linear map of `encode(t)`; see
//! [`TimeCodecConfig::shift_matrix`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCodec", into = "RawCodec")]
pub struct TimeCodecConfig {
    tau: usize,
    nu: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCodec {
    tau: usize,
    nu: f64,
}

impl TryFrom<RawCodec> for TimeCodecConfig {
    type Error = Error;
    fn try_from(raw: RawCodec) -> Result<Self> {
        TimeCodecConfig::new(raw.tau, raw.nu)
    }
}

impl From<TimeCodecConfig> for RawCodec {
    fn from(c: TimeCodecConfig) -> Self {
        RawCodec { tau: c.tau, nu: c.nu }
    }
}

impl Default for TimeCodecConfig {
    fn default() -> Self {
        TimeCodecConfig { tau: 8, nu: 100.0 }
    }
}

impl TimeCodecConfig {
    pub fn new(tau: usize, nu: f64) -> Result<Self> {
        if tau == 0 || tau % 2 != 0 {
            return Err(Error::Config(format!("tau must be even and positive, got {tau}")));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::Config(format!("nu must be positive, got {nu}")));
        }
        Ok(TimeCodecConfig { tau, nu })
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Angular frequency of pair `k`: `nu^(-2k/tau)`.
    pub fn frequency(&self, k: usize) -> f64 {
        self.nu.powf(-(2.0 * k as f64) / self.tau as f64)
    }

    pub fn encode(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.tau];
        self.encode_into(t, &mut out);
        out
    }

    /// Writes the embedding of `t` into the first `tau` slots of `out`.
    pub fn encode_into(&self, t: f64, out: &mut [f64]) {
        for k in 0..self.tau / 2 {
            let (s, c) = (t * self.frequency(k)).sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }

    /// Rotation taking pair `k` of `encode(t)` to pair `k` of
    /// `encode(t + delta_t)`, independent of `t`.
    pub fn shift_matrix(&self, delta_t: f64, k: usize) -> Result<[[f64; 2]; 2]> {
        if k >= self.tau / 2 {
            return Err(Error::Config(format!(
                "frequency index {k} out of range for tau={}",
                self.tau
            )));
        }
        let (s, c) = (self.frequency(k) * delta_t).sin_cos();
        Ok([[c, s], [-s, c]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_time() {
        let codec = TimeCodecConfig::new(8, 100.0).unwrap();
        assert_eq!(codec.encode(0.0), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn first_pair_is_unit_frequency() {
        for nu in [2.0, 100.0, 1e4] {
            let codec = TimeCodecConfig::new(6, nu).unwrap();
            let z = codec.encode(1.7);
            assert_eq!(z[0], 1.7f64.sin());
            assert_eq!(z[1], 1.7f64.cos());
        }
    }

    #[test]
    fn matches_scalar_formula() {
        let codec = TimeCodecConfig::new(8, 100.0).unwrap();
        let z = codec.encode(1.0);
        // 100^(-2k/8) for k = 0..4 is 1, 0.316.., 0.1, 0.0316..
        let freqs = [1.0, 10f64.powf(-0.5), 0.1, 10f64.powf(-1.5)];
        for (k, w) in freqs.iter().enumerate() {
            assert!((z[2 * k] - w.sin()).abs() < 1e-15);
            assert!((z[2 * k + 1] - w.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_odd_tau() {
        assert!(TimeCodecConfig::new(7, 100.0).is_err());
        assert!(TimeCodecConfig::new(8, 0.0).is_err());
        assert!(serde_json::from_str::<TimeCodecConfig>(r#"{"tau":5,"nu":10.0}"#).is_err());
    }

    #[test]
    fn shift_identity_and_rotation() {
        let codec = TimeCodecConfig::default();
        assert_eq!(codec.shift_matrix(0.0, 2).unwrap(), [[1.0, 0.0], [-0.0, 1.0]]);
        let a = codec.shift_matrix(3.3, 1).unwrap();
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        assert!((det - 1.0).abs() < 1e-15);
        let ata00 = a[0][0] * a[0][0] + a[1][0] * a[1][0];
        let ata01 = a[0][0] * a[0][1] + a[1][0] * a[1][1];
        assert!((ata00 - 1.0).abs() < 1e-15 && ata01.abs() < 1e-15);
        assert!(codec.shift_matrix(1.0, 4).is_err());
    }

    #[test]
    fn shift_relation_random() {
        let codec = TimeCodecConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let t = rng.random_range(0.0..500.0);
            let dt = rng.random_range(-50.0..50.0);
            let k = rng.random_range(0..4);
            let a = codec.shift_matrix(dt, k).unwrap();
            let w = codec.frequency(k);
            let (s, c) = ((w * t).sin(), (w * t).cos());
            let lhs = [a[0][0] * s + a[0][1] * c, a[1][0] * s + a[1][1] * c];
            let rhs = [(w * (t + dt)).sin(), (w * (t + dt)).cos()];
            assert!((lhs[0] - rhs[0]).abs() < 1e-9);
            assert!((lhs[1] - rhs[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn bounded_and_deterministic() {
        let codec = TimeCodecConfig::new(16, 1000.0).unwrap();
        for i in 0..500 {
            let t = i as f64 * 3.17;
            let z = codec.encode(t);
            assert!(z.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(z, codec.encode(t));
        }
    }
}
