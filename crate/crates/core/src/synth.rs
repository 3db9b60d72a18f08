//! Synthetic corpora: single-ball billiards, random sinusoids and a bimodal
//! toy, plus random masking of timestamps or individual dimensions.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{SeriesSet, TimedPoint};

/// Independent stream per series so corpora can be generated in any order.
pub fn series_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    RegularGrid,
    IrregularUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilliardsConfig {
    pub side: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub horizon: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub sampling: Sampling,
}

impl Default for BilliardsConfig {
    fn default() -> Self {
        BilliardsConfig {
            side: 0.8828,
            speed_min: 0.0018,
            speed_max: 0.1075,
            horizon: 200,
            n_train: 4000,
            n_test: 1000,
            seed: 0,
            sampling: Sampling::RegularGrid,
        }
    }
}

impl BilliardsConfig {
    pub fn irregular() -> Self {
        BilliardsConfig {
            n_train: 12_000,
            sampling: Sampling::IrregularUniform,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.side > 0.0) {
            return Err(Error::Config("side must be positive".into()));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::Config("need 0 < speed_min <= speed_max".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Position on `[0, side]` after free flight to `y` on the unfolded line.
/// Mirror images of the table tile the line with period `2 * side`, which
/// handles any number of wall contacts per step exactly.
pub fn fold(y: f64, side: f64) -> f64 {
    let period = 2.0 * side;
    let r = y.rem_euclid(period);
    if r > side {
        period - r
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ball {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
}

impl Ball {
    pub fn random<R: Rng + ?Sized>(cfg: &BilliardsConfig, rng: &mut R) -> Self {
        let start = [rng.random_range(0.0..cfg.side), rng.random_range(0.0..cfg.side)];
        let angle = rng.random_range(0.0..2.0 * PI);
        let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
        Ball {
            start,
            velocity: [speed * angle.cos(), speed * angle.sin()],
        }
    }

    pub fn position(&self, t: f64, side: f64) -> [f64; 2] {
        [
            fold(self.start[0] + self.velocity[0] * t, side),
            fold(self.start[1] + self.velocity[1] * t, side),
        ]
    }
}

fn ball_series<R: Rng + ?Sized>(cfg: &BilliardsConfig, rng: &mut R) -> Result<SeriesSet> {
    let ball = Ball::random(cfg, rng);
    let times: Vec<f64> = match cfg.sampling {
        Sampling::RegularGrid => (0..cfg.horizon).map(|i| i as f64).collect(),
        Sampling::IrregularUniform => {
            let mut t: Vec<f64> = (0..cfg.horizon)
                .map(|_| rng.random_range(0.0..=cfg.horizon as f64))
                .collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        }
    };
    let values: Vec<Vec<f64>> = times.iter().map(|&t| ball.position(t, cfg.side).to_vec()).collect();
    SeriesSet::from_observations(&times, &values)
}

/// `(train, test)` corpora of 2-d trajectories.
pub fn gen_billiards(cfg: &BilliardsConfig) -> Result<(Vec<SeriesSet>, Vec<SeriesSet>)> {
    cfg.validate()?;
    let gen = |offset: u64, n: usize| -> Result<Vec<SeriesSet>> {
        (0..n)
            .map(|i| ball_series(cfg, &mut series_rng(cfg.seed, offset + i as u64)))
            .collect()
    };
    Ok((gen(0, cfg.n_train)?, gen(1 << 32, cfg.n_test)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidConfig {
    pub n_series: usize,
    pub points_per_series: usize,
    pub hidden_per_series: usize,
    pub amplitude: [f64; 2],
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
    /// Times are drawn on `[0, time_span]`; keep it at most `2^L`.
    pub time_span: f64,
    pub seed: u64,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        SinusoidConfig {
            n_series: 1000,
            points_per_series: 100,
            hidden_per_series: 90,
            amplitude: [0.5, 1.5],
            frequency: [0.5, 2.0],
            phase: [0.0, 2.0 * PI],
            time_span: 10.0,
            seed: 0,
        }
    }
}

impl SinusoidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_per_series >= self.points_per_series {
            return Err(Error::Config("hidden_per_series must be below points_per_series".into()));
        }
        for (name, r) in [("amplitude", self.amplitude), ("frequency", self.frequency), ("phase", self.phase)] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} range is empty")));
            }
        }
        if !(self.time_span > 0.0) {
            return Err(Error::Config("time_span must be positive".into()));
        }
        Ok(())
    }

    pub fn max_amplitude(&self) -> f64 {
        self.amplitude[1]
    }
}

fn draw(r: [f64; 2], rng: &mut impl Rng) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Fully observed sinusoids `a sin(w t + p)` at sorted uniform times.
pub fn gen_sinusoid(cfg: &SinusoidConfig) -> Result<Vec<SeriesSet>> {
    cfg.validate()?;
    (0..cfg.n_series)
        .map(|i| {
            let mut rng = series_rng(cfg.seed, i as u64);
            let (a, w, p) = (draw(cfg.amplitude, &mut rng), draw(cfg.frequency, &mut rng), draw(cfg.phase, &mut rng));
            let mut times: Vec<f64> = Vec::with_capacity(cfg.points_per_series);
            while times.len() < cfg.points_per_series {
                times.push(rng.random_range(0.0..cfg.time_span));
                if times.len() == cfg.points_per_series {
                    times.sort_by(f64::total_cmp);
                    times.dedup();
                }
            }
            let values: Vec<Vec<f64>> = times.iter().map(|&t| vec![a * (w * t + p).sin()]).collect();
            SeriesSet::from_observations(&times, &values)
        })
        .collect()
}

/// Bump `s * sin(pi t / (n - 1))` on `t = 0..n`, sign `s = ±1` by a fair coin.
/// With only the endpoints observed the middle is bimodal.
pub fn gen_bimodal(n_series: usize, points: usize, seed: u64) -> Result<Vec<SeriesSet>> {
    if points < 3 {
        return Err(Error::Config("bimodal series need at least 3 points".into()));
    }
    (0..n_series)
        .map(|i| {
            let mut rng = series_rng(seed, i as u64);
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let times: Vec<f64> = (0..points).map(|t| t as f64).collect();
            let values: Vec<Vec<f64>> = times
                .iter()
                .map(|&t| vec![s * (PI * t / (points - 1) as f64).sin()])
                .collect();
            SeriesSet::from_observations(&times, &values)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum MaskPolicy {
    /// Hide a uniform number of whole timestamps in `[min_hidden, max_hidden]`.
    Timestamps { min_hidden: usize, max_hidden: usize },
    /// Hide every (timestamp, dimension) entry independently with `rate`.
    Dimensions { rate: f64 },
    /// Hide everything except the first and last timestamp.
    Endpoints,
}

/// Result of masking: what the model sees, what it must fill in, and the
/// ground truth aligned index-for-index with `targets.points()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub observed: SeriesSet,
    pub targets: SeriesSet,
    pub truth: Vec<Vec<f64>>,
}

impl Masked {
    pub fn target_times(&self) -> Vec<f64> {
        self.targets.times()
    }
}

pub fn mask_series(series: &SeriesSet, policy: &MaskPolicy, seed: u64) -> Result<Masked> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_series_with(series, policy, &mut rng)
}

pub fn mask_series_with<R: Rng + ?Sized>(series: &SeriesSet, policy: &MaskPolicy, rng: &mut R) -> Result<Masked> {
    let pts = crate::series::to_sequence(series);
    let n = pts.len();
    let d = series.dim();
    match *policy {
        MaskPolicy::Timestamps { min_hidden, max_hidden } => {
            if min_hidden > max_hidden {
                return Err(Error::Config("min_hidden exceeds max_hidden".into()));
            }
            if max_hidden >= n {
                return Err(Error::NoAnchors);
            }
            let k = rng.random_range(min_hidden..=max_hidden);
            let mut hidden = vec![false; n];
            for i in sample_indices(rng, n, k) {
                hidden[i] = true;
            }
            split_hidden(&pts, &hidden, d)
        }
        MaskPolicy::Endpoints => {
            let hidden: Vec<bool> = (0..n).map(|i| i != 0 && i + 1 != n).collect();
            split_hidden(&pts, &hidden, d)
        }
        MaskPolicy::Dimensions { rate } => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("missing rate {rate} outside [0, 1]")));
            }
            let mut observed = Vec::new();
            let mut targets = Vec::new();
            let mut truth = Vec::new();
            for p in &pts {
                let mask: Vec<bool> = (0..d).map(|_| !rng.random_bool(rate)).collect();
                if mask.iter().all(|&m| m) {
                    observed.push(p.clone());
                } else {
                    targets.push(TimedPoint::partial(p.time, p.data.clone(), mask)?);
                    truth.push(p.data.clone());
                }
            }
            if targets.iter().all(|t| t.dim_mask.iter().all(|&m| !m)) && observed.is_empty() {
                return Err(Error::NoAnchors);
            }
            Ok(Masked {
                observed: SeriesSet::new(d, observed)?,
                targets: SeriesSet::new(d, targets)?,
                truth,
            })
        }
    }
}

fn split_hidden(pts: &[TimedPoint], hidden: &[bool], d: usize) -> Result<Masked> {
    let mut observed = Vec::new();
    let mut targets = Vec::new();
    let mut truth = Vec::new();
    for (p, &h) in pts.iter().zip(hidden) {
        if h {
            targets.push(TimedPoint::target(p.time, d)?);
            truth.push(p.data.clone());
        } else {
            observed.push(p.clone());
        }
    }
    if observed.is_empty() {
        return Err(Error::NoAnchors);
    }
    Ok(Masked {
        observed: SeriesSet::new(d, observed)?,
        targets: SeriesSet::new(d, targets)?,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::to_sequence;

    fn small(n: usize) -> BilliardsConfig {
        BilliardsConfig {
            n_train: n,
            n_test: 2,
            seed: 3,
            ..BilliardsConfig::default()
        }
    }

    #[test]
    fn fold_reflects() {
        assert_eq!(fold(0.3, 1.0), 0.3);
        assert_eq!(fold(1.2, 1.0), 0.8);
        assert!((fold(-0.25, 1.0) - 0.25).abs() < 1e-15);
        assert!((fold(2.3, 1.0) - 0.3).abs() < 1e-15);
        assert!((fold(5.5, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wall_parallel_launch() {
        let side = 0.8828;
        let ball = Ball {
            start: [side / 2.0, side / 2.0],
            velocity: [0.01, 0.0],
        };
        for t in 0..44 {
            let p = ball.position(t as f64, side);
            assert!((p[0] - (side / 2.0 + 0.01 * t as f64)).abs() < 1e-12);
            assert_eq!(p[1], side / 2.0);
        }
        // after contact at t = 44.14 the ball heads back
        assert!(ball.position(46.0, side)[0] < ball.position(45.0, side)[0]);
    }

    #[test]
    fn containment() {
        let cfg = BilliardsConfig {
            n_train: 5000,
            n_test: 0,
            seed: 1,
            ..BilliardsConfig::default()
        };
        let (train, _) = gen_billiards(&cfg).unwrap();
        let mut count = 0;
        for s in &train {
            for p in s.points() {
                assert!(p.data.iter().all(|&v| (0.0..=cfg.side).contains(&v)));
                count += 1;
            }
        }
        assert_eq!(count, 1_000_000);
    }

    #[test]
    fn free_flight_is_collinear_with_constant_speed() {
        let cfg = small(100);
        for i in 0..cfg.n_train {
            let mut rng = series_rng(cfg.seed, i as u64);
            let ball = Ball::random(&cfg, &mut rng);
            let s = ball_series(&cfg, &mut series_rng(cfg.seed, i as u64)).unwrap();
            let seq = to_sequence(&s);
            let speed = ball.velocity[0].hypot(ball.velocity[1]);
            // wall contacts happen where an unfolded coordinate crosses a multiple of side
            let crossings = |t0: f64, t1: f64| {
                (0..2).any(|k| {
                    let (a, b) = (ball.start[k] + ball.velocity[k] * t0, ball.start[k] + ball.velocity[k] * t1);
                    (a / cfg.side).floor() != (b / cfg.side).floor()
                })
            };
            for j in 0..seq.len() - 2 {
                let (t0, t2) = (seq[j].time, seq[j + 2].time);
                if crossings(t0, t2) {
                    continue;
                }
                let (p0, p1, p2) = (&seq[j].data, &seq[j + 1].data, &seq[j + 2].data);
                let cross = (p1[0] - p0[0]) * (p2[1] - p1[1]) - (p1[1] - p0[1]) * (p2[0] - p1[0]);
                assert!(cross.abs() < 1e-9);
                let l1 = (p1[0] - p0[0]).hypot(p1[1] - p0[1]);
                let l2 = (p2[0] - p1[0]).hypot(p2[1] - p1[1]);
                assert!((l1 - l2).abs() < 1e-9);
                assert!((l1 - speed).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn speed_range_and_determinism() {
        let cfg = small(200);
        for i in 0..cfg.n_train {
            let ball = Ball::random(&cfg, &mut series_rng(cfg.seed, i as u64));
            let s = ball.velocity[0].hypot(ball.velocity[1]);
            assert!(s >= cfg.speed_min * (1.0 - 1e-12) && s <= cfg.speed_max * (1.0 + 1e-12));
        }
        assert_eq!(gen_billiards(&cfg).unwrap(), gen_billiards(&cfg).unwrap());
        let irr = BilliardsConfig {
            sampling: Sampling::IrregularUniform,
            ..small(3)
        };
        let (tr, te) = gen_billiards(&irr).unwrap();
        assert_eq!(te.len(), 2);
        assert!(tr[0].times().iter().all(|&t| (0.0..=200.0).contains(&t)));
    }

    #[test]
    fn sinusoid_exact_values() {
        let cfg = SinusoidConfig {
            n_series: 4,
            amplitude: [1.0, 1.0],
            frequency: [1.0, 1.0],
            phase: [0.0, 0.0],
            ..SinusoidConfig::default()
        };
        for s in gen_sinusoid(&cfg).unwrap() {
            assert_eq!(s.len(), 100);
            for p in s.points() {
                assert_eq!(p.data[0], p.time.sin());
            }
        }
    }

    #[test]
    fn sinusoid_range_and_masking() {
        let cfg = SinusoidConfig {
            n_series: 200,
            ..SinusoidConfig::default()
        };
        let corpus = gen_sinusoid(&cfg).unwrap();
        let a = cfg.max_amplitude();
        for (i, s) in corpus.iter().enumerate() {
            assert!(s.points().iter().all(|p| p.data[0].abs() <= a));
            assert!(s.times().iter().all(|&t| (0.0..cfg.time_span).contains(&t)));
            let policy = MaskPolicy::Timestamps {
                min_hidden: cfg.hidden_per_series,
                max_hidden: cfg.hidden_per_series,
            };
            let m = mask_series(s, &policy, i as u64).unwrap();
            assert_eq!(m.observed.len(), 10);
            assert_eq!(m.targets.len(), 90);
        }
        assert_eq!(corpus, gen_sinusoid(&cfg).unwrap());
        assert!(SinusoidConfig {
            hidden_per_series: 100,
            ..SinusoidConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mask_counts_and_partition() {
        let (train, _) = gen_billiards(&small(3)).unwrap();
        let s = &train[0];
        let none = mask_series(s, &MaskPolicy::Timestamps { min_hidden: 0, max_hidden: 0 }, 1).unwrap();
        assert!(none.targets.is_empty());
        assert_eq!(to_sequence(&none.observed), to_sequence(s));
        let m = mask_series(s, &MaskPolicy::Timestamps { min_hidden: 195, max_hidden: 195 }, 2).unwrap();
        assert_eq!(m.observed.len(), 5);
        let mut all: Vec<f64> = m.observed.times();
        all.extend(m.targets.times());
        all.sort_by(f64::total_cmp);
        assert_eq!(all, s.times());
        for (t, y) in m.targets.points().iter().zip(&m.truth) {
            let orig = s.points().iter().find(|p| p.time == t.time).unwrap();
            assert_eq!(&orig.data, y);
        }
        for seed in 0..50 {
            let m = mask_series(s, &MaskPolicy::Timestamps { min_hidden: 180, max_hidden: 195 }, seed).unwrap();
            assert!((5..=20).contains(&m.observed.len()));
        }
        let err = mask_series(s, &MaskPolicy::Timestamps { min_hidden: 200, max_hidden: 200 }, 0).unwrap_err();
        assert!(matches!(err, Error::NoAnchors));
    }

    #[test]
    fn dimension_masking_rate() {
        let d = 11;
        let times: Vec<f64> = (0..48).map(|t| t as f64).collect();
        let s = SeriesSet::from_observations(&times, &vec![vec![1.0; d]; 48]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut hidden, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let m = mask_series_with(&s, &MaskPolicy::Dimensions { rate: 0.5 }, &mut rng).unwrap();
            for t in m.targets.points() {
                hidden += t.dim_mask.iter().filter(|&&b| !b).count();
                assert!(t.data.iter().zip(&t.dim_mask).all(|(&x, &b)| b || x == 0.0));
            }
            total += 48 * d;
        }
        let frac = hidden as f64 / total as f64;
        let sigma = (0.25 / total as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn bimodal_and_endpoints() {
        let corpus = gen_bimodal(400, 9, 1).unwrap();
        let ups = corpus.iter().filter(|s| to_sequence(s)[4].data[0] > 0.0).count();
        assert!((150..250).contains(&ups));
        let m = mask_series(&corpus[0], &MaskPolicy::Endpoints, 0).unwrap();
        assert_eq!(m.observed.times(), vec![0.0, 8.0]);
        assert_eq!(m.targets.len(), 7);
    }
}
