//! Set representation of a time series.
//!
//! A series is an unordered collection of `(time, data)` tuples. Observed
//! points and points awaiting imputation live in the same [`SeriesSet`]
//! type and are told apart by [`TimedPoint::observed`]. The distance from a
//! pending target to its closest observation (its *missing gap*) drives the
//! imputation schedule and is tracked by [`GapTable`].

mod io;

pub use io::{
    read_container, read_series_jsonl, series_to_csv, write_container, write_series_jsonl,
    PointRecord, SeriesRecord,
};

use crate::error::{Error, Result};

/// One element of a series set.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedPoint {
    pub time: f64,
    pub data: Vec<f64>,
    /// `true` marks an observed dimension.
    pub dim_mask: Vec<bool>,
    /// Member of the observed set (as opposed to the target set).
    pub observed: bool,
}

impl TimedPoint {
    pub fn new(time: f64, data: Vec<f64>, dim_mask: Vec<bool>, observed: bool) -> Result<Self> {
        if !time.is_finite() || time < 0.0 {
            return Err(Error::InvalidPoint(format!(
                "time must be finite and non-negative, got {time}"
            )));
        }
        if data.len() != dim_mask.len() {
            return Err(Error::InvalidPoint(format!(
                "data has {} dims but mask has {}",
                data.len(),
                dim_mask.len()
            )));
        }
        if data.is_empty() {
            return Err(Error::InvalidPoint("zero-dimensional point".into()));
        }
        let all_observed = dim_mask.iter().all(|&m| m);
        if observed && !all_observed {
            return Err(Error::InvalidPoint(format!(
                "observed point at t={time} has unobserved dimensions"
            )));
        }
        if !observed && all_observed {
            return Err(Error::InvalidPoint(format!(
                "target at t={time} has no dimension to impute"
            )));
        }
        Ok(TimedPoint {
            time,
            data,
            dim_mask,
            observed,
        })
    }

    /// A fully observed point.
    pub fn observation(time: f64, data: Vec<f64>) -> Result<Self> {
        let d = data.len();
        Self::new(time, data, vec![true; d], true)
    }

    /// A fully missing target with zero placeholders.
    pub fn target(time: f64, dim: usize) -> Result<Self> {
        Self::new(time, vec![0.0; dim], vec![false; dim], false)
    }

    /// A target with some dimensions observed. Unobserved entries of `data`
    /// are zeroed.
    pub fn partial(time: f64, mut data: Vec<f64>, dim_mask: Vec<bool>) -> Result<Self> {
        for (x, &m) in data.iter_mut().zip(&dim_mask) {
            if !m {
                *x = 0.0;
            }
        }
        Self::new(time, data, dim_mask, false)
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

/// Number of dimensions of `point` still waiting for a value.
pub fn count_missing_dims(point: &TimedPoint) -> usize {
    point.dim_mask.iter().filter(|&&m| !m).count()
}

/// Unordered collection of points sharing one dimensionality.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSet {
    dim: usize,
    points: Vec<TimedPoint>,
}

impl SeriesSet {
    pub fn new(dim: usize, points: Vec<TimedPoint>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidPoint("series dimension must be positive".into()));
        }
        if let Some(p) = points.iter().find(|p| p.dim() != dim) {
            return Err(Error::InvalidPoint(format!(
                "point at t={} has {} dims, series has {dim}",
                p.time,
                p.dim()
            )));
        }
        let mut times: Vec<f64> = points.iter().map(|p| p.time).collect();
        times.sort_by(f64::total_cmp);
        if let Some(w) = times.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidPoint(format!("duplicate time {}", w[0])));
        }
        Ok(SeriesSet { dim, points })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    /// Fully observed series from parallel time and value arrays.
    pub fn from_observations(times: &[f64], values: &[Vec<f64>]) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidPoint(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        let dim = values.first().map(Vec::len).unwrap_or(1);
        let points = times
            .iter()
            .zip(values)
            .map(|(&t, x)| TimedPoint::observation(t, x.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, points)
    }

    /// Fully missing targets at the given times.
    pub fn targets_at(dim: usize, times: &[f64]) -> Result<Self> {
        let points = times
            .iter()
            .map(|&t| TimedPoint::target(t, dim))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[TimedPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.time).collect()
    }

    pub fn into_points(self) -> Vec<TimedPoint> {
        self.points
    }

    /// Returns a new set with `point` added.
    pub fn with_point(&self, point: TimedPoint) -> Result<Self> {
        let mut points = self.points.clone();
        points.push(point);
        Self::new(self.dim, points)
    }

    /// Splits into (observed, targets) by the `observed` flag.
    pub fn split_observed(&self) -> (SeriesSet, SeriesSet) {
        let (obs, tgt): (Vec<_>, Vec<_>) = self.points.iter().cloned().partition(|p| p.observed);
        (
            SeriesSet {
                dim: self.dim,
                points: obs,
            },
            SeriesSet {
                dim: self.dim,
                points: tgt,
            },
        )
    }

    /// Union of two disjoint sets.
    pub fn union(&self, other: &SeriesSet) -> Result<Self> {
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        Self::new(self.dim, points)
    }
}

/// Time-ordered view of a set. Stable and lossless.
pub fn to_sequence(set: &SeriesSet) -> Vec<TimedPoint> {
    let mut seq = set.points.clone();
    seq.sort_by(|a, b| a.time.total_cmp(&b.time));
    seq
}

/// Missing gap of each pending target, keyed by target time.
///
/// Entries are kept sorted by time so that equality between two tables does
/// not depend on the order in which targets were supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct GapTable {
    entries: Vec<(f64, f64)>,
}

impl GapTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(time, gap)` pairs in ascending time order.
    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn get(&self, time: f64) -> Option<f64> {
        self.position(time).map(|i| self.entries[i].1)
    }

    pub fn max_gap(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.1).max_by(f64::total_cmp)
    }

    fn position(&self, time: f64) -> Option<usize> {
        self.entries
            .binary_search_by(|e| e.0.total_cmp(&time))
            .ok()
    }

    /// Builds the table from raw times. See [`compute_gaps`].
    pub fn from_times(observed: &[f64], targets: &[f64]) -> Result<Self> {
        if observed.is_empty() {
            return Err(Error::NoAnchors);
        }
        let mut anchors = observed.to_vec();
        anchors.sort_by(f64::total_cmp);
        let mut entries = Vec::with_capacity(targets.len());
        for &t in targets {
            let idx = anchors.partition_point(|&a| a < t);
            let mut gap = f64::INFINITY;
            if idx < anchors.len() {
                gap = gap.min((anchors[idx] - t).abs());
            }
            if idx > 0 {
                gap = gap.min((anchors[idx - 1] - t).abs());
            }
            if gap == 0.0 {
                return Err(Error::TargetCoincides(t));
            }
            entries.push((t, gap));
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(GapTable { entries })
    }

    /// Removes `newly_observed` from the table and shrinks every remaining
    /// gap to account for the new anchors. Costs O(k·m) for k new anchors
    /// and m remaining targets.
    pub fn update(&self, newly_observed: &[f64]) -> Result<Self> {
        let mut removed = vec![false; self.entries.len()];
        for &t in newly_observed {
            let i = self.position(t).ok_or(Error::UnknownTarget(t))?;
            removed[i] = true;
        }
        let entries = self
            .entries
            .iter()
            .zip(&removed)
            .filter(|(_, &r)| !r)
            .map(|(&(t, gap), _)| {
                let gap = newly_observed
                    .iter()
                    .fold(gap, |g, &a| g.min((a - t).abs()));
                (t, gap)
            })
            .collect();
        Ok(GapTable { entries })
    }
}

/// Missing gap of every target relative to the observed set.
pub fn compute_gaps(observed: &SeriesSet, targets: &SeriesSet) -> Result<GapTable> {
    if targets.is_empty() {
        return Ok(GapTable {
            entries: Vec::new(),
        });
    }
    GapTable::from_times(&observed.times(), &targets.times())
}

pub fn update_gaps(table: &GapTable, newly_observed: &[f64]) -> Result<GapTable> {
    table.update(newly_observed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_gaps(observed: &[f64], targets: &[f64]) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = targets
            .iter()
            .map(|&t| {
                let mut best = f64::INFINITY;
                for &o in observed {
                    let d = (o - t).abs();
                    if d < best {
                        best = d;
                    }
                }
                (t, best)
            })
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    fn grid_instance(n: usize, observed: &[usize]) -> (SeriesSet, SeriesSet) {
        let obs_t: Vec<f64> = observed.iter().map(|&i| i as f64).collect();
        let tgt_t: Vec<f64> = (0..n)
            .filter(|i| !observed.contains(i))
            .map(|i| i as f64)
            .collect();
        let obs = SeriesSet::from_observations(&obs_t, &vec![vec![0.0]; obs_t.len()]).unwrap();
        let tgt = SeriesSet::targets_at(1, &tgt_t).unwrap();
        (obs, tgt)
    }

    #[test]
    fn gap_of_midpoint() {
        let (obs, _) = grid_instance(34, &[0, 33]);
        let tgt = SeriesSet::targets_at(1, &[17.0]).unwrap();
        let table = compute_gaps(&obs, &tgt).unwrap();
        assert_eq!(table.get(17.0), Some(16.0));
    }

    #[test]
    fn endpoint_grid_max_gap_is_sixteen() {
        let (obs, tgt) = grid_instance(34, &[0, 33]);
        let table = compute_gaps(&obs, &tgt).unwrap();
        assert_eq!(table.len(), 32);
        assert_eq!(table.max_gap(), Some(16.0));
    }

    #[test]
    fn gaps_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let observed: Vec<f64> = (0..rng.random_range(1..30))
                .map(|_| rng.random_range(0.0..200.0))
                .collect();
            let targets: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..200.0)).collect();
            let table = GapTable::from_times(&observed, &targets).unwrap();
            assert_eq!(table.entries(), brute_gaps(&observed, &targets).as_slice());
        }
    }

    #[test]
    fn empty_observed_is_rejected() {
        let err = GapTable::from_times(&[], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::NoAnchors));
        assert_eq!(err.to_string(), "no anchors: at least one observed point is required");
    }

    #[test]
    fn coinciding_target_is_rejected() {
        let err = GapTable::from_times(&[1.0, 5.0], &[5.0]).unwrap_err();
        assert!(matches!(err, Error::TargetCoincides(t) if t == 5.0));
    }

    #[test]
    fn update_removes_last_target() {
        let table = GapTable::from_times(&[0.0, 33.0], &[17.0]).unwrap();
        let next = table.update(&[17.0]).unwrap();
        assert!(next.is_empty());
    }

    #[test]
    fn update_shrinks_neighbour_gap() {
        // Observed at 0 and 31; 15 and 16 sit at gaps 15 and 15.
        let (obs, tgt) = grid_instance(32, &[0, 31]);
        let table = compute_gaps(&obs, &tgt).unwrap();
        assert_eq!(table.get(15.0), Some(15.0));
        let next = table.update(&[16.0]).unwrap();
        assert_eq!(next.get(15.0), Some(15f64.min(1.0)));
    }

    #[test]
    fn update_unknown_time_is_an_error() {
        let table = GapTable::from_times(&[0.0], &[3.0]).unwrap();
        assert!(matches!(table.update(&[4.0]), Err(Error::UnknownTarget(_))));
    }

    #[test]
    fn to_sequence_sorts_by_time() {
        let set = SeriesSet::from_observations(
            &[5.0, 1.0, 3.0],
            &[vec![0.5], vec![0.1], vec![0.3]],
        )
        .unwrap();
        let seq = to_sequence(&set);
        let times: Vec<f64> = seq.iter().map(|p| p.time).collect();
        assert_eq!(times, vec![1.0, 3.0, 5.0]);
        let back = SeriesSet::new(1, seq).unwrap();
        assert_eq!(to_sequence(&back), to_sequence(&set));
        for p in set.points() {
            assert!(back.points().contains(p));
        }
    }

    #[test]
    fn to_sequence_large_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37 + 0.01).collect();
        let mut shuffled = times.clone();
        shuffled.shuffle(&mut rng);
        let values: Vec<Vec<f64>> = shuffled.iter().map(|&t| vec![t.sin()]).collect();
        let set = SeriesSet::from_observations(&shuffled, &values).unwrap();
        let seq = to_sequence(&set);
        for i in 0..seq.len() {
            for j in i + 1..seq.len() {
                assert!(seq[i].time < seq[j].time);
            }
        }
    }

    #[test]
    fn missing_dim_counts() {
        let full = TimedPoint::observation(0.0, vec![0.0; 11]).unwrap();
        assert_eq!(count_missing_dims(&full), 0);
        let missing = TimedPoint::target(1.0, 11).unwrap();
        assert_eq!(count_missing_dims(&missing), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut mask: Vec<bool> = (0..19).map(|_| rng.random_bool(0.5)).collect();
            mask[0] = false;
            let p = TimedPoint::partial(2.0, vec![1.0; 19], mask.clone()).unwrap();
            let mut expected = 0;
            for m in &mask {
                if !*m {
                    expected += 1;
                }
            }
            assert_eq!(count_missing_dims(&p), expected);
        }
    }

    #[test]
    fn point_invariants() {
        assert!(TimedPoint::observation(-1.0, vec![0.0]).is_err());
        assert!(TimedPoint::observation(f64::NAN, vec![0.0]).is_err());
        assert!(TimedPoint::new(1.0, vec![0.0], vec![true], false).is_err());
        assert!(TimedPoint::new(1.0, vec![0.0, 1.0], vec![true, false], true).is_err());
        let p = TimedPoint::partial(1.0, vec![0.3, 0.9], vec![true, false]).unwrap();
        assert_eq!(p.data, vec![0.3, 0.0]);
    }

    #[test]
    fn set_invariants() {
        let a = TimedPoint::observation(1.0, vec![0.0]).unwrap();
        let b = TimedPoint::observation(1.0, vec![2.0]).unwrap();
        assert!(SeriesSet::new(1, vec![a.clone(), b]).is_err());
        let c = TimedPoint::observation(2.0, vec![0.0, 1.0]).unwrap();
        assert!(SeriesSet::new(1, vec![a, c]).is_err());
    }

    proptest! {
        #[test]
        fn incremental_updates_match_recompute(
            seed in any::<u64>(),
            n_obs in 1usize..10,
            n_tgt in 1usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<f64> = (0..n_obs + n_tgt).map(|_| rng.random_range(0.0..100.0)).collect();
            all.sort_by(f64::total_cmp);
            all.dedup();
            all.shuffle(&mut rng);
            let split = n_obs.min(all.len() - 1).max(1);
            let (obs, tgt) = all.split_at(split);
            let mut observed = obs.to_vec();
            let mut pending = tgt.to_vec();
            let mut table = GapTable::from_times(&observed, &pending).unwrap();
            while !pending.is_empty() {
                let k = rng.random_range(1..=pending.len());
                let batch: Vec<f64> = pending.drain(..k).collect();
                table = table.update(&batch).unwrap();
                observed.extend(&batch);
                if pending.is_empty() {
                    prop_assert!(table.is_empty());
                } else {
                    let fresh = GapTable::from_times(&observed, &pending).unwrap();
                    prop_assert_eq!(&table, &fresh);
                    prop_assert!(table.entries().iter().all(|e| e.1 > 0.0));
                }
            }
        }

        #[test]
        fn gaps_ignore_storage_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (obs, tgt) = grid_instance(40, &[0, 7, 19, 39]);
            let mut op = obs.points().to_vec();
            let mut tp = tgt.points().to_vec();
            op.shuffle(&mut rng);
            tp.shuffle(&mut rng);
            let obs2 = SeriesSet::new(1, op).unwrap();
            let tgt2 = SeriesSet::new(1, tp).unwrap();
            prop_assert_eq!(compute_gaps(&obs, &tgt).unwrap(), compute_gaps(&obs2, &tgt2).unwrap());
            prop_assert_eq!(to_sequence(&tgt), to_sequence(&tgt2));
        }
    }
}
