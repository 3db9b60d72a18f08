//! Linear interpolation between the nearest observations on either side,
//! holding the nearest value beyond the ends.

use crate::error::{Error, Result};
use crate::series::{to_sequence, SeriesSet};

pub fn linear_interpolate(observed: &SeriesSet, targets: &[f64]) -> Result<Vec<Vec<f64>>> {
    let obs = to_sequence(observed);
    if obs.is_empty() {
        return Err(Error::NoAnchors);
    }
    let times: Vec<f64> = obs.iter().map(|p| p.time).collect();
    Ok(targets
        .iter()
        .map(|&t| {
            let right = times.partition_point(|&o| o < t);
            if right == 0 {
                obs[0].data.clone()
            } else if right == obs.len() {
                obs[obs.len() - 1].data.clone()
            } else {
                let (a, b) = (&obs[right - 1], &obs[right]);
                let w = (t - a.time) / (b.time - a.time);
                a.data.iter().zip(&b.data).map(|(x, y)| x + w * (y - x)).collect()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_and_holds_ends() {
        let obs = SeriesSet::from_observations(&[4.0, 0.0, 2.0], &[vec![0.0, 8.0], vec![1.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let got = linear_interpolate(&obs, &[1.0, 3.0, 5.0, 2.0]).unwrap();
        assert_eq!(got, vec![vec![2.0, 2.0], vec![1.5, 6.0], vec![0.0, 8.0], vec![3.0, 4.0]]);
        let single = SeriesSet::from_observations(&[3.0], &[vec![7.0]]).unwrap();
        assert_eq!(linear_interpolate(&single, &[0.0, 9.0]).unwrap(), vec![vec![7.0], vec![7.0]]);
        assert!(linear_interpolate(&SeriesSet::empty(1).unwrap(), &[1.0]).is_err());
    }

    #[test]
    fn exact_on_lines() {
        let ts = [0.0, 3.5, 9.0];
        let vals: Vec<Vec<f64>> = ts.iter().map(|t| vec![2.0 * t - 1.0]).collect();
        let obs = SeriesSet::from_observations(&ts, &vals).unwrap();
        for (t, v) in [1.0, 4.2, 8.9].iter().zip(linear_interpolate(&obs, &[1.0, 4.2, 8.9]).unwrap()) {
            assert!((v[0] - (2.0 * t - 1.0)).abs() < 1e-12);
        }
    }
}
