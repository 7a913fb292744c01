//! End-to-end pipeline: peak picking, the localization error metric,
//! configuration, Monte-Carlo misalignment sweeps and heatmap rendering.

pub mod config;
pub mod render;
pub mod sweep;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::spatial::{Grid, Point};


/// Positions of the `k` largest strict local maxima (8-neighbourhood).
///
/// If fewer than `k` strict maxima exist the remaining slots are filled with
/// the largest other cells. Ties are broken by lowest grid index.
pub fn extract_peaks(values: &[f64], grid: &Grid, k: usize) -> Result<Vec<Point>> {
    if values.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for a {}-point grid",
            values.len(),
            grid.len()
        )));
    }
    if k == 0 || k > grid.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot extract {k} peaks from {} cells",
            grid.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidSpectrum("peak extraction needs finite nonnegative values".into()));
    }
    let by_value = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    let (mut maxima, mut rest): (Vec<usize>, Vec<usize>) = (0..grid.len())
        .partition(|&i| grid.neighbours(i).all(|j| values[i] > values[j]));
    maxima.sort_by(by_value);
    rest.sort_by(by_value);
    Ok(maxima
        .into_iter()
        .chain(rest)
        .take(k)
        .map(|i| grid.point(i))
        .collect())
}

/// Mean distance under the minimum-cost perfect matching between estimates
/// and true positions.
pub fn localization_error(estimates: &[Point], truth: &[Point]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} sources",
            estimates.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidParameter("no sources to match".into()));
    }
    let n = truth.len();
    // brute force over assignments; source counts here are tiny
    let best = (0..n)
        .permutations(n)
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| estimates[i].distance(&truth[j]))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{make_grid, Bounds, Resolution};
    use proptest::prelude::*;

    fn grid(n: usize) -> Grid {
        make_grid(Bounds::square(0.5).unwrap(), Resolution::square(n)).unwrap()
    }

    #[test]
    fn single_nonzero_cell() {
        let g = grid(5);
        let mut v = vec![0.0; 25];
        v[13] = 2.0;
        assert_eq!(extract_peaks(&v, &g, 1).unwrap(), vec![g.point(13)]);
    }

    #[test]
    fn two_bumps() {
        let g = grid(20);
        let c1 = g.point(3 * 20 + 4);
        let c2 = g.point(15 * 20 + 14);
        let v: Vec<f64> = g
            .points()
            .iter()
            .map(|p| 3.0 * (-p.distance_squared(&c1) / 0.01).exp() + 2.0 * (-p.distance_squared(&c2) / 0.02).exp())
            .collect();
        assert_eq!(extract_peaks(&v, &g, 2).unwrap(), vec![c1, c2]);
    }

    #[test]
    fn constant_spectrum_picks_index_zero() {
        let g = grid(4);
        assert_eq!(extract_peaks(&[1.0; 16], &g, 1).unwrap(), vec![g.point(0)]);
        assert_eq!(extract_peaks(&[1.0; 16], &g, 2).unwrap(), vec![g.point(0), g.point(1)]);
    }

    #[test]
    fn fills_when_short_of_maxima() {
        let g = grid(3);
        let mut v = vec![0.0; 9];
        v[4] = 5.0;
        v[0] = 1.0;
        let peaks = extract_peaks(&v, &g, 2).unwrap();
        assert_eq!(peaks, vec![g.point(4), g.point(0)]);
    }

    #[test]
    fn peak_errors() {
        let g = grid(2);
        assert!(extract_peaks(&[0.0; 4], &g, 5).is_err());
        assert!(extract_peaks(&[0.0; 4], &g, 0).is_err());
        assert!(extract_peaks(&[0.0; 3], &g, 1).is_err());
        assert!(extract_peaks(&[0.0, -1.0, 0.0, 0.0], &g, 1).is_err());
    }

    #[test]
    fn error_examples() {
        let a = Point::new(0.0, 0.0);
        let b = Point::new(1.0, 0.0);
        assert_eq!(localization_error(&[a, b], &[a, b]).unwrap(), 0.0);
        assert!((localization_error(&[Point::new(0.3, 0.4)], &[a]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(localization_error(&[b, a], &[a, b]).unwrap(), 0.0);
        assert!(localization_error(&[a], &[a, b]).is_err());
    }

    fn pt() -> impl Strategy<Value = Point> {
        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y)| Point::new(x, y))
    }

    proptest! {
        #[test]
        fn error_symmetric_and_permutation_invariant(a in prop::collection::vec(pt(), 3), b in prop::collection::vec(pt(), 3)) {
            let e1 = localization_error(&a, &b).unwrap();
            let e2 = localization_error(&b, &a).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-12);
            let rev: Vec<Point> = a.iter().rev().copied().collect();
            prop_assert!((localization_error(&rev, &b).unwrap() - e1).abs() < 1e-12);
            prop_assert!(e1 >= 0.0);
            prop_assert_eq!(localization_error(&a, &a).unwrap(), 0.0);
        }
    }
}
