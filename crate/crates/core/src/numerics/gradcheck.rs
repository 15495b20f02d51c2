use rand::seq::index::sample;

use super::{derive_rng, Tensor};

/// Denominator floor that keeps near-zero gradients from dominating the ratio.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// When `sample` is `Some((count, seed))` and the parameters hold more than
/// `count` coordinates, a seeded random subset of `count` coordinates is checked.
pub fn finite_diff_check(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
    sample_coords: Option<(usize, u64)>,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> GradCheckReport {
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    if let Some((count, seed)) = sample_coords {
        if coords.len() > count {
            let mut rng = derive_rng(seed, "finite_diff_check");
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), count).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + eps;
        let up = f(&work);
        work[t].data_mut()[i] = orig - eps;
        let down = f(&work);
        work[t].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[t].data()[i], numeric);
        if report.checked == 0 || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (t, i);
        }
        report.checked += 1;
    }
    report
}
