//! Central finite differences against analytic gradients — the oracle that
//! every piece of training math is held to.

use crate::tensor::Tensor;

/// Worst relative error between `analytic` gradients and central finite
/// differences of `f` over `params`. The denominator is
/// max(|analytic|, |numeric|, 1e-8).
///
/// `max_coords_per_tensor` limits how many coordinates of each tensor are
/// probed (chosen by a seeded pseudo-random sweep); `None` checks every
/// coordinate. `f` must be deterministic.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    max_coords_per_tensor: Option<usize>,
    seed: u64,
) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut rng_state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut next = move || {
        // splitmix64
        rng_state = rng_state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = rng_state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    for pi in 0..params.len() {
        let numel = params[pi].numel();
        let coords: Vec<usize> = match max_coords_per_tensor {
            Some(limit) if limit < numel => {
                (0..limit).map(|_| (next() % numel as u64) as usize).collect()
            }
            _ => (0..numel).collect(),
        };
        for ci in coords {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + step;
            let fp = f(params);
            params[pi].data_mut()[ci] = orig - step;
            let fm = f(params);
            params[pi].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
