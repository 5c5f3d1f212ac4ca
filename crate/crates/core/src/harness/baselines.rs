use crate::scheduler::{DeviceProfile, Ratios};
use crate::{Error, Result};

/// Allocate in proportion to compute, then move the excess of every
/// over-allocated device onto the others in proportion to
/// `compute * spare memory`, until every device fits.
pub fn baseline_galaxy_two_step(profiles: &[DeviceProfile], total_mb: f64) -> Result<Ratios> {
    let available: f64 = profiles.iter().map(|p| p.memory_mb).sum();
    if profiles.is_empty() || available < total_mb {
        return Err(Error::InsufficientMemory {
            available,
            required: total_mb,
        });
    }
    let c_sum: f64 = profiles.iter().map(|p| p.compute).sum();
    let mut alloc: Vec<f64> = profiles.iter().map(|p| total_mb * p.compute / c_sum).collect();
    let mut clamped = vec![false; profiles.len()];
    // every pass with excess clamps at least one more device
    for _ in 0..profiles.len() + 2 {
        let mut excess = 0.0;
        for (i, p) in profiles.iter().enumerate() {
            if alloc[i] > p.memory_mb {
                excess += alloc[i] - p.memory_mb;
                alloc[i] = p.memory_mb;
                clamped[i] = true;
            }
        }
        if excess <= total_mb * 1e-12 {
            return Ratios::from_weights(&alloc);
        }
        let weights: Vec<f64> = profiles
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if clamped[i] {
                    0.0
                } else {
                    p.compute * (p.memory_mb - alloc[i]).max(0.0)
                }
            })
            .collect();
        let w_sum: f64 = weights.iter().sum();
        if !(w_sum > 0.0) {
            return Err(Error::InsufficientMemory {
                available,
                required: total_mb,
            });
        }
        for (a, w) in alloc.iter_mut().zip(&weights) {
            *a += excess * w / w_sum;
        }
    }
    Err(Error::Infeasible("two-step redistribution did not converge".into()))
}

/// Even split with no memory check; an undersized device fails later with
/// an out-of-memory error.
pub fn baseline_vanilla_even(n: usize) -> Ratios {
    Ratios::even(n)
}
