use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scheduler::DeviceProfile;
use crate::{Error, Result};

/// Grid and constraints for random device sets.
///
/// Compute values are clock frequencies in GHz and are used directly as
/// work units per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub num_devices: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    pub freq_step: f64,
    pub mem_min: f64,
    pub mem_max: f64,
    pub mem_step: f64,
    /// Memory the whole model needs; the set must hold at least this much.
    pub total_memory_mb: f64,
    /// Required mean compute.
    pub mean_compute: f64,
    /// All devices at `freq_max` with equal memory.
    pub homogeneous: bool,
    pub max_attempts: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            num_devices: 4,
            freq_min: 0.6,
            freq_max: 1.8,
            freq_step: 0.1,
            mem_min: 300.0,
            mem_max: 6300.0,
            mem_step: 200.0,
            total_memory_mb: 6000.0,
            mean_compute: 1.2,
            homogeneous: false,
            max_attempts: 100_000,
        }
    }
}

/// Number of grid steps from `lo` to `x`, if `x` lies on the grid.
fn grid_index(lo: f64, step: f64, x: f64) -> Option<usize> {
    let k = (x - lo) / step;
    let r = k.round();
    ((k - r).abs() < 1e-6 && r >= 0.0).then_some(r as usize)
}

impl ScenarioParams {
    fn freq_levels(&self) -> usize {
        grid_index(self.freq_min, self.freq_step, self.freq_max).map_or(0, |k| k + 1)
    }

    fn mem_levels(&self) -> usize {
        grid_index(self.mem_min, self.mem_step, self.mem_max).map_or(0, |k| k + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.freq_min,
            self.freq_step,
            self.mem_min,
            self.mem_step,
            self.total_memory_mb,
            self.mean_compute,
        ];
        if self.num_devices == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(format!("invalid scenario parameters {self:?}")));
        }
        if self.freq_levels() == 0 || self.mem_levels() == 0 {
            return Err(Error::Config("range bounds must lie on the step grid".into()));
        }
        Ok(())
    }

    fn check_satisfiable(&self) -> Result<usize> {
        self.validate()?;
        let n = self.num_devices;
        if self.homogeneous {
            return if self.mem_max * (n as f64) >= self.total_memory_mb {
                Ok(0)
            } else {
                Err(Error::Unsatisfiable(format!(
                    "{n} devices of at most {} MB cannot hold {} MB",
                    self.mem_max, self.total_memory_mb
                )))
            };
        }
        let target = (self.mean_compute - self.freq_min) * n as f64 / self.freq_step;
        let r = target.round();
        if (target - r).abs() > 1e-6 || r < 0.0 || r as usize > n * (self.freq_levels() - 1) {
            return Err(Error::Unsatisfiable(format!(
                "mean compute {} is not reachable on the frequency grid",
                self.mean_compute
            )));
        }
        if self.mem_max * (n as f64) < self.total_memory_mb {
            return Err(Error::Unsatisfiable(format!(
                "{n} devices of at most {} MB cannot hold {} MB",
                self.mem_max, self.total_memory_mb
            )));
        }
        Ok(r as usize)
    }
}

/// Rejection-sample `count` device sets on the configured grid.
pub fn generate_scenarios(
    params: &ScenarioParams,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<DeviceProfile>>> {
    let freq_sum = params.check_satisfiable()?;
    let n = params.num_devices;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if params.homogeneous {
            let share = params.total_memory_mb / n as f64;
            let k = ((share - params.mem_min) / params.mem_step).ceil().max(0.0);
            let mem = (params.mem_min + k * params.mem_step).min(params.mem_max);
            out.push(
                (0..n)
                    .map(|i| DeviceProfile::new(i, mem, params.freq_max, 0.0))
                    .collect(),
            );
            continue;
        }
        let freqs = sample_until(&mut rng, params.max_attempts, n, params.freq_levels(), |ks| {
            ks.iter().sum::<usize>() == freq_sum
        })?;
        let mems = sample_until(&mut rng, params.max_attempts, n, params.mem_levels(), |ks| {
            let total: f64 = ks.iter().map(|&k| params.mem_min + k as f64 * params.mem_step).sum();
            total >= params.total_memory_mb
        })?;
        out.push(
            freqs
                .iter()
                .zip(&mems)
                .enumerate()
                .map(|(i, (&f, &m))| {
                    DeviceProfile::new(
                        i,
                        params.mem_min + m as f64 * params.mem_step,
                        params.freq_min + f as f64 * params.freq_step,
                        0.0,
                    )
                })
                .collect(),
        );
    }
    Ok(out)
}

fn sample_until(
    rng: &mut ChaCha8Rng,
    attempts: usize,
    n: usize,
    levels: usize,
    accept: impl Fn(&[usize]) -> bool,
) -> Result<Vec<usize>> {
    for _ in 0..attempts {
        let ks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..levels)).collect();
        if accept(&ks) {
            return Ok(ks);
        }
    }
    Err(Error::Unsatisfiable(format!(
        "no scenario found in {attempts} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heterogeneous_sets_meet_both_constraints() {
        for n in [4, 6, 8] {
            let p = ScenarioParams {
                num_devices: n,
                ..Default::default()
            };
            for set in generate_scenarios(&p, 20, 3).unwrap() {
                let mean: f64 = set.iter().map(|d| d.compute).sum::<f64>() / n as f64;
                let mem: f64 = set.iter().map(|d| d.memory_mb).sum();
                assert!((mean - 1.2).abs() < 1e-9);
                assert!(mem >= p.total_memory_mb);
                assert!(set.iter().all(|d| (0.6 - 1e-9..=1.8 + 1e-9).contains(&d.compute)));
            }
        }
    }

    #[test]
    fn homogeneous_sets_are_identical_devices() {
        let p = ScenarioParams {
            homogeneous: true,
            ..Default::default()
        };
        let sets = generate_scenarios(&p, 2, 0).unwrap();
        for d in &sets[0] {
            assert_eq!(d.compute, 1.8);
            assert_eq!(d.memory_mb, 1500.0);
        }
    }

    #[test]
    fn zero_count_is_empty_and_seeds_repeat() {
        let p = ScenarioParams::default();
        assert!(generate_scenarios(&p, 0, 1).unwrap().is_empty());
        assert_eq!(generate_scenarios(&p, 5, 9).unwrap(), generate_scenarios(&p, 5, 9).unwrap());
    }

    #[test]
    fn unreachable_constraints_fail() {
        let p = ScenarioParams {
            num_devices: 3,
            mean_compute: 1.25,
            ..Default::default()
        };
        assert!(matches!(generate_scenarios(&p, 1, 0), Err(Error::Unsatisfiable(_))));
        let p = ScenarioParams {
            total_memory_mb: 1e6,
            ..Default::default()
        };
        assert!(matches!(generate_scenarios(&p, 1, 0), Err(Error::Unsatisfiable(_))));
    }
}
