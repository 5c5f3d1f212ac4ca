use super::mapping::KindCounts;
use super::{check_total_memory, CostModel, DeviceProfile, Ratios, Workload};
use crate::model::BlockKind;
use crate::{Error, Result};

/// Fill the fastest devices' memory first, using as few devices as possible.
pub fn comp_greedy(profiles: &[DeviceProfile], total_mb: f64) -> Result<Ratios> {
    check_total_memory(profiles, total_mb)?;
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&a, &b| profiles[b].compute.total_cmp(&profiles[a].compute).then(a.cmp(&b)));
    let mut used = vec![0.0; profiles.len()];
    let mut remaining = total_mb;
    for i in order {
        if remaining <= 0.0 {
            break;
        }
        let take = profiles[i].memory_mb.min(remaining);
        used[i] = take;
        remaining -= take;
    }
    Ratios::from_weights(&used)
}

/// Binary search for the smallest utilisation threshold `T` such that
/// `sum_i min(m_i, T c_i) >= M_t`, to within `epsilon`.
pub fn min_max_threshold(profiles: &[DeviceProfile], total_mb: f64, epsilon: f64) -> Result<f64> {
    check_total_memory(profiles, total_mb)?;
    let max_m = profiles.iter().map(|p| p.memory_mb).fold(0.0, f64::max);
    let min_c = profiles
        .iter()
        .map(|p| p.compute)
        .fold(f64::INFINITY, f64::min);
    let (mut left, mut right) = (0.0, max_m / min_c);
    let mut best = right;
    let used = |t: f64| -> f64 { profiles.iter().map(|p| p.memory_mb.min(t * p.compute)).sum() };
    while right - left > epsilon {
        let mid = (left + right) / 2.0;
        if used(mid) >= total_mb {
            best = mid;
            right = mid;
        } else {
            left = mid;
        }
    }
    Ok(best)
}

/// Minimise the maximum per-device compute time: `u_i = min(m_i, T c_i)`.
pub fn min_max(profiles: &[DeviceProfile], total_mb: f64, epsilon: f64) -> Result<Ratios> {
    let t = min_max_threshold(profiles, total_mb, epsilon)?;
    let u: Vec<f64> = profiles
        .iter()
        .map(|p| p.memory_mb.min(t * p.compute))
        .collect();
    Ratios::from_weights(&u)
}

/// Largest-remainder apportionment of `total` units; equal remainders go to
/// the lower device id.
pub fn ratios_to_counts(ratios: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    let rem = |i: usize| quotas[i] - quotas[i].floor();
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn unit_cost(cost: &CostModel, kind: BlockKind) -> (f64, f64) {
    match kind {
        BlockKind::LmHead => (cost.mem_v, cost.tau_v),
        k => {
            let l = cost.num_layers as f64;
            (l * cost.mem(k), l * cost.tau(k))
        }
    }
}

/// Move whole groups (in every layer at once) off devices whose memory
/// budget is exceeded, each time onto the device with room whose compute
/// time grows the least.
pub fn fit_counts_to_memory(
    mut counts: KindCounts,
    profiles: &[DeviceProfile],
    cost: &CostModel,
) -> Result<KindCounts> {
    let n = profiles.len();
    let tol = |i: usize| profiles[i].memory_mb * 1e-9;
    let usage = |c: &KindCounts, i: usize| -> (f64, f64) {
        BlockKind::ALL.iter().fold((0.0, 0.0), |(m, w), &k| {
            let (um, uw) = unit_cost(cost, k);
            let cnt = c.get(k)[i] as f64;
            (m + cnt * um, w + cnt * uw)
        })
    };
    let limit = (cost.num_heads + cost.mlp_groups + cost.vocab_groups) * n + 1;
    for _ in 0..limit {
        let over = (0..n)
            .map(|i| (i, usage(&counts, i).0 - profiles[i].memory_mb))
            .filter(|&(i, excess)| excess > tol(i))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((src, _)) = over else {
            return Ok(counts);
        };
        let mut best: Option<(f64, BlockKind, usize)> = None;
        for kind in [BlockKind::Mlp, BlockKind::Mha, BlockKind::LmHead] {
            if counts.get(kind)[src] == 0 {
                continue;
            }
            let (um, uw) = unit_cost(cost, kind);
            for dst in (0..n).filter(|&j| j != src) {
                let (m, w) = usage(&counts, dst);
                if m + um > profiles[dst].memory_mb + tol(dst) {
                    continue;
                }
                let t = (w + uw) / profiles[dst].compute;
                if best.map_or(true, |(bt, _, _)| t < bt) {
                    best = Some((t, kind, dst));
                }
            }
        }
        let (_, kind, dst) = best.ok_or_else(|| {
            Error::Infeasible(format!("no device can absorb groups from device {src}"))
        })?;
        counts.get_mut(kind)[src] -= 1;
        counts.get_mut(kind)[dst] += 1;
    }
    Err(Error::Infeasible("memory repair did not converge".into()))
}

/// Memory repair followed by straggler relief: per block kind, move single
/// groups off the slowest device while the receiving device finishes
/// strictly earlier than the current straggler and has memory to spare.
pub fn refine_counts(
    counts: KindCounts,
    profiles: &[DeviceProfile],
    cost: &CostModel,
) -> Result<KindCounts> {
    let mut counts = fit_counts_to_memory(counts, profiles, cost)?;
    let n = profiles.len();
    let mem_of = |c: &KindCounts, i: usize| -> f64 {
        BlockKind::ALL
            .iter()
            .map(|&k| c.get(k)[i] as f64 * unit_cost(cost, k).0)
            .sum()
    };
    for kind in [BlockKind::Mha, BlockKind::Mlp, BlockKind::LmHead] {
        let (um, _) = unit_cost(cost, kind);
        let tau = cost.tau(kind);
        let time = |w: usize, i: usize| tau * w as f64 / profiles[i].compute;
        for _ in 0..cost.count(kind) * n + 1 {
            let c = counts.get(kind);
            let (src, t_max) = (0..n)
                .map(|i| (i, time(c[i], i)))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            if c[src] == 0 {
                break;
            }
            let dst = (0..n)
                .filter(|&j| j != src)
                .filter(|&j| mem_of(&counts, j) + um <= profiles[j].memory_mb * (1.0 + 1e-9))
                .map(|j| (j, time(c[j] + 1, j)))
                .filter(|&(_, t)| t < t_max)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let Some((dst, _)) = dst else { break };
            counts.get_mut(kind)[src] -= 1;
            counts.get_mut(kind)[dst] += 1;
        }
    }
    Ok(counts)
}

#[derive(Clone, Copy)]
enum Move {
    Single { l: usize, k: usize, dst: usize },
    Swap { l: usize, k: usize, l2: usize, back: usize, dst: usize },
}

/// Convert ratios to a per-layer integer workload for the latency model.
///
/// Layer `l` receives the cumulative largest-remainder share of
/// `(l + 1) * r_i * N_k` minus what earlier layers took, so rounding errors
/// cancel across layers instead of piling up on one device. Memory overflow
/// is then repaired one group at a time and each block's straggler relieved
/// while a faster finish is available.
pub fn workload_from_ratios(
    ratios: &Ratios,
    profiles: &[DeviceProfile],
    cost: &CostModel,
) -> Result<Workload> {
    let n = profiles.len();
    let r = ratios.as_slice();
    if r.len() != n {
        return Err(Error::LengthMismatch(format!("{} ratios for {n} devices", r.len())));
    }
    let kinds = [(cost.num_heads, cost.tau_h, cost.mem_h), (cost.mlp_groups, cost.tau_g, cost.mem_g)];
    let mut layers = vec![vec![[0usize; 2]; n]; cost.num_layers];
    for (k, &(count, _, _)) in kinds.iter().enumerate() {
        let mut taken = vec![0usize; n];
        for l in 0..cost.num_layers {
            let target: Vec<f64> = r
                .iter()
                .zip(&taken)
                .map(|(ri, &t)| ((l + 1) as f64 * ri * count as f64 - t as f64).max(0.0))
                .collect();
            let total: f64 = target.iter().sum();
            let weights: Vec<f64> = target.iter().map(|t| t / total.max(1e-300)).collect();
            let c = ratios_to_counts(&weights, count);
            for i in 0..n {
                layers[l][i][k] = c[i];
                taken[i] += c[i];
            }
        }
    }
    let mut w = Workload { layers };
    let tol = |i: usize| profiles[i].memory_mb * 1e-9;
    let time = |w: &Workload, l: usize, k: usize, i: usize, extra: usize| {
        kinds[k].1 * (w.layers[l][i][k] + extra) as f64 / profiles[i].compute
    };

    // memory repair
    let limit = cost.num_layers * (cost.num_heads + cost.mlp_groups) * n + 1;
    let mut repaired = false;
    for _ in 0..limit {
        let over = (0..n)
            .map(|i| (i, w.device_memory(i, cost) - profiles[i].memory_mb))
            .filter(|&(i, e)| e > tol(i))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((src, _)) = over else {
            repaired = true;
            break;
        };
        let excess = w.device_memory(src, cost) - profiles[src].memory_mb;
        let fits = |w: &Workload, j: usize, delta: f64| {
            w.device_memory(j, cost) + delta <= profiles[j].memory_mb + tol(j)
        };
        // (unresolved, time, move); single moves first, swaps as fallback
        let mut best: Option<(bool, f64, Move)> = None;
        fn consider(best: &mut Option<(bool, f64, Move)>, cand: (bool, f64, Move)) {
            if best.as_ref().map_or(true, |b| (cand.0, cand.1) < (b.0, b.1)) {
                *best = Some(cand);
            }
        }
        for l in 0..cost.num_layers {
            for k in 0..2 {
                if w.layers[l][src][k] == 0 {
                    continue;
                }
                for dst in (0..n).filter(|&j| j != src) {
                    if fits(&w, dst, kinds[k].2) {
                        let unresolved = kinds[k].2 < excess - tol(src);
                        consider(&mut best, (unresolved, time(&w, l, k, dst, 1), Move::Single { l, k, dst }));
                    }
                }
            }
        }
        if best.is_none() {
            for l in 0..cost.num_layers {
                for (k, back) in [(0, 1), (1, 0)] {
                    if w.layers[l][src][k] == 0 {
                        continue;
                    }
                    let gain = kinds[k].2 - kinds[back].2;
                    if gain <= 0.0 {
                        continue;
                    }
                    for l2 in 0..cost.num_layers {
                        for dst in (0..n).filter(|&j| j != src && w.layers[l2][j][back] > 0) {
                            if fits(&w, dst, gain) {
                                let unresolved = gain < excess - tol(src);
                                let t = time(&w, l, k, dst, 1);
                                consider(&mut best, (unresolved, t, Move::Swap { l, k, l2, back, dst }));
                            }
                        }
                    }
                }
            }
        }
        match best {
            Some((_, _, Move::Single { l, k, dst })) => {
                w.layers[l][src][k] -= 1;
                w.layers[l][dst][k] += 1;
            }
            Some((_, _, Move::Swap { l, k, l2, back, dst })) => {
                w.layers[l][src][k] -= 1;
                w.layers[l][dst][k] += 1;
                w.layers[l2][dst][back] -= 1;
                w.layers[l2][src][back] += 1;
            }
            None => {
                return Err(Error::Infeasible(format!(
                    "no device can absorb groups from device {src}"
                )))
            }
        }
    }
    if !repaired {
        return Err(Error::Infeasible("memory repair did not converge".into()));
    }

    // straggler relief per block
    for l in 0..cost.num_layers {
        for k in 0..2 {
            for _ in 0..kinds[k].0 * n + 1 {
                let (src, t_max) = (0..n)
                    .map(|i| (i, time(&w, l, k, i, 0)))
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                if w.layers[l][src][k] == 0 {
                    break;
                }
                let dst = (0..n)
                    .filter(|&j| j != src)
                    .filter(|&j| w.device_memory(j, cost) + kinds[k].2 <= profiles[j].memory_mb + tol(j))
                    .map(|j| (j, time(&w, l, k, j, 1)))
                    .filter(|&(_, t)| t < t_max)
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let Some((dst, _)) = dst else { break };
                w.layers[l][src][k] -= 1;
                w.layers[l][dst][k] += 1;
            }
        }
    }
    Ok(w)
}
