use super::cost::{comm_term, CostModel, Workload};
use super::DeviceProfile;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IlpSolution {
    pub workload: Workload,
    pub latency: f64,
}

const MAX_DEVICES: usize = 4;
const MAX_GROUPS: usize = 8;
const MAX_LAYERS: usize = 2;

/// All ways to split `total` units over `n` devices.
fn compositions(total: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in 0..=left {
            cur.push(v);
            rec(left - v, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, n, &mut Vec::with_capacity(n), &mut out);
    out
}

struct Term {
    layer: usize,
    kind: usize,
    mem: f64,
    // (term value, composition), ascending by value
    options: Vec<(f64, Vec<usize>)>,
}

struct Search<'a> {
    profiles: &'a [DeviceProfile],
    cost: &'a CostModel,
    terms: Vec<Term>,
    // suffix sums of each term's cheapest option
    lower: Vec<f64>,
    chosen: Vec<usize>,
    mem_used: Vec<f64>,
    best: Option<(f64, Vec<usize>)>,
}

impl Search<'_> {
    fn run(&mut self, t: usize, partial: f64) {
        if t == self.terms.len() {
            let n = self.profiles.len();
            let active = (0..n)
                .filter(|&i| {
                    self.chosen
                        .iter()
                        .enumerate()
                        .any(|(ti, &o)| self.terms[ti].options[o].1[i] > 0)
                })
                .count();
            let total = partial + comm_term(self.cost.num_layers, active, self.cost.sync_seconds);
            if self.best.as_ref().map_or(true, |(b, _)| total < *b) {
                self.best = Some((total, self.chosen.clone()));
            }
            return;
        }
        for o in 0..self.terms[t].options.len() {
            let value = self.terms[t].options[o].0;
            if let Some((b, _)) = &self.best {
                if partial + value + self.lower[t + 1] >= *b {
                    break;
                }
            }
            let mem = self.terms[t].mem;
            let fits = self.terms[t].options[o]
                .1
                .iter()
                .enumerate()
                .all(|(i, &w)| self.mem_used[i] + w as f64 * mem <= self.profiles[i].memory_mb * (1.0 + 1e-9));
            if !fits {
                continue;
            }
            for (i, &w) in self.terms[t].options[o].1.iter().enumerate() {
                self.mem_used[i] += w as f64 * mem;
            }
            self.chosen.push(o);
            self.run(t + 1, partial + value);
            self.chosen.pop();
            for (i, &w) in self.terms[t].options[o].1.iter().enumerate() {
                self.mem_used[i] -= w as f64 * mem;
            }
        }
    }
}

/// Exact minimiser of the latency model over all integer workloads that
/// partition every block and fit every memory budget. Branch and bound over
/// per-block compositions; small instances only.
pub fn brute_force_ilp(profiles: &[DeviceProfile], cost: &CostModel) -> Result<IlpSolution> {
    let n = profiles.len();
    if n == 0
        || n > MAX_DEVICES
        || cost.num_heads > MAX_GROUPS
        || cost.mlp_groups > MAX_GROUPS
        || cost.num_layers > MAX_LAYERS
    {
        return Err(Error::InstanceTooLarge(format!(
            "n={n}, N_h={}, N_g={}, L={}",
            cost.num_heads, cost.mlp_groups, cost.num_layers
        )));
    }
    let mut terms = Vec::new();
    for layer in 0..cost.num_layers {
        for (kind, (count, tau, mem)) in [
            (cost.num_heads, cost.tau_h, cost.mem_h),
            (cost.mlp_groups, cost.tau_g, cost.mem_g),
        ]
        .into_iter()
        .enumerate()
        {
            let mut options: Vec<(f64, Vec<usize>)> = compositions(count, n)
                .into_iter()
                .map(|w| {
                    let v = w
                        .iter()
                        .zip(profiles)
                        .map(|(&x, p)| tau * x as f64 / p.compute)
                        .fold(0.0, f64::max);
                    (v, w)
                })
                .collect();
            options.sort_by(|a, b| a.0.total_cmp(&b.0));
            terms.push(Term {
                layer,
                kind,
                mem,
                options,
            });
        }
    }
    let mut lower = vec![0.0; terms.len() + 1];
    for t in (0..terms.len()).rev() {
        lower[t] = lower[t + 1] + terms[t].options[0].0;
    }
    let mut search = Search {
        profiles,
        cost,
        terms,
        lower,
        chosen: Vec::new(),
        mem_used: vec![0.0; n],
        best: None,
    };
    search.run(0, 0.0);
    let (latency, chosen) = search
        .best
        .ok_or_else(|| Error::Infeasible("no workload fits the memory budgets".into()))?;
    let mut layers = vec![vec![[0usize; 2]; n]; cost.num_layers];
    for (term, &o) in search.terms.iter().zip(&chosen) {
        for (i, &w) in term.options[o].1.iter().enumerate() {
            layers[term.layer][i][term.kind] = w;
        }
    }
    Ok(IlpSolution {
        workload: Workload { layers },
        latency,
    })
}
