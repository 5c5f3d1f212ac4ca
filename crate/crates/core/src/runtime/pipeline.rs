use serde::{Deserialize, Serialize};

/// Durations of the four stages of one layer on one device, in seconds.
/// `load` and `pred` are the costs of preparing this layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStages {
    pub comp: f64,
    pub load: f64,
    pub pred: f64,
    pub comm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Overlap {
    pub load_comp: bool,
    pub pred_comm: bool,
}

impl Overlap {
    pub const BOTH: Overlap = Overlap {
        load_comp: true,
        pred_comm: true,
    };
    pub const NONE: Overlap = Overlap {
        load_comp: false,
        pred_comm: false,
    };
}

impl Default for Overlap {
    fn default() -> Self {
        Self::BOTH
    }
}

/// Worker threads per stage family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lanes {
    /// Shared by Comp and Pred.
    pub compute: usize,
    /// Shared by Load and Comm.
    pub io: usize,
}

impl Default for Lanes {
    fn default() -> Self {
        Self { compute: 3, io: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Comp,
    Comm,
    Load,
    Pred,
}

impl Stage {
    fn on_compute_lane(self) -> bool {
        matches!(self, Stage::Comp | Stage::Pred)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSpan {
    pub layer: usize,
    pub stage: Stage,
    pub lane: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub spans: Vec<StageSpan>,
    pub total: f64,
}

struct LanePool {
    free: Vec<f64>,
}

impl LanePool {
    fn new(n: usize) -> Self {
        Self {
            free: vec![0.0; n.max(1)],
        }
    }

    /// Earliest-free lane, lowest index on ties.
    fn run(&mut self, ready: f64, duration: f64) -> (usize, f64, f64) {
        let lane = (0..self.free.len())
            .min_by(|&a, &b| self.free[a].total_cmp(&self.free[b]))
            .unwrap();
        let start = ready.max(self.free[lane]);
        self.free[lane] = start + duration;
        (lane, start, start + duration)
    }
}

/// Steady-state timeline of one decoding step.
///
/// Each layer `l` runs in phases separated by barriers. Preparation of the
/// next layer (`Load` and `Pred` of `l + 1`, wrapping to the next token's
/// first layer) either shares a phase with `Comp_l` / `Comm_l` or runs in
/// its own phase when the matching overlap is disabled. With both overlaps
/// and default lanes a layer takes
/// `max(Comp_l, Load_{l+1}) + max(Comm_l, Pred_{l+1})`.
pub fn pipeline_schedule(layers: &[LayerStages], overlap: Overlap, lanes: Lanes) -> Timeline {
    let n = layers.len();
    let mut compute = LanePool::new(lanes.compute);
    let mut io = LanePool::new(lanes.io);
    let mut spans = Vec::with_capacity(4 * n);
    let mut t = 0.0;
    for l in 0..n {
        let next = (l + 1) % n;
        let comp = (l, Stage::Comp, layers[l].comp);
        let load = (next, Stage::Load, layers[next].load);
        let comm = (l, Stage::Comm, layers[l].comm);
        let pred = (next, Stage::Pred, layers[next].pred);
        let mut phases: Vec<Vec<(usize, Stage, f64)>> = Vec::new();
        if overlap.load_comp {
            phases.push(vec![comp, load]);
        } else {
            phases.push(vec![comp]);
            phases.push(vec![load]);
        }
        if overlap.pred_comm {
            phases.push(vec![comm, pred]);
        } else {
            phases.push(vec![comm]);
            phases.push(vec![pred]);
        }
        for phase in phases {
            let mut end = t;
            for (layer, stage, d) in phase {
                let pool = if stage.on_compute_lane() {
                    &mut compute
                } else {
                    &mut io
                };
                let (lane, start, stop) = pool.run(t, d);
                end = f64::max(end, stop);
                spans.push(StageSpan {
                    layer,
                    stage,
                    lane,
                    start,
                    end: stop,
                });
            }
            t = end;
        }
    }
    Timeline { spans, total: t }
}
