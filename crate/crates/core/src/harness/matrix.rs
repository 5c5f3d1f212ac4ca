use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    baseline_galaxy_two_step, baseline_vanilla_even, generate_scenarios, BaselineSelector,
    ExperimentConfig, SchedulerKind,
};
use crate::model::{init_model, ModelSpec, WeightStore};
use crate::runtime::{
    generate, Generation, MappingMode, Overlap, RuntimeConfig, SyncMode, MASTER,
};
use crate::sap::{collect_calibration, synthetic_prompts, train, PredictorParams};
use crate::scheduler::{
    comp_greedy, fit_counts_to_memory, min_max, plr_map_counts, CostModel, DeviceProfile,
    GroupDims, KindCounts, Schedule,
};
use crate::Result;

/// One point of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Loss rate of every non-master device; `None` keeps the profiles'.
    pub plr: Option<f64>,
    pub sync: SyncMode,
    pub mapping: MappingMode,
    pub scheduler: SchedulerKind,
    pub overlap: Overlap,
}

impl Cell {
    fn rebased(&self, b: &BaselineSelector) -> Cell {
        Cell {
            plr: self.plr,
            sync: b.sync.unwrap_or(self.sync),
            mapping: b.mapping.unwrap_or(self.mapping),
            scheduler: b.scheduler.unwrap_or(self.scheduler),
            overlap: b.overlap.unwrap_or(self.overlap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub cell: Cell,
    pub seed: u64,
    /// Index into the generated scenario sets, if any.
    pub scenario: Option<usize>,
    pub num_devices: usize,
    pub mean_tpt: Option<f64>,
    pub mean_deviation: Option<f64>,
    pub max_relative_error: Option<f64>,
    pub missing_groups: usize,
    pub messages: usize,
    pub tokens: Vec<u32>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub cell: Cell,
    pub runs: usize,
    pub errors: usize,
    pub mean_tpt: Option<f64>,
    /// Baseline mean TPT over this cell's.
    pub speedup: Option<f64>,
    pub mean_deviation: Option<f64>,
    pub max_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

impl Report {
    pub fn write_records(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        write_summary_csv(&self.summary, w)
    }

    /// `records.jsonl` and `summary.csv` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_records(std::io::BufWriter::new(std::fs::File::create(
            dir.join("records.jsonl"),
        )?))?;
        self.write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?)
    }
}

pub fn read_records(text: &str) -> Result<Vec<RunRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| crate::Error::Format(format!("record: {e}")))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn write_summary_csv(rows: &[SummaryRow], mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "config_hash,plr,sync,mapping,scheduler,load_comp,pred_comm,runs,errors,mean_tpt,speedup,mean_deviation,max_deviation"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            opt(r.cell.plr),
            name(&r.cell.sync),
            name(&r.cell.mapping),
            name(&r.cell.scheduler),
            r.cell.overlap.load_comp,
            r.cell.overlap.pred_comm,
            r.runs,
            r.errors,
            opt(r.mean_tpt),
            opt(r.speedup),
            opt(r.mean_deviation),
            opt(r.max_deviation),
        )?;
    }
    Ok(())
}

/// Aggregate records per cell, in order of first appearance.
pub fn summarize(records: &[RunRecord], baseline: Option<&BaselineSelector>) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut sums: Vec<(f64, usize, f64)> = Vec::new();
    for r in records {
        let idx = match rows.iter().position(|row| row.cell == r.cell) {
            Some(i) => i,
            None => {
                rows.push(SummaryRow {
                    config_hash: r.config_hash.clone(),
                    cell: r.cell,
                    runs: 0,
                    errors: 0,
                    mean_tpt: None,
                    speedup: None,
                    mean_deviation: None,
                    max_deviation: None,
                });
                sums.push((0.0, 0, 0.0));
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        row.runs += 1;
        match (r.error.as_ref(), r.mean_tpt, r.mean_deviation) {
            (None, Some(tpt), Some(dev)) => {
                let s = &mut sums[idx];
                s.0 += tpt;
                s.1 += 1;
                s.2 += dev;
                row.max_deviation = Some(row.max_deviation.map_or(dev, |m: f64| m.max(dev)));
            }
            _ => row.errors += 1,
        }
    }
    for (row, s) in rows.iter_mut().zip(&sums) {
        if s.1 > 0 {
            row.mean_tpt = Some(s.0 / s.1 as f64);
            row.mean_deviation = Some(s.2 / s.1 as f64);
        }
    }
    if let Some(b) = baseline {
        let base: Vec<Option<f64>> = rows
            .iter()
            .map(|row| {
                let target = row.cell.rebased(b);
                rows.iter().find(|o| o.cell == target).and_then(|o| o.mean_tpt)
            })
            .collect();
        for (row, base) in rows.iter_mut().zip(base) {
            row.speedup = match (base, row.mean_tpt) {
                (Some(b), Some(t)) if t > 0.0 => Some(b / t),
                _ => None,
            };
        }
    }
    rows
}

/// Ratios from `kind`, whole-group counts repaired to fit memory (except for
/// the even split), and priority chunks ordered by loss rate.
pub fn build_schedule(
    kind: SchedulerKind,
    profiles: &[DeviceProfile],
    spec: &ModelSpec,
    cost: &CostModel,
) -> Result<Schedule> {
    let total = cost.total_memory();
    let ratios = match kind {
        SchedulerKind::CompGreedy => comp_greedy(profiles, total)?,
        SchedulerKind::MinMax => min_max(profiles, total, total * 1e-9)?,
        SchedulerKind::VanillaEven => baseline_vanilla_even(profiles.len()),
        SchedulerKind::GalaxyTwoStep => baseline_galaxy_two_step(profiles, total)?,
    };
    let dims = GroupDims::from(spec);
    let mut counts = KindCounts::from_ratios(ratios.as_slice(), &dims);
    if kind != SchedulerKind::VanillaEven {
        counts = fit_counts_to_memory(counts, profiles, cost)?;
    }
    let plrs: Vec<f64> = profiles.iter().map(|p| p.plr).collect();
    plr_map_counts(&dims, &ratios, &counts, &plrs)
}

/// Model, predictors and device sets shared by every run of a config.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub store: WeightStore,
    pub predictors: Option<PredictorParams>,
    /// `(scenario index, devices)`; a single unindexed set for fixed devices.
    pub device_sets: Vec<(Option<usize>, Vec<DeviceProfile>)>,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let store = match &config.model_path {
            Some(p) => WeightStore::load(p)?,
            None => init_model(config.model)?,
        };
        let wants_pred = config.mapping == MappingMode::Halo
            || config.matrix.mapping.contains(&MappingMode::Halo);
        let predictors = match (&config.predictor_path, config.sap) {
            _ if !wants_pred => None,
            (Some(p), _) => Some(PredictorParams::load(p)?),
            (None, Some(sap)) => {
                let prompts = synthetic_prompts(store.spec(), sap.prompts, sap.prompt_len, sap.seed);
                let set = collect_calibration(&store, &prompts)?;
                Some(train(&set, &sap.train)?.0)
            }
            (None, None) => None,
        };
        let device_sets = match &config.scenario {
            Some(s) => generate_scenarios(&s.params, s.count, s.seed)?
                .into_iter()
                .enumerate()
                .map(|(i, d)| (Some(i), d))
                .collect(),
            None => vec![(None, config.devices.clone())],
        };
        Ok(Self {
            config_hash: config.hash(),
            config: config.clone(),
            store,
            predictors,
            device_sets,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.store.spec()
    }

    pub fn cost(&self) -> CostModel {
        CostModel::from_spec(self.spec(), self.config.effective_cost_scale(self.spec()))
    }

    pub fn cells(&self) -> Vec<Cell> {
        fn axis<T: Copy>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let c = &self.config;
        let m = &c.matrix;
        let plrs: Vec<Option<f64>> = if m.plr.is_empty() {
            vec![None]
        } else {
            m.plr.iter().map(|&p| Some(p)).collect()
        };
        let mut cells = Vec::new();
        for &plr in &plrs {
            for sync in axis(&m.sync, c.sync) {
                for mapping in axis(&m.mapping, c.mapping) {
                    for scheduler in axis(&m.scheduler, c.scheduler) {
                        for overlap in axis(&m.overlap, c.overlap) {
                            cells.push(Cell {
                                plr,
                                sync,
                                mapping,
                                scheduler,
                                overlap,
                            });
                        }
                    }
                }
            }
        }
        cells
    }

    pub fn prompt(&self, seed: u64) -> Vec<u32> {
        if self.config.prompt.is_empty() {
            synthetic_prompts(self.spec(), 1, self.config.prompt_len, seed).remove(0)
        } else {
            self.config.prompt.clone()
        }
    }

    pub fn runtime_config(&self, cell: &Cell, seed: u64) -> RuntimeConfig {
        let c = &self.config;
        RuntimeConfig {
            sync: cell.sync,
            mapping: cell.mapping,
            overlap: cell.overlap,
            timing: c.effective_timing(self.spec()),
            cost_scale: c.effective_cost_scale(self.spec()),
            channel: c.channel,
            policy: c.policy,
            seed,
            ..Default::default()
        }
    }

    /// Schedule and generate once.
    pub fn run(&self, cell: &Cell, devices: &[DeviceProfile], seed: u64) -> Result<Generation> {
        let mut devices = devices.to_vec();
        if let Some(p) = cell.plr {
            for (i, d) in devices.iter_mut().enumerate() {
                d.plr = if i == MASTER { 0.0 } else { p };
            }
        }
        let schedule = build_schedule(cell.scheduler, &devices, self.spec(), &self.cost())?;
        let cfg = self.runtime_config(cell, seed);
        generate(
            &self.store,
            &schedule,
            &devices,
            self.predictors.as_ref(),
            &cfg,
            &self.prompt(seed),
            self.config.num_tokens,
        )
    }

    fn record(&self, cell: Cell, scenario: Option<usize>, devices: &[DeviceProfile], seed: u64) -> RunRecord {
        let mut rec = RunRecord {
            config_hash: self.config_hash.clone(),
            cell,
            seed,
            scenario,
            num_devices: devices.len(),
            mean_tpt: None,
            mean_deviation: None,
            max_relative_error: None,
            missing_groups: 0,
            messages: 0,
            tokens: Vec::new(),
            error: None,
        };
        match self.run(&cell, devices, seed) {
            Ok(g) => {
                rec.mean_tpt = Some(g.metrics.mean_tpt());
                rec.mean_deviation = Some(g.metrics.mean_deviation());
                rec.max_relative_error = Some(g.metrics.max_relative_error());
                rec.missing_groups = g.metrics.total_missing();
                rec.messages = g.messages;
                rec.tokens = g.tokens;
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    }

    /// Every (cell, device set, seed) run, in that nesting order. Runs are
    /// spread over worker threads; the output order does not depend on it.
    pub fn run_all(&self) -> Report {
        let mut jobs = Vec::new();
        for cell in self.cells() {
            for (scenario, devices) in &self.device_sets {
                for &seed in &self.config.seeds {
                    jobs.push((cell, *scenario, devices, seed));
                }
            }
        }
        let threads = match self.config.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            t => t,
        }
        .min(jobs.len().max(1));
        let next = AtomicUsize::new(0);
        let out: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; jobs.len()]);
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(cell, scenario, devices, seed)) = jobs.get(i) else {
                        break;
                    };
                    let rec = self.record(cell, scenario, devices, seed);
                    out.lock().expect("no worker panicked")[i] = Some(rec);
                });
            }
        });
        let records: Vec<RunRecord> = out
            .into_inner()
            .expect("no worker panicked")
            .into_iter()
            .map(|r| r.expect("every job ran"))
            .collect();
        let summary = summarize(&records, self.config.matrix.baseline.as_ref());
        Report {
            config_hash: self.config_hash.clone(),
            records,
            summary,
        }
    }
}

/// Prepare `config` and run its whole matrix. Individual run failures are
/// recorded and do not stop the matrix.
pub fn run_matrix(config: &ExperimentConfig) -> Result<Report> {
    Ok(Prepared::new(config)?.run_all())
}
