//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edgetp::harness::{presets, run_matrix, SchedulerKind, SummaryRow};
use edgetp::model::{
    dense_forward, drop_experiment, init_model, Activation, BlockKind, DropStrategy, ModelSpec,
    RankList, WeightStore,
};
use edgetp::runtime::{
    generate, pipeline_schedule, LayerStages, Lanes, MappingMode, Overlap, RuntimeConfig, SyncMode,
};
use edgetp::sap::{collect_calibration, predict_ranks, synthetic_prompts, train, Regressor, TrainConfig};
use edgetp::scheduler::{
    brute_force_ilp, estimate_latency, min_max, plr_map, workload_from_ratios, CostModel,
    DeviceProfile, GroupDims, Ratios,
};
use edgetp::transport::{
    fragment, ChannelConfig, SimNetwork, TimeoutPolicy, TraceEvent, EVENT_GRANULARITY,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn priority_assignment() -> Outcome {
    let dims = GroupDims {
        num_heads: 8,
        num_kv_heads: 8,
        mlp_groups: 8,
        vocab_groups: 8,
    };
    let ratios = Ratios::new(vec![0.4, 0.4, 0.2]).map_err(|e| e.to_string())?;
    let s = plr_map(&dims, &ratios, &[0.0, 0.5, 0.1]).map_err(|e| e.to_string())?;
    let want: [&[usize]; 3] = [&[1, 2, 3], &[6, 7, 8], &[4, 5]];
    let got: Vec<Vec<Vec<usize>>> = [BlockKind::Mha, BlockKind::Mlp, BlockKind::LmHead]
        .iter()
        .map(|&k| s.devices.iter().map(|d| d.indices(k).to_vec()).collect())
        .collect();
    let ok = got.iter().all(|lists| lists.iter().zip(want).all(|(l, w)| l == w));
    check(ok, format!("assignment {:?}", got[0]))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<DeviceProfile>, CostModel) {
    let n = rng.gen_range(1..=4);
    let (mh, mg, k) = (rng.gen_range(0.5..1.5), rng.gen_range(1.0..3.0), rng.gen_range(0.5..2.0));
    let cost = CostModel {
        tau_h: mh * k,
        tau_g: mg * k,
        tau_v: 0.0,
        mem_h: mh,
        mem_g: mg,
        mem_v: 0.0,
        sync_seconds: rng.gen_range(0.0..0.05),
        num_layers: rng.gen_range(1..=2),
        num_heads: rng.gen_range(1..=8),
        mlp_groups: rng.gen_range(1..=8),
        vocab_groups: 0,
    };
    let mt = cost.total_memory();
    let mut p: Vec<DeviceProfile> = (0..n)
        .map(|i| DeviceProfile::new(i, rng.gen_range(0.3..1.0) * mt, rng.gen_range(0.5..2.0), 0.0))
        .collect();
    let total: f64 = p.iter().map(|d| d.memory_mb).sum();
    if total < 1.3 * mt {
        p.iter_mut().for_each(|d| d.memory_mb *= 1.3 * mt / total);
    }
    (p, cost)
}

fn scheduler_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut within, mut feasible, mut worst) = (0, 0, 0.0f64);
    for _ in 0..50 {
        let (p, cost) = random_instance(&mut rng);
        let best = brute_force_ilp(&p, &cost).map_err(|e| e.to_string())?;
        let r = min_max(&p, cost.total_memory(), 1e-9).map_err(|e| e.to_string())?;
        let Ok(w) = workload_from_ratios(&r, &p, &cost) else { continue };
        let Ok(lat) = estimate_latency(&w, &p, &cost) else { continue };
        feasible += 1;
        let gap = (lat - best.latency) / cost.group_quantum(&p);
        worst = worst.max(gap);
        within += usize::from(gap <= 1.0 + 1e-9);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        within == 50 && feasible == 50 && secs < 30.0,
        format!("{within}/50 within one quantum (worst {worst:.3}), {feasible}/50 feasible, {secs:.1} s"),
    )
}

fn min_max_closed_form() -> Outcome {
    let two = |m: [f64; 2], mt| {
        let p = [DeviceProfile::new(0, m[0], 1.0, 0.0), DeviceProfile::new(1, m[1], 1.0, 0.0)];
        min_max(&p, mt, 1e-9).map(|r| r.as_slice().to_vec())
    };
    let r = two([2.0, 8.0], 6.0).map_err(|e| e.to_string())?;
    let s = two([5.0, 5.0], 6.0).map_err(|e| e.to_string())?;
    let ok = (r[0] - 1.0 / 3.0).abs() < 1e-3 && (r[1] - 2.0 / 3.0).abs() < 1e-3 && s[0] == s[1];
    check(ok, format!("r = {r:.4?}, symmetric {s:?}"))
}

fn dense_greedy(store: &WeightStore, prompt: &[u32], n: usize) -> Vec<u32> {
    let mut tokens = prompt.to_vec();
    for _ in 0..n {
        let next = dense_forward(store, &tokens).unwrap().steps.last().unwrap().argmax();
        tokens.push(next);
    }
    tokens.split_off(prompt.len())
}

fn lossless_exactness() -> Outcome {
    let store = init_model(ModelSpec::default()).map_err(|e| e.to_string())?;
    let spec = *store.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut token_matches) = (0.0f64, 0);
    for config in 0..10u64 {
        let n = rng.gen_range(1..=5);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let order: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.2)).collect();
        let ratios = Ratios::from_weights(&weights).map_err(|e| e.to_string())?;
        let schedule = plr_map(&GroupDims::from(&spec), &ratios, &order).map_err(|e| e.to_string())?;
        let devices: Vec<DeviceProfile> = (0..n).map(|i| DeviceProfile::new(i, 1e6, 1.0, 0.0)).collect();
        let prompt: Vec<u32> = (0..6).map(|_| rng.gen_range(0..spec.vocab_size() as u32)).collect();
        let cfg = RuntimeConfig {
            mapping: MappingMode::Random,
            sync: if config % 2 == 0 { SyncMode::Relaxed } else { SyncMode::Reliable },
            seed: config,
            ..Default::default()
        };
        let g = generate(&store, &schedule, &devices, None, &cfg, &prompt, 6).map_err(|e| e.to_string())?;
        worst = worst.max(g.metrics.max_relative_error());
        token_matches += usize::from(g.tokens == dense_greedy(&store, &prompt, 6));
    }
    check(
        worst < 1e-5 && token_matches == 10,
        format!("max relative error {worst:.2e}, {token_matches}/10 identical token sequences"),
    )
}

fn drop_ordering() -> Outcome {
    let mut ordered = 0;
    for seed in 0..40u64 {
        let store = init_model(ModelSpec { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let tokens = synthetic_prompts(store.spec(), 1, 16, seed + 500).remove(0);
        let run = |s| drop_experiment(&store, &tokens, s, 0.10, 0.25, seed);
        let (low, rand, high) = (
            run(DropStrategy::LowNorm).map_err(|e| e.to_string())?,
            run(DropStrategy::Random).map_err(|e| e.to_string())?,
            run(DropStrategy::HighNorm).map_err(|e| e.to_string())?,
        );
        ordered += usize::from(low < rand && rand < high);
    }
    check(ordered * 100 >= 95 * 40, format!("low < random < high in {ordered}/40 models"))
}

fn tpt(rows: &[SummaryRow], plr: f64, sync: SyncMode) -> f64 {
    rows.iter()
        .find(|r| r.cell.plr == Some(plr) && r.cell.sync == sync)
        .and_then(|r| r.mean_tpt)
        .unwrap_or(f64::NAN)
}

fn sync_latency_trend() -> Outcome {
    let report = run_matrix(&presets::sync_latency(100)).map_err(|e| e.to_string())?;
    let grid = [0.0, 0.01, 0.02, 0.05];
    let rel: Vec<f64> = grid.iter().map(|&p| tpt(&report.summary, p, SyncMode::Reliable)).collect();
    let rlx: Vec<f64> = grid.iter().map(|&p| tpt(&report.summary, p, SyncMode::Relaxed)).collect();
    let increasing = rel.windows(2).all(|w| w[1] > w[0]);
    let bounded = rlx.iter().all(|&t| t <= 1.3 * rlx[0]);
    let speedup = rel[3] / rlx[3];
    check(
        increasing && bounded && speedup >= 2.0,
        format!(
            "reliable {rel:.3?}, relaxed {rlx:.3?} (max {:.2}x of lossless), speedup at 0.05 {speedup:.2}x",
            rlx.iter().cloned().fold(0.0, f64::max) / rlx[0]
        ),
    )
}

fn mapping_accuracy() -> Outcome {
    let mut diffs = Vec::new();
    for seed in 0..20u64 {
        let report = run_matrix(&presets::mapping_accuracy(seed, 0.05)).map_err(|e| e.to_string())?;
        let dev = |m| {
            report
                .summary
                .iter()
                .find(|r| r.cell.mapping == m)
                .and_then(|r| r.mean_deviation)
                .ok_or_else(|| format!("seed {seed}: no {m:?} result"))
        };
        diffs.push((dev(MappingMode::Halo)?, dev(MappingMode::Random)?));
    }
    let halo: Vec<f64> = diffs.iter().map(|d| d.0).collect();
    let random: Vec<f64> = diffs.iter().map(|d| d.1).collect();
    let d: Vec<f64> = diffs.iter().map(|(h, r)| h - r).collect();
    let md = mean(&d);
    let sd = (d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    let t = md / (sd / (d.len() as f64).sqrt());
    let wins = d.iter().filter(|x| **x < 0.0).count();
    check(
        mean(&halo) < mean(&random),
        format!(
            "mean deviation halo {:.3} vs random {:.3}; halo lower in {wins}/20, paired t = {t:.2}",
            mean(&halo),
            mean(&random)
        ),
    )
}

fn overlap_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad = 0;
    for _ in 0..100 {
        let layers = rng.gen_range(1..12);
        let stages: Vec<LayerStages> = (0..layers)
            .map(|_| LayerStages {
                comp: rng.gen_range(0.0..5.0),
                load: rng.gen_range(0.0..5.0),
                pred: rng.gen_range(0.0..5.0),
                comm: rng.gen_range(0.0..5.0),
            })
            .collect();
        let t = |load_comp, pred_comm| {
            pipeline_schedule(&stages, Overlap { load_comp, pred_comm }, Lanes::default()).total
        };
        let (both, lc, pc, none) = (t(true, true), t(true, false), t(false, true), t(false, false));
        let ordered = both <= lc.min(pc) + 1e-12 && lc.max(pc) <= none + 1e-12;
        // Every set has positive stage durations, so each overlap hides something.
        let strict = both < lc.min(pc) && lc.max(pc) < none;
        bad += usize::from(!(ordered && strict));
    }
    check(bad == 0, format!("{} of 100 stage sets ordered strictly", 100 - bad))
}

fn heterogeneous_schedulers() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for n in [4usize, 6, 8] {
        let report = run_matrix(&presets::heterogeneous_schedulers(n, 20, n as u64)).map_err(|e| e.to_string())?;
        let row = |k| report.summary.iter().find(|r| r.cell.scheduler == k).cloned();
        let (mm, gx, va) = (
            row(SchedulerKind::MinMax).and_then(|r| r.mean_tpt),
            row(SchedulerKind::GalaxyTwoStep).and_then(|r| r.mean_tpt),
            row(SchedulerKind::VanillaEven),
        );
        let ooms = report
            .records
            .iter()
            .filter(|r| r.cell.scheduler == SchedulerKind::VanillaEven)
            .filter(|r| r.error.as_deref().is_some_and(|e| e.contains("out of memory")))
            .count();
        let failed = report
            .records
            .iter()
            .filter(|r| r.cell.scheduler != SchedulerKind::VanillaEven && r.error.is_some())
            .count();
        let (Some(mm), Some(gx)) = (mm, gx) else {
            return Err(format!("n={n}: missing min_max or galaxy result"));
        };
        ok &= mm <= gx && ooms >= 1 && failed == 0 && va.is_some();
        lines.push(format!("n={n}: min_max {mm:.3} vs galaxy {gx:.3}, vanilla OOM {ooms}/20"));
    }
    check(ok, lines.join("; "))
}

fn sap_quality() -> Outcome {
    let mut pred_recall = Vec::new();
    let mut rand_recall = Vec::new();
    for seed in 0..10u64 {
        let spec = ModelSpec { seed, ..Default::default() };
        let store = init_model(spec).map_err(|e| e.to_string())?;
        let train_set = collect_calibration(&store, &synthetic_prompts(&spec, 60, 16, seed))
            .map_err(|e| e.to_string())?;
        let cfg = TrainConfig { epochs: 60, seed, ..Default::default() };
        let (params, _) = train(&train_set, &cfg).map_err(|e| e.to_string())?;
        let held_out = collect_calibration(&store, &synthetic_prompts(&spec, 8, 16, seed + 10_000))
            .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (&(layer, kind), samples) in &held_out.samples {
            let k = spec.group_count(kind) / 4;
            for s in samples {
                let scores: Vec<f64> = s.target.iter().map(|&v| v as f64).collect();
                let truth = RankList::from_scores(&scores, kind, layer + 1);
                let act = Activation::new(s.feature.clone(), 0, layer);
                let pred = predict_ranks(&params, &act, layer, kind).map_err(|e| e.to_string())?;
                pred_recall.push(pred.top_k_recall(&truth, k));
                let mut order = truth.order.clone();
                order.shuffle(&mut rng);
                let random = RankList { order, block: kind, layer: layer + 1 };
                rand_recall.push(random.top_k_recall(&truth, k));
            }
        }
    }
    let (p, r) = (mean(&pred_recall), mean(&rand_recall));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reg = Regressor::random(6, 5, 4, &mut rng);
    reg.params_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
    let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let analytic: Vec<f64> = reg.loss_and_gradient(&xr, &yr).1.params().copied().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *reg.params().nth(i).unwrap();
        *reg.params_mut().nth(i).unwrap() = orig + h;
        let up = reg.loss(&xr, &yr);
        *reg.params_mut().nth(i).unwrap() = orig - h;
        let down = reg.loss(&xr, &yr);
        *reg.params_mut().nth(i).unwrap() = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8));
    }
    check(
        p > r && worst < 1e-4,
        format!("top-25% recall {p:.3} vs random {r:.3}; gradient max relative error {worst:.1e}"),
    )
}

fn gather_trace(seed: u64) -> Vec<TraceEvent> {
    let mut net = SimNetwork::new(ChannelConfig { plr: 0.2, seed, ..Default::default() })
        .unwrap()
        .with_trace();
    let policy = TimeoutPolicy::default();
    let mut t = 0.0;
    for token in 0..5u32 {
        let mut expected = std::collections::BTreeSet::new();
        for origin in 1..4usize {
            let v = vec![0.5f32; 600];
            let ds = fragment(1, token, 2, BlockKind::Mha, origin as u16, origin, &v, 1400).unwrap();
            net.send_unreliable(origin, 0, ds, t).unwrap();
            expected.insert((origin, origin));
        }
        t = net
            .gather_with_timeout(0, &expected, 1, token, 2, BlockKind::Mha, t, &policy)
            .unwrap()
            .completed_at;
    }
    net.trace().to_vec()
}

fn transport_bounds() -> Outcome {
    let a = gather_trace(5);
    let deterministic = !a.is_empty() && a == gather_trace(5) && a != gather_trace(6);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..1000u64 {
        let seed = rng.gen();
        let mut net = SimNetwork::new(ChannelConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let timeout = rng.gen_range(0.001..0.05);
        let policy = TimeoutPolicy { gather_timeout: timeout, ..Default::default() };
        let mut expected = std::collections::BTreeSet::new();
        for origin in 1..=rng.gen_range(1..6usize) {
            let link = ChannelConfig {
                plr: rng.gen_range(0.0..=1.0),
                one_way_latency: rng.gen_range(0.0..0.03),
                bandwidth: rng.gen_range(1e5..1e9),
                seed,
            };
            net.set_link(origin, 0, link).map_err(|e| e.to_string())?;
            let v = vec![1.0f32; rng.gen_range(1..3000)];
            let ds = fragment(i, 0, 1, BlockKind::Mlp, origin as u16, origin, &v, 1400).map_err(|e| e.to_string())?;
            net.send_unreliable(origin, 0, ds, rng.gen_range(0.0..0.01)).map_err(|e| e.to_string())?;
            expected.insert((origin, origin));
        }
        let post = rng.gen_range(0.0..0.01);
        let r = net
            .gather_with_timeout(0, &expected, i, 0, 1, BlockKind::Mlp, post, &policy)
            .map_err(|e| e.to_string())?;
        worst = worst.max(r.elapsed - timeout);
    }
    check(
        deterministic && worst <= EVENT_GRANULARITY,
        format!(
            "traces reproducible: {deterministic}; worst elapsed minus timeout over 1000 gathers {worst:.2e} s"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("priority-index assignment golden case", priority_assignment),
        ("min_max within one group quantum of the exhaustive optimum", scheduler_optimality),
        ("min_max closed-form ratios", min_max_closed_form),
        ("lossless distributed decoding equals dense decoding", lossless_exactness),
        ("dropping low < random < high norm groups", drop_ordering),
        ("relaxed vs reliable synchronisation latency", sync_latency_trend),
        ("importance-aware vs random mapping under loss", mapping_accuracy),
        ("overlap ordering of the stage pipeline", overlap_ordering),
        ("min_max vs galaxy on heterogeneous devices", heterogeneous_schedulers),
        ("importance predictor recall and gradients", sap_quality),
        ("transport determinism and gather bound", transport_bounds),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2}. {name}: {detail} ({secs:.1} s)", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
