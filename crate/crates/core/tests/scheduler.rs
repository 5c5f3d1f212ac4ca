use edgetp::model::BlockKind;
use edgetp::scheduler::{
    comp_greedy, min_max, plr_map, ratios_to_counts, workload_from_ratios, CostModel,
    DeviceProfile, GroupDims, Ratios,
};
use proptest::prelude::*;

fn profiles() -> impl Strategy<Value = (Vec<DeviceProfile>, f64)> {
    prop::collection::vec((0.1f64..10.0, 0.2f64..4.0), 1..6).prop_flat_map(|devs| {
        let total: f64 = devs.iter().map(|d| d.0).sum();
        let ps: Vec<DeviceProfile> = devs
            .iter()
            .enumerate()
            .map(|(i, &(m, c))| DeviceProfile::new(i, m, c, 0.0))
            .collect();
        (Just(ps), (0.05f64..1.0).prop_map(move |f| f * total))
    })
}

fn small_cost(layers: usize, heads: usize, groups: usize) -> CostModel {
    CostModel {
        tau_h: 1.0,
        tau_g: 2.0,
        tau_v: 0.0,
        mem_h: 1.0,
        mem_g: 2.0,
        mem_v: 0.0,
        sync_seconds: 0.01,
        num_layers: layers,
        num_heads: heads,
        mlp_groups: groups,
        vocab_groups: 0,
    }
}

fn straggler(r: &Ratios, p: &[DeviceProfile], total: f64) -> f64 {
    r.as_slice()
        .iter()
        .zip(p)
        .map(|(ri, d)| ri * total / d.compute)
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn plr_map_partitions_and_orders(
        weights in prop::collection::vec(0.0f64..1.0, 1..6),
        plrs_seed in prop::collection::vec(0.0f64..0.5, 6),
        n in 1usize..24,
    ) {
        prop_assume!(weights.iter().sum::<f64>() > 0.0);
        let r = Ratios::from_weights(&weights).unwrap();
        let plrs = &plrs_seed[..weights.len()];
        let dims = GroupDims { num_heads: n, num_kv_heads: 1, mlp_groups: n + 3, vocab_groups: 2 * n };
        let s = plr_map(&dims, &r, plrs).unwrap();
        s.validate().unwrap();
        for kind in BlockKind::ALL {
            for a in &s.devices {
                for b in &s.devices {
                    let (ia, ib) = (a.indices(kind), b.indices(kind));
                    if plrs[a.id] < plrs[b.id] && !ia.is_empty() && !ib.is_empty() {
                        prop_assert!(ia.iter().max() < ib.iter().min());
                    }
                }
            }
        }
    }

    #[test]
    fn counts_sum_to_total(weights in prop::collection::vec(0.0f64..1.0, 1..8), total in 0usize..200) {
        prop_assume!(weights.iter().sum::<f64>() > 0.0);
        let r = Ratios::from_weights(&weights).unwrap();
        let c = ratios_to_counts(r.as_slice(), total);
        prop_assert_eq!(c.iter().sum::<usize>(), total);
        for (ci, ri) in c.iter().zip(r.as_slice()) {
            prop_assert!((*ci as f64 - ri * total as f64).abs() < 1.0);
        }
    }

    #[test]
    fn min_max_beats_comp_greedy((p, total) in profiles()) {
        let mm = min_max(&p, total, 1e-9).unwrap();
        let cg = comp_greedy(&p, total).unwrap();
        prop_assert!(straggler(&mm, &p, total) <= straggler(&cg, &p, total) * (1.0 + 1e-6));
        for (ri, d) in mm.as_slice().iter().zip(&p) {
            prop_assert!(ri * total <= d.memory_mb * (1.0 + 1e-6));
        }
    }

    #[test]
    fn min_max_is_scale_invariant((p, total) in profiles(), k in 0.1f64..10.0) {
        let base = min_max(&p, total, 1e-10).unwrap();
        let faster: Vec<_> = p.iter().map(|d| DeviceProfile { compute: d.compute * k, ..*d }).collect();
        let bigger: Vec<_> = p.iter().map(|d| DeviceProfile { memory_mb: d.memory_mb * k, ..*d }).collect();
        for other in [min_max(&faster, total, 1e-10).unwrap(), min_max(&bigger, total * k, 1e-10).unwrap()] {
            for (a, b) in base.as_slice().iter().zip(other.as_slice()) {
                prop_assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", base, other);
            }
        }
    }

    #[test]
    fn integer_workloads_fit_memory(
        mems in prop::collection::vec(0.3f64..1.0, 1..5),
        comps in prop::collection::vec(0.5f64..2.0, 5),
        layers in 1usize..3,
        heads in 1usize..9,
        groups in 1usize..9,
    ) {
        let cost = small_cost(layers, heads, groups);
        let mt = cost.total_memory();
        let scale = 1.3 * mt / mems.iter().sum::<f64>();
        let p: Vec<_> = mems
            .iter()
            .enumerate()
            .map(|(i, m)| DeviceProfile::new(i, (m * scale).max(m * mt), comps[i], 0.0))
            .collect();
        let r = min_max(&p, mt, 1e-6).unwrap();
        let w = workload_from_ratios(&r, &p, &cost).unwrap();
        for (i, d) in p.iter().enumerate() {
            prop_assert!(w.device_memory(i, &cost) <= d.memory_mb * (1.0 + 1e-9));
        }
        for row in &w.layers {
            prop_assert_eq!(row.iter().map(|c| c[0]).sum::<usize>(), heads);
            prop_assert_eq!(row.iter().map(|c| c[1]).sum::<usize>(), groups);
        }
    }
}

#[test]
fn min_max_closed_form() {
    let p = [DeviceProfile::new(0, 2.0, 1.0, 0.0), DeviceProfile::new(1, 8.0, 1.0, 0.0)];
    let r = min_max(&p, 6.0, 1e-9).unwrap();
    assert!((r.as_slice()[0] - 1.0 / 3.0).abs() < 1e-3);
    assert!((r.as_slice()[1] - 2.0 / 3.0).abs() < 1e-3);
    let sym = [DeviceProfile::new(0, 5.0, 1.5, 0.0), DeviceProfile::new(1, 5.0, 1.5, 0.0)];
    let r = min_max(&sym, 6.0, 1e-9).unwrap();
    assert_eq!(r.as_slice()[0], r.as_slice()[1]);
}

#[test]
fn insufficient_memory_is_reported() {
    let p = [DeviceProfile::new(0, 1.0, 1.0, 0.0)];
    assert!(matches!(
        min_max(&p, 2.0, 1e-6),
        Err(edgetp::Error::InsufficientMemory { .. })
    ));
}
