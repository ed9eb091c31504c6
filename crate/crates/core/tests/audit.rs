use light_reskan::audit::{
    bench, cost_report, count_flops, count_params, count_poly_params, estimate_mac, layer_bytes, layer_flops,
    layer_params, BenchConfig, BENCH_CSV_HEADER,
};
use light_reskan::kan::{basis, init_kan_tensors, KanGeometry, KanMode, PATH_NAMES};
use light_reskan::network::{apply_ablation, build, AblationRow, LayerKind, LightResKan, NetworkConfig, PlanEntry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn enumerate(m: &LightResKan<f32>) -> u64 {
    m.store.iter().map(|(_, p)| p.value.numel() as u64).sum()
}

fn configs() -> Vec<(String, NetworkConfig)> {
    let mut v = vec![("tiny".to_string(), NetworkConfig::tiny(10)), ("full-scale".to_string(), NetworkConfig::default())];
    for row in AblationRow::ALL {
        v.push((row.name().to_string(), apply_ablation(&NetworkConfig::default(), row)));
        v.push((format!("tiny {}", row.name()), apply_ablation(&NetworkConfig::tiny(4), row)));
    }
    v
}

#[test]
fn closed_form_counts_match_enumeration() {
    for (name, cfg) in configs() {
        let m = build::<f32>(&cfg, 0).unwrap();
        assert_eq!(count_params(&m).unwrap(), enumerate(&m), "{name}");
        assert_eq!(m.store.num_scalars() as u64, enumerate(&m));
        for e in m.plan(64, 64).unwrap() {
            let owned: u64 = e.params.iter().map(|p| m.store.value(m.store.id(p).unwrap()).numel() as u64).sum();
            assert_eq!(layer_params(&e.kind), owned, "{name}: {}", e.name);
        }
    }
}

#[test]
fn shared_and_elementwise_polynomial_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gram = basis::<f32>("gram").unwrap();
    let shared = KanGeometry { mode: KanMode::Shared, c_in: 2, c_out: 4, k: 3, stride: 1, padding: 1, degree: 3 };
    let elementwise = KanGeometry { mode: KanMode::Elementwise, ..shared };
    let (ws, _, _) = init_kan_tensors(&shared, gram.as_ref(), &mut rng).unwrap();
    let (we, _, _) = init_kan_tensors(&elementwise, gram.as_ref(), &mut rng).unwrap();
    assert_eq!(ws.numel(), 32);
    assert_eq!(we.numel(), 288);
    assert_eq!(light_reskan::audit::kan_poly_params(&shared), 32);
    assert_eq!(light_reskan::audit::kan_poly_params(&elementwise), 288);
    assert_eq!(we.numel() / ws.numel(), 9);
}

#[test]
fn hand_counted_conv() {
    let e = PlanEntry {
        name: "c".into(),
        kind: LayerKind::Conv { c_in: 1, c_out: 1, k: 2, stride: 1, padding: 0 },
        in_hw: (3, 3),
        out_hw: (2, 2),
        params: vec![],
    };
    assert_eq!(layer_flops(&e), 32);
}

#[test]
fn stride_one_conv_flops_scale_with_area() {
    let m = build::<f32>(&NetworkConfig::tiny(4), 0).unwrap();
    let (a, b) = (m.plan(64, 64).unwrap(), m.plan(128, 128).unwrap());
    let mut checked = 0;
    for (x, y) in a.iter().zip(&b) {
        let stride = match x.kind {
            LayerKind::Conv { stride, .. } => stride,
            LayerKind::Kan { geom, .. } => geom.stride,
            _ => continue,
        };
        if stride == 1 {
            assert_eq!(layer_flops(y), 4 * layer_flops(x), "{}", x.name);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn batch_scaling_is_linear() {
    let m = build::<f32>(&NetworkConfig::tiny(4), 0).unwrap();
    let f1 = count_flops(&m, 64, 64, 16).unwrap();
    let f2 = count_flops(&m, 64, 64, 32).unwrap();
    assert_eq!(f1.per_sample, f2.per_sample);
    assert_eq!(2 * f1.per_batch, f2.per_batch);
    for path in PATH_NAMES {
        let one = estimate_mac(&m, 64, 64, 1, path).unwrap();
        assert_eq!(estimate_mac(&m, 64, 64, 7, path).unwrap(), 7 * one);
    }
}

#[test]
fn decoupled_pays_for_the_expanded_tensor() {
    let m = build::<f32>(&NetworkConfig::tiny(4), 0).unwrap();
    let n = 3;
    for e in m.plan(64, 64).unwrap() {
        if let LayerKind::Kan { geom, .. } = e.kind {
            let (h, w) = e.in_hw;
            let bound = (2 * 4 * n * geom.c_in * (geom.degree + 1) * h * w) as u64;
            let gap = layer_bytes(&e, n, "decoupled") - layer_bytes(&e, n, "fused");
            assert!(gap >= bound, "{}: {gap} < {bound}", e.name);
            assert_eq!(layer_bytes(&e, n, "direct"), layer_bytes(&e, n, "fused"));
        }
    }
    assert!(estimate_mac(&m, 64, 64, n, "decoupled").unwrap() > estimate_mac(&m, 64, 64, n, "fused").unwrap());
    assert!(estimate_mac(&m, 64, 64, n, "winograd").is_err());
}

#[test]
fn report_totals_are_column_sums() {
    let m = build::<f32>(&NetworkConfig::tiny(10), 0).unwrap();
    let r = cost_report(&m, 64, 64, 16, "fused").unwrap();
    let csv = r.to_csv();
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "layer,kind,params,flops_per_sample,flops_per_batch,bytes_per_batch");
    let mut sums = [0u64; 4];
    for line in &body[1..body.len() - 1] {
        let f: Vec<&str> = line.split(',').collect();
        for (s, v) in sums.iter_mut().zip(&f[2..]) {
            *s += v.parse::<u64>().unwrap();
        }
    }
    let total: Vec<u64> = body.last().unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert_eq!(total, sums.to_vec());
    assert_eq!(total[0], enumerate(&m));
    assert_eq!(total[2], count_flops(&m, 64, 64, 16).unwrap().per_batch);
    assert!(csv.contains("multiply-accumulate = 2 FLOPs"));
}

#[test]
fn full_scale_report_prints_calibration_references() {
    let m = build::<f32>(&NetworkConfig::default(), 0).unwrap();
    let r = cost_report(&m, 112, 112, 16, "fused").unwrap();
    let table = r.to_table();
    assert!(table.contains("reference 0.82 M"), "{table}");
    assert!(table.contains("reference 0.05 G"), "{table}");
}

#[test]
fn shared_rung_uses_fewer_polynomial_parameters() {
    let cfg = NetworkConfig::tiny(4);
    let shared = build::<f32>(&apply_ablation(&cfg, AblationRow::Shared), 0).unwrap();
    let elementwise = build::<f32>(&apply_ablation(&cfg, AblationRow::Bottleneck), 0).unwrap();
    assert!(count_poly_params(&shared).unwrap() < count_poly_params(&elementwise).unwrap());
    let baseline = build::<f32>(&apply_ablation(&cfg, AblationRow::Baseline), 0).unwrap();
    assert_eq!(count_poly_params(&baseline).unwrap(), 0);
}

#[test]
fn bench_gates_and_reports_every_path() {
    let cfg = BenchConfig { c_in: 4, c_out: 6, k: 3, h: 12, w: 12, n: 2, degree: 3 };
    let results = bench(&cfg, 20, 1).unwrap();
    assert_eq!(results.iter().map(|r| r.path.as_str()).collect::<Vec<_>>(), PATH_NAMES);
    for r in &results {
        assert_eq!(r.csv_row().split(',').count(), BENCH_CSV_HEADER.split(',').count());
        assert!(r.p10_us <= r.median_us && r.median_us <= r.p90_us);
    }
    let peak = |p: &str| results.iter().find(|r| r.path == p).unwrap().peak_bytes;
    assert!(peak("fused") < peak("decoupled"));
    assert!(bench(&cfg, 19, 1).is_err());
}

#[test]
fn fused_buffers_stay_below_decoupled() {
    for k in [2, 3, 5] {
        for degree in [1, 2, 4] {
            let cfg = BenchConfig { c_in: 3, c_out: 5, k, h: 10, w: 9, n: 2, degree };
            let r = bench(&cfg, 20, 2).unwrap();
            assert!(r[2].peak_bytes < r[1].peak_bytes, "k {k} D {degree}");
        }
    }
}

#[test]
fn repeated_bench_medians_are_stable() {
    let cfg = BenchConfig { c_in: 16, c_out: 16, k: 3, h: 28, w: 28, n: 2, degree: 3 };
    let a = bench(&cfg, 20, 3).unwrap();
    let b = bench(&cfg, 20, 3).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let ratio = x.median_us / y.median_us;
        assert!((0.8..=1.25).contains(&ratio), "{}: {} vs {}", x.path, x.median_us, y.median_us);
    }
}
