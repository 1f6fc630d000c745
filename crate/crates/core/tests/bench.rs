use spot_core::bench::{
    emit_report, run_bench, write_bench_csv, BenchConfig, BenchError, BenchRecord, Precision, BENCH_HEADER,
};
use spot_core::spotca::Backend;

fn small(backends: &[Backend], nv: &[usize], rho: &[f64]) -> BenchConfig {
    BenchConfig {
        backends: backends.to_vec(),
        nv: nv.to_vec(),
        rho: rho.to_vec(),
        n_queries: 4,
        channels: 16,
        heads: 2,
        precision: Precision::F64,
        ..Default::default()
    }
}

fn find(r: &[BenchRecord], b: Backend, nv: usize, rho: f64) -> &BenchRecord {
    r.iter().find(|x| x.backend == b && x.nv == nv && x.rho == rho).unwrap()
}

/// Least-squares slope of `ln y` against `ln x`.
fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

#[test]
fn full_ratio_matches_dense_counts() {
    let r = run_bench(&small(&Backend::ALL, &[200], &[1.0])).unwrap();
    let dense = find(&r, Backend::Dense, 200, 1.0);
    for b in Backend::ALL {
        let x = find(&r, b, 200, 1.0);
        assert_eq!(x.agg_macs, dense.agg_macs, "{b}");
        assert_eq!(x.score_macs, dense.score_macs, "{b}");
    }
}

#[test]
fn counters_follow_closed_forms() {
    // rho given as percent so k is an exact integer ceiling.
    let percents = [2usize, 8, 13, 50];
    let rho: Vec<f64> = percents.iter().map(|&p| p as f64 / 100.0).collect();
    let nvs = [97usize, 1000, 10_000];
    let cfg = BenchConfig {
        n_queries: 2,
        channels: 8,
        ..small(&Backend::ALL, &nvs, &rho)
    };
    let r = run_bench(&cfg).unwrap();
    let (nq, c) = (2u64, 8u64);
    for &nv in &nvs {
        for (&p, &rho) in percents.iter().zip(&rho) {
            let k = (p * nv).div_ceil(100) as u64;
            let n = nv as u64;
            for b in Backend::ALL {
                assert_eq!(find(&r, b, nv, rho).score_macs, nq * n * c);
            }
            assert_eq!(find(&r, Backend::Dense, nv, rho).agg_macs, nq * n * c);
            assert_eq!(find(&r, Backend::Masked, nv, rho).agg_macs, nq * n * c);
            assert_eq!(find(&r, Backend::Prototype, nv, rho).agg_macs, nq * k * c);
        }
    }
    let proto = find(&r, Backend::Prototype, 10_000, 0.08).agg_macs as f64;
    let dense = find(&r, Backend::Dense, 10_000, 0.08).agg_macs as f64;
    assert_eq!(proto / dense, 0.08);
}

#[test]
fn records_are_well_formed() {
    let cfg = small(&[Backend::Prototype, Backend::Masked], &[64, 128], &[0.1, 0.5]);
    let r = run_bench(&cfg).unwrap();
    assert_eq!(r.len(), 8);
    let keys: Vec<_> = r.iter().map(|x| (x.backend, x.nv, x.rho)).collect();
    assert_eq!(keys, cfg.cells());
    for x in &r {
        assert!(x.median_us > 0.0 && x.mean_us > 0.0 && x.p95_us >= x.median_us);
        assert!(x.scoring_median_us > 0.0 && x.post_scoring_median_us > 0.0);
        assert!(x.batch > 1, "tiny cells must be batched");
        assert_eq!(x.repeats, 5);
    }
}

#[test]
fn config_invariants_are_enforced() {
    let base = small(&[Backend::Dense], &[10], &[0.5]);
    let bad = [
        BenchConfig {
            repeats: 4,
            ..base.clone()
        },
        BenchConfig {
            warmup: 1,
            ..base.clone()
        },
        BenchConfig {
            nv: vec![],
            ..base.clone()
        },
        BenchConfig {
            rho: vec![],
            ..base.clone()
        },
        BenchConfig {
            backends: vec![],
            ..base.clone()
        },
        BenchConfig {
            rho: vec![0.0],
            ..base.clone()
        },
        BenchConfig {
            heads: 3,
            ..base.clone()
        },
    ];
    for cfg in bad {
        assert!(matches!(run_bench(&cfg), Err(BenchError::InvalidConfig(_))), "{cfg:?}");
    }
}

#[test]
fn float32_runs() {
    let cfg = BenchConfig {
        precision: Precision::F32,
        ..small(&[Backend::Prototype], &[100], &[0.2])
    };
    let r = run_bench(&cfg).unwrap();
    assert_eq!(r[0].precision, Precision::F32);
    assert_eq!(r[0].agg_macs, 4 * 20 * 16);
}

#[test]
fn report_layout() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&[], dir.path()).unwrap();
    let main = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(main, format!("{BENCH_HEADER}\n"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("plot.csv")).unwrap(),
        "rho,Nv,dense_median_us,masked_median_us,prototype_median_us\n"
    );

    let cfg = small(&[Backend::Prototype], &[50], &[0.1]);
    let r = run_bench(&cfg).unwrap();
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &r).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f.len(), BENCH_HEADER.split(',').count());
    assert_eq!(&f[..4], ["prototype", "50", "0.1", "5"]);
    assert!((f[4].parse::<f64>().unwrap() - r[0].median_us).abs() < 1e-3);
    assert_eq!(f[7].parse::<u64>().unwrap(), r[0].score_macs);
    assert_eq!(f[8].parse::<u64>().unwrap(), r[0].agg_macs);

    let cfg = small(&Backend::ALL, &[40, 80], &[0.1, 0.2, 0.3]);
    let r = run_bench(&cfg).unwrap();
    emit_report(&r, dir.path()).unwrap();
    let count = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count() - 1;
    assert_eq!(count("bench.csv"), 3 * 2 * 3);
    assert_eq!(count("phases.csv"), 3 * 2 * 3);
    assert_eq!(count("plot.csv"), 2 * 3);
}

#[test]
fn latency_scales_linearly() {
    let nvs = [2_000usize, 6_000, 20_000];
    let cfg = BenchConfig {
        n_queries: 16,
        channels: 32,
        heads: 4,
        ..small(&[Backend::Dense, Backend::Prototype], &nvs, &[0.08])
    };
    let r = run_bench(&cfg).unwrap();
    let x: Vec<f64> = nvs.iter().map(|&n| n as f64).collect();
    let dense: Vec<f64> = nvs
        .iter()
        .map(|&n| find(&r, Backend::Dense, n, 0.08).median_us)
        .collect();
    let k: Vec<f64> = nvs.iter().map(|&n| (0.08 * n as f64).ceil()).collect();
    let post: Vec<f64> = nvs
        .iter()
        .map(|&n| find(&r, Backend::Prototype, n, 0.08).post_scoring_median_us)
        .collect();
    let sd = loglog_slope(&x, &dense);
    let sp = loglog_slope(&k, &post);
    assert!((0.6..1.4).contains(&sd), "dense slope {sd}");
    assert!((0.6..1.4).contains(&sp), "prototype post-scoring slope {sp}");
}
