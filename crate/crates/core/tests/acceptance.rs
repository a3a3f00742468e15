//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting. Tests hold a shared lock so timings are not
//! disturbed by concurrently running criteria.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use ladder_core::analyzer::{
    block_caches, cache_densenet, cache_resnet, count_macs, count_params, total,
};
use ladder_core::autograd::{
    compare_policies, measure_peak, CheckpointPolicy, MemoryReport, ParamStore,
};
use ladder_core::dataio::{generate_synthetic, Dataset, SynthSpec};
use ladder_core::kernels::gradcheck::{
    check_kernel, Kernel, GRADCHECK_TOLERANCE, GRADCHECK_TRIALS,
};
use ladder_core::nets::emulate::{
    dense_block_forward, emulate_dense_block_as_residual, DenseUnitParams,
};
use ladder_core::nets::{build, ArchSpec, Backbone};
use ladder_core::rng::SplitMix64;
use ladder_core::tensor::Tensor;
use ladder_core::trainer::{checkpoint, train, Config};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, ok: bool, detail: String) {
    println!(
        "criterion {}: {} {}",
        n,
        if ok { "PASS" } else { "FAIL" },
        detail
    );
}

fn one_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn spec(backbone: Backbone, d: usize, u: usize) -> ArchSpec {
    ArchSpec {
        downsample_factor: d,
        output_stride: u,
        ..ArchSpec::new(backbone)
    }
}

/// Conv-weight counts per block by direct shape enumeration.
fn oracle_densenet(units: &[usize], k: usize, stem: usize) -> Vec<u64> {
    let mut c = stem;
    let mut out = Vec::new();
    for (b, &n) in units.iter().enumerate() {
        let mut p = 0u64;
        for j in 0..n {
            p += ((c + j * k) * 4 * k) as u64; // 1x1 bottleneck
            p += (4 * k * k * 9) as u64; // 3x3
        }
        c += n * k;
        if b + 1 < units.len() {
            p += (c * c / 2) as u64; // transition
            c /= 2;
        }
        out.push(p);
    }
    out
}

fn oracle_resnet50() -> Vec<u64> {
    let mut c_in = 64;
    let mut out = Vec::new();
    for (n, mid) in [(3usize, 64usize), (4, 128), (6, 256), (3, 512)] {
        let mut p = 0u64;
        for j in 0..n {
            let c = if j == 0 { c_in } else { 4 * mid };
            p += (c * mid + mid * mid * 9 + mid * 4 * mid) as u64;
            if j == 0 {
                p += (c * 4 * mid) as u64; // projection shortcut
            }
        }
        c_in = 4 * mid;
        out.push(p);
    }
    out
}

fn block_rows(s: &ArchSpec) -> Vec<u64> {
    count_params(s)
        .unwrap()
        .into_iter()
        .filter(|(l, _)| l.starts_with("block"))
        .map(|r| r.1)
        .collect()
}

fn millions(v: &[u64]) -> Vec<String> {
    v.iter()
        .map(|p| format!("{:.1}", *p as f64 / 1e6))
        .collect()
}

#[test]
fn criterion_01_block_parameter_counts() {
    let _g = serial();
    let t = Instant::now();
    let dn = block_rows(&spec(Backbone::Dn121, 32, 32));
    let rn = block_rows(&spec(Backbone::Rn50, 32, 32));
    let secs = t.elapsed().as_secs_f64();
    let dn_oracle = oracle_densenet(&[6, 12, 24, 16], 32, 64);
    let rn_oracle = oracle_resnet50();
    let ok = dn == dn_oracle
        && rn == rn_oracle
        && millions(&dn) == ["0.4", "1.0", "3.3", "2.1"]
        && millions(&rn) == ["0.2", "1.2", "7.1", "14.9"]
        && secs < 1.0;
    report(
        1,
        ok,
        format!(
            "dn121 {:?} rn50 {:?} ({:.2}s)",
            millions(&dn),
            millions(&rn),
            secs
        ),
    );
    assert_eq!(dn, dn_oracle);
    assert_eq!(rn, rn_oracle);
    assert!(ok);
}

#[test]
fn criterion_02_mac_counts() {
    let _g = serial();
    let t = Instant::now();
    let mut ddn = spec(Backbone::Dn121, 8, 8);
    ddn.dilations = Some(vec![1, 1, 2, 4]);
    let cases = [
        ("DN121 32", spec(Backbone::Dn121, 32, 32), 56.1, 0.10),
        ("LDN121 64/4", spec(Backbone::Dn121, 64, 4), 66.5, 0.20),
        ("LDN121 32/4", spec(Backbone::Dn121, 32, 4), 75.4, 0.20),
        ("DDN121 8", ddn, 147.8, 0.20),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (name, s, target, tol) in &cases {
        let g = total(&count_macs(s, 1024, 1024).unwrap()) as f64 / 1e9;
        let rel = (g - target) / target;
        ok &= rel.abs() <= *tol;
        detail += &format!("{} {:.2}G ({:+.1}%) ", name, g, rel * 100.0);
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 1.0;
    report(2, ok, format!("{}({:.2}s)", detail, secs));
    assert!(ok);
}

#[test]
fn criterion_03_cache_formulas() {
    let _g = serial();
    let rn = cache_resnet(3, 256).unwrap();
    let dn = cache_densenet(64, 6, 32).unwrap();
    let dn_blocks = block_caches(&spec(Backbone::Dn121, 32, 32)).unwrap();
    let rn_blocks = block_caches(&spec(Backbone::Rn50, 32, 32)).unwrap();
    let smaller = (0..3).all(|b| dn_blocks[b] < rn_blocks[b]);
    let ok = rn == 1024 && dn == 224 && smaller;
    report(
        3,
        ok,
        format!(
            "resnet {} densenet {} blocks dn {:?} rn {:?}",
            rn,
            dn,
            &dn_blocks[..3],
            &rn_blocks[..3]
        ),
    );
    assert!(ok);
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
}

#[test]
fn criterion_04_checkpointing_gradients() {
    let _g = serial();
    let t = Instant::now();
    // 96 is not a multiple of 64, so the dn121 ladder uses d = 32 here
    let s = spec(Backbone::Dn121, 32, 4);
    let g = build(&s, 2, 96, 96).unwrap();
    let store = ParamStore::init(&g.graph, 4);
    let x = random_input(&[2, 3, 96, 96], 5);
    let single =
        one_thread(|| compare_policies(&g.graph, &store, &x, &CheckpointPolicy::TABLE, 6).unwrap());
    let multi = compare_policies(&g.graph, &store, &x, &CheckpointPolicy::TABLE, 6).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let bitwise = single.iter().all(|d| d.max_abs_diff == 0.0);
    let worst_rel = multi.iter().map(|d| d.max_rel_diff).fold(0.0, f64::max);
    let ok = bitwise && worst_rel <= 1e-6 && secs < 300.0;
    let diffs: Vec<String> = single
        .iter()
        .map(|d| format!("{}={}", d.policy.name(), d.max_abs_diff))
        .collect();
    report(
        4,
        ok,
        format!(
            "{} multi-thread max rel {:.1e} ({:.0}s)",
            diffs.join(" "),
            worst_rel,
            secs
        ),
    );
    assert!(ok);
}

struct MemRun {
    reports: Vec<MemoryReport>,
    secs: f64,
}

/// Peak memory per policy and the fastest of three step times.
fn memory_runs() -> &'static MemRun {
    static RUNS: OnceLock<MemRun> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let s = spec(Backbone::Dn121, 64, 4);
        let g = build(&s, 2, 192, 192).unwrap();
        let store = ParamStore::init(&g.graph, 0);
        let x = random_input(&[2, 3, 192, 192], 1);
        let mut reports: Vec<MemoryReport> = Vec::new();
        for p in CheckpointPolicy::TABLE.iter() {
            let mut best: Option<MemoryReport> = None;
            for _ in 0..3 {
                let mut st = store.clone();
                let r = measure_peak(&g.graph, &mut st, x.clone(), p).unwrap();
                if let Some(b) = &best {
                    assert_eq!(
                        b.peak_total_bytes, r.peak_total_bytes,
                        "peak must not depend on the run"
                    );
                }
                if best
                    .as_ref()
                    .is_none_or(|b| r.wall_time_total < b.wall_time_total)
                {
                    best = Some(r);
                }
            }
            reports.push(best.unwrap());
        }
        MemRun {
            reports,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_05_memory_ordering() {
    let _g = serial();
    let run = memory_runs();
    let peak: Vec<usize> = run.reports.iter().map(|r| r.peak_total_bytes).collect();
    // table order: none, 3x3, cat 1x1, cat 1x1 + 3x3, block/stem/TD/UP, unit, unit + stem/TD/UP
    let chain = [0, 1, 2, 3, 6];
    let decreasing = chain.windows(2).all(|w| peak[w[0]] > peak[w[1]]);
    let ratio = peak[0] as f64 / peak[6] as f64;
    let close = (peak[4] as f64 - peak[5] as f64).abs() / peak[4].min(peak[5]) as f64;
    let ok = decreasing && ratio >= 4.0 && close <= 0.15 && run.secs < 600.0;
    let mb: Vec<String> = run
        .reports
        .iter()
        .map(|r| format!("{:.1}", r.peak_total_mb()))
        .collect();
    report(
        5,
        ok,
        format!(
            "peaks MB [{}] ratio {:.2} close-pair gap {:.1}% ({:.0}s)",
            mb.join(", "),
            ratio,
            close * 100.0,
            run.secs
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_06_recompute_overhead() {
    let _g = serial();
    let run = memory_runs();
    let base = run.reports[0].wall_time_total;
    let aggressive = run.reports[6].wall_time_total;
    let ratio = aggressive / base;
    let ok = ratio <= 1.5;
    report(
        6,
        ok,
        format!(
            "step {:.3}s vs baseline {:.3}s, ratio {:.2}",
            aggressive, base, ratio
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_gradient_checks() {
    let _g = serial();
    let t = Instant::now();
    let results: Vec<_> = Kernel::ALL
        .iter()
        .map(|&k| check_kernel(k, GRADCHECK_TRIALS, 2024).unwrap())
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.kernel.name())
        .collect();
    let ok = failed.is_empty() && worst <= GRADCHECK_TOLERANCE && secs < 120.0;
    report(
        7,
        ok,
        format!(
            "{} kernels x {} trials, worst rel {:.2e}, failed {:?} ({:.1}s)",
            results.len(),
            GRADCHECK_TRIALS,
            worst,
            failed,
            secs
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_dense_as_residual() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0f64;
    for n in 1..=4 {
        for trial in 0..10u64 {
            let mut rng = SplitMix64::derive(8, &[n as u64, trial]);
            let (c_in, k) = (16, 8);
            let units: Vec<DenseUnitParams> = (0..n)
                .map(|i| DenseUnitParams::random(c_in + i * k, k, &mut rng))
                .collect();
            let x = Tensor::from_fn(&[2, c_in, 6, 6], |_| rng.uniform(-1.0, 1.0) as f32);
            let a = dense_block_forward(&x, &units).unwrap();
            let b = emulate_dense_block_as_residual(&x, &units).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                worst = worst.max((p - q).abs() as f64);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = worst <= 1e-5 && secs < 60.0;
    report(
        8,
        ok,
        format!(
            "max |dense - residual| = {:.2e} over n=1..4 x 10 inputs ({:.2}s)",
            worst, secs
        ),
    );
    assert!(ok);
}

struct Run {
    miou: f64,
    checksum: u64,
    files: Vec<(String, Vec<u8>)>,
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&SynthSpec::default(), dir.path()).unwrap();
        Dataset::open(dir.path()).unwrap()
    })
}

/// Every file of a checkpoint directory, sorted by relative path.
fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn run_toy(seed: u64, aux: bool) -> Run {
    let mut cfg = Config::default();
    cfg.train.seed = seed;
    cfg.arch.aux_heads = aux;
    let data = dataset();
    let out = one_thread(|| train(&cfg, data, |_| {}).unwrap());
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&out.model, dir.path(), Some(&data.meta)).unwrap();
    Run {
        miou: out.final_miou.unwrap().mean,
        checksum: out.model.store.checksum(),
        files: read_tree(dir.path()),
    }
}

struct Learning {
    full: Vec<Run>,
    no_aux: Vec<Run>,
    secs: f64,
}

fn learning_runs() -> &'static Learning {
    static RUNS: OnceLock<Learning> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let full = (0..3).map(|s| run_toy(s, true)).collect();
        let no_aux = (0..3).map(|s| run_toy(s, false)).collect();
        Learning {
            full,
            no_aux,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

fn median(runs: &[Run]) -> f64 {
    let mut v: Vec<f64> = runs.iter().map(|r| r.miou).collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_09_end_to_end_learning() {
    let _g = serial();
    let l = learning_runs();
    let seed0 = l.full[0].miou;
    let (full, no_aux) = (median(&l.full), median(&l.no_aux));
    let ok = seed0 >= 0.90 && no_aux <= full;
    let fmt = |r: &[Run]| {
        r.iter()
            .map(|r| format!("{:.4}", r.miou))
            .collect::<Vec<_>>()
            .join("/")
    };
    report(
        9,
        ok,
        format!(
            "seed0 miou {:.4}; full {} (median {:.4}); no-aux {} (median {:.4}) ({:.0}s for 6 runs)",
            seed0,
            fmt(&l.full),
            full,
            fmt(&l.no_aux),
            no_aux,
            l.secs
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_deterministic_checkpoints() {
    let _g = serial();
    let first = &learning_runs().full[0];
    let again = run_toy(0, true);
    let ok =
        first.files == again.files && first.checksum == again.checksum && !first.files.is_empty();
    report(
        10,
        ok,
        format!(
            "{} files, checksum {:016x} vs {:016x}",
            first.files.len(),
            first.checksum,
            again.checksum
        ),
    );
    assert!(ok);
}
