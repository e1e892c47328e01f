use std::process::Command;

use moe_ssm::bench::{read_csv, records_to_string, BenchRecord, Mode};
use moe_ssm::cost::Design;
use moe_ssm::verify::{CheckRecord, Sense};
use proptest::prelude::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moe-ssm"));
    c.env_remove("MOE_SSM_SEED");
    c
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        -1e3f64..1e3,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn bench_record() -> impl Strategy<Value = BenchRecord> {
    (
        any::<bool>(),
        (1usize..5000, 1usize..300, 1usize..300, 1usize..70, 1usize..8),
        any::<bool>(),
        (any::<u64>(), any::<u64>(), 1u64..u64::MAX, any::<u64>()),
        finite(),
    )
        .prop_map(
            |(mixed, (t, n, p, e, k), par, (fr, ft, med, iqr), checksum)| BenchRecord {
                design: if mixed { Design::Mixed } else { Design::Separated },
                t,
                n,
                p,
                e,
                k,
                transition: "diagonal".into(),
                mode: if par { Mode::Parallel } else { Mode::Serial },
                flops_recurrence: fr,
                flops_total: ft,
                wall_ns_median: med,
                wall_ns_iqr: iqr,
                checksum,
            },
        )
}

fn check_record() -> impl Strategy<Value = CheckRecord> {
    (
        "[a-z_0-9.]{1,20}",
        any::<u64>(),
        finite(),
        finite(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(check, seed, metric, tolerance, le, passed)| CheckRecord {
            check,
            seed,
            t: 64,
            n: 8,
            p: 4,
            e: 4,
            k: 1,
            metric,
            sense: if le { Sense::Le } else { Sense::Ge },
            tolerance,
            passed,
        })
}

proptest! {
    #[test]
    fn bench_csv_round_trips_exactly(records in prop::collection::vec(bench_record(), 0..8)) {
        let text = records_to_string(&records).unwrap();
        prop_assert!(!text.contains('"') && !text.contains('\r'));
        let back: Vec<BenchRecord> = read_csv(text.as_bytes()).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(a.checksum.to_bits(), b.checksum.to_bits());
        }
        prop_assert_eq!(back, records);
    }

    #[test]
    fn check_csv_round_trips_exactly(records in prop::collection::vec(check_record(), 1..8)) {
        let text = records_to_string(&records).unwrap();
        let back: Vec<CheckRecord> = read_csv(text.as_bytes()).unwrap();
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(a.metric.to_bits(), b.metric.to_bits());
        }
        prop_assert_eq!(back, records);
    }
}

#[test]
fn verify_is_byte_identical_and_passes() {
    let run = || {
        bin()
            .args(["verify", "--seed", "7", "--instances", "10"])
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_reads_the_seed_from_the_environment() {
    let flag = bin()
        .args(["verify", "--seed", "3", "--instances", "2"])
        .output()
        .unwrap();
    let env = bin()
        .args(["verify", "--instances", "2"])
        .env("MOE_SSM_SEED", "3")
        .output()
        .unwrap();
    assert_eq!(flag.stdout, env.stdout);
}

#[test]
fn flops_recurrence_ignores_expert_count() {
    let col = |e: &str| {
        let out = bin()
            .args([
                "flops", "--design", "mixed", "--T", "1024", "--N", "16", "--P", "64", "--E", e, "--k", "1",
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let row = text.lines().nth(1).unwrap().to_string();
        row.split(',').nth(6).unwrap().to_string()
    };
    assert_eq!(col("4"), col("8"));
}

#[test]
fn usage_errors_exit_with_two() {
    let cases: &[&[&str]] = &[
        &["verify", "--no-such-flag"],
        &["bench", "--T", "16", "--N", "4", "--P", "8", "--E", "", "--k", "1"],
        &["bench", "--T", "16", "--N", "4", "--P", "8", "--k", "1"],
        &["bench", "--T", "16", "--N", "4", "--P", "8", "--E", "2", "--k", "3"],
        &["flops", "--T", "8", "--N", "2", "--P", "2", "--E", "2", "--k", "3"],
        &["frobnicate"],
    ];
    for args in cases {
        let out = bin().args(*args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn bench_writes_parseable_csv() {
    let dir = std::env::temp_dir().join(format!("moe-ssm-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("out.csv");
    let status = bin()
        .args([
            "bench",
            "--T",
            "16",
            "--N",
            "4",
            "--P",
            "8",
            "--E",
            "2,4",
            "--k",
            "1",
            "--repeats",
            "3",
        ])
        .arg("--out")
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let records: Vec<BenchRecord> = read_csv(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.wall_ns_median > 0));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn auxiliary_commands_succeed() {
    for args in [
        &["demo-expressivity"][..],
        &["gradcheck", "--seed", "1"],
        &["ssd-equiv", "--instances", "2"],
    ] {
        let out = bin().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
