use std::process::Command;

use cfas_cli::bench::{self, Action, Scenario, Targets};
use cfas_core::MechanismKind;
use cfas_net::runtime::{ephemeral_config, Parts, Stack};

#[test]
fn bench_writes_one_row_per_action_and_arm() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    std::fs::write(&scenario, "repetitions = 3\nwarmup = 1\nactions = [\"login\", \"chat_send\"]\n").unwrap();
    let out = dir.path().join("out.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_cfas"))
        .args(["bench", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["action", "with_cfas", "mean_ms", "p95_ms", "n"]);
    let rows: Vec<(String, String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string(), r[4].to_string())
        })
        .collect();
    let want = [("login", "false"), ("login", "true"), ("chat_send", "false"), ("chat_send", "true")];
    assert_eq!(rows.len(), want.len());
    for ((a, arm, n), (wa, warm)) in rows.iter().zip(want) {
        assert_eq!((a.as_str(), arm.as_str(), n.as_str()), (wa, warm, "3"));
    }
}

#[test]
fn unknown_scenario_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    std::fs::write(&scenario, "reps = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cfas"))
        .args(["bench", "--scenario", scenario.to_str().unwrap(), "--out", "/dev/null"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reps"));
}

/// Overheads closer than this are treated as tied when comparing order.
const TIE_MS: f64 = 2.0;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn overhead_order_is_stable_across_three_runs() {
    let scenario = Scenario {
        enforce: vec![MechanismKind::SensitiveImage],
        ..Scenario::default()
    };
    let mut runs = Vec::new();
    for _ in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let stack = Stack::start(ephemeral_config(dir.path()), Parts::ALL).await.unwrap();
        let targets = Targets::from_stack(&stack).unwrap();
        let report = bench::run(&scenario, &targets).await.unwrap();
        stack.stop().await;
        assert_eq!(report.aborted, None);
        runs.push(report.overheads());
    }
    for a in Action::ALL {
        for b in Action::ALL {
            let gaps: Vec<f64> = runs.iter().map(|o| o[&a] - o[&b]).collect();
            if gaps.iter().all(|g| g.abs() > TIE_MS) {
                let first = gaps[0] > 0.0;
                assert!(
                    gaps.iter().all(|g| (*g > 0.0) == first),
                    "{} vs {}: {gaps:?}",
                    a.as_str(),
                    b.as_str()
                );
            }
        }
    }
    for o in &runs {
        let top = o.iter().max_by(|x, y| x.1.total_cmp(y.1)).unwrap();
        assert_eq!(*top.0, Action::ImageUpload, "{o:?}");
    }
}

#[test]
fn shipped_example_files_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let s = Scenario::load(&root.join("bench/scenario.toml")).unwrap();
    assert_eq!(s.actions.len(), Action::ALL.len());
    cfas_net::config::Config::load(&root.join("cfas.example.toml")).unwrap();
}
