mod common;

use common::cli;
use crpcl::trainer::{RunSummary, TaskSummary};

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_lambda = cli::run(dir.path(), &["--set", "train.lambda=-1", "train"]);
    assert_eq!(bad_lambda.status.code(), Some(2), "{}", stderr(&bad_lambda));
    assert!(stderr(&bad_lambda).contains("lambda"));

    let unknown_key = cli::run(dir.path(), &["--set", "train.lamda=1", "discover"]);
    assert_eq!(unknown_key.status.code(), Some(2));

    let missing = dir.path().join("nope.jsonl");
    let no_file = cli::run(dir.path(), &["discover", "--embeddings", missing.to_str().unwrap()]);
    assert_eq!(no_file.status.code(), Some(3));
    assert!(stderr(&no_file).contains("nope.jsonl"));

    let garbage = dir.path().join("summary.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    let bad_summary = cli::run(dir.path(), &["evaluate", garbage.to_str().unwrap()]);
    assert_eq!(bad_summary.status.code(), Some(3));

    let ok = cli::run(dir.path(), &["discover"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("Discovered K: 5"), "{}", stdout(&ok));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for sub in ["gen-stream", "discover", "train", "prop1"] {
        let oa = cli::run_small(a.path(), sub);
        let ob = cli::run_small(b.path(), sub);
        assert!(oa.status.success(), "{sub}: {}", stderr(&oa));
        let strip = |o: &std::process::Output, d: &std::path::Path| stdout(o).replace(d.to_str().unwrap(), "OUT");
        assert_eq!(strip(&oa, a.path()), strip(&ob, b.path()), "{sub} stdout differs");
    }
    let (fa, fb) = (cli::data_files(a.path()), cli::data_files(b.path()));
    assert!(fa.len() > 5);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (path, bytes) in &fa {
        assert!(bytes == &fb[path], "{} differs", path.display());
    }
}

#[test]
fn single_task_run_reports_fr_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli::run(
        dir.path(),
        &[
            "--set",
            "stream.true_cluster_count=1",
            "--set",
            "stream.tasks_per_cluster=[1]",
            "train",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("FR: n/a"));
    let report = cli::run(dir.path(), &["evaluate"]);
    assert!(stdout(&report).contains("FR: n/a"));
}

fn task(id: &str, peak: f64, last: f64) -> TaskSummary {
    TaskSummary {
        task_id: id.into(),
        cluster_id: 0,
        peak_dice: peak,
        final_dice: last,
        forgetting: peak - last,
    }
}

#[test]
fn report_keeps_the_sign_of_backward_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let summary = RunSummary {
        avg_dice: Some(0.8),
        forgetting_rate: Some(-0.05),
        discovered_k: 1,
        tasks: vec![task("a", 0.7, 0.75), task("b", 0.9, 0.85)],
        clusters: vec![],
        trace: vec![],
    };
    let path = dir.path().join("summary.json");
    std::fs::write(&path, serde_json::to_string(&summary).unwrap()).unwrap();
    let out = stdout(&cli::run(dir.path(), &["evaluate", path.to_str().unwrap()]));
    assert!(out.contains("FR: -0.0500"), "{out}");
    assert!(out.contains("-0.0500") && out.contains("+0.0500"), "{out}");
}

#[test]
fn printed_table_parses_back_to_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cli::run_small(dir.path(), "train").status.success());
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let out = stdout(&cli::run(dir.path(), &["evaluate"]));
    let field = |name: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(name)).unwrap();
        line[name.len()..].trim().parse().unwrap()
    };
    assert!((field("Avg Dice:") - summary.avg_dice.unwrap()).abs() <= 1e-4);
    assert!((field("FR:") - summary.forgetting_rate.unwrap()).abs() <= 1e-4);
    let rows: Vec<Vec<&str>> = out
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|w| w.len() == 5 && summary.tasks.iter().any(|t| t.task_id == w[0]))
        .collect();
    assert_eq!(rows.len(), summary.tasks.len());
    for (row, t) in rows.iter().zip(&summary.tasks) {
        assert_eq!(row[1].parse::<usize>().unwrap(), t.cluster_id);
        let vals: Vec<f64> = row[2..].iter().map(|x| x.parse().unwrap()).collect();
        for (v, expected) in vals.iter().zip([t.peak_dice, t.final_dice, t.forgetting]) {
            assert!((v - expected).abs() <= 1e-4, "{} {v} vs {expected}", t.task_id);
        }
    }
}

#[test]
fn resume_picks_up_where_the_checkpoint_stopped() {
    let gen = tempfile::tempdir().unwrap();
    assert!(cli::run_small(gen.path(), "gen-stream").status.success());
    let all = gen.path().join("tasks");
    let head = gen.path().join("head");
    std::fs::create_dir(&head).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&all)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in &names[..3] {
        std::fs::copy(all.join(n), head.join(n)).unwrap();
    }

    let fresh = tempfile::tempdir().unwrap();
    let full = cli::run(fresh.path(), &["train", "--tasks", all.to_str().unwrap()]);
    assert!(full.status.success(), "{}", stderr(&full));

    let resumed = tempfile::tempdir().unwrap();
    assert!(cli::run(resumed.path(), &["train", "--tasks", head.to_str().unwrap()])
        .status
        .success());
    let second = cli::run(resumed.path(), &["train", "--tasks", all.to_str().unwrap(), "--resume"]);
    assert!(second.status.success(), "{}", stderr(&second));

    for f in ["ledger.csv", "summary.json", "state.json"] {
        assert_eq!(
            std::fs::read(fresh.path().join(f)).unwrap(),
            std::fs::read(resumed.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let no_state = tempfile::tempdir().unwrap();
    let missing = cli::run(no_state.path(), &["train", "--resume"]);
    assert_eq!(missing.status.code(), Some(3));
}
