use dirlab::report::cli::cli_main;

fn run(args: &[&str]) -> i32 {
    let mut v = vec!["dirlab"];
    v.extend_from_slice(args);
    cli_main(v)
}

#[test]
fn oracle_matches_floors() {
    assert_eq!(run(&["oracle", "--k", "1,5,8", "--n-pairs", "200"]), 0);
}

#[test]
fn gradcheck_passes() {
    assert_eq!(run(&["gradcheck"]), 0);
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(run(&["suite", "--modes", "bogus"]), 2);
    assert_eq!(run(&["nonsense"]), 2);
}

#[test]
fn gen_writes_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.tsv");
    assert_eq!(run(&["gen", "--k", "5", "--n-pairs", "50", "--out", out.to_str().unwrap()]), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().filter(|l| !l.starts_with('#')).count() >= 50);
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let code = run(&[
        "run", "--k", "5", "--mode", "mlp", "--n-pairs", "30", "--epochs", "1", "--out", d,
    ]);
    assert_eq!(code, 0);
    assert_eq!(run(&["report", d]), 0);
    for f in ["results.csv", "tables.md", "gap_vs_k.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn report_without_records_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["report", dir.path().to_str().unwrap()]), 1);
}
