use std::path::Path;

use stagecap_cli::run;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["stagecap".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(&argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const SMALL: &[&str] = &["--d-model", "16", "--d-ff", "32", "--heads", "2", "--batch-size", "8", "--warmup", "20"];

/// Data plus one small MNIC checkpoint.
fn setup(root: &Path) {
    let data = root.join("data");
    ok(&["gen-data", "--n", "60", "--held-out", "12", "--seed", "4", "--out", p(&data)]);
    let mut args = vec!["train", "--data", p(&data), "--epochs", "2", "--seed", "4"];
    args.extend_from_slice(SMALL);
    let ck = root.join("mnic");
    args.extend_from_slice(&["--out", p(&ck)]);
    ok(&args);
}

#[test]
fn generate_eval_and_sweeps_agree() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let (data, ck) = (root.join("data"), root.join("mnic"));
    let gen = root.join("gen");
    let trace = root.join("trace.jsonl");
    ok(&[
        "generate", "--checkpoint", p(&ck), "--data", p(&data), "--length", "7", "--eval-inline",
        "--trace", p(&trace), "--seed", "2", "--out", p(&gen),
    ]);
    let captions = read(&gen.join("captions.tsv"));
    assert_eq!(captions.lines().count(), 12);
    assert!(captions.lines().all(|l| l.split('\t').nth(2) == Some("4")));

    // K = 4 stages per scene, one JSON object each
    let lines: Vec<String> = read(&trace).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 12 * 4);
    assert!(lines[0].contains("\"stage\":1") && lines[3].contains("\"stage\":4"));

    let ev = root.join("eval");
    ok(&["eval", "--captions", p(&gen.join("captions.tsv")), "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&ev)]);
    assert_eq!(read(&ev.join("metrics.csv")), read(&gen.join("metrics.csv")));

    let two = root.join("two");
    let trace2 = root.join("trace2.jsonl");
    ok(&[
        "generate", "--checkpoint", p(&ck), "--data", p(&data), "--length", "7", "--rounds", "2",
        "--trace", p(&trace2), "--limit", "3", "--out", p(&two),
    ]);
    assert_eq!(read(&trace2).lines().count(), 3 * 7);

    let stages = root.join("stages");
    ok(&["sweep-stages", "--checkpoint", p(&ck), "--data", p(&data), "--length", "7", "--seed", "2", "--out", p(&stages)]);
    let rows: Vec<String> = read(&stages.join("metrics.csv")).lines().map(str::to_string).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("round,stage,ratio,scenes,bleu1"));
    // the last stage is the generated caption
    let last_metrics = rows[4].splitn(4, ',').nth(3).unwrap();
    let gen_metrics = read(&gen.join("metrics.csv")).lines().nth(1).unwrap().to_string();
    assert_eq!(last_metrics, gen_metrics);

    let lengths = root.join("lengths");
    ok(&["sweep-lengths", "--checkpoint", p(&ck), "--data", p(&data), "--lengths", "6-8", "--seed", "2", "--out", p(&lengths)]);
    let rows: Vec<String> = read(&lengths.join("metrics.csv")).lines().map(str::to_string).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2], format!("7,{gen_metrics}"));
}

#[test]
fn singleton_grid_matches_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let (data, ck) = (root.join("data"), root.join("mnic"));
    let grid = root.join("grid.txt");
    std::fs::write(&grid, "0.4,0.6,0.8,1.0 | 0.4,0.6,0.8,1.0 | false\n").unwrap();
    let sweep = root.join("sweep");
    let mut args = vec!["sweep-ratios", "--data", p(&data), "--grid", p(&grid), "--epochs", "2", "--seed", "4", "--length", "7"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", p(&sweep)]);
    ok(&args);
    let gen = root.join("gen");
    ok(&["generate", "--checkpoint", p(&ck), "--data", p(&data), "--length", "7", "--seed", "4", "--eval-inline", "--out", p(&gen)]);
    let sweep_row = read(&sweep.join("metrics.csv")).lines().nth(1).unwrap().to_string();
    let gen_row = read(&gen.join("metrics.csv")).lines().nth(1).unwrap().to_string();
    assert_eq!(sweep_row, format!("0.4/0.6/0.8/1,0.4/0.6/0.8/1,false,{gen_row}"));
    assert_eq!(read(&sweep.join("model-1/checkpoint.manifest")), read(&ck.join("checkpoint.manifest")));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let conf = root.join("gen.conf");
    std::fs::write(&conf, "# small corpus\nn = 30\nheld_out = 5\nseed = 8\n").unwrap();
    let a = root.join("a");
    ok(&["gen-data", "--config", p(&conf), "--n", "20", "--out", p(&a)]);
    let echo = read(&a.join("config.txt"));
    assert!(echo.contains("\nn=20\n") && echo.contains("held-out=5") && echo.contains("seed=8"), "{echo}");
    assert!(!echo.lines().any(|l| l.starts_with("out=")));
    assert_eq!(read(&a.join("train.captions.tsv")).lines().filter(|l| !l.is_empty()).count() >= 20, true);

    let b = root.join("b");
    ok(&["gen-data", "--n", "20", "--held-out", "5", "--seed", "8", "--out", p(&b)]);
    assert_eq!(read(&b.join("config.txt")), echo);
    assert_eq!(std::fs::read(a.join("train.feat")).unwrap(), std::fs::read(b.join("train.feat")).unwrap());
}

#[test]
fn bad_input_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let (code, _, err) = cli(&["gen-data", "--bogus", "--out", p(&out)]);
    assert_ne!(code, 0);
    assert!(err.contains("--bogus"));

    let (code, _, err) = cli(&["generate", "--checkpoint", p(&dir.path().join("missing")), "--data", ".", "--out", p(&out)]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    let (code, _, err) = cli(&["train", "--data", ".", "--ratios", "0.4,1.5", "--out", p(&out)]);
    assert_ne!(code, 0);
    assert!(err.contains("1.5"), "{err}");

    let (code, out_text, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out_text.contains("sweep-ratios"));
}
