use std::path::Path;
use std::process::{Command, Output};

fn persrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persrec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn cost_reports_worked_example() {
    let out = persrec(&["cost", "--L", "16", "--n", "1280", "--d", "64", "--k", "4", "--m", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let s: f64 = text
        .lines()
        .find(|l| l.starts_with("inference ratio S"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.236..=0.241).contains(&s), "{text}");
    assert!(text.contains("1.003125"), "{text}");
}

#[test]
fn mask_matches_golden() {
    let out = persrec(&["mask", "--segments", "8,12,8,16", "--experts", "1,1,1,0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let golden = include_str!("golden/mask_8_12_8_16.txt");
    assert_eq!(stdout(&out), golden);
    assert_eq!(golden.lines().count(), 47);
}

#[test]
fn plan_file_equals_flags() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.txt");
    std::fs::write(&plan, "# four segments\nsegments = [8,12,8,16]\nexperts = [1,1,1,0]\n").unwrap();
    let a = persrec(&["mask", "--plan-file", p(&plan)]);
    let b = persrec(&["mask", "--segments", "8,12,8,16", "--experts", "1,1,1,0"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn zero_expert_plan_matches_causal_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let data = d("data.tsv");
    let gen = persrec(&[
        "gen-data", "--users", "40", "--vocab", "48", "--clusters", "4", "--seq-len", "24", "--seed", "3",
        "--out", p(&data),
    ]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(d("data.tsv.manifest.json").exists());

    let common = ["--epochs", "2", "--dim", "8", "--ffn", "16", "--data", p(&data)];
    let seg = d("seg.psr");
    let mut args = vec!["train", "--segments", "20", "--experts", "0", "--out", p(&seg)];
    args.extend(common);
    let a = persrec(&args);
    assert!(a.status.success(), "{}", stderr(&a));

    let causal = d("causal.psr");
    let mut args = vec!["train", "--segments", "20", "--causal-baseline", "--out", p(&causal)];
    args.extend(common);
    let b = persrec(&args);
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(std::fs::read(&seg).unwrap(), std::fs::read(&causal).unwrap());

    let eval = |ckpt: &Path, plan: &[&str], out: &Path| {
        let mut args = vec!["eval", "--data", p(&data), "--checkpoint", p(ckpt), "--out", p(out)];
        args.extend_from_slice(plan);
        let o = persrec(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out).unwrap()
    };
    let m1 = eval(&seg, &["--segments", "20", "--experts", "0"], &d("m1.csv"));
    let m2 = eval(&causal, &["--segments", "20"], &d("m2.csv"));
    assert_eq!(m1, m2);
    assert!(d("m1.csv.manifest.json").exists());
}

#[test]
fn errors_exit_nonzero_with_module_names() {
    let out = persrec(&["mask", "--segments", "4,0", "--experts", "1,0"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));

    let out = persrec(&["cost", "--L", "0", "--n", "10", "--d", "4"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("InvalidParams"), "{}", stderr(&out));

    let out = persrec(&["eval", "--data", "/nonexistent.tsv", "--segments", "4", "--checkpoint", "x"]);
    assert!(!out.status.success());

    let out = persrec(&["no-such-command"]);
    assert!(!out.status.success());
}

#[test]
fn cache_round_trip_and_plan_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let data = d("data.tsv");
    assert!(persrec(&["gen-data", "--users", "20", "--vocab", "32", "--clusters", "2", "--seq-len", "16", "--out", p(&data)])
        .status
        .success());
    let ckpt = d("m.psr");
    let t = persrec(&[
        "train", "--data", p(&data), "--segments", "8,4", "--experts", "2,0", "--epochs", "1", "--dim", "8",
        "--ffn", "16", "--out", p(&ckpt),
    ]);
    assert!(t.status.success(), "{}", stderr(&t));
    let cache = d("c.psc");
    let built = persrec(&[
        "infer", "--segments", "8,4", "--experts", "2,0", "--checkpoint", p(&ckpt), "--prefix", "1,2,3,4,5,6,7,8",
        "--recent", "3,4", "--k", "5", "--save-cache", p(&cache),
    ]);
    assert!(built.status.success(), "{}", stderr(&built));
    let reused = persrec(&[
        "infer", "--segments", "8,4", "--experts", "2,0", "--checkpoint", p(&ckpt), "--cache", p(&cache),
        "--recent", "3,4", "--k", "5",
    ]);
    assert!(reused.status.success(), "{}", stderr(&reused));
    assert_eq!(built.stdout, reused.stdout);
    let wrong = persrec(&[
        "infer", "--segments", "8,4", "--experts", "1,0", "--checkpoint", p(&ckpt), "--cache", p(&cache),
        "--recent", "3",
    ]);
    assert!(!wrong.status.success());
    assert!(stderr(&wrong).contains("PlanMismatch"), "{}", stderr(&wrong));
}
