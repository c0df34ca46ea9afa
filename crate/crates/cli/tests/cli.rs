use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn attnlab(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_attnlab"));
    cmd.args(args);
    cmd.env_remove("ATTNLAB_SEED");
    if let Some(s) = env_seed {
        cmd.env("ATTNLAB_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = attnlab(args, None);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_GENDER: &[&str] = &[
    "--task", "gender", "--n", "200", "--n-dev", "60", "--n-test", "60", "--max-len", "12", "--vocab", "60",
    "--embed-dim", "8", "--hidden-dim", "8", "--epochs", "3", "--lr", "0.01",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn gen_writes_records_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    ok(&["gen", "--task", "reverse", "--n", "1000", "--max-len", "8", "--n-dev", "50", "--n-test", "50", "--outdir", out]);
    let dir = tmp.path().join("reverse-data-s0");
    let lines = fs::read_to_string(dir.join("train.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 1000);
    let m = json(&dir.join("manifest.json"));
    assert_eq!(m["splits"][0]["count"], 1000);
    assert!(m["splits"].as_array().unwrap().iter().all(|s| s["bijective"] == true));
}

#[test]
fn gen_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, seed: &str| {
        let out = tmp.path().join(dir);
        ok(&["gen", "--task", "copy", "--n", "300", "--n-dev", "30", "--n-test", "30", "--seed", seed, "--outdir", s(&out)]);
        fs::read(out.join(format!("copy-data-s{seed}")).join("train.jsonl")).unwrap()
    };
    assert_eq!(run("a", "4"), run("b", "4"));
    assert_ne!(run("c", "4"), run("d", "5"));
}

#[test]
fn gender_manifest_reports_pronoun_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--task", "gender", "--n", "2000", "--n-dev", "100", "--n-test", "100", "--outdir", s(tmp.path())]);
    let m = json(&tmp.path().join("gender-bios-data-s0/manifest.json"));
    let coverage = m["splits"][0]["mask_coverage"].as_f64().unwrap();
    assert!((coverage - 0.07).abs() < 0.01, "{coverage}");
    assert!(m["lexicon_size"].as_u64().unwrap() > 0);
}

#[test]
fn seed_comes_from_flag_then_file_then_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    let small = ["--n", "20", "--n-dev", "10", "--n-test", "10"];
    let o = attnlab(&with(&["gen", "--task", "copy", "--outdir", out], &small), Some("7"));
    assert!(o.status.success());
    assert!(tmp.path().join("copy-data-s7").exists());

    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "seed = 3\n[data]\ntask = \"copy\"\n").unwrap();
    let o = attnlab(&with(&["gen", "--config", s(&cfg), "--outdir", out], &small), Some("7"));
    assert!(o.status.success());
    assert!(tmp.path().join("copy-data-s3").exists());

    let o = attnlab(&with(&["gen", "--config", s(&cfg), "--seed", "9", "--outdir", out], &small), Some("7"));
    assert!(o.status.success());
    assert!(tmp.path().join("copy-data-s9").exists());
}

#[test]
fn train_writes_a_complete_run_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    let base = &with(&["train", "--outdir", out, "--run-id", "base", "--lambda", "0"], TINY_GENDER);
    ok(base);
    let dir = tmp.path().join("base");
    for f in ["config.toml", "model.json", "metrics.json", "selection.json", "records.json", "state.json", "checkpoints/epoch-003.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read(dir.join("metrics.json")).unwrap();
    let stamp = fs::metadata(dir.join("model.json")).unwrap().modified().unwrap();
    ok(base);
    assert_eq!(fs::metadata(dir.join("model.json")).unwrap().modified().unwrap(), stamp);
    let forced: Vec<&str> = base.iter().copied().chain(["--force"]).collect();
    ok(&forced);
    assert_eq!(fs::read(dir.join("metrics.json")).unwrap(), metrics);

    // The penalized run takes its base accuracy from the unpenalized one.
    for lambda in ["0.1", "1"] {
        let id = format!("pen{lambda}");
        let mut args = vec!["train", "--outdir", out, "--run-id", &id, "--lambda", lambda, "--base-run", s(&dir)];
        args.extend(TINY_GENDER);
        ok(&args);
        let sel = json(&tmp.path().join(&id).join("selection.json"));
        assert_eq!(sel["base_accuracy"], json(&dir.join("selection.json"))["dev_accuracy"]);
    }

    let o = attnlab(&with(&["train", "--outdir", out, "--run-id", "base", "--lambda", "0.5"], TINY_GENDER), None);
    assert_eq!(o.status.code(), Some(2), "a different config must not reuse the directory");
}

#[test]
fn interrupted_training_resumes_to_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    let args = |id: &'static str, epochs: &'static str| {
        let mut a = vec!["train", "--outdir", out, "--run-id", id, "--lambda", "1"];
        a.extend(TINY_GENDER.iter().filter(|&&x| x != "--epochs" && x != "3"));
        a.extend(["--epochs", epochs]);
        a
    };
    ok(&args("full", "3"));

    // Stop after two epochs: keep the state and checkpoints, drop the results,
    // and let the directory claim three epochs.
    ok(&args("cut", "2"));
    let cut = tmp.path().join("cut");
    for f in ["metrics.json", "model.json", "selection.json", "records.json"] {
        fs::remove_file(cut.join(f)).unwrap();
    }
    let cfg = fs::read_to_string(cut.join("config.toml")).unwrap();
    fs::write(cut.join("config.toml"), cfg.replace("epochs = 2", "epochs = 3")).unwrap();
    ok(&args("cut", "3"));

    let full = tmp.path().join("full");
    for f in ["metrics.json", "records.json", "selection.json"] {
        assert_eq!(json(&full.join(f)), json(&cut.join(f)), "{f}");
    }
}

#[test]
fn diagnose_and_heatmap_on_a_classifier() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    ok(&with(&["train", "--outdir", out, "--run-id", "r", "--lambda", "1"], TINY_GENDER));
    let dir = tmp.path().join("r");
    ok(&["diagnose", s(&dir)]);
    let m = json(&dir.join("metrics.json"));
    assert!(m["zeroed_accuracy"].is_number());
    assert_eq!(m["norm_ratio_series"].as_array().unwrap().len(), 4);

    let svg_path = ok(&["heatmap", s(&dir), "2"]);
    let svg = fs::read_to_string(svg_path.trim()).unwrap();
    assert_eq!(svg.matches(r#"class="row-label""#).count(), 1);
    let txt = ok(&["heatmap", s(&dir), "2", "--format", "txt", "--split", "val"]);
    assert!(txt.trim().ends_with("heatmap-val-2.txt"));
    let o = attnlab(&["heatmap", s(&dir), "100000"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seq2seq_heatmap_marks_gold_alignments() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    ok(&[
        "train", "--task", "reverse", "--n", "200", "--n-dev", "20", "--n-test", "20", "--max-len", "5", "--vocab", "12",
        "--embed-dim", "8", "--hidden-dim", "8", "--epochs", "1", "--outdir", out, "--run-id", "rev",
    ]);
    let dir = tmp.path().join("rev");
    let svg = fs::read_to_string(ok(&["heatmap", s(&dir), "0"]).trim()).unwrap();
    // The same settings through `gen` give the split the run was tested on.
    ok(&["gen", "--task", "reverse", "--n", "200", "--n-dev", "20", "--n-test", "20", "--max-len", "5", "--vocab", "12", "--outdir", out]);
    let first = fs::read_to_string(tmp.path().join("reverse-data-s0/test.jsonl")).unwrap();
    let test: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let src_len = test["src"].as_array().unwrap().len();
    let align = test["align"].as_array().unwrap();
    let rows = svg.matches(r#"class="row-label""#).count();
    assert_eq!(svg.matches(r#"class="cell""#).count(), rows * (src_len + 2));
    for (t, a) in align.iter().enumerate().take(rows) {
        let col = a[0].as_u64().unwrap() + 1;
        assert!(svg.contains(&format!(r#"data-row="{t}" data-col="{col}""#)), "step {t}");
    }
    assert_eq!(svg.matches(r#"class="gold""#).count(), rows.min(align.len()));
    ok(&["diagnose", s(&dir)]);
    let a = json(&dir.join("alignment.json"));
    assert!(a["hit_rate"].as_f64().unwrap() <= a["hit_rate_within_2"].as_f64().unwrap());
}

#[test]
fn sweep_text_and_json_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--outdir", s(tmp.path()), "--lambdas", "0,1", "--seeds", "0,1", "--jobs", "2", "--models", "embedding:single,recurrent:single"];
    args.extend(TINY_GENDER);
    let text = ok(&args);
    let report = json(&tmp.path().join("gender-bios-sweep/report.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 2 + 2);
    let lines: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(lines.len(), rows.len());
    for (line, row) in lines.iter().zip(rows) {
        let acc = format!("{:.1}", 100.0 * row["accuracy"].as_f64().unwrap());
        assert!(line.contains(&acc), "{line} vs {acc}");
        assert!(line.starts_with(row["model"].as_str().unwrap()));
    }
    assert!(text.contains('✗'));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    let o = attnlab(&["gen", "--task", "nonsense", "--outdir", out], None);
    assert_eq!(o.status.code(), Some(2));

    let bad_cfg = tmp.path().join("bad.toml");
    fs::write(&bad_cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(attnlab(&["gen", "--config", s(&bad_cfg), "--outdir", out], None).status.code(), Some(2));

    let corpus = tmp.path().join("corpus.jsonl");
    fs::write(&corpus, "{\"tokens\": [\"a\"], \"label\": 0}\nnot json\n").unwrap();
    let lex = tmp.path().join("lex.txt");
    fs::write(&lex, "a\n").unwrap();
    let cfg = tmp.path().join("corpus.toml");
    let c = s(&corpus);
    fs::write(
        &cfg,
        format!("[data]\ntask = \"gender-bios\"\n[data.corpus]\ntrain = {c:?}\ndev = {c:?}\ntest = {c:?}\nlexicon = {:?}\n", s(&lex)),
    )
    .unwrap();
    let o = attnlab(&["train", "--config", s(&cfg), "--outdir", out], None);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let mut args = vec!["train", "--outdir", out, "--run-id", "boom"];
    args.extend(TINY_GENDER.iter().filter(|&&a| a != "--lr" && a != "0.01"));
    args.extend(["--lr", "1e306"]);
    let o = attnlab(&args, None);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corpus_files_train_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    ok(&["gen", "--task", "gender", "--n", "120", "--n-dev", "40", "--n-test", "40", "--max-len", "10", "--vocab", "40", "--outdir", out]);
    let data = tmp.path().join("gender-bios-data-s0");
    let lex = tmp.path().join("lex.txt");
    fs::write(&lex, "she\nher\nhers\nherself\nhe\nhim\nhis\nhimself\n").unwrap();
    let p = |f: &str| -> PathBuf { data.join(f) };
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\ntask = \"gender-bios\"\n[data.corpus]\ntrain = {:?}\ndev = {:?}\ntest = {:?}\nlexicon = {:?}\n[model]\nfamily = \"embedding\"\nembed_dim = 8\n[train]\nepochs = 1\n",
            s(&p("train.jsonl")),
            s(&p("val.jsonl")),
            s(&p("test.jsonl")),
            s(&lex)
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&cfg), "--outdir", out, "--run-id", "corpus"]);
    let m = json(&tmp.path().join("corpus/metrics.json"));
    assert!(m["accuracy"].as_f64().unwrap() >= 0.0);
}
