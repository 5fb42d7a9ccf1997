use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

fn rdrec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdrec"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[test]
fn stats_on_beauty_sized_counts() {
    let (users, items, reviews) = (22_363usize, 12_101usize, 198_502usize);
    // Coprime sizes make (r mod users, r mod items) distinct for r < users * items.
    assert_eq!(gcd(users, items), 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("beauty.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    for r in 0..reviews {
        writeln!(
            f,
            r#"{{"user":"U{}","item":"I{}","text":"fine","ts":{r}}}"#,
            r % users,
            r % items
        )
        .unwrap();
    }
    drop(f);
    let o = rdrec(&["stats", "--input", "beauty.jsonl"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("0.0734"), "{out}");
    assert!(out.contains("8.9"), "{out}");
    assert!(out.contains("22363") && out.contains("12101"), "{out}");
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = rdrec(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = rdrec(&["stats", "--input", "x.jsonl", "--set", "trainer.patience=0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trainer.patience"));
    std::fs::write(dir.path().join("c.json"), r#"{"trainer": {"patiense": 3}}"#).unwrap();
    let o = rdrec(&["stats", "--input", "x.jsonl", "--config", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = rdrec(&["stats", "--input", "nope.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus:"));
}

#[test]
fn mock_pipeline_on_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = rdrec(args, d);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(&["synth", "--output", "s"]);
    let cfg = ["--config", "s/config.json", "--set", "trainer.max_epochs=2"];
    fn with<'a>(extra: &[&'a str], cfg: &[&'a str]) -> Vec<&'a str> {
        extra.iter().chain(cfg).copied().collect()
    }
    ok(&with(&["distill", "--backend", "mock"], &cfg));
    ok(&with(&["prepare"], &cfg));
    ok(&with(&["train"], &cfg));
    ok(&with(&["recommend", "--task", "topn"], &cfg));
    let out = ok(&with(&["evaluate", "--task", "topn"], &cfg));
    assert!(out.contains("H@10"), "{out}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("s/reports/report.topn.json")).unwrap()).unwrap();
    let hr10 = report["reports"][0]["hr"]["10"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hr10));
    assert_eq!(report["reports"][0]["n_users"], 30);
    for stage in ["synth", "distill", "prepare", "train", "recommend", "evaluate"] {
        let m: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(d.join(format!("s/reports/manifest.{stage}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(m["command"], stage);
        assert!(m["config"]["trainer"]["batch_size"].is_number());
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("s/reports/manifest.train.json")).unwrap()).unwrap();
    assert!(m["inputs"].as_object().unwrap().len() >= 3);

    let first: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(d.join("s/reviews.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let (u, i) = (first["user"].as_str().unwrap(), first["item"].as_str().unwrap());
    let out = ok(&with(&["explain", "--user", u, "--item", i], &cfg));
    assert!(out.contains("explanation:") && out.contains("attribute:"), "{out}");
}

fn long_flags(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (i, _) in text.match_indices("--") {
        let rest = &text[i + 2..];
        let name: String = rest
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric() || *c == '-')
            .collect();
        let preceded_ok = i == 0 || !text[..i].ends_with(|c: char| c.is_ascii_alphanumeric() || c == '-');
        if preceded_ok && name.len() > 1 && name.chars().next().unwrap().is_ascii_lowercase() {
            out.insert(format!("--{name}"));
        }
    }
    out
}

#[test]
fn readme_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let section = readme
        .split("## Command line")
        .nth(1)
        .expect("README has a command line section")
        .split("\n## ")
        .next()
        .unwrap();
    let mut from_help = BTreeSet::new();
    for cmd in [
        None,
        Some("synth"),
        Some("stats"),
        Some("distill"),
        Some("prepare"),
        Some("train"),
        Some("recommend"),
        Some("evaluate"),
        Some("explain"),
    ] {
        let args: Vec<&str> = cmd.into_iter().chain(["--help"]).collect();
        let o = rdrec(&args, dir.path());
        assert!(o.status.success());
        let help = stdout(&o);
        if let Some(c) = cmd {
            assert!(section.contains(&format!("rdrec {c}")), "README misses subcommand {c}");
        }
        from_help.extend(long_flags(&help));
    }
    let documented = long_flags(section);
    let missing: Vec<_> = from_help.difference(&documented).collect();
    let stale: Vec<_> = documented.difference(&from_help).collect();
    assert!(missing.is_empty(), "flags missing from README: {missing:?}");
    assert!(stale.is_empty(), "README documents unknown flags: {stale:?}");
}
