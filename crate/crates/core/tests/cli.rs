mod common;

use std::path::Path;
use std::process::{Command, Output};

use vop::io::{read_jsonl, RetrievalRecord};

use common::{write_rooms, SMALL_CONFIG};

fn vop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vop")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vop(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["supervise", "train", "embed", "index", "query", "eval", "posegraph"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    let q = String::from_utf8(ok(&["query", "--help"]).stdout).unwrap();
    for flag in ["--top-k", "--mode", "--no-prefilter", "--shortlist", "--pool-factor", "--weights", "--config", "--seed"] {
        assert!(q.contains(flag), "missing {flag}");
    }
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    // no seed anywhere is a validation error
    let r = vop(&["supervise", "--manifest", "m.json", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let line = String::from_utf8(r.stderr).unwrap();
    let diag: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(diag["event"], "error");
    assert_eq!(diag["kind"], "validation");
    // missing input file is an I/O error
    let missing = dir.path().join("nope.json");
    let r = vop(&["--seed", "1", "supervise", "--manifest", s(&missing), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    // unknown flag value is a usage error
    assert_eq!(vop(&["query", "--mode", "medium"]).status.code(), Some(1));
    // a corrupt feature file is a format error
    let bad = dir.path().join("bad.vopf");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let r = vop(&["--seed", "1", "index", "--embeddings", s(&bad), "--out", s(&dir.path().join("i.vopf"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn full_run_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("config.json");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let rooms = write_rooms(d, 2);
    for (r, (_, m)) in rooms.iter().enumerate() {
        let out = d.join(format!("sup{r}.jsonl"));
        ok(&["--config", s(&cfg), "supervise", "--manifest", s(m), "--out", s(&out)]);
    }
    let f0 = rooms[0].1.with_file_name("features.vopf");
    let f1 = rooms[1].1.with_file_name("features.vopf");
    let ckpt = d.join("head.vopc");
    let r = ok(&[
        "--config", s(&cfg), "train",
        "--features", s(&f0), s(&f1),
        "--supervision", s(&d.join("sup0.jsonl")), s(&d.join("sup1.jsonl")),
        "--out", s(&ckpt), "--epochs", "1",
    ]);
    let epochs = String::from_utf8(r.stderr)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"event\":\"epoch\""))
        .count();
    assert_eq!(epochs, 1);
    assert!(d.join("head.loss.csv").exists());
    let emb = d.join("emb.vopf");
    ok(&["embed", "--checkpoint", s(&ckpt), "--features", s(&f0), "--out", s(&emb)]);
    let index = d.join("index.vopf");
    ok(&["--config", s(&cfg), "index", "--embeddings", s(&emb), "--out", s(&index)]);
    assert!(d.join("index.json").exists());

    let retr = d.join("retr.jsonl");
    ok(&["--config", s(&cfg), "query", "--index", s(&index), "--queries", s(&emb), "--out", s(&retr)]);
    let recs: Vec<RetrievalRecord> = read_jsonl(&retr).unwrap();
    assert_eq!(recs.len(), 6);
    assert!(recs.iter().all(|r| r.ranked.len() == 4));

    let soft = d.join("soft.jsonl");
    ok(&[
        "--config", s(&cfg), "--seed", "9", "query", "--index", s(&index), "--queries", s(&emb), "--out", s(&soft),
        "--top-k", "2", "--mode", "soft", "--no-prefilter", "--shortlist", "3", "--pool-factor", "2",
        "--weights", "uniform",
    ]);
    let recs: Vec<RetrievalRecord> = read_jsonl(&soft).unwrap();
    assert!(recs.iter().all(|r| r.ranked.len() == 2 && r.ranked[0].db == r.query));
    // a 2× pooled 4×4 grid has 4 patches
    assert!(recs.iter().all(|r| r.ranked[0].matches.len() == 4));

    let empty = d.join("empty.jsonl");
    let r = ok(&["--config", s(&cfg), "query", "--index", s(&index), "--queries", s(&emb), "--out", s(&empty), "--top-k", "0"]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(std::fs::read(&empty).unwrap(), b"");

    let overlaps = d.join("sup0.overlaps.jsonl");
    let eval = d.join("eval.json");
    ok(&[
        "--config", s(&cfg), "eval", "--retrievals", s(&retr), "--overlaps", s(&overlaps),
        "--k", "1,3", "--exclude-self", "--out", s(&eval), "--csv", s(&d.join("recall.csv")),
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval).unwrap()).unwrap();
    assert!(metrics["recall_at_k"]["3"].is_number());
    assert!(std::fs::read_to_string(d.join("recall.csv")).unwrap().starts_with("k,recall\n1,"));

    let (trace, stats) = (d.join("trace.csv"), d.join("stats.json"));
    ok(&[
        "--config", s(&cfg), "posegraph", "--retrievals", s(&retr), "--overlaps", s(&overlaps),
        "--out-trace", s(&trace), "--out-stats", s(&stats), "--shuffles", "5",
    ]);
    let t = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(t.lines().count(), 102);
    let st: serde_json::Value = serde_json::from_slice(&std::fs::read(&stats).unwrap()).unwrap();
    let total = ["skipped", "success", "failure"].iter().map(|k| st[k].as_f64().unwrap()).sum::<f64>();
    assert!((total - 100.0).abs() < 1e-9);
}
