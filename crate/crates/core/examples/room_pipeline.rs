//! Runs the file-based pipeline on synthetic rooms: supervise every room,
//! train on the auxiliary rooms, then embed, index and query the held-out
//! room and report recall against ground-truth overlaps.
//!
//!     cargo run --release --example room_pipeline -- [epochs] [image_side]

use std::path::PathBuf;
use std::time::Instant;

use vop::encoder::TrainConfig;
use vop::io::{read_jsonl, write_jsonl, RetrievalRecord};
use vop::pipeline::{self, EvalSettings, RetrievalSettings, SuperviseSettings};
use vop::synthetic::{RoomConfig, SyntheticRoom};

fn main() -> vop::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(5, |a| a.parse().expect("epochs"));
    let image_side = args.next().map_or(224, |a| a.parse().expect("image_side"));
    let dir = tempfile::tempdir().map_err(|e| vop::VopError::io(std::env::temp_dir(), e))?;
    let start = Instant::now();
    let seed = 11;

    let mut manifests = Vec::new();
    let mut eval_room = None;
    for r in 0..4u64 {
        let room = SyntheticRoom::generate(&RoomConfig {
            seed: 100 + r,
            image_side,
            ..Default::default()
        })?;
        let room_dir = dir.path().join(format!("room{r}"));
        manifests.push(room.write_dataset(&room_dir, &format!("room{r}"))?);
        if r == 0 {
            eval_room = Some(room);
        }
    }
    let eval_room = eval_room.unwrap();
    let mut sup = Vec::new();
    for (r, m) in manifests.iter().enumerate() {
        let out = dir.path().join(format!("sup{r}.jsonl"));
        let s = pipeline::cmd_supervise(m, &out, None, &SuperviseSettings::default(), seed)?;
        println!("room {r}: {} pairs, {} positive patch pairs", s.pairs, s.positives);
        sup.push(out);
    }
    let feats: Vec<PathBuf> = manifests.iter().map(|m| m.with_file_name("features.vopf")).collect();
    let ckpt = dir.path().join("head.vopc");
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::with_seed(seed)
    };
    let t = Instant::now();
    let summary = pipeline::cmd_train(&feats[1..], &sup[1..], &cfg, &ckpt, None)?;
    for l in &summary.log {
        println!("epoch {:>2}  train {:.6}  val {:.6}", l.epoch, l.train_loss, l.val_loss);
    }
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());

    let emb = dir.path().join("room0.emb.vopf");
    pipeline::cmd_embed(&ckpt, &feats[0], &emb)?;
    let index = dir.path().join("room0.index.vopf");
    let settings = RetrievalSettings {
        top_k: 5,
        ..Default::default()
    };
    pipeline::cmd_index(&emb, &index, &settings, seed)?;
    let retr = dir.path().join("retrievals.jsonl");
    pipeline::cmd_query(&index, &emb, &retr, &settings, seed)?;

    let overlaps = dir.path().join("overlaps.jsonl");
    let gt = eval_room.overlaps();
    let positive = gt.iter().filter(|o| o.overlap >= 1).count();
    println!("{positive} of {} camera pairs overlap", gt.len());
    write_jsonl(&gt, &overlaps)?;
    let eval = EvalSettings {
        ks: vec![1, 5],
        exclude_self: true,
        ..Default::default()
    };
    // query ∈ db, so rank 1 must be the query itself
    let records: Vec<RetrievalRecord> = read_jsonl(&retr)?;
    let self_first = records
        .iter()
        .filter(|r| r.ranked.first().is_some_and(|e| e.db == r.query))
        .count();
    let metrics = pipeline::cmd_eval(&retr, &overlaps, None, &eval, &dir.path().join("eval.json"), None)?;
    println!(
        "recall@1 {:.3}  recall@5 {:.3}  self first {}/{}  ({:.1}s total)",
        metrics.recall_at_k[&1],
        metrics.recall_at_k[&5],
        self_first,
        records.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
