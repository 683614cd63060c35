//! Trains the encoder head on the latent-pair synthetic dataset and prints
//! the per-epoch losses and the final positive / negative similarity gap.
//!
//!     cargo run --release --example train_latent -- [epochs] [lr]

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vop::encoder::{evaluate, train, validation_samples, TrainConfig, TrainState, TrainingDataset};
use vop::synthetic::{latent_pair_dataset, LatentPairConfig};

fn main() -> vop::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(10, |a| a.parse().expect("epochs"));
    let lr = args.next().map_or(1e-4, |a| a.parse().expect("lr"));
    let data_cfg = LatentPairConfig {
        image_side: 112,
        ..Default::default()
    };
    let (feats, sets) = latent_pair_dataset(&data_cfg)?;
    let ds = TrainingDataset::new(feats, &sets)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        ..TrainConfig::with_seed(7)
    };
    let (train_ds, val_ds) = ds.split_scenes(cfg.val_fraction, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    println!(
        "{} train scenes, {} validation scenes, {} patches per image",
        train_ds.scene_count(),
        val_ds.scene_count(),
        ds.n_patches()
    );
    let start = Instant::now();
    let state = TrainState::new(&cfg)?;
    let out = train(state, &train_ds, &val_ds, &cfg)?;
    for l in &out.log {
        println!("epoch {:>2}  train {:.6}  val {:.6}", l.epoch, l.train_loss, l.val_loss);
    }
    let samples = validation_samples(&val_ds, &cfg)?;
    let stats = evaluate(&out.best.head, &val_ds, &samples, &cfg)?;
    println!(
        "best epoch {}: mean positive δ {:.3}, mean negative δ {:.3} ({:.1}s)",
        out.best_epoch,
        stats.mean_positive,
        stats.mean_negative,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
