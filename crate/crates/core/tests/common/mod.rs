#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vop::encoder::TrainConfig;
use vop::synthetic::{RoomConfig, SyntheticRoom};

/// A small room: 56 px images (4×4 patches), 32-dim features, 6 cameras.
pub fn small_room(seed: u64) -> SyntheticRoom {
    SyntheticRoom::generate(&RoomConfig {
        seed,
        image_side: 56,
        dim: 32,
        positions: 2,
        yaws: 3,
        n_points: 3000,
        ..Default::default()
    })
    .unwrap()
}

/// Writes `n` small rooms under `dir` and returns their manifests.
pub fn write_rooms(dir: &Path, n: u64) -> Vec<(SyntheticRoom, PathBuf)> {
    (0..n)
        .map(|r| {
            let room = small_room(50 + r);
            let m = room.write_dataset(&dir.join(format!("room{r}")), &format!("room{r}")).unwrap();
            (room, m)
        })
        .collect()
}

pub fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        val_samples: 8,
        layer_dims: vec![32, 16, 16, 16],
        ..TrainConfig::with_seed(seed)
    }
}

/// JSON config matching [`small_train_config`].
pub const SMALL_CONFIG: &str = r#"{
  "seed": 3,
  "train": {"epochs": 2, "batch_size": 8, "val_samples": 8, "layer_dims": [32, 16, 16, 16]},
  "retrieval": {"top_k": 4},
  "posegraph": {"shuffles": 20}
}"#;
