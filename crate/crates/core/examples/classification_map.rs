//! Trains a small multitask model on synthetic scenes and renders both
//! tasks' predicted maps next to their ground truth as PPM images.
//!
//! ```text
//! cargo run --release --example classification_map
//! ```

use hsi_multitask::data::SynthConfig;
use hsi_multitask::metrics::{render_map, Palette};
use hsi_multitask::network::ArchConfig;
use hsi_multitask::pipeline::synth_scenes;
use hsi_multitask::trainer::{train_multitask, TrainConfig};

fn main() -> hsi_multitask::Result<()> {
    let cfg = SynthConfig {
        size: 32,
        noise_sigma: 0.4,
        ..SynthConfig::default()
    };
    let scenes = synth_scenes(&cfg)?;
    let arch = ArchConfig {
        patch_size: 5,
        stem_channels: 16,
        num_residual_blocks: 1,
        feature_dim: 32,
    };
    let train = TrainConfig {
        shared_epochs: 40,
        finetune_epochs: 10,
        ..TrainConfig::default()
    };
    let tasks = scenes
        .iter()
        .map(|s| s.prepare(5, 0, arch.patch_size, true).map(|(_, t)| t))
        .collect::<hsi_multitask::Result<Vec<_>>>()?;
    let outcome = train_multitask(tasks, &arch, &train)?;

    let out = std::env::temp_dir().join("hsi-multitask-maps");
    let palette = Palette::default_for(cfg.classes_per_task);
    for scene in &scenes {
        let id = &scene.spec.id;
        let predicted = scene.predict_map(outcome.snapshots_for(id)?, 256)?;
        let agree = predicted
            .data()
            .iter()
            .zip(scene.labels.data())
            .filter(|(p, t)| p == t)
            .count();
        render_map(&predicted, &palette, out.join(format!("{id}_pred.ppm")))?;
        render_map(&scene.labels, &palette, out.join(format!("{id}_truth.ppm")))?;
        println!(
            "{id}: {agree}/{} pixels match the ground truth; maps in {}",
            predicted.data().len(),
            out.display()
        );
    }
    Ok(())
}
