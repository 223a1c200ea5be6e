//! Prediction by majority vote over the last five snapshots, compared with
//! each snapshot on its own.
//!
//! ```text
//! cargo run --release --example snapshot_vote
//! ```

use hsi_multitask::data::{PatchSet, SynthConfig};
use hsi_multitask::metrics::overall_accuracy;
use hsi_multitask::network::ArchConfig;
use hsi_multitask::pipeline::synth_scenes;
use hsi_multitask::trainer::{snapshot_predict_vote, train_single, SnapshotSet, TrainConfig};

fn main() -> hsi_multitask::Result<()> {
    let scene = synth_scenes(&SynthConfig {
        num_tasks: 1,
        noise_sigma: 1.0,
        ..SynthConfig::default()
    })?
    .remove(0);
    let arch = ArchConfig {
        patch_size: 5,
        stem_channels: 16,
        num_residual_blocks: 1,
        feature_dim: 32,
    };
    let (split, task) = scene.prepare(5, 1, arch.patch_size, true)?;
    let outcome = train_single(task, &arch, &TrainConfig::default())?;
    let set = &outcome.snapshots[0];

    let test = split.test_pixels();
    let coords: Vec<(usize, usize)> = test.iter().map(|&(c, _)| c).collect();
    let truth: Vec<u16> = test.iter().map(|&(_, l)| l).collect();
    let patches = PatchSet::new(&scene.cube, &coords, arch.patch_size);
    let k = scene.spec.num_classes;
    let score = |set: &SnapshotSet| -> hsi_multitask::Result<f64> {
        let pred: Vec<u16> = snapshot_predict_vote(set, &patches, 256)?
            .into_iter()
            .map(|c| c as u16 + 1)
            .collect();
        Ok(overall_accuracy(&pred, &truth, k)?.0)
    };
    for snap in &set.snapshots {
        let alone = SnapshotSet {
            task: set.task.clone(),
            snapshots: vec![snap.clone()],
        };
        println!("epoch {:>3} alone: OA {:.2}%", snap.epoch, 100.0 * score(&alone)?);
    }
    println!("vote over epochs {:?}: OA {:.2}%", set.epochs(), 100.0 * score(set)?);
    Ok(())
}
