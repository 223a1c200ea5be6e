//! Interrupts a multitask run inside the fine-tune phase, saves its state,
//! resumes it in a fresh trainer, and checks that the snapshots match an
//! uninterrupted run bit for bit.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use hsi_multitask::data::SynthConfig;
use hsi_multitask::network::ArchConfig;
use hsi_multitask::pipeline::synth_scenes;
use hsi_multitask::trainer::{NoObserver, TrainConfig, TrainTask, Trainer};

fn main() -> hsi_multitask::Result<()> {
    let scenes = synth_scenes(&SynthConfig::default())?;
    let arch = ArchConfig {
        patch_size: 5,
        stem_channels: 8,
        num_residual_blocks: 1,
        feature_dim: 16,
    };
    let config = TrainConfig {
        shared_epochs: 12,
        finetune_epochs: 6,
        ..TrainConfig::default()
    };
    let tasks = || -> hsi_multitask::Result<Vec<TrainTask>> {
        scenes
            .iter()
            .map(|s| s.prepare(5, 0, arch.patch_size, true).map(|(_, t)| t))
            .collect()
    };

    let full = Trainer::new(tasks()?, &arch, &config)?.run(&mut NoObserver)?;

    let dir = std::env::temp_dir().join("hsi-multitask-resume");
    let mut first = Trainer::new(tasks()?, &arch, &config)?;
    first.run_until(15, &mut NoObserver)?;
    first.save_state(&dir)?;
    println!("stopped after epoch {} and saved to {}", first.epoch(), dir.display());
    drop(first);

    let resumed = Trainer::resume(&dir, tasks()?, &arch, &config)?;
    println!("resumed at epoch {}", resumed.epoch());
    let rest = resumed.run(&mut NoObserver)?;
    println!(
        "snapshots identical to the uninterrupted run: {}",
        rest.snapshots == full.snapshots
    );
    Ok(())
}
