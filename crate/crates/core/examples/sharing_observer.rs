//! Watches a two-task run step by step: the extractor seen through either
//! task is the same bytes, and a step on one task never moves the other
//! task's head.
//!
//! ```text
//! cargo run --release --example sharing_observer
//! ```

use hsi_multitask::data::SynthConfig;
use hsi_multitask::network::{ArchConfig, MultitaskNet};
use hsi_multitask::pipeline::synth_scenes;
use hsi_multitask::trainer::{StepEvent, StepPhase, TrainConfig, TrainObserver, Trainer};

struct Watch {
    other_head: Vec<u8>,
    steps: usize,
    moved: usize,
}

fn other(task: &str) -> &'static str {
    if task == "task1" {
        "task2"
    } else {
        "task1"
    }
}

impl TrainObserver for Watch {
    fn on_step(&mut self, e: &StepEvent<'_>) {
        let ids = e.net.head_param_ids(other(e.task)).expect("two tasks");
        let bytes = e.net.param_bytes(&ids);
        match e.phase {
            StepPhase::Before => self.other_head = bytes,
            StepPhase::After => {
                self.steps += 1;
                self.moved += usize::from(bytes != self.other_head);
            }
        }
    }

    fn on_epoch_end(&mut self, epoch: usize, nets: &[&MultitaskNet]) {
        if let [net] = nets {
            let same = net.extractor_bytes("task1").ok() == net.extractor_bytes("task2").ok();
            println!("epoch {epoch}: one shared network, extractors identical: {same}");
        } else {
            println!("epoch {epoch}: {} fine-tune forks", nets.len());
        }
    }
}

fn main() -> hsi_multitask::Result<()> {
    let scenes = synth_scenes(&SynthConfig::default())?;
    let arch = ArchConfig {
        patch_size: 5,
        stem_channels: 8,
        num_residual_blocks: 1,
        feature_dim: 16,
    };
    let config = TrainConfig {
        shared_epochs: 4,
        finetune_epochs: 2,
        snapshot_count: 2,
        ..TrainConfig::default()
    };
    let tasks = scenes
        .iter()
        .map(|s| s.prepare(5, 0, arch.patch_size, true).map(|(_, t)| t))
        .collect::<hsi_multitask::Result<Vec<_>>>()?;
    let mut watch = Watch {
        other_head: Vec::new(),
        steps: 0,
        moved: 0,
    };
    Trainer::new(tasks, &arch, &config)?.run(&mut watch)?;
    println!("{} steps, other task's head moved on {}", watch.steps, watch.moved);
    Ok(())
}
