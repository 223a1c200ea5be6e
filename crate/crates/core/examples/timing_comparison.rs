//! Wall time of one multitask run against two single-task runs under the
//! same epoch budget, with full and head-only fine-tuning.
//!
//! ```text
//! cargo run --release --example timing_comparison
//! ```

use hsi_multitask::data::SynthConfig;
use hsi_multitask::manifest::Method;
use hsi_multitask::network::ArchConfig;
use hsi_multitask::pipeline::{fit_and_score, synth_scenes};
use hsi_multitask::trainer::{FinetuneScope, TrainConfig};

fn main() -> hsi_multitask::Result<()> {
    let scenes = synth_scenes(&SynthConfig {
        noise_sigma: 0.5,
        ..SynthConfig::default()
    })?;
    let arch = ArchConfig {
        patch_size: 5,
        stem_channels: 16,
        num_residual_blocks: 1,
        feature_dim: 32,
    };
    for scope in [FinetuneScope::All, FinetuneScope::HeadOnly] {
        let train = TrainConfig {
            finetune_scope: scope,
            ..TrainConfig::default()
        };
        let single = fit_and_score(&scenes, &arch, &train, Method::Single, 5, 0)?;
        let multi = fit_and_score(&scenes, &arch, &train, Method::Multitask, 5, 0)?;
        println!("{scope:?} fine-tune:");
        for (name, t) in single.times.iter().chain(&multi.times) {
            println!(
                "  {name:>6}: shared {:.2}s  fine-tune {:.2}s",
                t.shared.as_secs_f64(),
                t.finetune.as_secs_f64()
            );
        }
        println!(
            "  multitask / sum of single-task = {:.2}",
            multi.total_time().as_secs_f64() / single.total_time().as_secs_f64()
        );
    }
    Ok(())
}
