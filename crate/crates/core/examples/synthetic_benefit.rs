//! Single-task versus multitask accuracy on two synthetic scenes that share
//! every class spectrum.
//!
//! ```text
//! cargo run --release --example synthetic_benefit -- [noise_sigma] [seeds]
//! ```

use hsi_multitask::data::SynthConfig;
use hsi_multitask::manifest::Method;
use hsi_multitask::network::ArchConfig;
use hsi_multitask::pipeline::{fit_and_score, synth_scenes};
use hsi_multitask::trainer::TrainConfig;

fn main() -> hsi_multitask::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let noise_sigma = args.first().and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);

    let arch = ArchConfig {
        patch_size: 5,
        stem_channels: 16,
        num_residual_blocks: 1,
        feature_dim: 32,
    };
    let train = TrainConfig::default();
    let (mut single, mut multi) = (0.0, 0.0);
    for seed in 0..seeds {
        let scenes = synth_scenes(&SynthConfig {
            noise_sigma,
            seed,
            ..SynthConfig::default()
        })?;
        let s = fit_and_score(&scenes, &arch, &train, Method::Single, 5, seed)?;
        let m = fit_and_score(&scenes, &arch, &train, Method::Multitask, 5, seed)?;
        println!(
            "seed {seed}: single {:.3} ({:.1}s)  multitask {:.3} ({:.1}s)",
            s.mean_accuracy(),
            s.total_time().as_secs_f64(),
            m.mean_accuracy(),
            m.total_time().as_secs_f64()
        );
        single += s.mean_accuracy();
        multi += m.mean_accuracy();
    }
    let n = seeds as f64;
    println!("mean OA: single {:.3}  multitask {:.3}", single / n, multi / n);
    Ok(())
}
