//! The full command-line protocol as library calls: synthesize scenes,
//! train every (method, samples per class, seed) cell, and print the
//! OA±std tables.
//!
//! ```text
//! cargo run --release --example table_sweep
//! ```

use hsi_multitask::data::SynthConfig;
use hsi_multitask::manifest::RunManifest;
use hsi_multitask::network::ArchConfig;
use hsi_multitask::pipeline;

fn main() -> hsi_multitask::Result<()> {
    let dir = std::env::temp_dir().join("hsi-multitask-sweep");
    pipeline::write_synth(
        &SynthConfig {
            noise_sigma: 1.0,
            ..SynthConfig::default()
        },
        &dir,
    )?;
    let mut m = RunManifest::load(dir.join("manifest.toml"))?;
    m.arch = ArchConfig {
        patch_size: 5,
        stem_channels: 8,
        num_residual_blocks: 1,
        feature_dim: 16,
    };
    m.train.shared_epochs = 30;
    m.train.finetune_epochs = 10;
    m.eval.n_per_class = vec![5, 10];
    m.eval.seeds = (0..3).collect();

    for cell in pipeline::run_train(&m)? {
        println!(
            "{} n={} seed={}: {:.2}s",
            cell.method,
            cell.n_per_class,
            cell.seed,
            cell.total_time().as_secs_f64()
        );
    }
    for (task, table) in pipeline::run_eval(&m)?.tables {
        println!("\n{task}\n{}", table.trim_end());
    }
    Ok(())
}
