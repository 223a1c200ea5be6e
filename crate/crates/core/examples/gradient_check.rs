//! Finite-difference check of every parameter gradient of a small multitask
//! network, in 64-bit arithmetic, followed by the same check with a
//! deliberately broken convolution backward pass.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use hsi_multitask::network::{ArchConfig, MultitaskNet, NetworkObjective, TaskSpec};
use hsi_multitask::tensor::ops::fault;
use hsi_multitask::tensor::{grad_check, GradCheckConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn objective(seed: u64) -> hsi_multitask::Result<NetworkObjective> {
    let arch = ArchConfig {
        patch_size: 5,
        stem_channels: 8,
        num_residual_blocks: 1,
        feature_dim: 16,
    };
    let net = MultitaskNet::<f64>::build(&[TaskSpec::new("a", 4, 6)], &arch, true, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..2 * 5 * 5 * 6).map(|_| normal.sample(&mut rng)).collect();
    Ok(NetworkObjective {
        net,
        batch: Tensor::new(&[2, 5, 5, 6], data)?,
        labels: vec![1, 3],
        task_id: "a".into(),
    })
}

fn main() -> hsi_multitask::Result<()> {
    let cfg = GradCheckConfig::default();
    for seed in 0..5 {
        let report = grad_check(&mut objective(seed)?, &GradCheckConfig { seed, ..cfg.clone() })?;
        println!(
            "seed {seed}: max relative error {:.2e} over {} coordinates, {} re-measured at a kink (worst: {}[{}])",
            report.max_rel_error, report.coordinates_checked, report.kink_retries, report.worst_param, report.worst_index
        );
    }
    let broken = fault::with_flipped_conv_backward(|| grad_check(&mut objective(0)?, &cfg))?;
    println!(
        "mirrored conv backward: max relative error {:.2e} (worst: {})",
        broken.max_rel_error, broken.worst_param
    );
    Ok(())
}
