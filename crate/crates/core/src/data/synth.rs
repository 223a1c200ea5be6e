//! Synthetic multitask scenes built from smooth endmember spectra.
//!
//! Each task's scene is a grid of rectangular class regions. Every pixel is
//! its class endmember plus i.i.d. Gaussian noise. `spectral_overlap` sets
//! the fraction of class endmembers drawn from a library common to all tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HyperCube, LabelRaster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub bands: usize,
    /// Scene side length in pixels.
    pub size: usize,
    pub spectral_overlap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_tasks: 2,
            classes_per_task: 4,
            bands: 16,
            size: 24,
            spectral_overlap: 1.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.spectral_overlap) {
            return Err(Error::Config(format!(
                "spectral_overlap must lie in [0, 1], got {}",
                self.spectral_overlap
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.num_tasks == 0 || self.classes_per_task < 2 || self.bands == 0 {
            return Err(Error::Config(
                "synthetic scenes need at least one task, two classes, and one band".into(),
            ));
        }
        if self.size < self.grid() {
            return Err(Error::Config(format!(
                "scene size {} is smaller than the {}-tile class grid",
                self.size,
                self.grid()
            )));
        }
        Ok(())
    }

    /// Tiles per side; at least two tiles per class.
    fn grid(&self) -> usize {
        ((2 * self.classes_per_task) as f64).sqrt().ceil() as usize
    }

    pub fn shared_classes(&self) -> usize {
        (self.spectral_overlap * self.classes_per_task as f64).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub cube: HyperCube,
    pub labels: LabelRaster,
    /// Endmember spectrum of class `k + 1` at index `k`.
    pub library: Vec<Vec<f32>>,
}

fn endmember(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f32> {
    let base: f64 = rng.gen_range(0.2..0.5);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.05..0.3),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let x = if bands > 1 {
                b as f64 / (bands - 1) as f64
            } else {
                0.5
            };
            let v = base
                + bumps
                    .iter()
                    .map(|&(a, mu, s)| a * (-(x - mu).powi(2) / (2.0 * s * s)).exp())
                    .sum::<f64>();
            v as f32
        })
        .collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared: Vec<Vec<f32>> = (0..cfg.shared_classes())
        .map(|_| endmember(&mut rng, cfg.bands))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let k = cfg.classes_per_task;
    let g = cfg.grid();
    let bounds: Vec<usize> = (0..=g).map(|i| i * cfg.size / g).collect();

    let mut scenes = Vec::with_capacity(cfg.num_tasks);
    for _ in 0..cfg.num_tasks {
        let mut library = shared.clone();
        while library.len() < k {
            library.push(endmember(&mut rng, cfg.bands));
        }
        let mut tiles: Vec<usize> = (0..g * g).map(|i| i % k).collect();
        tiles.shuffle(&mut rng);

        let n = cfg.size * cfg.size;
        let mut labels = vec![0u16; n];
        let mut data = Vec::with_capacity(n * cfg.bands);
        for row in 0..cfg.size {
            let tr = bounds.partition_point(|&b| b <= row) - 1;
            for col in 0..cfg.size {
                let tc = bounds.partition_point(|&b| b <= col) - 1;
                let class = tiles[tr * g + tc];
                labels[row * cfg.size + col] = class as u16 + 1;
                for &v in &library[class] {
                    let eps = if cfg.noise_sigma > 0.0 {
                        noise.sample(&mut rng) as f32
                    } else {
                        0.0
                    };
                    data.push(v + eps);
                }
            }
        }
        scenes.push(SynthScene {
            cube: HyperCube::new(cfg.size, cfg.size, cfg.bands, data)?,
            labels: LabelRaster::new(cfg.size, cfg.size, labels)?,
            library,
        });
    }
    Ok(scenes)
}
