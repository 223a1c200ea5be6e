//! Stratified small-sample train/test splits.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabelRaster;
use crate::error::{Error, Result};

pub type Coord = (usize, usize);

/// Training and test pixels per class. Index 0 holds class 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSplit {
    pub seed: u64,
    pub n_per_class: usize,
    pub train: Vec<Vec<Coord>>,
    pub test: Vec<Vec<Coord>>,
}

impl SampleSplit {
    pub fn num_classes(&self) -> usize {
        self.train.len()
    }

    /// Training pixels with their 1-based labels, class by class.
    pub fn train_pixels(&self) -> Vec<(Coord, u16)> {
        flatten(&self.train)
    }

    /// Test pixels with their 1-based labels, class by class.
    pub fn test_pixels(&self) -> Vec<(Coord, u16)> {
        flatten(&self.test)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for (set, pixels) in [("train", self.train_pixels()), ("test", self.test_pixels())] {
            for ((row, col), label) in pixels {
                w.serialize(SplitRow {
                    row,
                    col,
                    label,
                    set: set.to_string(),
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let mut train: Vec<Vec<Coord>> = Vec::new();
        let mut test: Vec<Vec<Coord>> = Vec::new();
        for rec in r.deserialize() {
            let rec: SplitRow = rec?;
            if rec.label == 0 {
                return Err(Error::Config(format!(
                    "{}: split row with label 0",
                    path.as_ref().display()
                )));
            }
            let k = rec.label as usize;
            if train.len() < k {
                train.resize(k, Vec::new());
                test.resize(k, Vec::new());
            }
            let target = match rec.set.as_str() {
                "train" => &mut train,
                "test" => &mut test,
                other => {
                    return Err(Error::Config(format!(
                        "{}: unknown split set `{other}`",
                        path.as_ref().display()
                    )))
                }
            };
            target[k - 1].push((rec.row, rec.col));
        }
        let n_per_class = train.first().map_or(0, Vec::len);
        Ok(SampleSplit {
            seed,
            n_per_class,
            train,
            test,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    row: usize,
    col: usize,
    label: u16,
    set: String,
}

fn flatten(per_class: &[Vec<Coord>]) -> Vec<(Coord, u16)> {
    per_class
        .iter()
        .enumerate()
        .flat_map(|(k, coords)| coords.iter().map(move |&c| (c, k as u16 + 1)))
        .collect()
}

/// Draws exactly `n_per_class` training pixels per class uniformly without
/// replacement; every other labeled pixel becomes a test pixel.
pub fn stratified_split(labels: &LabelRaster, n_per_class: usize, seed: u64) -> Result<SampleSplit> {
    let k = labels.num_classes();
    let mut per_class: Vec<Vec<Coord>> = vec![Vec::new(); k];
    for row in 0..labels.height() {
        for col in 0..labels.width() {
            let l = labels.get(row, col);
            if l > 0 {
                per_class[l as usize - 1].push((row, col));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(k);
    let mut test = Vec::with_capacity(k);
    for (idx, coords) in per_class.into_iter().enumerate() {
        if coords.len() < n_per_class + 1 {
            return Err(Error::ClassTooSmall {
                class: idx + 1,
                count: coords.len(),
                required: n_per_class + 1,
            });
        }
        let mut picked = sample(&mut rng, coords.len(), n_per_class).into_vec();
        picked.sort_unstable();
        let mut chosen = vec![false; coords.len()];
        picked.iter().for_each(|&i| chosen[i] = true);
        train.push(picked.iter().map(|&i| coords[i]).collect());
        test.push(
            coords
                .iter()
                .zip(&chosen)
                .filter(|(_, &c)| !c)
                .map(|(&xy, _)| xy)
                .collect(),
        );
    }
    Ok(SampleSplit {
        seed,
        n_per_class,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn raster(classes: usize, per_class: usize) -> LabelRaster {
        let mut data = Vec::new();
        for k in 1..=classes {
            data.extend(std::iter::repeat(k as u16).take(per_class));
        }
        data.extend([0u16; 7]);
        let n = data.len();
        LabelRaster::new(1, n, data).unwrap()
    }

    #[test]
    fn sixteen_classes_ten_each() {
        let labels = raster(16, 30);
        let split = stratified_split(&labels, 10, 3).unwrap();
        assert_eq!(split.train_pixels().len(), 160);
        assert_eq!(split.test_pixels().len(), 16 * 20);
    }

    #[test]
    fn same_seed_same_split() {
        let labels = raster(4, 25);
        assert_eq!(
            stratified_split(&labels, 5, 9).unwrap(),
            stratified_split(&labels, 5, 9).unwrap()
        );
        assert_ne!(
            stratified_split(&labels, 5, 9).unwrap().train,
            stratified_split(&labels, 5, 10).unwrap().train
        );
    }

    #[test]
    fn too_small_class_is_named() {
        let mut data = vec![1u16; 20];
        data.extend([2u16; 4]);
        let labels = LabelRaster::new(1, 24, data).unwrap();
        match stratified_split(&labels, 5, 0) {
            Err(Error::ClassTooSmall { class, count, .. }) => assert_eq!((class, count), (2, 4)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariants_hold_over_seed_sweep() {
        let data: Vec<u16> = (0..400).map(|i| ((i * 7 + i / 13) % 6) as u16).collect();
        let labels = LabelRaster::new(20, 20, data).unwrap();
        let labeled: HashSet<Coord> = (0..20)
            .flat_map(|r| (0..20).map(move |c| (r, c)))
            .filter(|&(r, c)| labels.get(r, c) > 0)
            .collect();
        for seed in 0..100 {
            let split = stratified_split(&labels, 8, seed).unwrap();
            let train: HashSet<Coord> = split.train_pixels().into_iter().map(|(c, _)| c).collect();
            let test: HashSet<Coord> = split.test_pixels().into_iter().map(|(c, _)| c).collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(&train | &test, labeled);
            assert!(split.train.iter().all(|c| c.len() == 8));
            for ((r, c), l) in split.train_pixels() {
                assert_eq!(labels.get(r, c), l);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split/a.csv");
        let split = stratified_split(&raster(3, 12), 4, 1).unwrap();
        split.write_csv(&path).unwrap();
        assert_eq!(SampleSplit::read_csv(&path, 1).unwrap(), split);
    }
}
