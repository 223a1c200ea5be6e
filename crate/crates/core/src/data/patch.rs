//! Mirror-padded patch extraction, 4× mirror augmentation, and patch pools.

use super::{Coord, HyperCube, SampleSplit};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `height×width×bands` window, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let s = (row * self.width + col) * self.bands;
        &self.data[s..s + self.bands]
    }

    fn remap(&self, f: impl Fn(usize, usize) -> (usize, usize)) -> Patch {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for c in 0..self.width {
                let (sr, sc) = f(r, c);
                data.extend_from_slice(self.pixel(sr, sc));
            }
        }
        Patch { data, ..*self }
    }

    pub fn mirror_horizontal(&self) -> Patch {
        let w = self.width;
        self.remap(|r, c| (r, w - 1 - c))
    }

    pub fn mirror_vertical(&self) -> Patch {
        let h = self.height;
        self.remap(|r, c| (h - 1 - r, c))
    }

    /// Swaps the two spatial axes.
    pub fn transpose(&self) -> Patch {
        self.remap(|r, c| (c, r))
    }
}

/// Reflects an index into `0..n` without repeating the edge sample
/// (`-1 → 1`, `n → n-2`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Window of side `size` centered on `(row, col)`, mirrored at scene borders.
pub fn extract_patch(cube: &HyperCube, row: usize, col: usize, size: usize) -> Result<Patch> {
    let mut data = Vec::with_capacity(size * size * cube.bands());
    extract_into(cube, row, col, size, &mut data)?;
    Ok(Patch {
        height: size,
        width: size,
        bands: cube.bands(),
        data,
    })
}

fn extract_into(cube: &HyperCube, row: usize, col: usize, size: usize, out: &mut Vec<f32>) -> Result<()> {
    if row >= cube.height() || col >= cube.width() {
        return Err(Error::Shape(format!(
            "pixel ({row},{col}) outside a {}×{} scene",
            cube.height(),
            cube.width()
        )));
    }
    if size % 2 == 0 {
        return Err(Error::Shape(format!("patch size must be odd, got {size}")));
    }
    let half = (size / 2) as isize;
    for dr in -half..=half {
        let r = reflect(row as isize + dr, cube.height());
        for dc in -half..=half {
            let c = reflect(col as isize + dc, cube.width());
            out.extend_from_slice(cube.pixel(r, c));
        }
    }
    Ok(())
}

/// Original, horizontal mirror, vertical mirror, and spatial transpose.
pub fn augment4(patch: &Patch) -> Result<[Patch; 4]> {
    if patch.height != patch.width {
        return Err(Error::Shape(format!(
            "augmentation needs a square patch, got {}×{}",
            patch.height, patch.width
        )));
    }
    Ok([
        patch.clone(),
        patch.mirror_horizontal(),
        patch.mirror_vertical(),
        patch.transpose(),
    ])
}

/// Labeled training patches of one task, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool {
    pub patch_size: usize,
    pub bands: usize,
    patches: Vec<f32>,
    /// 0-based class indices.
    labels: Vec<usize>,
}

impl SamplePool {
    pub fn new(patch_size: usize, bands: usize) -> Self {
        SamplePool {
            patch_size,
            bands,
            patches: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, patch: &Patch, label: usize) -> Result<()> {
        if patch.height != self.patch_size || patch.width != self.patch_size || patch.bands != self.bands {
            return Err(Error::Shape(format!(
                "patch {}×{}×{} does not fit a pool of {}×{}×{}",
                patch.height, patch.width, patch.bands, self.patch_size, self.patch_size, self.bands
            )));
        }
        self.patches.extend_from_slice(&patch.data);
        self.labels.push(label);
        Ok(())
    }

    /// Builds the training pool of a split: each training pixel's patch,
    /// followed by its three mirrors when `augment` is set.
    pub fn from_split(cube: &HyperCube, split: &SampleSplit, patch_size: usize, augment: bool) -> Result<Self> {
        let mut pool = SamplePool::new(patch_size, cube.bands());
        for ((row, col), label) in split.train_pixels() {
            let patch = extract_patch(cube, row, col, patch_size)?;
            if augment {
                for p in augment4(&patch)? {
                    pool.push(&p, label as usize - 1)?;
                }
            } else {
                pool.push(&patch, label as usize - 1)?;
            }
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.bands
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.patches[i * n..(i + 1) * n]
    }

    /// Stacks the selected samples into a `B×P×P×C` tensor with labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            data.extend_from_slice(self.patch(i));
        }
        let t = Tensor::new(
            &[indices.len(), self.patch_size, self.patch_size, self.bands],
            data,
        )?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Patches of arbitrary pixels of a scene, extracted lazily per batch.
#[derive(Clone, Copy)]
pub struct PatchSet<'a> {
    pub cube: &'a HyperCube,
    pub coords: &'a [Coord],
    pub patch_size: usize,
}

impl<'a> PatchSet<'a> {
    pub fn new(cube: &'a HyperCube, coords: &'a [Coord], patch_size: usize) -> Self {
        PatchSet {
            cube,
            coords,
            patch_size,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<Tensor<f32>> {
        let p = self.patch_size;
        let mut data = Vec::with_capacity(range.len() * p * p * self.cube.bands());
        for &(r, c) in &self.coords[range.clone()] {
            extract_into(self.cube, r, c, p, &mut data)?;
        }
        Tensor::new(&[range.len(), p, p, self.cube.bands()], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> HyperCube {
        let data = (0..5 * 6 * 2).map(|i| i as f32).collect();
        HyperCube::new(5, 6, 2, data).unwrap()
    }

    #[test]
    fn center_is_the_pixel() {
        let cube = cube();
        let p = extract_patch(&cube, 2, 3, 5).unwrap();
        assert_eq!(p.pixel(2, 2), cube.pixel(2, 3));
    }

    #[test]
    fn corner_reflects_without_edge_repeat() {
        let cube = cube();
        let p = extract_patch(&cube, 0, 0, 3).unwrap();
        assert_eq!(p.pixel(0, 0), cube.pixel(1, 1));
        assert_eq!(p.pixel(1, 1), cube.pixel(0, 0));
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-3, 2), 1);
        assert_eq!(reflect(4, 1), 0);
    }

    #[test]
    fn interior_patch_is_raw_window() {
        let cube = cube();
        let p = extract_patch(&cube, 2, 2, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(p.pixel(r, c), cube.pixel(1 + r, 1 + c));
            }
        }
    }

    #[test]
    fn augmentation_examples() {
        let cube = cube();
        let p = extract_patch(&cube, 2, 2, 5).unwrap();
        let aug = augment4(&p).unwrap();
        assert_eq!(aug[0], p);
        assert_eq!(aug[1].mirror_horizontal(), p);
        assert_eq!(aug[2].mirror_vertical(), p);
        assert_eq!(aug[3].transpose(), p);
        for a in &aug {
            assert_eq!(a.pixel(2, 2), cube.pixel(2, 2));
        }
        let flat = Patch {
            height: 3,
            width: 3,
            bands: 2,
            data: [1.0, 2.0].repeat(9),
        };
        assert!(augment4(&flat).unwrap().iter().all(|a| *a == flat));
        let wide = Patch {
            height: 1,
            width: 3,
            bands: 1,
            data: vec![0.0; 3],
        };
        assert!(augment4(&wide).is_err());
    }

    #[test]
    fn pool_holds_four_per_training_pixel() {
        let labels = crate::data::LabelRaster::new(5, 6, (0..30).map(|i| (i % 3) as u16 + 1).collect()).unwrap();
        let split = crate::data::stratified_split(&labels, 2, 0).unwrap();
        let pool = SamplePool::from_split(&cube(), &split, 3, true).unwrap();
        assert_eq!(pool.len(), 4 * 6);
        let (batch, labels) = pool.batch(&[0, 5, 23]).unwrap();
        assert_eq!(batch.shape(), &[3, 3, 3, 2]);
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn patch_set_batches_match_single_extraction() {
        let cube = cube();
        let coords = [(0, 0), (4, 5), (2, 3)];
        let set = PatchSet::new(&cube, &coords, 3);
        let b = set.batch(1..3).unwrap();
        let mut expected = extract_patch(&cube, 4, 5, 3).unwrap().data;
        expected.extend(extract_patch(&cube, 2, 3, 3).unwrap().data);
        assert_eq!(b.data(), &expected[..]);
    }
}
