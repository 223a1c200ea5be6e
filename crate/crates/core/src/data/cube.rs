//! Hyperspectral cubes, label rasters, and their ENVI-style raw + header files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// `H×W×C` raster stored pixel-major (`data[(row * W + col) * C + band]`).
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
    /// 1-based original band index of every band, tracked through alignment.
    band_ids: Vec<usize>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_band_ids(height, width, bands, data, (1..=bands).collect())
    }

    pub fn with_band_ids(
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f32>,
        band_ids: Vec<usize>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "cube extents must be positive, got {height}×{width}×{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "cube {height}×{width}×{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if band_ids.len() != bands {
            return Err(Error::Shape(format!(
                "{} band ids for {bands} bands",
                band_ids.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite value at flat index {i} of the cube"
            )));
        }
        Ok(HyperCube {
            height,
            width,
            bands,
            data,
            band_ids,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band_ids(&self) -> &[usize] {
        &self.band_ids
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(row * self.width + col) * self.bands + band]
    }

    /// Values of one band in row-major pixel order.
    pub fn band(&self, band: usize) -> Vec<f32> {
        self.data.iter().skip(band).step_by(self.bands).copied().collect()
    }
}

/// Per-pixel class labels; 0 marks unlabeled pixels, classes are 1..=K.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "label raster {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelRaster {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    /// Largest label value, i.e. the class count K.
    pub fn num_classes(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0) as usize
    }

    /// Pixel count per class; index 0 holds class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.data {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&l| l > 0).count()
    }

    pub fn matches(&self, cube: &HyperCube) -> bool {
        self.height == cube.height && self.width == cube.width
    }
}

/// Per-band standardization to zero mean and unit variance over all pixels.
/// Constant bands are only centered.
pub fn standardize(cube: &HyperCube) -> HyperCube {
    let c = cube.bands;
    let n = (cube.height * cube.width) as f64;
    let mut mean = vec![0f64; c];
    for px in cube.data.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; c];
    for px in cube.data.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut data = Vec::with_capacity(cube.data.len());
    for px in cube.data.chunks_exact(c) {
        for ((&v, &m), &sd) in px.iter().zip(&mean).zip(&std) {
            data.push(((v as f64 - m) / sd) as f32);
        }
    }
    HyperCube {
        data,
        ..cube.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interleave {
    Bsq,
    Bil,
    Bip,
}

impl Interleave {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bsq" => Ok(Interleave::Bsq),
            "bil" => Ok(Interleave::Bil),
            "bip" => Ok(Interleave::Bip),
            other => Err(Error::Unsupported {
                what: "interleave",
                value: other.to_string(),
            }),
        }
    }
}

/// Subset of the ENVI header fields that describes a raw raster.
#[derive(Clone, Debug, PartialEq)]
pub struct EnviHeader {
    pub samples: usize,
    pub lines: usize,
    pub bands: usize,
    pub interleave: Interleave,
    pub data_type: u32,
    pub byte_order: u32,
    pub header_offset: u64,
}

fn type_size(data_type: u32) -> Result<usize> {
    match data_type {
        1 => Ok(1),
        2 | 12 => Ok(2),
        3 | 4 => Ok(4),
        5 => Ok(8),
        other => Err(Error::Unsupported {
            what: "data type",
            value: other.to_string(),
        }),
    }
}

impl EnviHeader {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Header {
            path: path.to_path_buf(),
            reason,
        };
        let mut fields: HashMap<String, String> = HashMap::new();
        let mut lines = text.lines();
        while let Some(line) = lines.next() {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let mut value = value.trim().to_string();
            // brace-delimited values may span several lines
            if value.starts_with('{') && !value.contains('}') {
                for more in lines.by_ref() {
                    value.push_str(more);
                    if more.contains('}') {
                        break;
                    }
                }
            }
            fields.insert(key.trim().to_ascii_lowercase(), value);
        }
        let number = |key: &str| -> Result<u64> {
            let raw = fields
                .get(key)
                .ok_or_else(|| bad(format!("missing `{key}`")))?;
            raw.parse()
                .map_err(|_| bad(format!("`{key}` is not an integer: {raw}")))
        };
        let optional = |key: &str, default: u64| -> Result<u64> {
            if fields.contains_key(key) {
                number(key)
            } else {
                Ok(default)
            }
        };
        let interleave = match fields.get("interleave") {
            Some(v) => Interleave::parse(v)?,
            None => Interleave::Bsq,
        };
        let header = EnviHeader {
            samples: number("samples")? as usize,
            lines: number("lines")? as usize,
            bands: optional("bands", 1)? as usize,
            interleave,
            data_type: number("data type")? as u32,
            byte_order: optional("byte order", 0)? as u32,
            header_offset: optional("header offset", 0)?,
        };
        type_size(header.data_type)?;
        if header.byte_order > 1 {
            return Err(Error::Unsupported {
                what: "byte order",
                value: header.byte_order.to_string(),
            });
        }
        if header.samples == 0 || header.lines == 0 || header.bands == 0 {
            return Err(bad("zero extent".into()));
        }
        Ok(header)
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.samples * self.lines * self.bands) as u64
            * type_size(self.data_type).expect("validated on parse") as u64
    }

    pub fn render(&self) -> String {
        let interleave = match self.interleave {
            Interleave::Bsq => "bsq",
            Interleave::Bil => "bil",
            Interleave::Bip => "bip",
        };
        format!(
            "ENVI\nsamples = {}\nlines = {}\nbands = {}\nheader offset = {}\nfile type = ENVI Standard\ndata type = {}\ninterleave = {interleave}\nbyte order = {}\n",
            self.samples, self.lines, self.bands, self.header_offset, self.data_type, self.byte_order
        )
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes the payload into `f64` values in the file's own order.
fn decode(bytes: &[u8], data_type: u32, big_endian: bool) -> Vec<f64> {
    macro_rules! each {
        ($t:ty, $n:expr) => {
            bytes
                .chunks_exact($n)
                .map(|c| {
                    let arr: [u8; $n] = c.try_into().unwrap();
                    (if big_endian {
                        <$t>::from_be_bytes(arr)
                    } else {
                        <$t>::from_le_bytes(arr)
                    }) as f64
                })
                .collect()
        };
    }
    match data_type {
        1 => bytes.iter().map(|&b| b as f64).collect(),
        2 => each!(i16, 2),
        3 => each!(i32, 4),
        4 => each!(f32, 4),
        5 => each!(f64, 8),
        12 => each!(u16, 2),
        _ => unreachable!("validated on parse"),
    }
}

/// Reads a raster and returns its values in pixel-major `H×W×C` order.
fn read_raster(data_path: &Path, header_path: &Path) -> Result<(EnviHeader, Vec<f64>)> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = EnviHeader::parse(&text, header_path)?;
    let values = read_raw(data_path, &header)?;
    Ok((header, values))
}

/// Reads a headerless raw file laid out as `header` describes, returning
/// pixel-major `H×W×C` values.
pub fn read_raw(data_path: impl AsRef<Path>, header: &EnviHeader) -> Result<Vec<f64>> {
    let data_path = data_path.as_ref();
    type_size(header.data_type)?;
    let bytes = read_file(data_path)?;
    let expected = header.header_offset + header.payload_bytes();
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: data_path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let raw = decode(
        &bytes[header.header_offset as usize..],
        header.data_type,
        header.byte_order == 1,
    );
    let (h, w, c) = (header.lines, header.samples, header.bands);
    let mut out = vec![0f64; raw.len()];
    for row in 0..h {
        for col in 0..w {
            for band in 0..c {
                let src = match header.interleave {
                    Interleave::Bsq => (band * h + row) * w + col,
                    Interleave::Bil => (row * c + band) * w + col,
                    Interleave::Bip => (row * w + col) * c + band,
                };
                out[(row * w + col) * c + band] = raw[src];
            }
        }
    }
    Ok(out)
}

pub fn read_cube(data_path: impl AsRef<Path>, header_path: impl AsRef<Path>) -> Result<HyperCube> {
    let (header, values) = read_raster(data_path.as_ref(), header_path.as_ref())?;
    HyperCube::new(
        header.lines,
        header.samples,
        header.bands,
        values.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn read_labels(data_path: impl AsRef<Path>, header_path: impl AsRef<Path>) -> Result<LabelRaster> {
    let (data_path, header_path) = (data_path.as_ref(), header_path.as_ref());
    let (header, values) = read_raster(data_path, header_path)?;
    if header.bands != 1 {
        return Err(Error::Header {
            path: header_path.to_path_buf(),
            reason: format!("label rasters have one band, header declares {}", header.bands),
        });
    }
    if !matches!(header.data_type, 1 | 2 | 3 | 12) {
        return Err(Error::Unsupported {
            what: "label data type",
            value: header.data_type.to_string(),
        });
    }
    let mut labels = Vec::with_capacity(values.len());
    for v in values {
        if !(0.0..=u16::MAX as f64).contains(&v) {
            return Err(Error::Header {
                path: data_path.to_path_buf(),
                reason: format!("label value {v} outside 0..=65535"),
            });
        }
        labels.push(v as u16);
    }
    LabelRaster::new(header.lines, header.samples, labels)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the canonical pair: BSQ little-endian float32 payload and its header.
pub fn write_cube(
    cube: &HyperCube,
    data_path: impl AsRef<Path>,
    header_path: impl AsRef<Path>,
) -> Result<()> {
    let (h, w, c) = cube.dims();
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for band in 0..c {
        for px in 0..h * w {
            bytes.extend_from_slice(&cube.data[px * c + band].to_le_bytes());
        }
    }
    let header = EnviHeader {
        samples: w,
        lines: h,
        bands: c,
        interleave: Interleave::Bsq,
        data_type: 4,
        byte_order: 0,
        header_offset: 0,
    };
    write_file(data_path.as_ref(), &bytes)?;
    write_file(header_path.as_ref(), header.render().as_bytes())
}

/// Writes a label raster as single-band uint16 BSQ plus header.
pub fn write_labels(
    labels: &LabelRaster,
    data_path: impl AsRef<Path>,
    header_path: impl AsRef<Path>,
) -> Result<()> {
    let bytes: Vec<u8> = labels.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = EnviHeader {
        samples: labels.width,
        lines: labels.height,
        bands: 1,
        interleave: Interleave::Bsq,
        data_type: 12,
        byte_order: 0,
        header_offset: 0,
    };
    write_file(data_path.as_ref(), &bytes)?;
    write_file(header_path.as_ref(), header.render().as_bytes())
}
