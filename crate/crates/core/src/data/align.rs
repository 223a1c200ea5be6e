//! Band alignment: cropping a band range, repeating trailing bands, and
//! reversing band order, so that cubes from different scenes or sensors
//! present the same channel count to a shared first convolution.

use std::fmt;
use std::str::FromStr;

use super::HyperCube;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignStep {
    /// Keep bands `first..=last` (1-based, inclusive).
    Crop { first: usize, last: usize },
    /// Append copies of the final `n` bands in their original order.
    RepeatLast(usize),
    /// Reverse the band order.
    Invert,
}

impl fmt::Display for AlignStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignStep::Crop { first, last } => write!(f, "crop({first},{last})"),
            AlignStep::RepeatLast(n) => write!(f, "repeat_last({n})"),
            AlignStep::Invert => write!(f, "invert"),
        }
    }
}

impl FromStr for AlignStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unrecognized alignment step `{s}`"));
        if s == "invert" {
            return Ok(AlignStep::Invert);
        }
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums: Vec<usize> = args
            .split(',')
            .map(|a| a.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match (name.trim(), nums.as_slice()) {
            ("crop", &[first, last]) => Ok(AlignStep::Crop { first, last }),
            ("repeat_last", &[n]) => Ok(AlignStep::RepeatLast(n)),
            _ => Err(bad()),
        }
    }
}

/// Ordered alignment steps applied left to right.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentSpec {
    pub steps: Vec<AlignStep>,
}

impl AlignmentSpec {
    pub fn new(steps: Vec<AlignStep>) -> Self {
        AlignmentSpec { steps }
    }

    pub fn parse_steps<S: AsRef<str>>(steps: &[S]) -> Result<Self> {
        Ok(AlignmentSpec {
            steps: steps
                .iter()
                .map(|s| s.as_ref().parse())
                .collect::<Result<_>>()?,
        })
    }

    pub fn then(mut self, step: AlignStep) -> Self {
        self.steps.push(step);
        self
    }

    /// Source band (0-based) feeding each output band.
    pub fn band_map(&self, bands: usize) -> Result<Vec<usize>> {
        let mut map: Vec<usize> = (0..bands).collect();
        for step in &self.steps {
            let c = map.len();
            match *step {
                AlignStep::Crop { first, last } => {
                    if first == 0 || first > last || last > c {
                        return Err(Error::BandRange {
                            first,
                            last,
                            bands: c,
                        });
                    }
                    map = map[first - 1..last].to_vec();
                }
                AlignStep::RepeatLast(n) => {
                    if n > c {
                        return Err(Error::BandRange {
                            first: c + 1 - n.min(c + 1),
                            last: c,
                            bands: c,
                        });
                    }
                    map.extend_from_within(c - n..);
                }
                AlignStep::Invert => map.reverse(),
            }
        }
        if map.is_empty() {
            return Err(Error::Config("alignment leaves no bands".into()));
        }
        Ok(map)
    }

    pub fn output_bands(&self, bands: usize) -> Result<usize> {
        self.band_map(bands).map(|m| m.len())
    }
}

impl fmt::Display for AlignmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.steps.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join(";"))
    }
}

impl FromStr for AlignmentSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(AlignmentSpec::default());
        }
        Self::parse_steps(&s.split(';').collect::<Vec<_>>())
    }
}

pub fn align_bands(cube: &HyperCube, spec: &AlignmentSpec) -> Result<HyperCube> {
    let map = spec.band_map(cube.bands())?;
    let (h, w, _) = cube.dims();
    let mut data = Vec::with_capacity(h * w * map.len());
    for px in cube.data().chunks_exact(cube.bands()) {
        data.extend(map.iter().map(|&b| px[b]));
    }
    let ids = map.iter().map(|&b| cube.band_ids()[b]).collect();
    HyperCube::with_band_ids(h, w, map.len(), data, ids)
}
