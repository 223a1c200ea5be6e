//! TOML run manifest: tasks, architecture, training, and evaluation sweep.
//!
//! ```toml
//! output = "runs/pavia"
//!
//! [[task]]
//! id = "pu"
//! cube = "data/paviaU.raw"
//! labels = "data/paviaU_gt.raw"
//! alignment = ["repeat_last(57)"]
//!
//! [train]
//! shared_epochs = 100
//!
//! [eval]
//! n_per_class = [5, 10, 15, 20, 25, 30]
//! seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
//! methods = ["single", "multitask"]
//! ```
//!
//! Header paths default to the data path with a `.hdr` extension. Relative
//! paths resolve against the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AlignStep, AlignmentSpec, EnviHeader};
use crate::error::{Error, Result};
use crate::network::ArchConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One network per task.
    Single,
    /// One network trained on all tasks.
    Multitask,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Multitask => "multitask",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: String,
    pub cube: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cube_header: Option<PathBuf>,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_header: Option<PathBuf>,
    #[serde(default)]
    pub alignment: Vec<String>,
    /// Defaults to the largest label in the raster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl TaskEntry {
    pub fn cube_header_path(&self) -> PathBuf {
        self.cube_header
            .clone()
            .unwrap_or_else(|| self.cube.with_extension("hdr"))
    }

    pub fn labels_header_path(&self) -> PathBuf {
        self.labels_header
            .clone()
            .unwrap_or_else(|| self.labels.with_extension("hdr"))
    }

    pub fn alignment_spec(&self) -> Result<AlignmentSpec> {
        AlignmentSpec::parse_steps(&self.alignment)
            .map_err(|e| e.context(format!("task `{}` alignment", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_per_class: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Patches per inference batch.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_per_class: vec![10],
            seeds: (0..10).collect(),
            methods: vec![Method::Single, Method::Multitask],
            batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub output: PathBuf,
    #[serde(rename = "task")]
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves relative paths against the manifest's directory,
    /// and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text).map_err(|e| e.context(path.display().to_string()))?;
        let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        m.resolve_paths(abs.parent().unwrap_or(Path::new("/")));
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        for t in &mut self.tasks {
            fix(&mut t.cube);
            fix(&mut t.labels);
            t.cube_header.as_mut().map(fix);
            t.labels_header.as_mut().map(fix);
        }
    }

    pub fn task(&self, id: &str) -> Result<&TaskEntry> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    /// Appends a band inversion to one task's alignment.
    pub fn invert_task(&mut self, id: &str) -> Result<()> {
        let t = self
            .tasks
            .iter_mut()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))?;
        t.alignment.push(AlignStep::Invert.to_string());
        Ok(())
    }

    /// Runs only `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.eval.seeds = vec![seed];
        self
    }

    /// Checks everything that can be checked without reading payloads:
    /// field ranges, alignment syntax, input files, header band counts, and
    /// channel agreement under first-layer sharing.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("manifest declares no [[task]]".into()));
        }
        if self.eval.n_per_class.is_empty() || self.eval.seeds.is_empty() || self.eval.methods.is_empty() {
            return Err(Error::Config(
                "eval.n_per_class, eval.seeds, and eval.methods must be non-empty".into(),
            ));
        }
        if self.eval.n_per_class.contains(&0) || self.eval.batch == 0 {
            return Err(Error::Config("eval.n_per_class and eval.batch must be positive".into()));
        }
        let mut channels = Vec::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id.is_empty() || t.id.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid task id `{}`", t.id)));
            }
            if self.tasks[..i].iter().any(|o| o.id == t.id) {
                return Err(Error::Config(format!("duplicate task id `{}`", t.id)));
            }
            let spec = t.alignment_spec()?;
            for p in [&t.cube, &t.labels] {
                if !p.is_file() {
                    return Err(Error::Config(format!("task `{}`: missing file {}", t.id, p.display())));
                }
            }
            let header = read_header(&t.cube_header_path())?;
            let c = spec
                .output_bands(header.bands)
                .map_err(|e| e.context(format!("task `{}`", t.id)))?;
            let labels = read_header(&t.labels_header_path())?;
            if (labels.lines, labels.samples) != (header.lines, header.samples) {
                return Err(Error::Config(format!(
                    "task `{}`: labels are {}×{}, cube is {}×{}",
                    t.id, labels.lines, labels.samples, header.lines, header.samples
                )));
            }
            channels.push(format!("{}={c}", t.id));
            if let Some(k) = t.num_classes {
                if k < 2 {
                    return Err(Error::Config(format!("task `{}` needs at least two classes", t.id)));
                }
            }
        }
        let multi = self.eval.methods.contains(&Method::Multitask) && self.tasks.len() > 1;
        if multi && self.train.share_first_conv {
            let first = channels[0].split('=').nth(1);
            if channels.iter().any(|c| c.split('=').nth(1) != first) {
                return Err(Error::Config(format!(
                    "a shared first convolution needs equal aligned channels, got {}",
                    channels.join(", ")
                )));
            }
        }
        Ok(())
    }
}

fn read_header(path: &Path) -> Result<EnviHeader> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EnviHeader::parse(&text, path)
}
