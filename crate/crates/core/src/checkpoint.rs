//! Binary checkpoint container for networks, optimizer state, and training
//! progress.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "HMTLCKPT" | version u32
//! arch: patch_size, stem_channels, num_residual_blocks, feature_dim (u32 each)
//! share_first_conv u8 | task count u32
//!   per task: id (u16 len + utf8), num_classes u32, input_channels u32, alignment (u16 len + utf8)
//! param count u32
//!   per param: name (u16 len + utf8), ndim u8, dims u32×ndim, f32 data
//! norm count u32
//!   per norm: channels u32, updates u64, mean f32×channels, var f32×channels
//! optimizer flag u8 [rho f32, eps f32, per param: E[g²] f32×n, E[Δx²] f32×n]
//! progress flag u8 [epoch u32, sampler count u32, per sampler: task, cursor u64, reshuffles u64, draws u64]
//! "END!"
//! ```

use std::path::Path;

use crate::data::AlignmentSpec;
use crate::error::{Error, Result};
use crate::network::{ArchConfig, MultitaskNet, TaskSpec};
use crate::optim::{Accumulators, AdaDelta};
use crate::tensor::{BnState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"HMTLCKPT";
pub const VERSION: u32 = 1;
const END: &[u8; 4] = b"END!";

/// Position of one task's batch stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerState {
    pub task: String,
    pub cursor: u64,
    pub reshuffles: u64,
    pub draws: u64,
}

/// Completed epochs and sampler positions of one training branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Progress {
    pub epoch: u32,
    pub samplers: Vec<SamplerState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: MultitaskNet<f32>,
    pub optimizer: Option<AdaDelta<f32>>,
    pub progress: Option<Progress>,
}

impl Checkpoint {
    pub fn network(net: MultitaskNet<f32>) -> Self {
        Checkpoint {
            net,
            optimizer: None,
            progress: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let a = self.net.arch();
        for v in [a.patch_size, a.stem_channels, a.num_residual_blocks, a.feature_dim] {
            w.u32(v as u32);
        }
        w.u8(self.net.share_first_conv() as u8);
        w.u32(self.net.tasks().len() as u32);
        for t in self.net.tasks() {
            w.str(&t.id);
            w.u32(t.num_classes as u32);
            w.u32(t.input_channels as u32);
            w.str(&t.alignment.to_string());
        }
        let params = self.net.params();
        w.u32(params.len() as u32);
        for (_, name, t) in params.iter() {
            w.str(name);
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        w.u32(self.net.bn_states().len() as u32);
        for s in self.net.bn_states() {
            w.u32(s.channels() as u32);
            w.u64(s.updates);
            w.f32s(&s.mean);
            w.f32s(&s.var);
        }
        match &self.optimizer {
            Some(opt) => {
                w.u8(1);
                w.f32s(&[opt.rho, opt.eps]);
                for slot in opt.slots() {
                    w.f32s(&slot.sq_grad);
                    w.f32s(&slot.sq_update);
                }
            }
            None => w.u8(0),
        }
        match &self.progress {
            Some(p) => {
                w.u8(1);
                w.u32(p.epoch);
                w.u32(p.samplers.len() as u32);
                for s in &p.samplers {
                    w.str(&s.task);
                    w.u64(s.cursor);
                    w.u64(s.reshuffles);
                    w.u64(s.draws);
                }
            }
            None => w.u8(0),
        }
        w.bytes(END);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let arch = ArchConfig {
            patch_size: r.u32()? as usize,
            stem_channels: r.u32()? as usize,
            num_residual_blocks: r.u32()? as usize,
            feature_dim: r.u32()? as usize,
        };
        let share = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("invalid sharing flag {v}"))),
        };
        let n_tasks = r.count()?;
        let mut tasks = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let id = r.str()?;
            let k = r.u32()? as usize;
            let c = r.u32()? as usize;
            let alignment: AlignmentSpec = r
                .str()?
                .parse()
                .map_err(|e: Error| Error::Checkpoint(format!("task `{id}` alignment: {e}")))?;
            tasks.push(TaskSpec::new(id, k, c).with_alignment(alignment));
        }
        let n_params = r.count()?;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let len = shape.iter().product();
            let data = r.f32s(len)?;
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            params.add(name, t);
        }
        let n_bn = r.count()?;
        let mut bn = Vec::with_capacity(n_bn);
        for _ in 0..n_bn {
            let ch = r.u32()? as usize;
            let updates = r.u64()?;
            let mean = r.f32s(ch)?;
            let var = r.f32s(ch)?;
            bn.push(BnState { mean, var, updates });
        }
        let net = MultitaskNet::from_parts(&arch, &tasks, share, params, bn)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let hyper = r.f32s(2)?;
                let mut slots = Vec::with_capacity(net.params().len());
                for (_, _, t) in net.params().iter() {
                    slots.push(Accumulators {
                        sq_grad: r.f32s(t.len())?,
                        sq_update: r.f32s(t.len())?,
                    });
                }
                Some(AdaDelta::from_slots(net.params(), hyper[0], hyper[1], slots)?)
            }
            v => return Err(Error::Checkpoint(format!("invalid optimizer flag {v}"))),
        };
        let progress = match r.u8()? {
            0 => None,
            1 => {
                let epoch = r.u32()?;
                let n = r.count()?;
                let mut samplers = Vec::with_capacity(n);
                for _ in 0..n {
                    samplers.push(SamplerState {
                        task: r.str()?,
                        cursor: r.u64()?,
                        reshuffles: r.u64()?,
                        draws: r.u64()?,
                    });
                }
                Some(Progress { epoch, samplers })
            }
            v => return Err(Error::Checkpoint(format!("invalid progress flag {v}"))),
        };
        if r.take(4)? != END {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after end marker",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            net,
            optimizer,
            progress,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &MultitaskNet<f32>,
    optimizer: Option<&AdaDelta<f32>>,
) -> Result<()> {
    Checkpoint {
        net: net.clone(),
        optimizer: optimizer.cloned(),
        progress: None,
    }
    .save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.bytes(&(s.len() as u16).to_le_bytes());
        self.bytes(s.as_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Element count, bounded by the bytes left so corrupt counts fail fast.
    fn count(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("implausible count {n} at offset {}", self.pos)));
        }
        Ok(n)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in name".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
