//! Single-task and multitask training, snapshot collection, and voting.
//!
//! Training runs in two phases. The shared phase steps one network
//! round-robin over all tasks, one batch per task per cycle. At the phase
//! boundary the network is forked once per task and each fork is fine-tuned
//! on its own task. Single-task training is the one-task case of the same
//! loop.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Progress, SamplerState};
use crate::data::{PatchSet, SamplePool};
use crate::error::{Error, Result};
use crate::network::{ArchConfig, Mode, MultitaskNet, TaskSpec};
use crate::optim::{lr_schedule, AdaDelta, LrSchedule};
use crate::tensor::{Tape, Tensor};

/// Which parameters the fine-tune phase updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    /// Every parameter of the fork, shared extractor included.
    #[default]
    All,
    /// Only the task head; extractor features are computed once at the fork.
    /// Single-task training has no fork to adjust and ignores this.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub shared_epochs: usize,
    pub finetune_epochs: usize,
    pub snapshot_stride: usize,
    pub snapshot_count: usize,
    pub seed: u64,
    pub share_first_conv: bool,
    pub strict_determinism: bool,
    pub shared_lr: f64,
    pub finetune_lr: f64,
    pub finetune_scope: FinetuneScope,
    /// Adds the three mirrored copies of every training patch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 20,
            shared_epochs: 100,
            finetune_epochs: 30,
            snapshot_stride: 2,
            snapshot_count: 5,
            seed: 0,
            share_first_conv: true,
            strict_determinism: false,
            shared_lr: 1.0,
            finetune_lr: 0.1,
            finetune_scope: FinetuneScope::All,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.total_epochs() == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.snapshot_count == 0 || self.snapshot_stride == 0 {
            return Err(Error::Config(
                "snapshot_count and snapshot_stride must be at least 1".into(),
            ));
        }
        if self.snapshot_count * self.snapshot_stride > 2 * self.finetune_epochs.max(1)
            || (self.snapshot_count - 1) * self.snapshot_stride >= self.total_epochs()
        {
            return Err(Error::Config(format!(
                "{} snapshots every {} epochs do not fit a {}+{} epoch schedule",
                self.snapshot_count, self.snapshot_stride, self.shared_epochs, self.finetune_epochs
            )));
        }
        for (name, lr) in [("shared_lr", self.shared_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.shared_epochs + self.finetune_epochs
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            shared_epochs: self.shared_epochs,
            finetune_epochs: self.finetune_epochs,
            shared_lr: self.shared_lr,
            finetune_lr: self.finetune_lr,
        }
    }

    /// 1-based epochs after which snapshots are kept, ending at the last epoch.
    pub fn snapshot_epochs(&self) -> Vec<usize> {
        let e = self.total_epochs();
        (0..self.snapshot_count)
            .rev()
            .map(|i| e - i * self.snapshot_stride)
            .collect()
    }
}

/// A task's network identity plus its (augmented) training pool.
#[derive(Clone, Debug)]
pub struct TrainTask {
    pub spec: TaskSpec,
    pub pool: SamplePool,
}

/// Generator for stream `purpose` of `task` at position `counter`.
fn stream_rng(seed: u64, task: usize, counter: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(task as u64).to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    key[24..].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Endless batch stream over one pool: shuffled passes without replacement,
/// or independent draws with replacement when the pool is smaller than a batch.
#[derive(Clone, Debug)]
struct Sampler {
    task: usize,
    task_id: String,
    len: usize,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    reshuffles: u64,
    draws: u64,
}

impl Sampler {
    fn new(seed: u64, task: usize, task_id: &str, len: usize) -> Self {
        Sampler {
            task,
            task_id: task_id.to_string(),
            len,
            seed,
            order: Self::permutation(seed, task, 0, len),
            cursor: 0,
            reshuffles: 0,
            draws: 0,
        }
    }

    fn permutation(seed: u64, task: usize, pass: u64, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut stream_rng(seed, task, pass, 0));
        order
    }

    fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        self.draws += 1;
        if self.len < batch {
            let mut rng = stream_rng(self.seed, self.task, self.draws, 1);
            return (0..batch).map(|_| rng.gen_range(0..self.len)).collect();
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.len {
                self.reshuffles += 1;
                self.order = Self::permutation(self.seed, self.task, self.reshuffles, self.len);
                self.cursor = 0;
            }
            let take = (batch - out.len()).min(self.len - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }

    fn state(&self) -> SamplerState {
        SamplerState {
            task: self.task_id.clone(),
            cursor: self.cursor as u64,
            reshuffles: self.reshuffles,
            draws: self.draws,
        }
    }

    fn restore(seed: u64, task: usize, len: usize, s: &SamplerState) -> Result<Self> {
        if s.cursor as usize > len {
            return Err(Error::Checkpoint(format!(
                "sampler cursor {} beyond pool of {len} for task `{}`",
                s.cursor, s.task
            )));
        }
        Ok(Sampler {
            task,
            task_id: s.task.clone(),
            len,
            seed,
            order: Self::permutation(seed, task, s.reshuffles, len),
            cursor: s.cursor as usize,
            reshuffles: s.reshuffles,
            draws: s.draws,
        })
    }
}

/// One independently trained network and the tasks it steps on.
#[derive(Clone)]
struct Branch {
    net: MultitaskNet<f32>,
    optim: AdaDelta<f32>,
    samplers: Vec<Sampler>,
    /// Inference-mode features of the single owned task's pool (head-only fine-tuning).
    cached: Option<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    Before,
    After,
}

pub struct StepEvent<'a> {
    /// 0-based epoch being trained.
    pub epoch: usize,
    pub task: &'a str,
    pub phase: StepPhase,
    pub net: &'a MultitaskNet<f32>,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent<'_>) {}

    /// Called after every epoch with the networks alive at that point: the
    /// shared network during the shared phase, one fork per task afterwards.
    fn on_epoch_end(&mut self, _epoch: usize, _nets: &[&MultitaskNet<f32>]) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based.
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub net: MultitaskNet<f32>,
}

/// Snapshots of one task's network, in increasing epoch order.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    pub task: String,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotSet {
    pub fn epochs(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.epoch).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        for s in &self.snapshots {
            Checkpoint::network(s.net.clone()).save(snapshot_path(dir.as_ref(), &self.task, s.epoch))?;
        }
        Ok(())
    }

    /// Loads `<dir>/<task>/<epoch>.ckpt` files in epoch order.
    pub fn load(dir: impl AsRef<Path>, task: &str) -> Result<Self> {
        let tdir = dir.as_ref().join(task);
        let entries = std::fs::read_dir(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let mut epochs = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&tdir, e))?.path();
            if path.extension().is_some_and(|x| x == "ckpt") {
                if let Some(e) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                    epochs.push(e);
                }
            }
        }
        if epochs.is_empty() {
            return Err(Error::Config(format!("no snapshots in {}", tdir.display())));
        }
        epochs.sort_unstable();
        let snapshots = epochs
            .into_iter()
            .map(|epoch| {
                Ok(Snapshot {
                    epoch,
                    net: Checkpoint::load(snapshot_path(dir.as_ref(), task, epoch))?.net,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SnapshotSet {
            task: task.to_string(),
            snapshots,
        })
    }
}

pub fn snapshot_path(dir: &Path, task: &str, epoch: usize) -> PathBuf {
    dir.join(task).join(format!("{epoch}.ckpt"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub shared: Duration,
    pub finetune: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.shared + self.finetune
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub snapshots: Vec<SnapshotSet>,
    pub history: Vec<HistoryRow>,
    pub times: PhaseTimes,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn snapshots_for(&self, task: &str) -> Result<&SnapshotSet> {
        self.snapshots
            .iter()
            .find(|s| s.task == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    /// Writes `history.csv` and `snapshots/<task>/<epoch>.ckpt` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_history(dir.join("history.csv"), &self.history)?;
        for set in &self.snapshots {
            set.save(dir.join("snapshots"))?;
        }
        Ok(())
    }
}

pub fn write_history(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "task", "loss", "lr"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Resumable training state.
pub struct Trainer {
    config: TrainConfig,
    arch: ArchConfig,
    tasks: Vec<TrainTask>,
    branches: Vec<Branch>,
    epoch: usize,
    history: Vec<HistoryRow>,
    snapshots: Vec<SnapshotSet>,
    times: PhaseTimes,
    steps: usize,
}

impl Trainer {
    pub fn new(tasks: Vec<TrainTask>, arch: &ArchConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec.clone()).collect();
        let net = MultitaskNet::build(&specs, arch, config.share_first_conv, config.seed)?;
        for t in &tasks {
            check_pool(t, arch)?;
            if t.pool.len() < config.batch_size {
                log::warn!(
                    "task `{}`: {} training samples is less than one batch of {}; batches are drawn with replacement",
                    t.spec.id,
                    t.pool.len(),
                    config.batch_size
                );
            }
        }
        let samplers = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| Sampler::new(config.seed, i, &t.spec.id, t.pool.len()))
            .collect();
        let optim = AdaDelta::new(net.params());
        let snapshots = specs
            .iter()
            .map(|s| SnapshotSet {
                task: s.id.clone(),
                snapshots: Vec::new(),
            })
            .collect();
        let mut trainer = Trainer {
            config: config.clone(),
            arch: arch.clone(),
            tasks,
            branches: vec![Branch {
                net,
                optim,
                samplers,
                cached: None,
            }],
            epoch: 0,
            history: Vec::new(),
            snapshots,
            times: PhaseTimes::default(),
            steps: 0,
        };
        if trainer.is_forked() {
            trainer.fork()?;
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch == self.config.total_epochs()
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    /// Networks currently being trained.
    pub fn networks(&self) -> Vec<&MultitaskNet<f32>> {
        self.branches.iter().map(|b| &b.net).collect()
    }

    /// Optimizer steps taken so far, over all branches.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn is_forked(&self) -> bool {
        self.config.finetune_epochs > 0 && self.epoch >= self.config.shared_epochs
    }

    /// Splits the shared branch into one branch per task.
    fn fork(&mut self) -> Result<()> {
        if self.branches.len() != 1 || self.branches[0].samplers.len() != self.tasks.len() {
            return Ok(());
        }
        let shared = self.branches.pop().expect("one shared branch");
        for sampler in shared.samplers {
            let mut branch = Branch {
                net: shared.net.clone(),
                optim: shared.optim.clone(),
                samplers: vec![sampler],
                cached: None,
            };
            self.cache_features(&mut branch)?;
            self.branches.push(branch);
        }
        Ok(())
    }

    fn cache_features(&self, branch: &mut Branch) -> Result<()> {
        if self.config.finetune_scope != FinetuneScope::HeadOnly || self.tasks.len() < 2 {
            return Ok(());
        }
        let task = &self.tasks[branch.samplers[0].task];
        let n = task.pool.len();
        let mut data = Vec::with_capacity(n * self.arch.feature_dim);
        let chunk = 256;
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..n.min(start + chunk)).collect();
            let (x, _) = task.pool.batch(&idx)?;
            data.extend_from_slice(branch.net.infer_features(&x, &task.spec.id)?.data());
        }
        branch.cached = Some(Tensor::new(&[n, self.arch.feature_dim], data)?);
        Ok(())
    }

    /// Trains one epoch.
    pub fn run_epoch(&mut self, observer: &mut dyn TrainObserver) -> Result<()> {
        let total = self.config.total_epochs();
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.config.schedule())?;
        let started = Instant::now();
        if self.config.finetune_epochs > 0 && epoch == self.config.shared_epochs {
            self.fork()?;
        }
        let forked = self.is_forked();
        let batch = self.config.batch_size;
        let mut losses = vec![(0.0f64, 0usize); self.tasks.len()];
        for branch in &mut self.branches {
            let smallest = branch.samplers.iter().map(|s| s.len).min().unwrap_or(0);
            let steps_per_epoch = smallest.div_ceil(batch).max(1);
            for _ in 0..steps_per_epoch {
                for slot in 0..branch.samplers.len() {
                    let task = branch.samplers[slot].task;
                    let id = self.tasks[task].spec.id.as_str();
                    observer.on_step(&StepEvent {
                        epoch,
                        task: id,
                        phase: StepPhase::Before,
                        net: &branch.net,
                    });
                    let loss = branch.step(&self.tasks[task], slot, batch, lr as f32)?;
                    observer.on_step(&StepEvent {
                        epoch,
                        task: id,
                        phase: StepPhase::After,
                        net: &branch.net,
                    });
                    losses[task].0 += loss;
                    losses[task].1 += 1;
                    self.steps += 1;
                }
            }
        }
        self.epoch += 1;
        for (task, (sum, n)) in self.tasks.iter().zip(losses) {
            self.history.push(HistoryRow {
                epoch: self.epoch,
                task: task.spec.id.clone(),
                loss: sum / n.max(1) as f64,
                lr,
            });
        }
        if self.config.snapshot_epochs().contains(&self.epoch) {
            for branch in &self.branches {
                for s in &branch.samplers {
                    self.snapshots[s.task].snapshots.push(Snapshot {
                        epoch: self.epoch,
                        net: branch.net.clone(),
                    });
                }
            }
        }
        let elapsed = started.elapsed();
        if forked {
            self.times.finetune += elapsed;
        } else {
            self.times.shared += elapsed;
        }
        log::debug!("epoch {}/{} lr {lr} done in {elapsed:?}", self.epoch, total);
        observer.on_epoch_end(self.epoch, &self.networks());
        Ok(())
    }

    /// Trains until `epoch` epochs are complete.
    pub fn run_until(&mut self, epoch: usize, observer: &mut dyn TrainObserver) -> Result<()> {
        let target = epoch.min(self.config.total_epochs());
        while self.epoch < target {
            self.run_epoch(observer)?;
        }
        Ok(())
    }

    pub fn run(mut self, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        self.run_until(self.config.total_epochs(), observer)?;
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            snapshots: self.snapshots,
            history: self.history,
            times: self.times,
            steps: self.steps,
        }
    }

    /// Writes everything needed by [`Trainer::resume`] into `dir`.
    pub fn save_state(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, b) in self.branches.iter().enumerate() {
            Checkpoint {
                net: b.net.clone(),
                optimizer: Some(b.optim.clone()),
                progress: Some(Progress {
                    epoch: self.epoch as u32,
                    samplers: b.samplers.iter().map(Sampler::state).collect(),
                }),
            }
            .save(dir.join(format!("branch{i}.ckpt")))?;
        }
        write_history(dir.join("history.csv"), &self.history)?;
        for set in &self.snapshots {
            set.save(dir.join("snapshots"))?;
        }
        Ok(())
    }

    /// Continues a run saved by [`Trainer::save_state`] with the same tasks,
    /// architecture, and configuration.
    pub fn resume(dir: impl AsRef<Path>, tasks: Vec<TrainTask>, arch: &ArchConfig, config: &TrainConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let mut trainer = Trainer::new(tasks, arch, config)?;
        let mut branches = Vec::new();
        let mut epoch = None;
        for i in 0.. {
            let path = dir.join(format!("branch{i}.ckpt"));
            if !path.exists() {
                break;
            }
            let ck = Checkpoint::load(&path)?;
            let (Some(optim), Some(progress)) = (ck.optimizer, ck.progress) else {
                return Err(Error::Checkpoint(format!(
                    "{} lacks optimizer state or progress",
                    path.display()
                )));
            };
            if *epoch.get_or_insert(progress.epoch) != progress.epoch {
                return Err(Error::Checkpoint("branches disagree on the epoch".into()));
            }
            if ck.net.tasks().iter().map(|t| &t.id).ne(trainer.tasks.iter().map(|t| &t.spec.id)) {
                return Err(Error::Checkpoint(format!("{} was trained on other tasks", path.display())));
            }
            let samplers = progress
                .samplers
                .iter()
                .map(|s| {
                    let task = trainer
                        .tasks
                        .iter()
                        .position(|t| t.spec.id == s.task)
                        .ok_or_else(|| Error::UnknownTask(s.task.clone()))?;
                    Sampler::restore(config.seed, task, trainer.tasks[task].pool.len(), s)
                })
                .collect::<Result<_>>()?;
            branches.push(Branch {
                net: ck.net,
                optim,
                samplers,
                cached: None,
            });
        }
        let Some(epoch) = epoch else {
            return Err(Error::Checkpoint(format!("no training state in {}", dir.display())));
        };
        trainer.epoch = epoch as usize;
        trainer.branches = branches;
        if trainer.is_forked() {
            let mut branches = std::mem::take(&mut trainer.branches);
            for b in &mut branches {
                trainer.cache_features(b)?;
            }
            trainer.branches = branches;
        }
        trainer.history = read_history(dir.join("history.csv"))?;
        for set in &mut trainer.snapshots {
            if let Ok(saved) = SnapshotSet::load(dir.join("snapshots"), &set.task) {
                *set = saved;
            }
        }
        Ok(trainer)
    }
}

fn check_pool(task: &TrainTask, arch: &ArchConfig) -> Result<()> {
    if task.pool.is_empty() {
        return Err(Error::Config(format!("task `{}` has no training samples", task.spec.id)));
    }
    if task.pool.patch_size != arch.patch_size || task.pool.bands != task.spec.input_channels {
        return Err(Error::Config(format!(
            "task `{}`: pool holds {}×{}×{} patches, network expects {}×{}×{}",
            task.spec.id,
            task.pool.patch_size,
            task.pool.patch_size,
            task.pool.bands,
            arch.patch_size,
            arch.patch_size,
            task.spec.input_channels
        )));
    }
    if let Some(&bad) = task.pool.labels().iter().find(|&&l| l >= task.spec.num_classes) {
        return Err(Error::Config(format!(
            "task `{}`: label {} exceeds {} classes",
            task.spec.id,
            bad + 1,
            task.spec.num_classes
        )));
    }
    Ok(())
}

impl Branch {
    fn step(&mut self, task: &TrainTask, slot: usize, batch: usize, lr: f32) -> Result<f64> {
        let idx = self.samplers[slot].next_batch(batch);
        let id = task.spec.id.as_str();
        let mut tape = Tape::new();
        let loss = match &self.cached {
            Some(features) => {
                let f = features.shape()[1];
                let rows: Vec<f32> = idx
                    .iter()
                    .flat_map(|&i| features.data()[i * f..(i + 1) * f].iter().copied())
                    .collect();
                let labels: Vec<usize> = idx.iter().map(|&i| task.pool.labels()[i]).collect();
                let fv = tape.input(Tensor::new(&[idx.len(), f], rows)?);
                let logits = self.net.forward_logits(&mut tape, fv, id)?;
                tape.softmax_cross_entropy(logits, &labels)?
            }
            None => {
                let (x, labels) = task.pool.batch(&idx)?;
                self.net.loss(&mut tape, &x, &labels, id, Mode::Train)?
            }
        };
        let value = tape.value(loss).data()[0] as f64;
        let grads = tape.backward(loss, self.net.params())?;
        self.optim.step(self.net.params_mut(), &grads, lr)?;
        Ok(value)
    }
}

pub fn train_single(task: TrainTask, arch: &ArchConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(vec![task], arch, config)?.run(&mut NoObserver)
}

pub fn train_multitask(tasks: Vec<TrainTask>, arch: &ArchConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    if tasks.is_empty() {
        return Err(Error::Config("multitask training needs at least one task".into()));
    }
    Trainer::new(tasks, arch, config)?.run(&mut NoObserver)
}

/// Majority vote over per-snapshot class probabilities (`B×K` each). Ties
/// go to the tied class with the largest probability summed over
/// snapshots, then to the lowest class index.
pub fn vote(probs: &[Tensor<f32>]) -> Result<Vec<usize>> {
    let first = probs
        .first()
        .ok_or_else(|| Error::Config("voting needs at least one snapshot".into()))?;
    let [b, k] = first.dims2()?;
    let mut counts = vec![0usize; b * k];
    let mut sums = vec![0.0f64; b * k];
    for p in probs {
        if p.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "snapshot probabilities {:?} and {:?} differ",
                p.shape(),
                first.shape()
            )));
        }
        for (i, row) in p.data().chunks_exact(k).enumerate() {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                sums[i * k + c] += v as f64;
                if v > row[best] {
                    best = c;
                }
            }
            counts[i * k + best] += 1;
        }
    }
    Ok((0..b)
        .map(|i| {
            let (c, s) = (&counts[i * k..(i + 1) * k], &sums[i * k..(i + 1) * k]);
            (0..k)
                .max_by(|&x, &y| c[x].cmp(&c[y]).then(s[x].total_cmp(&s[y])).then(y.cmp(&x)))
                .expect("k >= 2")
        })
        .collect())
}

/// Voted 0-based predictions for a batch of patches.
pub fn predict_batch_vote(set: &SnapshotSet, batch: &Tensor<f32>) -> Result<Vec<usize>> {
    let probs = set
        .snapshots
        .iter()
        .map(|s| s.net.predict_proba(batch, &set.task))
        .collect::<Result<Vec<_>>>()?;
    vote(&probs)
}

/// Voted 0-based predictions for every patch of `patches`, evaluated in
/// chunks of `chunk` patches.
pub fn snapshot_predict_vote(set: &SnapshotSet, patches: &PatchSet<'_>, chunk: usize) -> Result<Vec<usize>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(patches.len());
    for start in (0..patches.len()).step_by(chunk) {
        let batch = patches.batch(start..patches.len().min(start + chunk))?;
        out.extend(predict_batch_vote(set, &batch)?);
    }
    Ok(out)
}
