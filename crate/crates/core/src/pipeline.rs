//! The end-to-end protocol behind the command-line tool: scene preparation,
//! sweep cells, evaluation tables, classification maps, synthetic scenes,
//! and raw-file conversion.
//!
//! A sweep cell is one (method, samples per class, seed) combination and
//! lives in `<output>/<method>/n<N>/seed<S>/`:
//!
//! ```text
//! config.toml               manifest narrowed to this cell
//! history.csv               epoch,task,loss,lr
//! split/<task>.csv          row,col,label,set
//! snapshots/<task>/<E>.ckpt
//! eval.csv                  written by evaluation
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{
    align_bands, read_cube, read_labels, read_raw, standardize, stratified_split, synth_generate, write_cube,
    write_labels, AlignmentSpec, EnviHeader, HyperCube, Interleave, LabelRaster, PatchSet, SamplePool,
    SampleSplit, SynthConfig,
};
use crate::error::{Error, Result};
use crate::manifest::{EvalConfig, Method, RunManifest, TaskEntry};
use crate::metrics::{aggregate_runs, emit_table, evaluate, render_map, AggregateReport, EvalReport, Palette, TableCell};
use crate::network::{ArchConfig, TaskSpec};
use crate::trainer::{
    snapshot_predict_vote, train_multitask, train_single, write_history, PhaseTimes, SnapshotSet, TrainConfig,
    TrainOutcome, TrainTask,
};

/// Environment variable holding the number of sweep cells run concurrently.
pub const WORKERS_ENV: &str = "HSI_MULTITASK_WORKERS";

/// A task's scene after band alignment and per-band standardization.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: TaskSpec,
    pub cube: HyperCube,
    pub labels: LabelRaster,
}

impl Scene {
    /// Aligns and standardizes `cube`; `num_classes` defaults to the largest label.
    pub fn new(
        id: &str,
        cube: &HyperCube,
        labels: LabelRaster,
        alignment: AlignmentSpec,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        if !labels.matches(cube) {
            return Err(Error::Config(format!(
                "task `{id}`: labels are {}×{}, cube is {}×{}",
                labels.height(),
                labels.width(),
                cube.height(),
                cube.width()
            )));
        }
        let k = num_classes.unwrap_or(labels.num_classes());
        if labels.num_classes() > k {
            return Err(Error::Config(format!(
                "task `{id}`: label {} exceeds num_classes = {k}",
                labels.num_classes()
            )));
        }
        let cube = standardize(&align_bands(cube, &alignment)?);
        Ok(Scene {
            spec: TaskSpec::new(id, k, cube.bands()).with_alignment(alignment),
            cube,
            labels,
        })
    }

    pub fn load(entry: &TaskEntry) -> Result<Self> {
        let ctx = |e: Error| e.context(format!("task `{}`", entry.id));
        let cube = read_cube(&entry.cube, entry.cube_header_path()).map_err(ctx)?;
        let labels = read_labels(&entry.labels, entry.labels_header_path()).map_err(ctx)?;
        Scene::new(&entry.id, &cube, labels, entry.alignment_spec()?, entry.num_classes).map_err(ctx)
    }

    /// Draws the split and builds the training pool.
    pub fn prepare(&self, n_per_class: usize, seed: u64, patch_size: usize, augment: bool) -> Result<(SampleSplit, TrainTask)> {
        let split = stratified_split(&self.labels, n_per_class, seed)
            .map_err(|e| e.context(format!("task `{}`", self.spec.id)))?;
        let pool = SamplePool::from_split(&self.cube, &split, patch_size, augment)?;
        Ok((
            split,
            TrainTask {
                spec: self.spec.clone(),
                pool,
            },
        ))
    }

    /// Voted 1-based labels for `coords`.
    pub fn predict(&self, set: &SnapshotSet, coords: &[(usize, usize)], batch: usize) -> Result<Vec<u16>> {
        let patch = set
            .snapshots
            .first()
            .ok_or_else(|| Error::Config(format!("no snapshots for task `{}`", set.task)))?
            .net
            .arch()
            .patch_size;
        let patches = PatchSet::new(&self.cube, coords, patch);
        Ok(snapshot_predict_vote(set, &patches, batch)?
            .into_iter()
            .map(|k| k as u16 + 1)
            .collect())
    }

    /// Voted labels for every pixel of the scene.
    pub fn predict_map(&self, set: &SnapshotSet, batch: usize) -> Result<LabelRaster> {
        let coords: Vec<(usize, usize)> = (0..self.cube.height())
            .flat_map(|r| (0..self.cube.width()).map(move |c| (r, c)))
            .collect();
        LabelRaster::new(self.cube.height(), self.cube.width(), self.predict(set, &coords, batch)?)
    }
}

pub fn load_scenes(manifest: &RunManifest) -> Result<Vec<Scene>> {
    manifest.tasks.iter().map(Scene::load).collect()
}

pub fn cell_dir(output: &Path, method: Method, n_per_class: usize, seed: u64) -> PathBuf {
    output.join(method.name()).join(format!("n{n_per_class}")).join(format!("seed{seed}"))
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub dir: PathBuf,
    pub method: Method,
    pub n_per_class: usize,
    pub seed: u64,
    /// Wall time of each trained network: one per task for single-task
    /// training, one (`*`) for the multitask network.
    pub times: Vec<(String, PhaseTimes)>,
}

impl CellResult {
    pub fn total_time(&self) -> std::time::Duration {
        self.times.iter().map(|(_, t)| t.total()).sum()
    }
}

/// Trains one sweep cell and writes its run directory.
pub fn train_cell(
    manifest: &RunManifest,
    scenes: &[Scene],
    method: Method,
    n_per_class: usize,
    seed: u64,
) -> Result<CellResult> {
    let dir = cell_dir(&manifest.output, method, n_per_class, seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut cell = manifest.clone();
    cell.eval = EvalConfig {
        n_per_class: vec![n_per_class],
        seeds: vec![seed],
        methods: vec![method],
        ..manifest.eval.clone()
    };
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cell.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let (splits, outcomes) = fit(scenes, &manifest.arch, &manifest.train, method, n_per_class, seed)?;
    for (scene, split) in scenes.iter().zip(&splits) {
        split.write_csv(dir.join("split").join(format!("{}.csv", scene.spec.id)))?;
    }
    let mut history = Vec::new();
    let mut times = Vec::new();
    for (name, o) in &outcomes {
        history.extend(o.history.iter().cloned());
        for set in &o.snapshots {
            set.save(dir.join("snapshots"))?;
        }
        times.push((name.clone(), o.times));
    }
    write_history(dir.join("history.csv"), &history)?;
    Ok(CellResult {
        dir,
        method,
        n_per_class,
        seed,
        times,
    })
}

type Outcomes = Vec<(String, TrainOutcome)>;

fn fit(
    scenes: &[Scene],
    arch: &ArchConfig,
    train: &TrainConfig,
    method: Method,
    n_per_class: usize,
    seed: u64,
) -> Result<(Vec<SampleSplit>, Outcomes)> {
    let config = TrainConfig {
        seed,
        ..train.clone()
    };
    let mut splits = Vec::with_capacity(scenes.len());
    let mut tasks = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let (split, task) = scene.prepare(n_per_class, seed, arch.patch_size, config.augment)?;
        splits.push(split);
        tasks.push(task);
    }
    let outcomes = match method {
        Method::Single => tasks
            .into_iter()
            .map(|t| {
                let id = t.spec.id.clone();
                train_single(t, arch, &config)
                    .map(|o| (id.clone(), o))
                    .map_err(|e| e.context(format!("task `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?,
        Method::Multitask => vec![("*".to_string(), train_multitask(tasks, arch, &config)?)],
    };
    Ok((splits, outcomes))
}

/// Per-task test scores and training times of one in-memory cell.
#[derive(Clone, Debug)]
pub struct CellScore {
    pub reports: Vec<EvalReport>,
    pub times: Vec<(String, PhaseTimes)>,
}

impl CellScore {
    pub fn total_time(&self) -> std::time::Duration {
        self.times.iter().map(|(_, t)| t.total()).sum()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.reports.iter().map(|r| r.overall_accuracy).sum::<f64>() / self.reports.len().max(1) as f64
    }
}

/// Trains one cell without touching the filesystem and votes on each
/// task's test split.
pub fn fit_and_score(
    scenes: &[Scene],
    arch: &ArchConfig,
    train: &TrainConfig,
    method: Method,
    n_per_class: usize,
    seed: u64,
) -> Result<CellScore> {
    let (splits, outcomes) = fit(scenes, arch, train, method, n_per_class, seed)?;
    let mut reports = Vec::with_capacity(scenes.len());
    for (scene, split) in scenes.iter().zip(&splits) {
        let id = &scene.spec.id;
        let set = outcomes
            .iter()
            .find_map(|(_, o)| o.snapshots_for(id).ok())
            .ok_or_else(|| Error::UnknownTask(id.clone()))?;
        let test = split.test_pixels();
        let coords: Vec<(usize, usize)> = test.iter().map(|&(c, _)| c).collect();
        let truth: Vec<u16> = test.iter().map(|&(_, l)| l).collect();
        let pred = scene.predict(set, &coords, 256)?;
        reports.push(evaluate(id, n_per_class, seed, &pred, &truth, scene.spec.num_classes)?);
    }
    Ok(CellScore {
        reports,
        times: outcomes.into_iter().map(|(n, o)| (n, o.times)).collect(),
    })
}

/// Aligned, standardized scenes for every synthetic task, named `task1`,
/// `task2`, and so on.
pub fn synth_scenes(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    synth_generate(cfg)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            Scene::new(
                &format!("task{}", i + 1),
                &s.cube,
                s.labels,
                AlignmentSpec::default(),
                Some(cfg.classes_per_task),
            )
        })
        .collect()
}

pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

fn cells(eval: &EvalConfig) -> Vec<(Method, usize, u64)> {
    let mut out = Vec::new();
    for &method in &eval.methods {
        for &n in &eval.n_per_class {
            for &seed in &eval.seeds {
                out.push((method, n, seed));
            }
        }
    }
    out
}

/// Runs `f` over all cells, concurrently unless strict determinism is on.
fn for_cells<T: Send>(
    manifest: &RunManifest,
    f: impl Fn(Method, usize, u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let cells = cells(&manifest.eval);
    let workers = if manifest.train.strict_determinism {
        1
    } else {
        workers_from_env()
    };
    if workers <= 1 {
        return cells.into_iter().map(|(m, n, s)| f(m, n, s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| cells.into_par_iter().map(|(m, n, s)| f(m, n, s)).collect())
}

/// Trains every cell of the manifest's sweep.
pub fn run_train(manifest: &RunManifest) -> Result<Vec<CellResult>> {
    manifest.validate()?;
    let scenes = load_scenes(manifest)?;
    for_cells(manifest, |m, n, s| {
        let r = train_cell(manifest, &scenes, m, n, s)?;
        log::info!("{m} n={n} seed={s}: {:.2?}", r.total_time());
        Ok(r)
    })
}

/// Votes over a cell's snapshots on its stored test split.
pub fn evaluate_cell(dir: &Path, scenes: &[Scene], n_per_class: usize, seed: u64, batch: usize) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let id = &scene.spec.id;
        let split = SampleSplit::read_csv(dir.join("split").join(format!("{id}.csv")), seed)?;
        let set = SnapshotSet::load(dir.join("snapshots"), id)?;
        let test = split.test_pixels();
        let coords: Vec<(usize, usize)> = test.iter().map(|&(c, _)| c).collect();
        let truth: Vec<u16> = test.iter().map(|&(_, l)| l).collect();
        let pred = scene.predict(&set, &coords, batch)?;
        reports.push(evaluate(id, n_per_class, seed, &pred, &truth, scene.spec.num_classes)?);
    }
    let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
    w.write_record(["task", "n_per_class", "seed", "overall_accuracy"])?;
    for r in &reports {
        w.write_record([
            r.task_id.clone(),
            r.n_per_class.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.overall_accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub reports: Vec<(Method, EvalReport)>,
    pub aggregates: Vec<(Method, AggregateReport)>,
    /// Per task: CSV table of `n_per_class` rows by method columns.
    pub tables: Vec<(String, String)>,
}

/// Evaluates every cell and writes `runs.csv` plus one `table_<task>.csv`
/// per task into the output directory.
pub fn run_eval(manifest: &RunManifest) -> Result<EvalSummary> {
    manifest.validate()?;
    let scenes = load_scenes(manifest)?;
    let per_cell = for_cells(manifest, |m, n, s| {
        let dir = cell_dir(&manifest.output, m, n, s);
        let reports = evaluate_cell(&dir, &scenes, n, s, manifest.eval.batch)
            .map_err(|e| e.context(dir.display().to_string()))?;
        Ok(reports.into_iter().map(|r| (m, r)).collect::<Vec<_>>())
    })?;
    let reports: Vec<(Method, EvalReport)> = per_cell.into_iter().flatten().collect();

    let mut aggregates = Vec::new();
    for &method in &manifest.eval.methods {
        for task in &manifest.tasks {
            for &n in &manifest.eval.n_per_class {
                let group: Vec<EvalReport> = reports
                    .iter()
                    .filter(|(m, r)| *m == method && r.task_id == task.id && r.n_per_class == n)
                    .map(|(_, r)| r.clone())
                    .collect();
                aggregates.push((method, aggregate_runs(&group)?));
            }
        }
    }
    let mut tables = Vec::new();
    for task in &manifest.tasks {
        let cells: Vec<TableCell> = aggregates
            .iter()
            .filter(|(_, a)| a.task_id == task.id)
            .map(|(m, a)| TableCell {
                n_per_class: a.n_per_class,
                method: m.name().to_string(),
                value: a.formatted(),
            })
            .collect();
        let text = emit_table(&cells);
        let path = manifest.output.join(format!("table_{}.csv", task.id));
        std::fs::create_dir_all(&manifest.output).map_err(|e| Error::io(&manifest.output, e))?;
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        tables.push((task.id.clone(), text));
    }
    let runs_path = manifest.output.join("runs.csv");
    let mut w = csv::Writer::from_path(&runs_path)?;
    w.write_record(["method", "task", "n_per_class", "seed", "overall_accuracy"])?;
    for (m, r) in &reports {
        w.write_record([
            m.name().to_string(),
            r.task_id.clone(),
            r.n_per_class.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.overall_accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&runs_path, e))?;
    Ok(EvalSummary {
        reports,
        aggregates,
        tables,
    })
}

/// Renders the voted prediction of every pixel of `task` from a cell
/// directory. Without a palette file, classes get evenly spaced hues.
pub fn run_map(cell: &Path, task: &str, palette: Option<&Path>, output: &Path) -> Result<(usize, usize)> {
    let manifest = RunManifest::load(cell.join("config.toml"))?;
    let scene = Scene::load(manifest.task(task)?)?;
    let set = SnapshotSet::load(cell.join("snapshots"), task)?;
    let raster = scene.predict_map(&set, manifest.eval.batch)?;
    let palette = match palette {
        Some(p) => Palette::load(p)?,
        None => Palette::default_for(scene.spec.num_classes),
    };
    render_map(&raster, &palette, output)?;
    Ok((raster.height(), raster.width()))
}

pub fn header_path(data: &Path) -> PathBuf {
    data.with_extension("hdr")
}

/// Writes synthetic scenes as `<dir>/task<i>.raw` + `<dir>/task<i>_gt.raw`
/// (with headers), a `palette.csv`, and a `manifest.toml` that trains on
/// them.
pub fn write_synth(cfg: &SynthConfig, dir: &Path) -> Result<RunManifest> {
    let scenes = synth_generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let id = format!("task{}", i + 1);
        let cube = PathBuf::from(format!("{id}.raw"));
        let labels = PathBuf::from(format!("{id}_gt.raw"));
        write_cube(&s.cube, dir.join(&cube), header_path(&dir.join(&cube)))?;
        write_labels(&s.labels, dir.join(&labels), header_path(&dir.join(&labels)))?;
        tasks.push(TaskEntry {
            id,
            cube,
            cube_header: None,
            labels,
            labels_header: None,
            alignment: Vec::new(),
            num_classes: Some(cfg.classes_per_task),
        });
    }
    log::info!(
        "{} of {} endmembers per task come from the shared library",
        cfg.shared_classes(),
        cfg.classes_per_task
    );
    Palette::default_for(cfg.classes_per_task).save(dir.join("palette.csv"))?;
    let manifest = RunManifest {
        output: PathBuf::from("runs"),
        tasks,
        arch: ArchConfig::default(),
        train: TrainConfig::default(),
        eval: EvalConfig::default(),
    };
    let path = dir.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterKind {
    Cube,
    Labels,
}

/// Element type names accepted by [`convert_raw`] and their ENVI codes.
pub fn data_type_code(name: &str) -> Result<u32> {
    match name {
        "u8" => Ok(1),
        "i16" => Ok(2),
        "i32" => Ok(3),
        "f32" => Ok(4),
        "f64" => Ok(5),
        "u16" => Ok(12),
        other => Err(Error::Unsupported {
            what: "element type",
            value: other.to_string(),
        }),
    }
}

#[derive(Clone, Debug)]
pub struct RawLayout {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data_type: u32,
    pub interleave: Interleave,
    pub big_endian: bool,
}

/// Converts a headerless raw array into the canonical cube or label pair
/// at `output` (header alongside with a `.hdr` extension).
pub fn convert_raw(input: &Path, layout: &RawLayout, kind: RasterKind, output: &Path) -> Result<(usize, usize, usize)> {
    let header = EnviHeader {
        samples: layout.width,
        lines: layout.height,
        bands: layout.bands,
        interleave: layout.interleave,
        data_type: layout.data_type,
        byte_order: layout.big_endian as u32,
        header_offset: 0,
    };
    let values = read_raw(input, &header)?;
    match kind {
        RasterKind::Cube => {
            let cube = HyperCube::new(
                layout.height,
                layout.width,
                layout.bands,
                values.into_iter().map(|v| v as f32).collect(),
            )?;
            write_cube(&cube, output, header_path(output))?;
        }
        RasterKind::Labels => {
            if layout.bands != 1 {
                return Err(Error::Config(format!(
                    "label rasters have one band, got {}",
                    layout.bands
                )));
            }
            let labels = values
                .into_iter()
                .map(|v| {
                    if v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v) {
                        Ok(v as u16)
                    } else {
                        Err(Error::Config(format!("label value {v} is not a 16-bit class index")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            write_labels(&LabelRaster::new(layout.height, layout.width, labels)?, output, header_path(output))?;
        }
    }
    Ok((layout.height, layout.width, layout.bands))
}
