use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hsi_multitask::data::{read_cube, read_labels, EnviHeader};
use hsi_multitask::manifest::RunManifest;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsi-multitask"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn convert_declares_indian_pines_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("ip.bin");
    let (h, w, c) = (145usize, 145usize, 200usize);
    let bytes: Vec<u8> = (0..h * w * c).flat_map(|i| ((i % 977) as f32).to_le_bytes()).collect();
    fs::write(&raw, bytes).unwrap();
    let out = tmp.path().join("ip.raw");
    let dims = ["--height", "145", "--width", "145", "--bands", "200"];
    let mut args = vec!["convert", "--input", s(&raw), "--output", s(&out)];
    args.extend(dims);
    let stdout = ok(&args);
    assert!(stdout.contains("145×145×200"), "{stdout}");

    let hdr = tmp.path().join("ip.hdr");
    let header = EnviHeader::parse(&fs::read_to_string(&hdr).unwrap(), &hdr).unwrap();
    assert_eq!((header.lines, header.samples, header.bands), (145, 145, 200));
    assert_eq!(header.data_type, 4);
    let cube = read_cube(&out, &hdr).unwrap();
    // Input was band-sequential: value index = band·H·W + row·W + col.
    assert_eq!(cube.get(3, 7, 11), ((11 * h * w + 3 * w + 7) % 977) as f32);

    let first = fs::read(&out).unwrap();
    ok(&args);
    assert_eq!(fs::read(&out).unwrap(), first, "reconversion must be byte-identical");
}

#[test]
fn convert_rejects_wrong_byte_count() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("short.bin");
    fs::write(&raw, vec![0u8; 4 * 10 - 1]).unwrap();
    let out = tmp.path().join("x.raw");
    let o = cli(&[
        "convert", "--input", s(&raw), "--output", s(&out), "--height", "2", "--width", "5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("39") && err.contains("40"), "{err}");
    assert!(!out.exists());
}

#[test]
fn convert_reads_big_endian_bip_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("gt.bin");
    let values: [u16; 6] = [0, 1, 2, 3, 1, 0];
    fs::write(&raw, values.iter().flat_map(|v| v.to_be_bytes()).collect::<Vec<_>>()).unwrap();
    let out = tmp.path().join("gt.raw");
    ok(&[
        "convert", "--input", s(&raw), "--output", s(&out), "--height", "2", "--width", "3",
        "--dtype", "u16", "--big-endian", "--interleave", "bip", "--labels",
    ]);
    let labels = read_labels(&out, tmp.path().join("gt.hdr")).unwrap();
    assert_eq!(labels.data(), &values);
}

fn write_synth_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("synth.toml");
    fs::write(
        &p,
        "num_tasks = 2\nclasses_per_task = 3\nbands = 8\nsize = 12\nspectral_overlap = 1.0\nnoise_sigma = 0.05\nseed = 4\n",
    )
    .unwrap();
    p
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_synth_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    for name in ["task1.raw", "task1_gt.raw", "task2.raw", "task2.hdr", "palette.csv", "manifest.toml"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let o = cli(&["synth", "--config", s(&cfg), "--out", s(&a), "--seed", "5"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("task1.raw")).unwrap(), fs::read(b.join("task1.raw")).unwrap());
}

#[test]
fn synth_rejects_bad_overlap() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        "num_tasks = 2\nclasses_per_task = 3\nbands = 8\nsize = 12\nspectral_overlap = 1.5\nnoise_sigma = 0.05\nseed = 4\n",
    )
    .unwrap();
    let o = cli(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spectral_overlap"));
}

/// Synthesizes a scene pair and shrinks the manifest to a seconds-long sweep.
fn small_run(dir: &Path) -> std::path::PathBuf {
    let cfg = write_synth_config(dir);
    let data = dir.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let path = data.join("manifest.toml");
    let mut m = RunManifest::parse(&fs::read_to_string(&path).unwrap()).unwrap();
    m.arch.patch_size = 3;
    m.arch.stem_channels = 4;
    m.arch.num_residual_blocks = 1;
    m.arch.feature_dim = 8;
    m.train.batch_size = 6;
    m.train.shared_epochs = 4;
    m.train.finetune_epochs = 3;
    m.train.snapshot_stride = 1;
    m.train.snapshot_count = 2;
    m.eval.n_per_class = vec![3];
    m.eval.seeds = vec![0, 1];
    fs::write(&path, m.to_toml()).unwrap();
    path
}

#[test]
fn train_eval_map_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_run(tmp.path());
    let stdout = ok(&["train", "--config", s(&manifest), "--strict"]);
    assert!(stdout.contains("total wall time"), "{stdout}");
    assert!(stdout.contains("shared") && stdout.contains("finetune"), "{stdout}");

    let runs = tmp.path().join("data").join("runs");
    for method in ["single", "multitask"] {
        for seed in [0, 1] {
            let cell = runs.join(method).join("n3").join(format!("seed{seed}"));
            for f in ["config.toml", "history.csv", "split/task1.csv", "split/task2.csv"] {
                assert!(cell.join(f).is_file(), "{}", cell.join(f).display());
            }
            for task in ["task1", "task2"] {
                for epoch in [6, 7] {
                    assert!(cell.join("snapshots").join(task).join(format!("{epoch}.ckpt")).is_file());
                }
            }
        }
    }

    let table = ok(&["eval", "--config", s(&manifest)]);
    assert!(table.contains("n_per_class,single,multitask"), "{table}");
    let first = fs::read(runs.join("runs.csv")).unwrap();
    ok(&["eval", "--config", s(&manifest)]);
    assert_eq!(fs::read(runs.join("runs.csv")).unwrap(), first);
    assert!(runs.join("table_task2.csv").is_file());

    let cell = runs.join("multitask").join("n3").join("seed1");
    let map = tmp.path().join("map.ppm");
    let palette = tmp.path().join("data").join("palette.csv");
    ok(&["map", "--run", s(&cell), "--task", "task2", "--palette", s(&palette), "--output", s(&map)]);
    let bytes = fs::read(&map).unwrap();
    assert!(bytes.starts_with(b"P6\n12 12\n255\n"));
    assert_eq!(bytes.len(), "P6\n12 12\n255\n".len() + 3 * 144);

    let again = tmp.path().join("again.ppm");
    ok(&["map", "--run", s(&cell), "--task", "task2", "--output", s(&again)]);
    let third = tmp.path().join("third.ppm");
    ok(&["map", "--run", s(&cell), "--task", "task2", "--output", s(&third)]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&third).unwrap());

    let o = cli(&["map", "--run", s(&cell), "--task", "nope", "--output", s(&third)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_seed_and_inverse_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_run(tmp.path());
    ok(&["train", "--config", s(&manifest), "--seed", "1", "--inverse", "task2"]);
    let runs = tmp.path().join("data").join("runs");
    assert!(!runs.join("single").join("n3").join("seed0").exists());
    let cell = runs.join("multitask").join("n3").join("seed1");
    let cfg = RunManifest::load(cell.join("config.toml")).unwrap();
    assert_eq!(cfg.eval.seeds, vec![1]);
    assert_eq!(cfg.task("task2").unwrap().alignment, vec!["invert".to_string()]);
    assert!(cfg.task("task1").unwrap().alignment.is_empty());

    let o = cli(&["train", "--config", s(&manifest), "--inverse", "task9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_fail_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_run(tmp.path());
    fs::remove_file(tmp.path().join("data").join("task2_gt.raw")).unwrap();
    let o = cli(&["train", "--config", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("task2_gt.raw"), "{err}");
    assert!(!tmp.path().join("data").join("runs").exists());

    let o = cli(&["train", "--config", s(&tmp.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_manifest_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_run(tmp.path());
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, format!("learning_rate = 3\n{text}")).unwrap();
    let o = cli(&["eval", "--config", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}
