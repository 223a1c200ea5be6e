//! Accuracy, multi-run aggregation, result tables, and classification maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelRaster;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task_id: String,
    pub n_per_class: usize,
    pub seed: u64,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[truth][pred]`, 0-based classes.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn test_count(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// OA and confusion of 1-based predictions against 1-based truth. Pixels
/// whose truth is 0 are skipped.
pub fn overall_accuracy(pred: &[u16], truth: &[u16], num_classes: usize) -> Result<(f64, Vec<Vec<u64>>)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut total = 0u64;
    let mut correct = 0u64;
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if t == 0 {
            continue;
        }
        for l in [p, t] {
            if l == 0 || l as usize > num_classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: l as usize,
                    num_classes: num_classes + 1,
                });
            }
        }
        confusion[t as usize - 1][p as usize - 1] += 1;
        total += 1;
        correct += (p == t) as u64;
    }
    if total == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok((correct as f64 / total as f64, confusion))
}

/// Accuracy of each class (row recall); `NaN` for classes without test pixels.
pub fn per_class_accuracy(confusion: &[Vec<u64>]) -> Vec<f64> {
    confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                f64::NAN
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect()
}

pub fn evaluate(
    task_id: &str,
    n_per_class: usize,
    seed: u64,
    pred: &[u16],
    truth: &[u16],
    num_classes: usize,
) -> Result<EvalReport> {
    let (oa, confusion) = overall_accuracy(pred, truth, num_classes)?;
    Ok(EvalReport {
        task_id: task_id.to_string(),
        n_per_class,
        seed,
        overall_accuracy: oa,
        per_class_accuracy: per_class_accuracy(&confusion),
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub task_id: String,
    pub n_per_class: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` for a single run.
    pub std: Option<f64>,
    pub runs: Vec<f64>,
}

impl AggregateReport {
    /// `mm.mm±ss.ss` in percent, or `mm.mm±n/a` for a single run.
    pub fn formatted(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.2}±n/a", 100.0 * self.mean),
        }
    }
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Aggregate("no runs to aggregate".into()))?;
    if let Some(r) = reports
        .iter()
        .find(|r| r.task_id != first.task_id || r.n_per_class != first.n_per_class)
    {
        return Err(Error::Aggregate(format!(
            "cannot mix {} n={} with {} n={}",
            first.task_id, first.n_per_class, r.task_id, r.n_per_class
        )));
    }
    let runs: Vec<f64> = reports.iter().map(|r| r.overall_accuracy).collect();
    let (mean, std) = mean_std(&runs);
    Ok(AggregateReport {
        task_id: first.task_id.clone(),
        n_per_class: first.n_per_class,
        mean,
        std,
        runs,
    })
}

/// Mean and `R−1` sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}

/// One result-table cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub n_per_class: usize,
    pub method: String,
    pub value: String,
}

/// CSV with one row per `n_per_class` and one column per method, in order of
/// first appearance.
pub fn emit_table(cells: &[TableCell]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut rows: BTreeMap<usize, BTreeMap<&str, &str>> = BTreeMap::new();
    for c in cells {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
        rows.entry(c.n_per_class).or_default().insert(&c.method, &c.value);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once("n_per_class").chain(methods.iter().copied()).collect();
    w.write_record(&header).expect("in-memory write");
    for (n, row) in &rows {
        let mut rec = vec![n.to_string()];
        rec.extend(methods.iter().map(|m| row.get(m).copied().unwrap_or("").to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn parse_table(text: &str) -> Result<Vec<TableCell>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let methods: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut cells = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let n: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad n_per_class in table row {rec:?}")))?;
        for (m, v) in methods.iter().zip(rec.iter().skip(1)) {
            if !v.is_empty() {
                cells.push(TableCell {
                    n_per_class: n,
                    method: m.clone(),
                    value: v.to_string(),
                });
            }
        }
    }
    Ok(cells)
}

/// RGB color per class; index 0 is the unlabeled color.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette(pub Vec<Option<[u8; 3]>>);

impl Palette {
    /// Black for 0, then evenly spread hues for classes `1..=k`.
    pub fn default_for(k: usize) -> Self {
        let mut colors = vec![Some([0, 0, 0])];
        for i in 0..k {
            let h = i as f64 / k as f64 * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let s = |v: f64| (40.0 + 215.0 * v).round() as u8;
            colors.push(Some([s(r), s(g), s(b)]));
        }
        Palette(colors)
    }

    pub fn color(&self, class: usize) -> Result<[u8; 3]> {
        self.0
            .get(class)
            .copied()
            .flatten()
            .ok_or(Error::MissingPalette(class))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut colors: Vec<Option<[u8; 3]>> = Vec::new();
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for rec in r.deserialize() {
            let (class, red, green, blue): (usize, u8, u8, u8) = rec?;
            if colors.len() <= class {
                colors.resize(class + 1, None);
            }
            colors[class] = Some([red, green, blue]);
        }
        Ok(Palette(colors))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, c) in self.0.iter().enumerate() {
            if let Some([r, g, b]) = c {
                writeln!(s, "{k},{r},{g},{b}").expect("string write");
            }
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Binary P6 image of a class raster.
pub fn render_map_bytes(raster: &LabelRaster, palette: &Palette) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.reserve(3 * raster.height() * raster.width());
    for &class in raster.data() {
        out.extend_from_slice(&palette.color(class as usize)?);
    }
    Ok(out)
}

pub fn render_map(raster: &LabelRaster, palette: &Palette, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_map_bytes(raster, palette)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(task: &str, n: usize, oa: f64) -> EvalReport {
        EvalReport {
            task_id: task.into(),
            n_per_class: n,
            seed: 0,
            overall_accuracy: oa,
            per_class_accuracy: vec![],
            confusion: vec![],
        }
    }

    #[test]
    fn perfect_prediction() {
        let truth = [1u16, 2, 3, 0, 2];
        let (oa, c) = overall_accuracy(&truth, &truth, 3).unwrap();
        assert_eq!(oa, 1.0);
        assert_eq!(c, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn constant_prediction_on_balanced_binary_task() {
        let (oa, _) = overall_accuracy(&[1, 1, 1, 1], &[1, 2, 1, 2], 2).unwrap();
        assert_eq!(oa, 0.5);
    }

    #[test]
    fn hand_built_confusion() {
        let truth = [1u16, 1, 1, 2, 2, 3, 3, 3, 3];
        let pred = [1u16, 2, 1, 2, 3, 3, 3, 1, 3];
        let (oa, c) = overall_accuracy(&pred, &truth, 3).unwrap();
        assert_eq!(c, vec![vec![2, 1, 0], vec![0, 1, 1], vec![1, 0, 3]]);
        assert!((oa - 6.0 / 9.0).abs() < 1e-15);
        let pca = per_class_accuracy(&c);
        assert!((pca[0] - 2.0 / 3.0).abs() < 1e-15 && (pca[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(matches!(
            overall_accuracy(&[1, 2], &[0, 0], 2),
            Err(Error::EmptyTestSet)
        ));
    }

    #[test]
    fn two_point_aggregate() {
        let agg = aggregate_runs(&[report("pu", 10, 0.70), report("pu", 10, 0.80)]).unwrap();
        assert!((agg.mean - 0.75).abs() < 1e-12);
        assert!((agg.std.unwrap() - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.formatted(), "75.00±7.07");
    }

    #[test]
    fn aggregate_edge_cases() {
        let same = aggregate_runs(&[report("a", 5, 0.6), report("a", 5, 0.6)]).unwrap();
        assert_eq!(same.formatted(), "60.00±0.00");
        let one = aggregate_runs(&[report("a", 5, 0.6)]).unwrap();
        assert_eq!(one.std, None);
        assert_eq!(one.formatted(), "60.00±n/a");
        assert!(aggregate_runs(&[report("a", 5, 0.6), report("b", 5, 0.6)]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn table_shape_and_round_trip() {
        let mut cells = Vec::new();
        for n in [5, 10, 15, 20, 25, 30] {
            for m in ["single", "multitask"] {
                cells.push(TableCell {
                    n_per_class: n,
                    method: m.into(),
                    value: format!("{n}.{}±1.00", m.len()),
                });
            }
        }
        let text = emit_table(&cells);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "n_per_class,single,multitask");
        assert_eq!(parse_table(&text).unwrap(), cells);
        assert_eq!(emit_table(&[]).lines().count(), 1);
    }

    #[test]
    fn two_by_two_map() {
        let raster = LabelRaster::new(2, 2, vec![1, 2, 2, 1]).unwrap();
        let palette = Palette::parse("0,0,0,0\n1,255,0,0\n2,0,0,255\n").unwrap();
        let bytes = render_map_bytes(&raster, &palette).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 0, 0, 0, 0, 255, 0, 0, 255, 255, 0, 0]);
    }

    #[test]
    fn unlabeled_map_is_black_and_missing_colors_fail() {
        let raster = LabelRaster::new(2, 3, vec![0; 6]).unwrap();
        let bytes = render_map_bytes(&raster, &Palette::default_for(2)).unwrap();
        assert!(bytes[bytes.len() - 18..].iter().all(|&b| b == 0));
        let raster = LabelRaster::new(1, 2, vec![0, 3]).unwrap();
        assert!(matches!(
            render_map_bytes(&raster, &Palette::default_for(2)),
            Err(Error::MissingPalette(3))
        ));
    }

    #[test]
    fn palette_text_round_trip() {
        let p = Palette::default_for(9);
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);
    }
}
