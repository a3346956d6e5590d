use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{io_err, HarnessError};
use crate::linalg::Mat;
use crate::oracle::teacher_data;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Regression => "regression",
            Self::Classification => "classification",
        }
    }
}

/// Features plus targets. Classification targets are an `m × 1` column of
/// class indices; regression targets are `m × d_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Mat,
    pub targets: Mat,
    pub task: Task,
    /// Number of classes, or the regression output width.
    pub num_outputs: usize,
}

impl Dataset {
    pub fn new(name: &str, features: Mat, targets: Mat, task: Task, num_outputs: usize) -> Result<Self, HarnessError> {
        let ds = Self {
            name: name.to_string(),
            features,
            targets,
            task,
            num_outputs,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Schema(m));
        if self.features.rows() != self.targets.rows() {
            return bad(format!(
                "{} feature rows but {} target rows",
                self.features.rows(),
                self.targets.rows()
            ));
        }
        if !self.features.is_finite() || !self.targets.is_finite() {
            return bad("dataset contains non-finite values".into());
        }
        match self.task {
            Task::Classification => {
                if self.targets.cols() != 1 || self.num_outputs < 2 {
                    return bad("classification needs one label column and at least two classes".into());
                }
                for &v in self.targets.as_slice() {
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= self.num_outputs {
                        return bad(format!("class label {v} outside 0..{}", self.num_outputs));
                    }
                }
            }
            Task::Regression => {
                if self.targets.cols() != self.num_outputs {
                    return bad("regression target width disagrees with num_outputs".into());
                }
            }
        }
        Ok(())
    }

    /// Rows `idx` in order.
    pub fn rows(&self, idx: &[usize]) -> (Mat, Mat) {
        let x = Mat::from_fn(idx.len(), self.features.cols(), |r, c| self.features[(idx[r], c)]);
        let y = Mat::from_fn(idx.len(), self.targets.cols(), |r, c| self.targets[(idx[r], c)]);
        (x, y)
    }

    /// Leading rows for training, trailing `val_fraction` for validation.
    pub fn split(&self, val_fraction: f64) -> Result<(Dataset, Dataset), HarnessError> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(HarnessError::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
        }
        let m = self.len();
        let n_val = (m as f64 * val_fraction).round() as usize;
        let n_train = m - n_val;
        let part = |range: std::ops::Range<usize>, suffix: &str| {
            let idx: Vec<usize> = range.collect();
            let (x, y) = self.rows(&idx);
            Dataset {
                name: format!("{}/{suffix}", self.name),
                features: x,
                targets: y,
                task: self.task,
                num_outputs: self.num_outputs,
            }
        };
        Ok((part(0..n_train, "train"), part(n_train..m, "val")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoMoons,
    GaussianRegression,
    TeacherNet,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::TwoMoons => "two-moons",
            Self::GaussianRegression => "gaussian-regression",
            Self::TeacherNet => "teacher-net",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "two-moons" => Some(Self::TwoMoons),
            "gaussian-regression" => Some(Self::GaussianRegression),
            "teacher-net" => Some(Self::TeacherNet),
            _ => None,
        }
    }
}

const MOONS_NOISE: f64 = 0.1;
const REGRESSION_DIM: usize = 4;
const REGRESSION_NOISE: f64 = 0.1;
const TEACHER_WIDTH: usize = 8;

/// Reproducible synthetic dataset of `m` shuffled rows.
pub fn make_synthetic(kind: SyntheticKind, m: usize, seed: u64) -> Result<Dataset, HarnessError> {
    if m < 2 {
        return Err(HarnessError::Config("synthetic datasets need at least 2 rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = match kind {
        SyntheticKind::TwoMoons => {
            let noise = Normal::new(0.0, MOONS_NOISE).expect("valid std");
            let mut rows: Vec<(f64, f64, f64)> = (0..m)
                .map(|i| {
                    let upper = i < m.div_ceil(2);
                    let half = if upper { m.div_ceil(2) } else { m / 2 };
                    let k = if upper { i } else { i - m.div_ceil(2) };
                    let t = PI * k as f64 / (half.max(2) - 1) as f64;
                    let (x, y, label) = if upper {
                        (t.cos(), t.sin(), 0.0)
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin(), 1.0)
                    };
                    (x + noise.sample(&mut rng), y + noise.sample(&mut rng), label)
                })
                .collect();
            rows.shuffle(&mut rng);
            let x = Mat::from_fn(m, 2, |r, c| if c == 0 { rows[r].0 } else { rows[r].1 });
            let y = Mat::from_fn(m, 1, |r, _| rows[r].2);
            Dataset::new(kind.name(), x, y, Task::Classification, 2)?
        }
        SyntheticKind::GaussianRegression => {
            let w: Vec<f64> = (0..REGRESSION_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = Mat::from_fn(m, REGRESSION_DIM, |_, _| StandardNormal.sample(&mut rng));
            let y = Mat::from_fn(m, 1, |r, _| {
                let clean: f64 = x.row(r).iter().zip(&w).map(|(a, b)| a * b).sum();
                let eps: f64 = StandardNormal.sample(&mut rng);
                clean + REGRESSION_NOISE * eps
            });
            Dataset::new(kind.name(), x, y, Task::Regression, 1)?
        }
        SyntheticKind::TeacherNet => {
            let (x, y, _) = teacher_data(m, 2, TEACHER_WIDTH, 0.0, seed).map_err(|e| HarnessError::Config(e.to_string()))?;
            Dataset::new(kind.name(), x, y, Task::Regression, 1)?
        }
    };
    Ok(ds)
}

/// Column layout expected in a CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub task: Task,
    /// Number of classes; inferred from the labels when absent.
    pub num_classes: Option<usize>,
}

impl CsvSchema {
    /// Classification when the header has a `y` column, regression otherwise.
    pub fn infer(header: &csv::StringRecord) -> Self {
        let task = if header.iter().any(|h| h.trim() == "y") {
            Task::Classification
        } else {
            Task::Regression
        };
        Self { task, num_classes: None }
    }
}

/// Reads a dataset with a header row; feature columns start with `x`, the
/// label is `y` (class index) or `y0..y{d_o−1}` (regression).
pub fn load_csv(path: &Path, schema: Option<CsvSchema>) -> Result<Dataset, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::FileNotFound(path.display().to_string()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let schema = schema.unwrap_or_else(|| CsvSchema::infer(&header));

    let feature_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('x')).collect();
    let label_cols: Vec<usize> = match schema.task {
        Task::Classification => (0..header.len()).filter(|&i| &header[i] == "y").collect(),
        Task::Regression => {
            let mut cols = Vec::new();
            while let Some(i) = (0..header.len()).find(|&i| header[i] == *format!("y{}", cols.len())) {
                cols.push(i);
            }
            cols
        }
    };
    if feature_cols.is_empty() {
        return Err(HarnessError::Schema("no feature columns (prefix `x`)".into()));
    }
    match (schema.task, label_cols.len()) {
        (Task::Classification, 1) => {}
        (Task::Classification, _) => return Err(HarnessError::Schema("label column `y` missing".into())),
        (Task::Regression, 0) => return Err(HarnessError::Schema("label columns `y0..` missing".into())),
        _ => {}
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = rec
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map_or(i + 2, |p| p.line() as usize);
        let rec = rec.map_err(|e| HarnessError::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<f64, HarnessError> {
            rec.get(c)
                .ok_or_else(|| HarnessError::Parse {
                    line,
                    message: format!("missing column {}", &header[c]),
                })?
                .parse::<f64>()
                .map_err(|_| HarnessError::Parse {
                    line,
                    message: format!("column {} is not a number", &header[c]),
                })
        };
        for &c in &feature_cols {
            xs.push(field(c)?);
        }
        for &c in &label_cols {
            ys.push(field(c)?);
        }
    }
    let m = xs.len() / feature_cols.len();
    let features = Mat::from_vec(m, feature_cols.len(), xs).map_err(|e| HarnessError::Schema(e.to_string()))?;
    let targets = Mat::from_vec(m, label_cols.len(), ys).map_err(|e| HarnessError::Schema(e.to_string()))?;
    let num_outputs = match schema.task {
        Task::Classification => schema.num_classes.unwrap_or_else(|| {
            targets.as_slice().iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1
        }).max(2),
        Task::Regression => label_cols.len(),
    };
    let name = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(&name, features, targets, schema.task, num_outputs)
}

/// Writes `ds` so that [`load_csv`] reproduces it exactly.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = (0..ds.input_dim()).map(|i| format!("x{i}")).collect();
    match ds.task {
        Task::Classification => header.push("y".into()),
        Task::Regression => header.extend((0..ds.targets.cols()).map(|i| format!("y{i}"))),
    }
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for r in 0..ds.len() {
        let mut row: Vec<String> = ds.features.row(r).iter().map(|v| format!("{v:?}")).collect();
        match ds.task {
            Task::Classification => row.push(format!("{}", ds.targets[(r, 0)] as usize)),
            Task::Regression => row.extend(ds.targets.row(r).iter().map(|v| format!("{v:?}"))),
        }
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        for kind in [SyntheticKind::TwoMoons, SyntheticKind::GaussianRegression, SyntheticKind::TeacherNet] {
            assert_eq!(make_synthetic(kind, 50, 3).unwrap(), make_synthetic(kind, 50, 3).unwrap());
            assert_ne!(make_synthetic(kind, 50, 3).unwrap(), make_synthetic(kind, 50, 4).unwrap());
        }
    }

    #[test]
    fn moons_are_balanced() {
        let ds = make_synthetic(SyntheticKind::TwoMoons, 400, 0).unwrap();
        let ones: f64 = ds.targets.as_slice().iter().sum();
        assert_eq!(ones, 200.0);
    }

    #[test]
    fn regression_csv_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "x0,x1,y0\n1.5,2,0.25\n-3,4e-3,1\n0,0,-7.125\n").unwrap();
        let ds = load_csv(&p, None).unwrap();
        assert_eq!(ds.task, Task::Regression);
        assert_eq!(ds.features, Mat::from_rows(&[vec![1.5, 2.0], vec![-3.0, 4e-3], vec![0.0, 0.0]]));
        assert_eq!(ds.targets, Mat::column(&[0.25, 1.0, -7.125]));
    }

    #[test]
    fn missing_label_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "x0,x1\n1,2\n").unwrap();
        let schema = CsvSchema {
            task: Task::Classification,
            num_classes: Some(2),
        };
        assert!(matches!(load_csv(&p, Some(schema)), Err(HarnessError::Schema(_))));
        assert!(matches!(load_csv(&p, None), Err(HarnessError::Schema(_))));
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "x0,y\n1,0\n2,1\nfoo,0\n").unwrap();
        assert!(matches!(load_csv(&p, None), Err(HarnessError::Parse { line: 4, .. })));
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [SyntheticKind::TwoMoons, SyntheticKind::GaussianRegression] {
            let ds = make_synthetic(kind, 64, 9).unwrap();
            let p = dir.path().join(format!("{}.csv", kind.name()));
            write_csv(&p, &ds).unwrap();
            let back = load_csv(&p, None).unwrap();
            assert_eq!(back.features, ds.features);
            assert_eq!(back.targets, ds.targets);
            assert_eq!(back.task, ds.task);
        }
    }

    #[test]
    fn split_keeps_order() {
        let ds = make_synthetic(SyntheticKind::GaussianRegression, 10, 1).unwrap();
        let (tr, va) = ds.split(0.2).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert_eq!(va.features.row(1), ds.features.row(9));
    }
}
