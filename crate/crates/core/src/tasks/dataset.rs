use std::fmt::Write as _;

use thiserror::Error;

use crate::adapter::fmt_f64;
use crate::linalg::{gaussian_matrix, LinalgError, Matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("inputs have {inputs} samples but targets have {targets}")]
    SampleMismatch { inputs: usize, targets: usize },
    #[error("dataset `{0}` has no samples")]
    Empty(String),
    #[error("lower fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("need at least 2 samples to split with fraction < 1, have {0}")]
    TooSmallToSplit(usize),
    #[error("dataset parse error: {0}")]
    Parse(String),
}

/// Samples stored column-wise: `inputs` is `d_in x n`, `targets` is `d_out x n`.
/// Classification targets are one-hot columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    inputs: Matrix,
    targets: Matrix,
    seed: u64,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Matrix, targets: Matrix, seed: u64) -> Result<Self, DatasetError> {
        let name = name.into();
        if inputs.cols() != targets.cols() {
            return Err(DatasetError::SampleMismatch {
                inputs: inputs.cols(),
                targets: targets.cols(),
            });
        }
        if inputs.cols() == 0 {
            return Err(DatasetError::Empty(name));
        }
        Ok(Self {
            name,
            inputs,
            targets,
            seed,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }
    pub fn targets(&self) -> &Matrix {
        &self.targets
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn len(&self) -> usize {
        self.inputs.cols()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn d_in(&self) -> usize {
        self.inputs.rows()
    }
    pub fn d_out(&self) -> usize {
        self.targets.rows()
    }

    /// Subset of samples in the given order. May be empty.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Self, DatasetError> {
        Ok(Self {
            name: name.into(),
            inputs: self.inputs.select_columns(indices)?,
            targets: self.targets.select_columns(indices)?,
            seed: self.seed,
        })
    }

    /// Column-major text dump.
    ///
    /// ```text
    /// bilora-dataset 1
    /// name <name>
    /// seed <u64>
    /// dims <d_in> <d_out> <n>
    /// <x_0 ... x_{d_in-1} y_0 ... y_{d_out-1}>   (one line per sample)
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bilora-dataset 1");
        let _ = writeln!(out, "name {}", self.name);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "dims {} {} {}", self.d_in(), self.d_out(), self.len());
        for c in 0..self.len() {
            let values: Vec<String> = self
                .inputs
                .column(c)
                .into_iter()
                .chain(self.targets.column(c))
                .map(fmt_f64)
                .collect();
            let _ = writeln!(out, "{}", values.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let perr = |m: &str| DatasetError::Parse(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("bilora-dataset 1") {
            return Err(perr("missing `bilora-dataset 1` header"));
        }
        let name = lines
            .next()
            .and_then(|l| l.strip_prefix("name "))
            .ok_or_else(|| perr("missing name"))?
            .to_string();
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed "))
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| perr("missing or bad seed"))?;
        let dims: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("dims "))
            .ok_or_else(|| perr("missing dims"))?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| perr("bad dims")))
            .collect::<Result<_, _>>()?;
        let [d_in, d_out, n] = dims[..] else {
            return Err(perr("dims needs three values"));
        };
        let mut x = Matrix::zeros(d_in, n);
        let mut y = Matrix::zeros(d_out, n);
        for c in 0..n {
            let line = lines.next().ok_or_else(|| perr("truncated sample list"))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| perr("bad float")))
                .collect::<Result<_, _>>()?;
            if values.len() != d_in + d_out || values.iter().any(|v| !v.is_finite()) {
                return Err(perr("sample line has wrong length or non-finite value"));
            }
            for (r, v) in values[..d_in].iter().enumerate() {
                x.set(r, c, *v);
            }
            for (r, v) in values[d_in..].iter().enumerate() {
                y.set(r, c, *v);
            }
        }
        Self::new(name, x, y, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Share of samples that go to the lower-level set, in `(0, 1]`.
    pub lower_fraction: f64,
    pub seed: u64,
}

/// Result of [`split_dataset`]. `adjusted` is set when rounding would have
/// left the upper set empty and one sample was moved over.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub lower: Dataset,
    pub upper: Dataset,
    pub adjusted: bool,
}

/// Seed-shuffled partition with `round(fraction * n)` samples in the lower set.
pub fn split_dataset(data: &Dataset, spec: SplitSpec) -> Result<Split, DatasetError> {
    let f = spec.lower_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(DatasetError::BadFraction(f));
    }
    let n = data.len();
    if f < 1.0 && n < 2 {
        return Err(DatasetError::TooSmallToSplit(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed).shuffle(&mut order);
    let mut n_lower = ((f * n as f64).round() as usize).clamp(1, n);
    let mut adjusted = false;
    if f < 1.0 && n_lower == n {
        n_lower = n - 1;
        adjusted = true;
    }
    let lower = data.select(&order[..n_lower], format!("{}/lower", data.name()))?;
    let upper = data.select(&order[n_lower..], format!("{}/upper", data.name()))?;
    Ok(Split { lower, upper, adjusted })
}

/// Teacher-student regression task: `y = T x + noise` with a fixed low-rank
/// teacher `T` shared by the train and test sets.
///
/// `x ~ N(0, I)` and `T = A B` with `A ~ N(0, 1/k)`, `B ~ N(0, 1/d_in)`, so
/// each clean target entry has unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherTask {
    pub d_in: usize,
    pub d_out: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub teacher_rank: usize,
}

pub fn make_teacher_task(rng: &mut Rng, task: &TeacherTask) -> Result<(Dataset, Dataset), DatasetError> {
    let k = task.teacher_rank.max(1);
    let a = gaussian_matrix(rng, task.d_out, k, 1.0 / (k as f64).sqrt())?;
    let b = gaussian_matrix(rng, k, task.d_in, 1.0 / (task.d_in as f64).sqrt())?;
    let teacher = a.matmul(&b)?;
    let seed = rng.next_u64();
    let mut sample = |n: usize, name: &str| -> Result<Dataset, DatasetError> {
        let x = gaussian_matrix(rng, task.d_in, n, 1.0)?;
        let noise = gaussian_matrix(rng, task.d_out, n, task.noise_std)?;
        let y = teacher.matmul(&x)?.add(&noise)?;
        Dataset::new(name, x, y, seed)
    };
    let train = sample(task.n_train, "teacher/train")?;
    let test = sample(task.n_test, "teacher/test")?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let x = Matrix::new(2, n, (0..2 * n).map(|i| i as f64).collect()).unwrap();
        let y = Matrix::new(1, n, (0..n).map(|i| -(i as f64)).collect()).unwrap();
        Dataset::new("toy", x, y, 0).unwrap()
    }

    fn columns(d: &Dataset) -> Vec<Vec<u64>> {
        (0..d.len())
            .map(|c| {
                d.inputs()
                    .column(c)
                    .into_iter()
                    .chain(d.targets().column(c))
                    .map(f64::to_bits)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn eight_two_split() {
        let s = split_dataset(&toy(10), SplitSpec { lower_fraction: 0.8, seed: 3 }).unwrap();
        assert_eq!((s.lower.len(), s.upper.len()), (8, 2));
        assert!(!s.adjusted);
    }

    #[test]
    fn full_fraction_leaves_upper_empty() {
        let s = split_dataset(&toy(10), SplitSpec { lower_fraction: 1.0, seed: 3 }).unwrap();
        assert_eq!(s.lower.len(), 10);
        assert!(s.upper.is_empty());
    }

    #[test]
    fn rounding_to_everything_is_adjusted() {
        let s = split_dataset(&toy(4), SplitSpec { lower_fraction: 0.95, seed: 1 }).unwrap();
        assert_eq!((s.lower.len(), s.upper.len()), (3, 1));
        assert!(s.adjusted);
        assert!(split_dataset(&toy(1), SplitSpec { lower_fraction: 0.5, seed: 1 }).is_err());
        assert!(split_dataset(&toy(4), SplitSpec { lower_fraction: 0.0, seed: 1 }).is_err());
        assert!(split_dataset(&toy(4), SplitSpec { lower_fraction: 1.2, seed: 1 }).is_err());
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let d = toy(17);
        let spec = SplitSpec { lower_fraction: 0.7, seed: 99 };
        let a = split_dataset(&d, spec).unwrap();
        let b = split_dataset(&d, spec).unwrap();
        assert_eq!(a, b);
        let mut union = columns(&a.lower);
        union.extend(columns(&a.upper));
        union.sort();
        let mut all = columns(&d);
        all.sort();
        assert_eq!(union, all);
    }

    #[test]
    fn teacher_task_is_deterministic() {
        let task = TeacherTask {
            d_in: 6,
            d_out: 5,
            n_train: 8,
            n_test: 20,
            noise_std: 0.5,
            teacher_rank: 2,
        };
        let a = make_teacher_task(&mut Rng::new(4), &task).unwrap();
        let b = make_teacher_task(&mut Rng::new(4), &task).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 8);
        assert_eq!(a.1.len(), 20);
        assert_eq!(a.0.d_out(), 5);
    }

    #[test]
    fn noiseless_targets_are_low_rank_images() {
        let task = TeacherTask {
            d_in: 6,
            d_out: 6,
            n_train: 6,
            n_test: 1,
            noise_std: 0.0,
            teacher_rank: 1,
        };
        let (train, _) = make_teacher_task(&mut Rng::new(8), &task).unwrap();
        // Rank one: every target column is parallel to the first.
        let y = train.targets();
        let c0 = y.column(0);
        for c in 1..6 {
            let col = y.column(c);
            let ratio = col[0] / c0[0];
            for r in 0..6 {
                assert!((col[r] - ratio * c0[r]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let task = TeacherTask {
            d_in: 3,
            d_out: 2,
            n_train: 5,
            n_test: 1,
            noise_std: 0.3,
            teacher_rank: 1,
        };
        let (train, _) = make_teacher_task(&mut Rng::new(1), &task).unwrap();
        let back = Dataset::from_text(&train.to_text()).unwrap();
        assert_eq!(back, train);
        assert!(Dataset::from_text("bilora-dataset 1\nname x\n").is_err());
    }
}
