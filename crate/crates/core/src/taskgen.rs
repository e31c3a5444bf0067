//! Synthetic multi-task problems, task losses and dataset ingestion.
//!
//! A [`SyntheticWorld`] has one ground-truth representation map shared by
//! every task plus one ground-truth head per task, so the shared/personal
//! split used by the clients is exactly realizable. Task difficulty is the
//! norm of the true head, which scales regression targets.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{forward, Matrix, MlpSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression { outputs: usize },
    Classification { classes: usize },
}

impl TaskKind {
    pub fn label_width(self) -> usize {
        match self {
            TaskKind::Regression { outputs } => outputs,
            TaskKind::Classification { classes } => classes,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Regression { outputs } => write!(f, "regression({outputs})"),
            TaskKind::Classification { classes } => write!(f, "classification({classes})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    pub difficulty_scale: f64,
    pub samples: usize,
}

impl TaskSpec {
    pub fn regression(task_id: usize, difficulty_scale: f64, samples: usize) -> Self {
        Self {
            task_id,
            kind: TaskKind::Regression { outputs: 1 },
            difficulty_scale,
            samples,
        }
    }

    pub fn classification(task_id: usize, classes: usize, samples: usize) -> Self {
        Self {
            task_id,
            kind: TaskKind::Classification { classes },
            difficulty_scale: 1.0,
            samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.difficulty_scale > 0.0 && self.difficulty_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "task {}: difficulty scale must be positive, got {}",
                self.task_id, self.difficulty_scale
            )));
        }
        if self.samples == 0 {
            return Err(Error::invalid(format!(
                "task {}: needs at least one sample",
                self.task_id
            )));
        }
        match self.kind {
            TaskKind::Classification { classes } if classes < 2 => Err(Error::invalid(format!(
                "task {}: classification needs at least two classes",
                self.task_id
            ))),
            TaskKind::Regression { outputs: 0 } => Err(Error::invalid(format!(
                "task {}: regression needs at least one output",
                self.task_id
            ))),
            _ => Ok(()),
        }
    }
}

/// One client's samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    inputs: Matrix,
    labels: Matrix,
}

impl LocalDataset {
    pub fn new(inputs: Matrix, labels: Matrix) -> Result<Self> {
        if inputs.rows() != labels.rows() {
            return Err(Error::Shape(format!(
                "{} input rows but {} label rows",
                inputs.rows(),
                labels.rows()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::invalid("dataset has no samples"));
        }
        if !inputs.is_finite() || !labels.is_finite() {
            return Err(Error::non_finite("dataset contains non-finite values"));
        }
        Ok(Self { inputs, labels })
    }

    /// Checks the labels fit `kind`: width matches, and classification rows
    /// are one-hot.
    pub fn check_kind(&self, kind: TaskKind) -> Result<()> {
        if self.labels.cols() != kind.label_width() {
            return Err(Error::Shape(format!(
                "labels have {} columns, {kind} expects {}",
                self.labels.cols(),
                kind.label_width()
            )));
        }
        if let TaskKind::Classification { .. } = kind {
            for r in 0..self.labels.rows() {
                let row = self.labels.row(r);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(Error::invalid(format!("label row {r} is not one-hot")));
                }
            }
        }
        Ok(())
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select_rows(idx),
        }
    }
}

/// Ground truth for a family of tasks sharing one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub input_dim: usize,
    pub repr_dim: usize,
    pub shared_spec: MlpSpec,
    pub true_shared_map: ParamVector,
    pub head_specs: Vec<MlpSpec>,
    pub true_heads: Vec<ParamVector>,
    pub noise_std: f64,
}

impl SyntheticWorld {
    /// Noiseless model output for `task_id` on `inputs`.
    pub fn evaluate(&self, task_id: usize, inputs: &Matrix) -> Result<Matrix> {
        let head = self
            .true_heads
            .get(task_id)
            .ok_or_else(|| Error::invalid(format!("world has no task {task_id}")))?;
        let repr = forward(&self.shared_spec, &self.true_shared_map, inputs)?;
        forward(&self.head_specs[task_id], head, &repr)
    }
}

// Sample draws use their own stream range, clear of the world's streams and
// of the initialization streams used by the harness.
const SAMPLE_STREAM: u64 = 3 << 32;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a world for `task_specs`; task `i` must have `task_id == i`.
///
/// The representation map is a linear `d -> d'` layer. Each head is a linear
/// `d' -> label width` layer with zero bias whose weights are rescaled to
/// Frobenius norm `difficulty_scale`.
pub fn generate_world(
    input_dim: usize,
    repr_dim: usize,
    task_specs: &[TaskSpec],
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticWorld> {
    if repr_dim == 0 || repr_dim >= input_dim {
        return Err(Error::invalid(format!(
            "representation width {repr_dim} must be in 1..{input_dim}"
        )));
    }
    if task_specs.len() < 2 {
        return Err(Error::invalid("a world needs at least two tasks"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise std {noise_std} must be >= 0"
        )));
    }
    for (i, t) in task_specs.iter().enumerate() {
        t.validate()?;
        if t.task_id != i {
            return Err(Error::invalid(format!(
                "task at position {i} has id {}",
                t.task_id
            )));
        }
    }

    let shared_spec = MlpSpec::linear(input_dim, repr_dim)?;
    let true_shared_map = ParamVector::glorot(&shared_spec, &mut stream_rng(seed, 0));

    let mut head_specs = Vec::with_capacity(task_specs.len());
    let mut true_heads = Vec::with_capacity(task_specs.len());
    for t in task_specs {
        let spec = MlpSpec::linear(repr_dim, t.kind.label_width())?;
        let mut head = ParamVector::glorot(&spec, &mut stream_rng(seed, 1 + t.task_id as u64));
        let norm = head.l2_norm();
        let factor = t.difficulty_scale / norm;
        for v in head.values_mut() {
            *v *= factor;
        }
        head_specs.push(spec);
        true_heads.push(head);
    }
    Ok(SyntheticWorld {
        input_dim,
        repr_dim,
        shared_spec,
        true_shared_map,
        head_specs,
        true_heads,
        noise_std,
    })
}

/// Samples `spec.samples` standard-normal inputs and labels them with the
/// world's ground truth.
pub fn sample_dataset(world: &SyntheticWorld, spec: &TaskSpec, seed: u64) -> Result<LocalDataset> {
    spec.validate()?;
    let head_spec = world
        .head_specs
        .get(spec.task_id)
        .ok_or_else(|| Error::invalid(format!("world has no task {}", spec.task_id)))?;
    if head_spec.output_width() != spec.kind.label_width() {
        return Err(Error::Shape(format!(
            "world head for task {} has {} outputs, task expects {}",
            spec.task_id,
            head_spec.output_width(),
            spec.kind.label_width()
        )));
    }
    let mut rng = stream_rng(seed, SAMPLE_STREAM + spec.task_id as u64);
    let n = spec.samples;
    let d = world.input_dim;
    let data: Vec<f64> = (0..n * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let inputs = Matrix::new(n, d, data)?;
    let clean = world.evaluate(spec.task_id, &inputs)?;

    let labels = match spec.kind {
        TaskKind::Regression { outputs } => {
            let mut values = clean.into_data();
            if world.noise_std > 0.0 {
                let noise =
                    Normal::new(0.0, world.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
                for v in &mut values {
                    *v += noise.sample(&mut rng);
                }
            }
            Matrix::new(n, outputs, values)?
        }
        TaskKind::Classification { classes } => {
            let mut values = vec![0.0; n * classes];
            for r in 0..n {
                values[r * classes + argmax(clean.row(r))] = 1.0;
            }
            Matrix::new(n, classes, values)?
        }
    };
    LocalDataset::new(inputs, labels)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_loss_inputs(kind: TaskKind, predictions: &Matrix, labels: &Matrix) -> Result<()> {
    if predictions.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs labels {:?}",
            predictions.shape(),
            labels.shape()
        )));
    }
    if predictions.cols() != kind.label_width() {
        return Err(Error::Shape(format!(
            "{kind} expects {} columns, got {}",
            kind.label_width(),
            predictions.cols()
        )));
    }
    if predictions.rows() == 0 {
        return Err(Error::invalid("loss over zero samples"));
    }
    if !predictions.is_finite() {
        return Err(Error::non_finite("prediction"));
    }
    Ok(())
}

fn softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    // log-sum-exp
    max + sum.ln()
}

/// Task loss and its gradient with respect to `predictions`.
///
/// Regression uses the mean squared error over all entries; classification
/// uses softmax cross-entropy averaged over rows, with `predictions` as logits.
pub fn loss_and_grad(
    kind: TaskKind,
    predictions: &Matrix,
    labels: &Matrix,
) -> Result<(f64, Matrix)> {
    check_loss_inputs(kind, predictions, labels)?;
    let (n, c) = predictions.shape();
    match kind {
        TaskKind::Regression { .. } => {
            let count = (n * c) as f64;
            let mut sum = 0.0;
            let mut grad = Vec::with_capacity(n * c);
            for (p, y) in predictions.data().iter().zip(labels.data()) {
                let diff = p - y;
                sum += diff * diff;
                grad.push(2.0 * diff / count);
            }
            Ok((sum / count, Matrix::from_raw(n, c, grad)))
        }
        TaskKind::Classification { .. } => {
            let mut sum = 0.0;
            let mut grad = vec![0.0; n * c];
            for r in 0..n {
                let out = &mut grad[r * c..(r + 1) * c];
                let lse = softmax_row(predictions.row(r), out);
                for ((g, &p), &y) in out.iter_mut().zip(predictions.row(r)).zip(labels.row(r)) {
                    sum += y * (lse - p);
                    *g = (*g - y) / n as f64;
                }
            }
            Ok(((sum / n as f64).max(0.0), Matrix::from_raw(n, c, grad)))
        }
    }
}

pub fn loss(kind: TaskKind, predictions: &Matrix, labels: &Matrix) -> Result<f64> {
    loss_and_grad(kind, predictions, labels).map(|(l, _)| l)
}

/// How label columns of a delimited file become label rows.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelEncoding {
    /// Label columns are copied as-is.
    Raw,
    /// A single label column holds a class index in `0..classes`.
    OneHot { classes: usize },
}

/// Column description for [`ingest_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSchema {
    pub delimiter: u8,
    /// Feature columns in order; `None` takes every non-label column.
    pub feature_columns: Option<Vec<String>>,
    pub label_columns: Vec<String>,
    pub label_encoding: LabelEncoding,
}

impl DatasetSchema {
    pub fn csv(label_columns: Vec<String>) -> Self {
        Self {
            delimiter: b',',
            feature_columns: None,
            label_columns,
            label_encoding: LabelEncoding::Raw,
        }
    }
}

/// Reads a header-first delimited text file, one sample per line.
pub fn ingest_dataset(path: &Path, schema: &DatasetSchema) -> Result<LocalDataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(parse_err(1, "missing header row".into()));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("schema column `{name}` not in header")))
    };
    if schema.label_columns.is_empty() {
        return Err(Error::invalid("schema names no label columns"));
    }
    let label_idx = schema
        .label_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| column(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| !label_idx.contains(i))
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::invalid("schema selects no feature columns"));
    }
    let label_width = match schema.label_encoding {
        LabelEncoding::Raw => label_idx.len(),
        LabelEncoding::OneHot { classes } => {
            if label_idx.len() != 1 || classes < 2 {
                return Err(Error::invalid(
                    "one-hot labels need exactly one label column and at least two classes",
                ));
            }
            classes
        }
    };

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("{} fields, header has {}", record.len(), headers.len()),
            ));
        }
        let field = |i: usize| -> Result<f64> {
            let raw = &record[i];
            let v: f64 = raw.parse().map_err(|_| {
                parse_err(
                    line,
                    format!("column `{}`: `{raw}` is not a number", &headers[i]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column `{}`: non-finite value `{raw}`", &headers[i]),
                ));
            }
            Ok(v)
        };
        for &i in &feature_idx {
            inputs.push(field(i)?);
        }
        match schema.label_encoding {
            LabelEncoding::Raw => {
                for &i in &label_idx {
                    labels.push(field(i)?);
                }
            }
            LabelEncoding::OneHot { classes } => {
                let v = field(label_idx[0])?;
                if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
                    return Err(parse_err(
                        line,
                        format!("class index {v} outside 0..{classes}"),
                    ));
                }
                let start = labels.len();
                labels.resize(start + classes, 0.0);
                labels[start + v as usize] = 1.0;
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(1, "file contains no samples".into()));
    }
    LocalDataset::new(
        Matrix::new(rows, feature_idx.len(), inputs)?,
        Matrix::new(rows, label_width, labels)?,
    )
}
