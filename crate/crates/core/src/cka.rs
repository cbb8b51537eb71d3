//! Linear centered kernel alignment between activation matrices, used to
//! track which layers drift as training moves through the task sequence.
//! Every checkpoint is probed with the same fixed batch of first-task
//! holdout examples and compared against the first checkpoint, tap by tap.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::model::CheckpointModel;
use crate::tensor::Tensor;

/// Probe batch size cap: first-task holdout examples, fixed once per run.
pub const DEFAULT_PROBE_SIZE: usize = 256;

/// The logits tap; restricted to the first task's columns for comparability
/// across head expansions.
pub const LINEAR_TAP: &str = "linear";

/// Activations of one checkpoint at one tap: rows are probe examples,
/// columns features. The probe batch must be identical (same examples, same
/// order) for every matrix that gets compared.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    pub tap: String,
    /// Source checkpoint's task index.
    pub task: usize,
    data: Tensor,
}

impl ActivationMatrix {
    pub fn new(tap: impl Into<String>, task: usize, data: Tensor) -> Result<Self> {
        let tap = tap.into();
        let (rows, _) = data.dims2()?;
        if rows < 2 {
            return Err(Error::TooFewRows { rows });
        }
        if !data.is_finite() {
            return Err(Error::NonFinite {
                context: format!("activations at tap '{tap}'"),
            });
        }
        Ok(ActivationMatrix { tap, task, data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }
}

/// Column-mean-centered copy of a 2-d tensor's values.
fn center_columns(data: &Tensor) -> (Vec<f64>, usize, usize) {
    let (rows, cols) = data.dims2().expect("activation matrices are 2-d");
    let v = data.values();
    let mut means = vec![0.0; cols];
    for i in 0..rows {
        for (j, m) in means.iter_mut().enumerate() {
            *m += v[i * cols + j];
        }
    }
    for m in means.iter_mut() {
        *m /= rows as f64;
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(v[i * cols + j] - means[j]);
        }
    }
    (out, rows, cols)
}

/// Frobenius norm of Aᵀ·B for two row-major (rows × ca) and (rows × cb)
/// matrices, squared.
fn cross_norm_sq(a: &[f64], ca: usize, b: &[f64], cb: usize, rows: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..ca {
        for k in 0..cb {
            let mut dot = 0.0;
            for i in 0..rows {
                dot += a[i * ca + j] * b[i * cb + k];
            }
            total += dot * dot;
        }
    }
    total
}

/// Linear CKA: with column-centered X_c, Y_c,
///   CKA = ‖Y_cᵀX_c‖_F² / (‖X_cᵀX_c‖_F · ‖Y_cᵀY_c‖_F).
/// Invariant to orthogonal right-transformations and isotropic scaling of
/// either argument; 1.0 for self-comparison; symmetric.
pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    let (xr, _) = x.data.dims2()?;
    let (yr, _) = y.data.dims2()?;
    if xr != yr {
        return Err(Error::RowCountMismatch { left: xr, right: yr });
    }
    let (xc, rows, xcols) = center_columns(&x.data);
    let (yc, _, ycols) = center_columns(&y.data);

    let self_x = cross_norm_sq(&xc, xcols, &xc, xcols, rows).sqrt();
    let self_y = cross_norm_sq(&yc, ycols, &yc, ycols, rows).sqrt();
    // A constant matrix centers to (numerically) zero; the ratio would be
    // noise over noise, so report it instead of a value.
    let floor = |raw: &Tensor| 1e-12 * raw.values().iter().map(|v| v * v).sum::<f64>().max(1.0);
    if self_x <= floor(&x.data) {
        return Err(Error::ZeroVariance { tap: x.tap.clone() });
    }
    if self_y <= floor(&y.data) {
        return Err(Error::ZeroVariance { tap: y.tap.clone() });
    }
    let cross = cross_norm_sq(&yc, ycols, &xc, xcols, rows);
    Ok(cross / (self_x * self_y))
}

/// One tap's similarity to the first checkpoint, over all checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapTrajectory {
    pub tap: String,
    pub cka: Vec<f64>,
}

/// Per-tap CKA trajectories plus an accuracy overlay (pooled accuracy over
/// the tasks seen so far, when an accuracy matrix is supplied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaTrajectory {
    pub taps: Vec<TapTrajectory>,
    pub accuracy: Vec<Option<f64>>,
}

impl CkaTrajectory {
    /// CSV with one row per (task, tap): task, tap, cka, acc. Task numbers
    /// are 1-based; the acc cell is empty without an overlay.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["task", "tap", "cka", "acc"])?;
        for (n, acc) in self.accuracy.iter().enumerate() {
            for tap in &self.taps {
                wtr.write_record([
                    (n + 1).to_string(),
                    tap.tap.clone(),
                    format!("{}", tap.cka[n]),
                    acc.map(|a| format!("{a}")).unwrap_or_default(),
                ])?;
            }
        }
        let bytes = wtr.into_inner().map_err(|e| Error::MatrixFormat {
            reason: e.to_string(),
        })?;
        String::from_utf8(bytes).map_err(|e| Error::MatrixFormat {
            reason: e.to_string(),
        })
    }
}

fn tap_activation(
    ckpt: &CheckpointModel,
    task: usize,
    probe: &Tensor,
    tap: &str,
    linear_cols: usize,
) -> Result<ActivationMatrix> {
    let (logits, mut taps) = ckpt.forward(probe, &[tap])?;
    let data = if tap == LINEAR_TAP {
        // Head widths differ across checkpoints; keep the first task's
        // columns so the matrices stay comparable.
        let (rows, cols) = logits.dims2()?;
        if linear_cols == 0 || linear_cols > cols {
            return Err(Error::InvalidSlice {
                start: 0,
                end: linear_cols,
                cols,
            });
        }
        let mut vals = Vec::with_capacity(rows * linear_cols);
        for i in 0..rows {
            let row = logits.row(i)?;
            vals.extend_from_slice(&row[..linear_cols]);
        }
        Tensor::matrix(rows, linear_cols, vals)?
    } else {
        taps.remove(tap).ok_or_else(|| Error::UnknownTap { name: tap.to_string() })?
    };
    ActivationMatrix::new(tap, task, data)
}

/// CKA of every checkpoint against the first, per tap, on one fixed probe
/// batch. Entry 0 of each trajectory is the honest self-comparison. The
/// overlay entry for task n pools the all-column accuracies R_{n,m}, m <= n,
/// weighted by test-set size.
pub fn cka_trajectory(
    checkpoints: &[CheckpointModel],
    probe: &Tensor,
    taps: &[String],
    linear_cols: usize,
    accuracy: Option<&AccuracyMatrix>,
) -> Result<CkaTrajectory> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument {
            what: "need at least one checkpoint".into(),
        });
    }
    if let Some(m) = accuracy {
        if m.n_tasks() != checkpoints.len() {
            return Err(Error::MatrixFormat {
                reason: format!(
                    "accuracy matrix covers {} tasks but {} checkpoints were given",
                    m.n_tasks(),
                    checkpoints.len()
                ),
            });
        }
    }
    let mut out = Vec::with_capacity(taps.len());
    for tap in taps {
        let reference = tap_activation(&checkpoints[0], 0, probe, tap, linear_cols)?;
        let mut values = Vec::with_capacity(checkpoints.len());
        for (n, ckpt) in checkpoints.iter().enumerate() {
            let current = tap_activation(ckpt, n, probe, tap, linear_cols)?;
            values.push(linear_cka(&reference, &current)?);
        }
        out.push(TapTrajectory {
            tap: tap.clone(),
            cka: values,
        });
    }
    let accuracy = match accuracy {
        Some(m) => {
            let mut overlay = Vec::with_capacity(checkpoints.len());
            for i in 0..checkpoints.len() {
                let mut num = 0.0;
                let mut den = 0.0;
                for n in 0..=i {
                    let w = m.test_sizes()[n] as f64;
                    num += w * m.global(i, n)?;
                    den += w;
                }
                overlay.push(Some(num / den));
            }
            overlay
        }
        None => vec![None; checkpoints.len()],
    };
    Ok(CkaTrajectory { taps: out, accuracy })
}

/// Fixed probe batch: the first `cap` holdout examples of the given classes,
/// in dataset order. Returns the features and their labels.
pub fn probe_from_dataset(dataset: &Dataset, classes: &[usize], cap: usize) -> (Tensor, Vec<usize>) {
    let mut indices = dataset.indices_of_classes(Split::Test, classes);
    indices.truncate(cap);
    dataset.batch(Split::Test, &indices)
}
