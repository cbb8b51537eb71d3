//! The class-incremental training loop: one expanding classifier trained
//! through a sequence of disjoint-class tasks, with a frozen checkpoint of
//! the previous parameters supplying distillation targets and anchoring
//! penalties. No example from an earlier task is ever revisited, except by
//! the deliberately-cheating joint-training upper bound.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cka::{self, CkaTrajectory};
use crate::data::{Dataset, Split, TaskSequence};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, compute_fisher_diagonal, ewc_param_loss, feat_kd_loss, l2_param_loss,
    pred_kd_loss, total_loss, AuxTerms, HeadMode, LossWeights,
};
use crate::metrics::{self, AccuracyMatrix, MetricsReport};
use crate::model::{CheckpointModel, EncoderSpec, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// RNG streams carved out of the run seed, one per phase, so reordering one
/// phase's draws cannot perturb another's.
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

const EVAL_BATCH: usize = 256;

/// Which loss terms accompany the scoped classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    /// Classification loss only; forgets freely.
    Naive,
    /// Joint training on all classes seen so far; ignores the rehearsal ban.
    UpperBound,
    /// Any combination of transfer terms.
    Transfer {
        pred_kd: bool,
        feat_kd: bool,
        ewc: bool,
        l2: bool,
    },
}

impl FromStr for MethodKind {
    type Err = Error;

    /// Accepts "naive", "upper_bound", or a '+'-joined subset of
    /// predkd / featkd / ewc / l2, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "naive" => return Ok(MethodKind::Naive),
            "upper_bound" | "upperbound" | "upper-bound" => return Ok(MethodKind::UpperBound),
            _ => {}
        }
        let (mut pred_kd, mut feat_kd, mut ewc, mut l2) = (false, false, false, false);
        for token in lower.split('+') {
            let flag = match token.trim() {
                "predkd" => &mut pred_kd,
                "featkd" => &mut feat_kd,
                "ewc" => &mut ewc,
                "l2" => &mut l2,
                other => {
                    return Err(Error::InvalidArgument {
                        what: format!("unknown method term '{other}' in '{s}'"),
                    });
                }
            };
            if *flag {
                return Err(Error::InvalidArgument {
                    what: format!("method term repeated in '{s}'"),
                });
            }
            *flag = true;
        }
        Ok(MethodKind::Transfer {
            pred_kd,
            feat_kd,
            ewc,
            l2,
        })
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodKind::Naive => write!(f, "Naive"),
            MethodKind::UpperBound => write!(f, "UpperBound"),
            MethodKind::Transfer {
                pred_kd,
                feat_kd,
                ewc,
                l2,
            } => {
                let names = [
                    (*pred_kd, "PredKD"),
                    (*feat_kd, "FeatKD"),
                    (*ewc, "EWC"),
                    (*l2, "L2"),
                ];
                let joined: Vec<&str> = names.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
                write!(f, "{}", joined.join("+"))
            }
        }
    }
}

/// Full method description: term set, head activation, balancing, weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub head_mode: HeadMode,
    pub balanced_bce: bool,
    pub weights: LossWeights,
    /// Tap compared by the feature-distillation term.
    pub feat_tap: String,
    /// Distillation temperature; 1.0 leaves logits untouched.
    pub temperature: f64,
}

impl MethodSpec {
    pub fn new(kind: MethodKind, head_mode: HeadMode) -> Self {
        MethodSpec {
            kind,
            head_mode,
            balanced_bce: false,
            weights: LossWeights::default(),
            feat_tap: "pen".to_string(),
            temperature: 1.0,
        }
    }

    pub fn parse(name: &str, head_mode: HeadMode) -> Result<Self> {
        Ok(MethodSpec::new(name.parse()?, head_mode))
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    pub fn is_upper_bound(&self) -> bool {
        self.kind == MethodKind::UpperBound
    }

    pub fn uses_pred_kd(&self) -> bool {
        matches!(self.kind, MethodKind::Transfer { pred_kd: true, .. })
    }

    pub fn uses_feat_kd(&self) -> bool {
        matches!(self.kind, MethodKind::Transfer { feat_kd: true, .. })
    }

    pub fn uses_ewc(&self) -> bool {
        matches!(self.kind, MethodKind::Transfer { ewc: true, .. })
    }

    pub fn uses_l2(&self) -> bool {
        matches!(self.kind, MethodKind::Transfer { l2: true, .. })
    }

    fn uses_anchor(&self) -> bool {
        self.uses_pred_kd() || self.uses_feat_kd() || self.uses_ewc() || self.uses_l2()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument {
                what: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        if let MethodKind::Transfer {
            pred_kd: false,
            feat_kd: false,
            ewc: false,
            l2: false,
        } = self.kind
        {
            return Err(Error::InvalidArgument {
                what: "transfer method enables no terms; use naive instead".into(),
            });
        }
        Ok(())
    }
}

/// Per-task optimization schedule. The learning rate drops by
/// `lr_decay_factor` after each epoch listed in `lr_decay_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            lr_decay_epochs: vec![20, 30],
            lr_decay_factor: 10.0,
            weight_decay: 2e-4,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSchedule {
                reason: "epochs and batch_size must be positive".into(),
            });
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidSchedule {
                reason: format!("learning rate {} must be finite and non-negative", self.lr),
            });
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::InvalidSchedule {
                reason: format!("decay factor {} must be positive", self.lr_decay_factor),
            });
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidSchedule {
                reason: format!("weight decay {} must be finite and non-negative", self.weight_decay),
            });
        }
        for pair in self.lr_decay_epochs.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidSchedule {
                    reason: "decay epochs must be strictly increasing".into(),
                });
            }
        }
        if let Some(&d) = self.lr_decay_epochs.first() {
            if d == 0 {
                return Err(Error::InvalidSchedule {
                    reason: "decay cannot happen before the first epoch".into(),
                });
            }
        }
        if let Some(&d) = self.lr_decay_epochs.last() {
            if d >= self.epochs {
                return Err(Error::InvalidSchedule {
                    reason: format!("decay epoch {d} is not before epochs={}", self.epochs),
                });
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index: each listed boundary d means
    /// "reduced after d epochs", so epochs >= d run at the reduced rate.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr / self.lr_decay_factor.powi(drops as i32)
    }
}

/// One epoch of the loss log: per-step means of the raw (unweighted) term
/// values; `total` is the weighted objective that was optimized. Absent
/// terms stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub pred_kd: Option<f64>,
    pub feat_kd: Option<f64>,
    pub ewc: Option<f64>,
    pub l2: Option<f64>,
    pub total: f64,
}

/// Loss log as CSV, task and epoch 1-based, absent terms as empty cells.
pub fn loss_log_to_csv(records: &[LossRecord]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["task", "epoch", "lr", "cls", "pred_kd", "feat_kd", "ewc", "l2", "total"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in records {
        wtr.write_record([
            (r.task + 1).to_string(),
            (r.epoch + 1).to_string(),
            format!("{}", r.lr),
            format!("{}", r.cls),
            opt(r.pred_kd),
            opt(r.feat_kd),
            opt(r.ewc),
            opt(r.l2),
            format!("{}", r.total),
        ])?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::MatrixFormat {
        reason: e.to_string(),
    })?;
    String::from_utf8(bytes).map_err(|e| Error::MatrixFormat {
        reason: e.to_string(),
    })
}

/// Mutable state threaded through the task loop.
#[derive(Debug)]
pub struct RunState {
    pub model: Model,
    /// Frozen previous-task parameters; present from the second task on.
    pub anchor: Option<CheckpointModel>,
    /// Tasks fully trained so far.
    pub tasks_done: usize,
    pub matrix: AccuracyMatrix,
    /// Optimizer steps taken across all tasks; orders freezes against steps.
    pub global_step: u64,
    shuffle_rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(model: Model, seq: &TaskSequence, dataset: &Dataset, seed: u64) -> Result<Self> {
        let test_sizes: Vec<usize> = (0..seq.len())
            .map(|n| dataset.indices_of_classes(Split::Test, seq.classes(n)).len())
            .collect();
        let matrix = AccuracyMatrix::new(seq.sizes(), test_sizes)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(STREAM_BATCH);
        Ok(RunState {
            model,
            anchor: None,
            tasks_done: 0,
            matrix,
            global_step: 0,
            shuffle_rng,
        })
    }
}

/// Head column of each class id covered by the sequence.
fn column_map(seq: &TaskSequence, num_classes: usize) -> Vec<Option<usize>> {
    let mut map = vec![None; num_classes];
    for (col, class) in seq.class_order().into_iter().enumerate() {
        map[class] = Some(col);
    }
    map
}

fn to_columns(labels: &[usize], map: &[Option<usize>]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            map.get(l).copied().flatten().ok_or(Error::LabelOutOfRange {
                label: l,
                limit: map.len(),
            })
        })
        .collect()
}

/// The rehearsal ban: a task-n batch may contain task-n classes only.
fn assert_rehearsal_free(labels: &[usize], allowed: &[usize], task: usize) -> Result<()> {
    for &l in labels {
        if !allowed.contains(&l) {
            return Err(Error::RehearsalViolation { task, class: l });
        }
    }
    Ok(())
}

/// Trains one task for the full schedule. The head must already be expanded
/// for this task, and for transfer methods past the first task the anchor
/// must have been frozen beforehand. Returns the per-epoch loss records.
pub fn train_task(
    state: &mut RunState,
    dataset: &Dataset,
    seq: &TaskSequence,
    task: usize,
    method: &MethodSpec,
    schedule: &TrainSchedule,
) -> Result<Vec<LossRecord>> {
    method.validate()?;
    schedule.validate()?;
    let offsets = seq.offsets();
    let sizes = seq.sizes();
    let seen_width = offsets[task] + sizes[task];
    if state.model.total_classes() != seen_width {
        return Err(Error::InvalidArgument {
            what: format!(
                "head covers {} columns but task {} needs {}",
                state.model.total_classes(),
                task,
                seen_width
            ),
        });
    }
    let upper_bound = method.is_upper_bound();
    let wants_anchor = task >= 1 && !upper_bound && method.uses_anchor();
    if wants_anchor && state.anchor.is_none() {
        return Err(Error::InvalidArgument {
            what: format!("method {} needs a frozen checkpoint for task {task}", method.name()),
        });
    }
    let task_start_step = state.global_step;
    if let Some(anchor) = &state.anchor {
        // The anchor must predate every gradient step of this task.
        if anchor.frozen_at() > task_start_step {
            return Err(Error::CheckpointCausality { task });
        }
        debug_assert!(anchor.grads_absent(), "gradient leaked into a checkpoint");
    }

    let scope: Range<usize> = if upper_bound {
        0..seen_width
    } else {
        offsets[task]..seen_width
    };
    let train_classes: Vec<usize> = if upper_bound {
        (0..=task).flat_map(|t| seq.classes(t).iter().copied()).collect()
    } else {
        seq.classes(task).to_vec()
    };
    let indices = dataset.indices_of_classes(Split::Train, &train_classes);
    if indices.is_empty() {
        return Err(Error::InvalidArgument {
            what: format!("task {task} has no training examples"),
        });
    }
    let col_map = column_map(seq, dataset.num_classes);

    let mut optimizer = AdamState::new(AdamConfig {
        lr: schedule.lr,
        weight_decay: schedule.weight_decay,
        ..AdamConfig::default()
    });

    let mut log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        optimizer.set_lr(lr);
        let mut order = indices.clone();
        order.shuffle(&mut state.shuffle_rng);

        let mut sums = [0.0f64; 6]; // cls, pred, feat, ewc, l2, total
        let mut present = [false; 4];
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let (x, labels) = dataset.batch(Split::Train, chunk);
            if !upper_bound {
                assert_rehearsal_free(&labels, &train_classes, task)?;
            }
            let cols = to_columns(&labels, &col_map)?;

            let mut tape = Tape::new();
            let fwd = state.model.forward_on_tape(&mut tape, &x, false)?;
            let cls = classification_loss(
                &mut tape,
                fwd.logits,
                &cols,
                scope.clone(),
                method.head_mode,
                method.balanced_bce,
            )?;
            let mut terms = AuxTerms::default();
            if wants_anchor {
                let anchor = state.anchor.as_ref().expect("checked above");
                if method.uses_pred_kd() {
                    let old_width = anchor.total_classes();
                    let ckpt_logits = anchor.model().logits(&x)?;
                    let current_old = tape.slice_cols(fwd.logits, 0, old_width)?;
                    terms.pred_kd = Some(pred_kd_loss(
                        &mut tape,
                        current_old,
                        &ckpt_logits,
                        method.head_mode,
                        method.temperature,
                    )?);
                }
                if method.uses_feat_kd() {
                    let (_, taps) = anchor.forward(&x, &[method.feat_tap.as_str()])?;
                    let current = *fwd.taps.get(&method.feat_tap).ok_or_else(|| {
                        Error::UnknownTap {
                            name: method.feat_tap.clone(),
                        }
                    })?;
                    terms.feat_kd = Some(feat_kd_loss(&mut tape, current, &taps[&method.feat_tap])?);
                }
                if method.uses_ewc() {
                    terms.ewc = Some(ewc_param_loss(&mut tape, &fwd.params, anchor)?);
                }
                if method.uses_l2() {
                    terms.l2 = Some(l2_param_loss(&mut tape, &fwd.params, anchor)?);
                }
            }
            let total = total_loss(&mut tape, cls, terms, &method.weights)?;
            let total_v = tape.scalar(total)?;
            if !total_v.is_finite() {
                return Err(Error::NonFiniteLoss { task, epoch, step });
            }

            sums[0] += tape.scalar(cls)?;
            for (k, term) in [terms.pred_kd, terms.feat_kd, terms.ewc, terms.l2]
                .into_iter()
                .enumerate()
            {
                if let Some(node) = term {
                    sums[1 + k] += tape.scalar(node)?;
                    present[k] = true;
                }
            }
            sums[5] += total_v;
            steps += 1;

            tape.backward(total)?;
            state.model.clear_grads();
            let mut params = state.model.named_params_mut(false);
            if params.len() != fwd.params.len() {
                return Err(Error::OptimizerStateMismatch {
                    state: fwd.params.len(),
                    params: params.len(),
                });
            }
            for ((leaf_name, leaf), (name, tensor)) in fwd.params.iter().zip(params.iter_mut()) {
                debug_assert_eq!(leaf_name, name);
                tape.accumulate_into(*leaf, tensor)?;
            }
            optimizer.step(&mut params)?;
            state.global_step += 1;
        }

        let n = steps as f64;
        let mean_if = |on: bool, v: f64| if on { Some(v / n) } else { None };
        log.push(LossRecord {
            task,
            epoch,
            lr,
            cls: sums[0] / n,
            pred_kd: mean_if(present[0], sums[1]),
            feat_kd: mean_if(present[1], sums[2]),
            ewc: mean_if(present[2], sums[3]),
            l2: mean_if(present[3], sums[4]),
            total: sums[5] / n,
        });
    }
    Ok(log)
}

/// Fills row `through_task` of the matrix: for every task m seen so far,
/// the task-restricted accuracy (argmax over task m's own columns) and the
/// all-column accuracy (argmax over every column trained so far).
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    seq: &TaskSequence,
    through_task: usize,
    matrix: &mut AccuracyMatrix,
) -> Result<()> {
    let offsets = seq.offsets();
    let sizes = seq.sizes();
    let width = offsets[through_task] + sizes[through_task];
    if model.total_classes() != width {
        return Err(Error::InvalidArgument {
            what: format!(
                "model head covers {} columns, expected {} after task {}",
                model.total_classes(),
                width,
                through_task
            ),
        });
    }
    let col_map = column_map(seq, dataset.num_classes);
    for m in 0..=through_task {
        let idx = dataset.indices_of_classes(Split::Test, seq.classes(m));
        if idx.is_empty() {
            return Err(Error::InvalidArgument {
                what: format!("task {m} has no test examples"),
            });
        }
        let mut local_correct = 0usize;
        let mut global_correct = 0usize;
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, labels) = dataset.batch(Split::Test, chunk);
            let logits = model.logits(&x)?;
            let local = logits.argmax_rows(offsets[m], offsets[m] + sizes[m])?;
            let global = logits.argmax_rows(0, width)?;
            let cols = to_columns(&labels, &col_map)?;
            for (k, &col) in cols.iter().enumerate() {
                if local[k] == col {
                    local_correct += 1;
                }
                if global[k] == col {
                    global_correct += 1;
                }
            }
        }
        let total = idx.len() as f64;
        matrix.record(
            through_task,
            m,
            local_correct as f64 / total,
            global_correct as f64 / total,
        )?;
    }
    Ok(())
}

/// Everything a finished run produces, in memory. Persistence is the
/// caller's concern.
#[derive(Debug)]
pub struct RunOutput {
    pub method: String,
    pub matrix: AccuracyMatrix,
    pub report: MetricsReport,
    pub loss_log: Vec<LossRecord>,
    /// Model frozen after each task, in task order.
    pub checkpoints: Vec<CheckpointModel>,
    pub cka: CkaTrajectory,
    /// Fixed first-task probe batch used for the CKA trajectories.
    pub probe: Tensor,
    pub probe_labels: Vec<usize>,
    pub final_model: Model,
}

/// Runs the full task sequence: per task, freeze the previous parameters
/// (and their Fisher information when the method anchors on it), expand the
/// head, train, and evaluate. Deterministic in the schedule seed.
pub fn run_experiment(
    dataset: &Dataset,
    seq: &TaskSequence,
    method: &MethodSpec,
    schedule: &TrainSchedule,
    encoder: &EncoderSpec,
    init_from: Option<&Model>,
    probe_size: usize,
) -> Result<RunOutput> {
    method.validate()?;
    schedule.validate()?;
    if seq.is_empty() {
        return Err(Error::InvalidArgument {
            what: "task sequence is empty".into(),
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut model = Model::new(encoder.clone(), &mut init_rng)?;
    if let Some(donor) = init_from {
        model.load_encoder_from(donor)?;
    }
    let mut state = RunState::new(model, seq, dataset, schedule.seed)?;

    let offsets = seq.offsets();
    let sizes = seq.sizes();
    let col_map = column_map(seq, dataset.num_classes);
    let mut checkpoints: Vec<CheckpointModel> = Vec::with_capacity(seq.len());
    let mut loss_log = Vec::new();

    for task in 0..seq.len() {
        if task >= 1 {
            let mut anchor = CheckpointModel::freeze(&state.model, state.global_step);
            if method.uses_ewc() && !method.is_upper_bound() {
                // Fisher of the scoped classification loss on the previous
                // task's data, at the parameters it finished with.
                let prev = task - 1;
                let idx = dataset.indices_of_classes(Split::Train, seq.classes(prev));
                let (xs, labels) = dataset.batch(Split::Train, &idx);
                let cols = to_columns(&labels, &col_map).map_err(|e| e.in_task(task))?;
                let fisher = compute_fisher_diagonal(
                    anchor.model(),
                    &xs,
                    &cols,
                    offsets[prev]..offsets[prev] + sizes[prev],
                    method.head_mode,
                    method.balanced_bce,
                    prev,
                )
                .map_err(|e| e.in_task(task))?;
                anchor.set_fisher(fisher);
            }
            state.anchor = Some(anchor);
        }
        state
            .model
            .expand_head(sizes[task], &mut init_rng)
            .map_err(|e| e.in_task(task))?;
        let records = train_task(&mut state, dataset, seq, task, method, schedule)
            .map_err(|e| e.in_task(task))?;
        loss_log.extend(records);
        evaluate(&state.model, dataset, seq, task, &mut state.matrix)
            .map_err(|e| e.in_task(task))?;
        checkpoints.push(CheckpointModel::freeze(&state.model, state.global_step));
        state.tasks_done = task + 1;
    }

    let (probe, probe_labels) = cka::probe_from_dataset(dataset, seq.classes(0), probe_size);
    let cka = cka::cka_trajectory(
        &checkpoints,
        &probe,
        &state.model.tap_names(),
        sizes[0],
        Some(&state.matrix),
    )?;
    let report = metrics::compute_report(&state.matrix)?;

    Ok(RunOutput {
        method: method.name(),
        matrix: state.matrix,
        report,
        loss_log,
        checkpoints,
        cka,
        probe,
        probe_labels,
        final_model: state.model,
    })
}

/// Plain supervised training on an auxiliary class split, as initialization
/// for a later run. Classes map to columns in label order. Returns the
/// trained model (head included; experiment init copies only the encoder)
/// and its holdout accuracy.
pub fn pretrain_encoder(
    aux: &Dataset,
    encoder: &EncoderSpec,
    head_mode: HeadMode,
    schedule: &TrainSchedule,
) -> Result<(Model, f64)> {
    let seq = TaskSequence::from_tasks(vec![(0..aux.num_classes).collect()])?;
    let method = MethodSpec::new(MethodKind::Naive, head_mode);
    let out = run_experiment(aux, &seq, &method, schedule, encoder, None, cka::DEFAULT_PROBE_SIZE)?;
    Ok((out.final_model, out.report.final_accuracy))
}

/// Holdout accuracy of a model on a whole dataset, classes mapped to
/// columns in label order. Matches what [`pretrain_encoder`] reports.
pub fn plain_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let seq = TaskSequence::from_tasks(vec![(0..dataset.num_classes).collect()])?;
    let mut matrix = AccuracyMatrix::new(
        seq.sizes(),
        vec![dataset.examples(Split::Test).len()],
    )?;
    evaluate(model, dataset, &seq, 0, &mut matrix)?;
    matrix.global(0, 0)
}
