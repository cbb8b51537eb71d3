//! Training losses: scoped classification (softmax or per-class sigmoid,
//! with an optional class-balanced variant), prediction and feature
//! distillation against a frozen checkpoint, and parameter anchoring with
//! uniform (L2) or Fisher-weighted (EWC) curvature.
//!
//! Classification is always restricted to the class columns of the task
//! being trained; the distillation terms are what governs the old columns.
//! All losses are recorded on the tape, so one backward pass differentiates
//! the full composite objective.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CheckpointModel, Model};
use crate::numerics::{softmax_into, stable_sigmoid};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Softmax,
    Sigmoid,
}

/// Loss term weights. Defaults follow the reference protocol:
/// EWC 10, L2 0.5, prediction distillation 1, feature distillation 5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ewc: f64,
    pub l2: f64,
    pub pred_kd: f64,
    pub feat_kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ewc: 1e1,
            l2: 5e-1,
            pred_kd: 1.0,
            feat_kd: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ewc", self.ewc),
            ("l2", self.l2),
            ("pred_kd", self.pred_kd),
            ("feat_kd", self.feat_kd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument {
                    what: format!("loss weight {name} must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Diagonal empirical Fisher information, one entry per named parameter of
/// the model it was computed on. Entries are mean squared per-sample
/// gradients, so they are non-negative by construction and checked anyway.
#[derive(Debug, Clone)]
pub struct FisherDiagonal {
    entries: Vec<(String, Vec<f64>)>,
    pub source_task: usize,
}

impl FisherDiagonal {
    pub fn new(entries: Vec<(String, Vec<f64>)>, source_task: usize) -> Result<Self> {
        for (name, vals) in &entries {
            for &v in vals {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("fisher entry '{name}'"),
                    });
                }
                if v < 0.0 {
                    return Err(Error::NegativeFisher {
                        param: name.clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(FisherDiagonal {
            entries,
            source_task,
        })
    }

    /// All-ones fisher congruent with the given parameters; EWC with this
    /// fisher must agree with plain L2 anchoring.
    pub fn identity(params: &[(String, &Tensor)], source_task: usize) -> Self {
        FisherDiagonal {
            entries: params
                .iter()
                .map(|(n, t)| (n.clone(), vec![1.0; t.len()]))
                .collect(),
            source_task,
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    /// Checks shape congruence against a parameter list.
    pub fn congruent_with(&self, params: &[(String, &Tensor)]) -> Result<()> {
        for (name, t) in params {
            match self.get(name) {
                Some(v) if v.len() == t.len() => {}
                _ => return Err(Error::FisherShape { param: name.clone() }),
            }
        }
        Ok(())
    }
}

/// Per-class scores produced by a frozen model, used as distillation
/// targets. Softmax rows sum to one; sigmoid entries are independent
/// probabilities in [0,1].
#[derive(Debug, Clone)]
pub struct PredictionDistribution {
    probs: Tensor,
    pub head_mode: HeadMode,
}

impl PredictionDistribution {
    pub fn from_logits(logits: &Tensor, head_mode: HeadMode, temperature: f64) -> Result<Self> {
        let (rows, cols) = logits.dims2()?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidArgument {
                what: format!("temperature must be positive, got {temperature}"),
            });
        }
        let mut vals = vec![0.0; rows * cols];
        match head_mode {
            HeadMode::Softmax => {
                let mut scaled = vec![0.0; cols];
                for r in 0..rows {
                    let row = logits.row(r)?;
                    for (s, z) in scaled.iter_mut().zip(row) {
                        *s = z / temperature;
                    }
                    softmax_into(&scaled, &mut vals[r * cols..(r + 1) * cols]);
                }
            }
            HeadMode::Sigmoid => {
                for (v, z) in vals.iter_mut().zip(logits.values()) {
                    *v = stable_sigmoid(z / temperature);
                }
            }
        }
        let probs = Tensor::new(vec![rows, cols], vals)?;
        let dist = PredictionDistribution { probs, head_mode };
        debug_assert!(dist.check_invariants());
        Ok(dist)
    }

    fn check_invariants(&self) -> bool {
        let (rows, cols) = self.probs.dims2().expect("2-d");
        match self.head_mode {
            HeadMode::Softmax => (0..rows).all(|r| {
                let s: f64 = self.probs.row(r).expect("row").iter().sum();
                (s - 1.0).abs() < 1e-9
            }),
            HeadMode::Sigmoid => self
                .probs
                .values()
                .iter()
                .all(|&p| (0.0..=1.0).contains(&p) && cols > 0),
        }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }
}

fn check_scope(tape: &Tape, logits: NodeId, labels: &[usize], scope: &Range<usize>) -> Result<(usize, usize)> {
    let shape = tape.shape(logits);
    if shape.len() != 2 {
        return Err(Error::NotTwoDimensional {
            op: "classification_loss",
            shape: shape.to_vec(),
        });
    }
    let (rows, width) = (shape[0], shape[1]);
    if scope.start >= scope.end || scope.end > width {
        return Err(Error::InvalidScope {
            start: scope.start,
            end: scope.end,
            width,
        });
    }
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    for &y in labels {
        if y < scope.start || y >= scope.end {
            return Err(Error::LabelOutOfRange {
                label: y,
                limit: scope.end,
            });
        }
    }
    Ok((rows, width))
}

/// Softmax cross-entropy over the class columns in `scope`. Labels are
/// absolute column indices and must fall inside the scope; columns outside
/// it neither contribute to the normalizer nor receive gradient.
pub fn softmax_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    scope: Range<usize>,
) -> Result<NodeId> {
    check_scope(tape, logits, labels, &scope)?;
    let scoped = tape.slice_cols(logits, scope.start, scope.end)?;
    let local: Vec<usize> = labels.iter().map(|&y| y - scope.start).collect();
    tape.softmax_cross_entropy(scoped, &local)
}

/// Per-class binary cross-entropy over the scope, mean over batch x classes.
pub fn bce_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    scope: Range<usize>,
) -> Result<NodeId> {
    bce_impl(tape, logits, labels, scope, false)
}

/// Like [`bce_loss`] but each example's negative terms are down-weighted by
/// 1/(C-1), so positive and negative targets carry equal total weight. With
/// C = 2 this is exactly the unbalanced loss.
pub fn balanced_bce_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    scope: Range<usize>,
) -> Result<NodeId> {
    bce_impl(tape, logits, labels, scope, true)
}

fn bce_impl(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    scope: Range<usize>,
    balanced: bool,
) -> Result<NodeId> {
    let (rows, _) = check_scope(tape, logits, labels, &scope)?;
    let c = scope.end - scope.start;
    if balanced && c < 2 {
        return Err(Error::ScopeTooSmall { classes: c });
    }
    let scoped = tape.slice_cols(logits, scope.start, scope.end)?;
    let mut targets = vec![0.0; rows * c];
    for (r, &y) in labels.iter().enumerate() {
        targets[r * c + (y - scope.start)] = 1.0;
    }
    let t = tape.constant(vec![rows, c], targets.clone())?;
    if balanced {
        let neg = 1.0 / (c as f64 - 1.0);
        let weights: Vec<f64> = targets.iter().map(|&t| if t == 1.0 { 1.0 } else { neg }).collect();
        let norm: f64 = weights.iter().sum();
        tape.bce_with_logits(scoped, t, Some(weights), norm)
    } else {
        tape.bce_with_logits(scoped, t, None, (rows * c) as f64)
    }
}

/// Dispatches on head mode (and the balanced flag for sigmoid heads).
pub fn classification_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    scope: Range<usize>,
    head_mode: HeadMode,
    balanced: bool,
) -> Result<NodeId> {
    match head_mode {
        HeadMode::Softmax => softmax_loss(tape, logits, labels, scope),
        HeadMode::Sigmoid if balanced => balanced_bce_loss(tape, logits, labels, scope),
        HeadMode::Sigmoid => bce_loss(tape, logits, labels, scope),
    }
}

/// Distills the checkpoint's predictions over the old class columns into
/// the live model. `current_old` must already be sliced to those columns;
/// its width has to match the checkpoint logits.
///
/// Softmax heads use soft-target cross-entropy, sigmoid heads per-class
/// binary cross-entropy, both mean-normalized. At the checkpoint's own
/// logits the gradient vanishes identically.
pub fn pred_kd_loss(
    tape: &mut Tape,
    current_old: NodeId,
    ckpt_logits: &Tensor,
    head_mode: HeadMode,
    temperature: f64,
) -> Result<NodeId> {
    let shape = tape.shape(current_old).to_vec();
    let (rows, cols) = ckpt_logits.dims2()?;
    if shape != vec![rows, cols] {
        return Err(Error::ClassRangeMismatch {
            left: *shape.last().unwrap_or(&0),
            right: cols,
        });
    }
    let dist = PredictionDistribution::from_logits(ckpt_logits, head_mode, temperature)?;
    let targets = tape.constant(vec![rows, cols], dist.probs().values().to_vec())?;
    let current = if temperature == 1.0 {
        current_old
    } else {
        tape.scale(current_old, 1.0 / temperature)?
    };
    match head_mode {
        HeadMode::Softmax => tape.softmax_cross_entropy_soft(current, targets),
        HeadMode::Sigmoid => {
            tape.bce_with_logits(current, targets, None, (rows * cols) as f64)
        }
    }
}

/// Mean over the batch of the squared L2 distance between the live and
/// checkpoint activations at one tap. Zero exactly when they coincide.
pub fn feat_kd_loss(tape: &mut Tape, current: NodeId, ckpt_feat: &Tensor) -> Result<NodeId> {
    let shape = tape.shape(current).to_vec();
    if shape != ckpt_feat.shape() {
        return Err(Error::ShapeMismatch {
            op: "feat_kd_loss",
            left: shape,
            right: ckpt_feat.shape().to_vec(),
        });
    }
    let target = tape.constant(ckpt_feat.shape().to_vec(), ckpt_feat.values().to_vec())?;
    let diff = tape.sub(current, target)?;
    let sq = tape.square(diff)?;
    let per_row = tape.sum_axis(sq, 1)?;
    tape.mean(per_row)
}

/// Sum over anchored parameters of the squared drift from the checkpoint.
/// `live_params` are the tape leaves of the current model; parameters the
/// anchor does not know (new head blocks) are exempt, and parameters absent
/// from the tape (frozen) cannot drift, so they are skipped too.
pub fn l2_param_loss(
    tape: &mut Tape,
    live_params: &[(String, NodeId)],
    anchor: &CheckpointModel,
) -> Result<NodeId> {
    anchored_drift(tape, live_params, anchor, None)
}

/// Fisher-weighted squared drift from the checkpoint. The anchor must carry
/// a fisher diagonal congruent with its parameters; with an all-ones fisher
/// this equals [`l2_param_loss`] exactly.
pub fn ewc_param_loss(
    tape: &mut Tape,
    live_params: &[(String, NodeId)],
    anchor: &CheckpointModel,
) -> Result<NodeId> {
    let fisher = anchor.fisher().ok_or(Error::MissingFisher)?;
    fisher.congruent_with(&anchor.model().named_params())?;
    anchored_drift(tape, live_params, anchor, Some(fisher))
}

fn anchored_drift(
    tape: &mut Tape,
    live_params: &[(String, NodeId)],
    anchor: &CheckpointModel,
    fisher: Option<&FisherDiagonal>,
) -> Result<NodeId> {
    let anchor_map: BTreeMap<String, &Tensor> =
        anchor.model().named_params().into_iter().collect();
    let mut total: Option<NodeId> = None;
    for (name, leaf) in live_params {
        let Some(anchor_t) = anchor_map.get(name) else {
            continue; // parameter born after the anchor was frozen
        };
        if tape.shape(*leaf) != anchor_t.shape() {
            return Err(Error::AnchorMismatch { param: name.clone() });
        }
        let anchor_node =
            tape.constant(anchor_t.shape().to_vec(), anchor_t.values().to_vec())?;
        let diff = tape.sub(*leaf, anchor_node)?;
        let sq = tape.square(diff)?;
        let weighted = match fisher {
            Some(f) => {
                let fv = f.get(name).ok_or_else(|| Error::FisherShape { param: name.clone() })?;
                if fv.len() != anchor_t.len() {
                    return Err(Error::FisherShape { param: name.clone() });
                }
                let fnode = tape.constant(anchor_t.shape().to_vec(), fv.to_vec())?;
                tape.mul(sq, fnode)?
            }
            None => sq,
        };
        let s = tape.sum(weighted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar_const(0.0)))
}

/// Optional distillation/anchoring terms of the composite objective.
#[derive(Debug, Default, Clone, Copy)]
pub struct AuxTerms {
    pub pred_kd: Option<NodeId>,
    pub feat_kd: Option<NodeId>,
    pub ewc: Option<NodeId>,
    pub l2: Option<NodeId>,
}

/// total = cls + sum of weight * term over the present aux terms. Terms
/// whose weight is zero are dropped. Every included term must be finite.
pub fn total_loss(
    tape: &mut Tape,
    cls: NodeId,
    terms: AuxTerms,
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let mut total = cls;
    check_finite(tape, cls, "cls")?;
    let parts = [
        ("pred_kd", terms.pred_kd, weights.pred_kd),
        ("feat_kd", terms.feat_kd, weights.feat_kd),
        ("ewc", terms.ewc, weights.ewc),
        ("l2", terms.l2, weights.l2),
    ];
    for (name, term, weight) in parts {
        let Some(node) = term else { continue };
        if weight == 0.0 {
            continue;
        }
        check_finite(tape, node, name)?;
        let scaled = tape.scale(node, weight)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

fn check_finite(tape: &Tape, node: NodeId, term: &str) -> Result<()> {
    let v = tape.scalar(node)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLossTerm { term: term.to_string() });
    }
    Ok(())
}

/// Empirical diagonal Fisher of the scoped classification loss: the mean
/// over samples of the squared per-sample gradient, taken at the model's
/// current parameters with ground-truth labels.
pub fn compute_fisher_diagonal(
    model: &Model,
    xs: &Tensor,
    labels: &[usize],
    scope: Range<usize>,
    head_mode: HeadMode,
    balanced: bool,
    source_task: usize,
) -> Result<FisherDiagonal> {
    let (rows, dim) = xs.dims2()?;
    if rows == 0 {
        return Err(Error::InvalidArgument {
            what: "fisher needs at least one sample".into(),
        });
    }
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "compute_fisher_diagonal",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    // Frozen checkpoints carry grad-disabled parameters; measure on a
    // grad-enabled copy so the backward passes actually reach them.
    let mut live = model.clone();
    for (_, p) in live.named_params_mut(false) {
        p.set_requires_grad(true);
    }
    let mut acc: Vec<(String, Vec<f64>)> = live
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
        .collect();

    for r in 0..rows {
        let x = Tensor::matrix(1, dim, xs.row(r)?.to_vec())?;
        let mut tape = Tape::new();
        let fwd = live.forward_on_tape(&mut tape, &x, false)?;
        let loss = classification_loss(
            &mut tape,
            fwd.logits,
            &labels[r..r + 1],
            scope.clone(),
            head_mode,
            balanced,
        )?;
        tape.backward(loss)?;
        for ((_, leaf), (_, slot)) in fwd.params.iter().zip(acc.iter_mut()) {
            if let Some(g) = tape.grad(*leaf) {
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += gi * gi;
                }
            }
        }
    }
    for (_, slot) in &mut acc {
        for v in slot.iter_mut() {
            *v /= rows as f64;
        }
    }
    FisherDiagonal::new(acc, source_task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderSpec;
    use crate::numerics::bce_with_logits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits_node(tape: &mut Tape, rows: usize, cols: usize, vals: Vec<f64>) -> NodeId {
        let t = Tensor::matrix(rows, cols, vals).unwrap().with_grad();
        tape.leaf(&t).unwrap()
    }

    #[test]
    fn softmax_loss_on_uniform_scope_is_ln_c() {
        for c in [2usize, 7, 31] {
            let mut tape = Tape::new();
            let z = logits_node(&mut tape, 2, c + 3, vec![0.0; 2 * (c + 3)]);
            let loss = softmax_loss(&mut tape, z, &[3, c + 2], 3..c + 3).unwrap();
            assert!((tape.scalar(loss).unwrap() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn scoped_softmax_ignores_outside_columns() {
        // Huge logits outside the scope must not leak into the loss.
        let mut tape = Tape::new();
        let vals = vec![1e6, 0.3, -0.4, 1e6, 1e6, -0.1, 0.9, 1e6];
        let z = logits_node(&mut tape, 2, 4, vals.clone());
        let loss = softmax_loss(&mut tape, z, &[1, 2], 1..3).unwrap();
        let oracle = {
            let r0 = [0.3, -0.4];
            let r1 = [-0.1, 0.9];
            let l0 = crate::numerics::log_sum_exp(&r0) - r0[0];
            let l1 = crate::numerics::log_sum_exp(&r1) - r1[1];
            (l0 + l1) / 2.0
        };
        assert!((tape.scalar(loss).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn labels_outside_scope_are_rejected() {
        let mut tape = Tape::new();
        let z = logits_node(&mut tape, 1, 6, vec![0.0; 6]);
        assert!(matches!(
            softmax_loss(&mut tape, z, &[5], 1..4),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
        let mut tape = Tape::new();
        let z = logits_node(&mut tape, 1, 6, vec![0.0; 6]);
        assert!(matches!(
            bce_loss(&mut tape, z, &[0], 1..4),
            Err(Error::LabelOutOfRange { label: 0, .. })
        ));
    }

    #[test]
    fn empty_scope_is_rejected() {
        let mut tape = Tape::new();
        let z = logits_node(&mut tape, 1, 6, vec![0.0; 6]);
        assert!(matches!(
            softmax_loss(&mut tape, z, &[2], 2..2),
            Err(Error::InvalidScope { .. })
        ));
    }

    #[test]
    fn bce_all_zero_logits_gives_ln_two_balanced_and_not() {
        for c in [2usize, 5, 16] {
            let mut tape = Tape::new();
            let z = logits_node(&mut tape, 3, c, vec![0.0; 3 * c]);
            let plain = bce_loss(&mut tape, z, &[0, 1, c - 1], 0..c).unwrap();
            assert!((tape.scalar(plain).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

            let mut tape = Tape::new();
            let z = logits_node(&mut tape, 3, c, vec![0.0; 3 * c]);
            let bal = balanced_bce_loss(&mut tape, z, &[0, 1, c - 1], 0..c).unwrap();
            assert!((tape.scalar(bal).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_bce_matches_loop_oracle() {
        let c = 5;
        let vals: Vec<f64> = (0..2 * c).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0).collect();
        let labels = [2usize, 4];
        let mut tape = Tape::new();
        let z = logits_node(&mut tape, 2, c, vals.clone());
        let bal = balanced_bce_loss(&mut tape, z, &labels, 0..c).unwrap();

        // Oracle: per example, positive term weight 1, negatives 1/(C-1),
        // normalized by total weight (2 per example).
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            for j in 0..c {
                let t = if j == y { 1.0 } else { 0.0 };
                let w = if j == y { 1.0 } else { 1.0 / (c as f64 - 1.0) };
                num += w * bce_with_logits(vals[r * c + j], t);
                den += w;
            }
        }
        assert!((tape.scalar(bal).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn balanced_bce_equals_plain_for_two_classes() {
        let vals = vec![0.7, -1.1, 0.2, 2.4];
        let labels = [0usize, 1];
        let mut t1 = Tape::new();
        let z1 = logits_node(&mut t1, 2, 2, vals.clone());
        let plain = bce_loss(&mut t1, z1, &labels, 0..2).unwrap();
        let mut t2 = Tape::new();
        let z2 = logits_node(&mut t2, 2, 2, vals);
        let bal = balanced_bce_loss(&mut t2, z2, &labels, 0..2).unwrap();
        assert!((t1.scalar(plain).unwrap() - t2.scalar(bal).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn balanced_bce_needs_two_classes() {
        let mut tape = Tape::new();
        let z = logits_node(&mut tape, 1, 3, vec![0.0; 3]);
        assert!(matches!(
            balanced_bce_loss(&mut tape, z, &[1], 1..2),
            Err(Error::ScopeTooSmall { classes: 1 })
        ));
    }

    fn tiny_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::new(EncoderSpec::with_hidden(4, vec![6, 5]), &mut rng).unwrap();
        m.expand_head(3, &mut rng).unwrap();
        m
    }

    #[test]
    fn anchored_losses_are_zero_at_the_anchor() {
        let m = tiny_model(3);
        let mut anchor = CheckpointModel::freeze(&m, 0);
        anchor.set_fisher(FisherDiagonal::identity(&m.named_params(), 1));
        let x = Tensor::matrix(2, 4, vec![0.1; 8]).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &x, false).unwrap();
        let l2 = l2_param_loss(&mut tape, &fwd.params, &anchor).unwrap();
        let ewc = ewc_param_loss(&mut tape, &fwd.params, &anchor).unwrap();
        assert_eq!(tape.scalar(l2).unwrap(), 0.0);
        assert_eq!(tape.scalar(ewc).unwrap(), 0.0);
    }

    #[test]
    fn identity_fisher_ewc_equals_l2() {
        let m = tiny_model(4);
        let anchor_model = tiny_model(5); // different weights, same shapes
        let mut anchor = CheckpointModel::freeze(&anchor_model, 0);
        anchor.set_fisher(FisherDiagonal::identity(&anchor_model.named_params(), 1));
        let x = Tensor::matrix(1, 4, vec![0.2, -0.1, 0.5, 0.0]).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &x, false).unwrap();
        let l2 = l2_param_loss(&mut tape, &fwd.params, &anchor).unwrap();
        let ewc = ewc_param_loss(&mut tape, &fwd.params, &anchor).unwrap();
        assert_eq!(tape.scalar(l2).unwrap(), tape.scalar(ewc).unwrap());
    }

    #[test]
    fn ewc_without_fisher_errors() {
        let m = tiny_model(6);
        let anchor = CheckpointModel::freeze(&m, 0);
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &x, false).unwrap();
        assert!(matches!(
            ewc_param_loss(&mut tape, &fwd.params, &anchor),
            Err(Error::MissingFisher)
        ));
    }

    #[test]
    fn new_head_blocks_are_exempt_from_anchoring() {
        let mut m = tiny_model(7);
        let anchor = CheckpointModel::freeze(&m, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        m.expand_head(2, &mut rng).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.3; 4]).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &x, false).unwrap();
        let l2 = l2_param_loss(&mut tape, &fwd.params, &anchor).unwrap();
        // Encoder and old head identical to anchor, new block unanchored.
        assert_eq!(tape.scalar(l2).unwrap(), 0.0);
    }

    #[test]
    fn negative_fisher_is_rejected() {
        let err = FisherDiagonal::new(vec![("w".into(), vec![0.5, -0.1])], 1);
        assert!(matches!(err, Err(Error::NegativeFisher { .. })));
    }

    #[test]
    fn pred_kd_fixed_point_gradient_vanishes_both_modes() {
        let m = tiny_model(9);
        let anchor = CheckpointModel::freeze(&m, 0);
        let x = Tensor::matrix(3, 4, vec![0.2, -0.4, 0.8, 0.1, 0.0, 0.5, -0.3, 0.9, 1.0, -1.0, 0.25, 0.5]).unwrap();
        let ckpt_logits = anchor.forward(&x, &[]).unwrap().0;
        for mode in [HeadMode::Softmax, HeadMode::Sigmoid] {
            let mut tape = Tape::new();
            let fwd = m.forward_on_tape(&mut tape, &x, false).unwrap();
            let kd = pred_kd_loss(&mut tape, fwd.logits, &ckpt_logits, mode, 1.0).unwrap();
            tape.backward(kd).unwrap();
            for (name, leaf) in &fwd.params {
                if let Some(g) = tape.grad(*leaf) {
                    for &gi in g {
                        assert!(gi.abs() <= 1e-10, "{name}: residual gradient {gi} in {mode:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn pred_kd_width_mismatch_errors() {
        let m = tiny_model(10);
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let ckpt_logits = Tensor::matrix(1, 5, vec![0.0; 5]).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &x, false).unwrap();
        assert!(matches!(
            pred_kd_loss(&mut tape, fwd.logits, &ckpt_logits, HeadMode::Softmax, 1.0),
            Err(Error::ClassRangeMismatch { left: 3, right: 5 })
        ));
    }

    #[test]
    fn feat_kd_is_zero_on_identical_activations() {
        let m = tiny_model(11);
        let anchor = CheckpointModel::freeze(&m, 0);
        let x = Tensor::matrix(2, 4, vec![0.5, -0.5, 0.25, 0.0, 1.0, 0.1, -0.9, 0.4]).unwrap();
        let (_, taps) = anchor.forward(&x, &["pen"]).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &x, false).unwrap();
        let fk = feat_kd_loss(&mut tape, fwd.taps["pen"], &taps["pen"]).unwrap();
        assert_eq!(tape.scalar(fk).unwrap(), 0.0);
    }

    #[test]
    fn feat_kd_matches_hand_value() {
        let mut tape = Tape::new();
        let cur = logits_node(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let ckpt = Tensor::matrix(2, 2, vec![0.0, 2.0, 3.0, 2.0]).unwrap();
        let fk = feat_kd_loss(&mut tape, cur, &ckpt).unwrap();
        // Row distances: 1^2 + 0 = 1 and 0 + 2^2 = 4, mean 2.5.
        assert_eq!(tape.scalar(fk).unwrap(), 2.5);
    }

    #[test]
    fn total_loss_applies_weights() {
        let mut tape = Tape::new();
        let cls = tape.scalar_const(0.25);
        let one = tape.scalar_const(1.0);
        let terms = AuxTerms {
            pred_kd: Some(one),
            feat_kd: None,
            ewc: Some(one),
            l2: None,
        };
        let total = total_loss(&mut tape, cls, terms, &LossWeights::default()).unwrap();
        assert!((tape.scalar(total).unwrap() - (0.25 + 1.0 + 10.0)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_without_terms_is_cls() {
        let mut tape = Tape::new();
        let cls = tape.scalar_const(0.75);
        let total = total_loss(&mut tape, cls, AuxTerms::default(), &LossWeights::default()).unwrap();
        assert_eq!(tape.scalar(total).unwrap(), 0.75);
    }

    #[test]
    fn fisher_entries_are_nonnegative_and_congruent() {
        let m = tiny_model(12);
        let xs = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let fisher =
            compute_fisher_diagonal(&m, &xs, &[0, 1, 2, 0], 0..3, HeadMode::Softmax, false, 1)
                .unwrap();
        fisher.congruent_with(&m.named_params()).unwrap();
        assert!(fisher
            .entries()
            .iter()
            .all(|(_, v)| v.iter().all(|&x| x >= 0.0)));
        assert_eq!(fisher.source_task, 1);
    }

    #[test]
    fn fisher_survives_a_frozen_source_model() {
        let m = tiny_model(9);
        let frozen = CheckpointModel::freeze(&m, 0);
        let xs = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.31).cos()).collect()).unwrap();
        let fisher = compute_fisher_diagonal(
            frozen.model(),
            &xs,
            &[0, 1, 2, 0],
            0..3,
            HeadMode::Sigmoid,
            false,
            0,
        )
        .unwrap();
        let total: f64 = fisher
            .entries()
            .iter()
            .map(|(_, v)| v.iter().sum::<f64>())
            .sum();
        assert!(total > 0.0, "frozen checkpoint produced an all-zero fisher");
        assert!(frozen.grads_absent());
    }

    #[test]
    fn prediction_distribution_invariants() {
        let logits = Tensor::matrix(2, 3, vec![2.0, -1.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let soft = PredictionDistribution::from_logits(&logits, HeadMode::Softmax, 1.0).unwrap();
        for r in 0..2 {
            let s: f64 = soft.probs().row(r).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let sig = PredictionDistribution::from_logits(&logits, HeadMode::Sigmoid, 1.0).unwrap();
        assert!(sig.probs().values().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(PredictionDistribution::from_logits(&logits, HeadMode::Softmax, 0.0).is_err());
    }
}
