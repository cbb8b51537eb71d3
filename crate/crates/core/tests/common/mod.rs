//! Shared test harness: central-finite-difference gradient checking against
//! the tape's analytic gradients. The oracle only ever evaluates losses
//! forward, on freshly built graphs, so it shares no code path with
//! backward().

#![allow(dead_code)]

use driftbench::losses::{
    balanced_bce_loss, bce_loss, ewc_param_loss, feat_kd_loss, l2_param_loss, pred_kd_loss,
    softmax_loss, total_loss, AuxTerms, FisherDiagonal, HeadMode, LossWeights,
};
use driftbench::model::{CheckpointModel, EncoderSpec, Model};
use driftbench::tape::{NodeId, Tape};
use driftbench::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A differentiable scalar as a function of named leaf tensors. `build`
/// reconstructs the graph from scratch on any tape, which is what lets the
/// finite-difference oracle perturb leaves and re-evaluate.
pub struct GradCase {
    pub name: String,
    pub leaves: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>,
}

impl GradCase {
    pub fn eval(&self, leaves: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t).unwrap()).collect();
        let loss = (self.build)(&mut tape, &ids);
        tape.scalar(loss).unwrap()
    }

    /// Analytic gradient per leaf, via one backward pass.
    pub fn analytic(&self) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = self.leaves.iter().map(|t| tape.leaf(t).unwrap()).collect();
        let loss = (self.build)(&mut tape, &ids);
        tape.backward(loss).unwrap();
        ids.iter()
            .enumerate()
            .map(|(i, id)| {
                tape.grad(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.leaves[i].len()])
            })
            .collect()
    }

    /// Largest relative error of any gradient coordinate against central
    /// finite differences with step `h`.
    #[allow(clippy::needless_range_loop)]
    pub fn max_rel_err(&self, h: f64) -> f64 {
        let analytic = self.analytic();
        let mut worst: f64 = 0.0;
        for li in 0..self.leaves.len() {
            for k in 0..self.leaves[li].len() {
                let probe = |delta: f64| {
                    let mut leaves = self.leaves.clone();
                    leaves[li].values_mut()[k] += delta;
                    self.eval(&leaves)
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let a = analytic[li][k];
                let denom = a.abs().max(fd.abs()).max(1e-3);
                worst = worst.max((a - fd).abs() / denom);
            }
        }
        worst
    }

    pub fn coord_count(&self) -> usize {
        self.leaves.iter().map(|t| t.len()).sum()
    }
}

/// Loss heads rotated across random cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Softmax,
    Bce,
    BalancedBce,
    PredKdSoftmax,
    PredKdSigmoid,
    FeatKd,
    Ewc,
    L2,
    Composite,
}

pub const ALL_KINDS: [LossKind; 9] = [
    LossKind::Softmax,
    LossKind::Bce,
    LossKind::BalancedBce,
    LossKind::PredKdSoftmax,
    LossKind::PredKdSigmoid,
    LossKind::FeatKd,
    LossKind::Ewc,
    LossKind::L2,
    LossKind::Composite,
];

pub fn kind_for(i: usize) -> LossKind {
    ALL_KINDS[i % ALL_KINDS.len()]
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    Sigmoid,
}

struct MlpDims {
    batch: usize,
    input: usize,
    hidden: [usize; 2],
    width: usize,
    scope: std::ops::Range<usize>,
}

fn sample_dims(rng: &mut ChaCha8Rng) -> MlpDims {
    let batch = rng.gen_range(1..=4);
    let input = rng.gen_range(2..=5);
    let hidden = [rng.gen_range(3..=7), rng.gen_range(3..=7)];
    let classes = rng.gen_range(2..=5);
    let offset = rng.gen_range(0..=2);
    let extra = rng.gen_range(0..=2);
    MlpDims {
        batch,
        input,
        hidden,
        width: offset + classes + extra,
        scope: offset..offset + classes,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, values).unwrap().with_grad()
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Tensor {
    let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![len], values).unwrap().with_grad()
}

/// Random two-hidden-layer network plus the requested loss head. ReLU
/// networks are resampled until every pre-activation clears the kink by a
/// margin much larger than the finite-difference step.
pub fn grad_case(seed: u64, kind: LossKind) -> GradCase {
    match kind {
        LossKind::Ewc | LossKind::L2 => drift_case(seed, kind),
        _ => mlp_case(seed, kind),
    }
}

fn mlp_case(seed: u64, kind: LossKind) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = if seed.is_multiple_of(2) { Act::Relu } else { Act::Sigmoid };

    for _attempt in 0..200 {
        let dims = sample_dims(&mut rng);
        let x = random_tensor(&mut rng, dims.batch, dims.input, 1.0);
        let leaves = vec![
            random_tensor(&mut rng, dims.input, dims.hidden[0], 0.9),
            random_vector(&mut rng, dims.hidden[0], 0.5),
            random_tensor(&mut rng, dims.hidden[0], dims.hidden[1], 0.9),
            random_vector(&mut rng, dims.hidden[1], 0.5),
            random_tensor(&mut rng, dims.hidden[1], dims.width, 0.9),
            random_vector(&mut rng, dims.width, 0.5),
        ];
        let labels: Vec<usize> = (0..dims.batch)
            .map(|_| rng.gen_range(dims.scope.clone()))
            .collect();
        let old_width = rng.gen_range(1..=dims.width);
        let ckpt_logits = {
            let t = random_tensor(&mut rng, dims.batch, old_width, 1.5);
            Tensor::matrix(dims.batch, old_width, t.values().to_vec()).unwrap()
        };
        let feat_target = {
            let t = random_tensor(&mut rng, dims.batch, dims.hidden[1], 1.0);
            Tensor::matrix(dims.batch, dims.hidden[1], t.values().to_vec()).unwrap()
        };
        let temperature = if seed.is_multiple_of(3) { 2.0 } else { 1.0 };

        let x_c = x.clone();
        let scope = dims.scope.clone();
        let labels_c = labels.clone();
        let build = move |tape: &mut Tape, ids: &[NodeId]| -> NodeId {
            let xc = tape
                .constant(x_c.shape().to_vec(), x_c.values().to_vec())
                .unwrap();
            let z1 = tape.matmul(xc, ids[0]).unwrap();
            let z1 = tape.add_bias(z1, ids[1]).unwrap();
            let a1 = match act {
                Act::Relu => tape.relu(z1).unwrap(),
                Act::Sigmoid => tape.sigmoid(z1).unwrap(),
            };
            let z2 = tape.matmul(a1, ids[2]).unwrap();
            let z2 = tape.add_bias(z2, ids[3]).unwrap();
            let a2 = match act {
                Act::Relu => tape.relu(z2).unwrap(),
                Act::Sigmoid => tape.sigmoid(z2).unwrap(),
            };
            let z3 = tape.matmul(a2, ids[4]).unwrap();
            let logits = tape.add_bias(z3, ids[5]).unwrap();
            match kind {
                LossKind::Softmax => softmax_loss(tape, logits, &labels_c, scope.clone()).unwrap(),
                LossKind::Bce => bce_loss(tape, logits, &labels_c, scope.clone()).unwrap(),
                LossKind::BalancedBce => {
                    balanced_bce_loss(tape, logits, &labels_c, scope.clone()).unwrap()
                }
                LossKind::PredKdSoftmax | LossKind::PredKdSigmoid => {
                    let mode = if kind == LossKind::PredKdSoftmax {
                        HeadMode::Softmax
                    } else {
                        HeadMode::Sigmoid
                    };
                    let old = tape.slice_cols(logits, 0, ckpt_logits.cols().unwrap()).unwrap();
                    pred_kd_loss(tape, old, &ckpt_logits, mode, temperature).unwrap()
                }
                LossKind::FeatKd => feat_kd_loss(tape, a2, &feat_target).unwrap(),
                LossKind::Composite => {
                    let cls = softmax_loss(tape, logits, &labels_c, scope.clone()).unwrap();
                    let feat = feat_kd_loss(tape, a2, &feat_target).unwrap();
                    let old = tape.slice_cols(logits, 0, ckpt_logits.cols().unwrap()).unwrap();
                    let kd =
                        pred_kd_loss(tape, old, &ckpt_logits, HeadMode::Softmax, 1.0).unwrap();
                    let terms = AuxTerms {
                        pred_kd: Some(kd),
                        feat_kd: Some(feat),
                        ..AuxTerms::default()
                    };
                    let weights = LossWeights {
                        pred_kd: 1.0,
                        feat_kd: 5.0,
                        ewc: 0.0,
                        l2: 0.0,
                    };
                    total_loss(tape, cls, terms, &weights).unwrap()
                }
                LossKind::Ewc | LossKind::L2 => unreachable!("handled by drift_case"),
            }
        };

        let case = GradCase {
            name: format!("{kind:?}[seed {seed}]"),
            leaves,
            build: Box::new(build),
        };

        if act == Act::Sigmoid || relu_margins_ok(&case) {
            return case;
        }
    }
    panic!("could not sample a kink-free relu network for seed {seed}");
}

/// Rebuilds the graph and rejects the case if any node value sits inside
/// (0, 1e-3) in magnitude. Pre-activation nodes are among the inspected
/// values, so every relu input keeps a margin around the kink far wider
/// than the 1e-5 finite-difference step.
fn relu_margins_ok(case: &GradCase) -> bool {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = case.leaves.iter().map(|t| tape.leaf(t).unwrap()).collect();
    let _ = (case.build)(&mut tape, &ids);
    let ok = tape
        .node_values()
        .all(|v| v.iter().all(|&x| x == 0.0 || x.abs() >= 1e-3));
    ok
}

fn drift_case(seed: u64, kind: LossKind) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchor_model = Model::new(EncoderSpec::with_hidden(3, vec![4]), &mut rng).unwrap();
    anchor_model.expand_head(2, &mut rng).unwrap();
    let mut anchor = CheckpointModel::freeze(&anchor_model, 0);
    if kind == LossKind::Ewc {
        let entries: Vec<(String, Vec<f64>)> = anchor_model
            .named_params()
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    (0..t.len()).map(|_| rng.gen_range(0.0..3.0)).collect(),
                )
            })
            .collect();
        anchor.set_fisher(FisherDiagonal::new(entries, 0).unwrap());
    }
    let names: Vec<String> = anchor_model
        .named_params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let leaves: Vec<Tensor> = anchor_model
        .named_params()
        .iter()
        .map(|(_, t)| {
            let values: Vec<f64> = t
                .values()
                .iter()
                .map(|v| v + rng.gen_range(-0.5..0.5))
                .collect();
            Tensor::new(t.shape().to_vec(), values).unwrap().with_grad()
        })
        .collect();
    let build = move |tape: &mut Tape, ids: &[NodeId]| -> NodeId {
        let live: Vec<(String, NodeId)> = names.iter().cloned().zip(ids.iter().copied()).collect();
        match kind {
            LossKind::Ewc => ewc_param_loss(tape, &live, &anchor).unwrap(),
            LossKind::L2 => l2_param_loss(tape, &live, &anchor).unwrap(),
            _ => unreachable!(),
        }
    };
    GradCase {
        name: format!("{kind:?}[seed {seed}]"),
        leaves,
        build: Box::new(build),
    }
}
