//! MLP encoder with a block-expanding classifier head. Each task appends one
//! head block; earlier blocks keep their column positions forever, so class
//! c always reads from logit column c. Intermediate activations are exposed
//! through a named tap registry for feature distillation and drift analysis.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::container::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::losses::FisherDiagonal;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN_DIMS: [usize; 4] = [256, 128, 128, 64];

const META_HEAD_BLOCKS: &str = "meta/head_blocks";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl EncoderSpec {
    pub fn new(input_dim: usize) -> Self {
        EncoderSpec {
            input_dim,
            hidden_dims: DEFAULT_HIDDEN_DIMS.to_vec(),
        }
    }

    pub fn with_hidden(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        EncoderSpec {
            input_dim,
            hidden_dims,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument {
                what: "encoder input_dim must be positive".into(),
            });
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument {
                what: "encoder needs at least one non-empty hidden layer".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor, // in x out
    bias: Tensor,   // out
}

impl Linear {
    /// Scaled uniform init, +-1/sqrt(fan_in) for both weight and bias.
    /// Draws are consumed weight row-major first, then bias, so a given rng
    /// state always produces the same layer.
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], weight)
                .expect("init shape")
                .with_grad(),
            bias: Tensor::new(vec![fan_out], bias).expect("init shape").with_grad(),
        }
    }
}

/// Result of a differentiable forward pass: the logits node, every named
/// activation tap, and one tape leaf per trainable parameter (aligned with
/// the names used by the optimizer).
pub struct TapeForward {
    pub logits: NodeId,
    pub taps: BTreeMap<String, NodeId>,
    pub params: Vec<(String, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: EncoderSpec,
    layers: Vec<Linear>,
    head: Vec<Linear>,
}

impl Model {
    pub fn new<R: Rng>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.hidden_dims.len());
        let mut fan_in = spec.input_dim;
        for &width in &spec.hidden_dims {
            layers.push(Linear::init(fan_in, width, rng));
            fan_in = width;
        }
        Ok(Model {
            spec,
            layers,
            head: Vec::new(),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Width of the penultimate representation (head input).
    pub fn pen_dim(&self) -> usize {
        *self.spec.hidden_dims.last().expect("validated non-empty")
    }

    pub fn head_widths(&self) -> Vec<usize> {
        self.head
            .iter()
            .map(|b| b.weight.shape()[1])
            .collect()
    }

    pub fn total_classes(&self) -> usize {
        self.head_widths().iter().sum()
    }

    /// Appends a head block for `classes` new classes. Existing blocks are
    /// untouched; their weights keep their exact bit patterns.
    pub fn expand_head<R: Rng>(&mut self, classes: usize, rng: &mut R) -> Result<()> {
        if classes == 0 {
            return Err(Error::EmptyExpansion);
        }
        let block = Linear::init(self.pen_dim(), classes, rng);
        self.head.push(block);
        Ok(())
    }

    /// Names of available activation taps, rear-aligned over the encoder:
    /// the last hidden layer is "pen", the one before it "L-2", and so on,
    /// plus "linear" for the head logits.
    pub fn tap_names(&self) -> Vec<String> {
        let h = self.layers.len();
        let mut names: Vec<String> = (0..h)
            .map(|i| {
                if i == h - 1 {
                    "pen".to_string()
                } else {
                    format!("L-{}", h - i)
                }
            })
            .collect();
        names.push("linear".to_string());
        names
    }

    /// Differentiable forward pass over a batch (rows of `x`). Registers one
    /// leaf per parameter; when `freeze_old_heads` is set, all head blocks
    /// except the last become constants and drop out of `params`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        freeze_old_heads: bool,
    ) -> Result<TapeForward> {
        if self.head.is_empty() {
            return Err(Error::NoHead);
        }
        let (_, width) = x.dims2()?;
        if width != self.spec.input_dim {
            return Err(Error::InputWidthMismatch {
                expected: self.spec.input_dim,
                actual: width,
            });
        }
        let mut params = Vec::new();
        let mut taps = BTreeMap::new();
        let names = self.tap_names();

        let mut h = tape.constant(x.shape().to_vec(), x.values().to_vec())?;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(&layer.weight)?;
            let b = tape.leaf(&layer.bias)?;
            params.push((format!("encoder.{i}.weight"), w));
            params.push((format!("encoder.{i}.bias"), b));
            let lin = tape.matmul(h, w)?;
            let pre = tape.add_bias(lin, b)?;
            h = tape.relu(pre)?;
            taps.insert(names[i].clone(), h);
        }

        let last_block = self.head.len() - 1;
        let mut block_logits = Vec::with_capacity(self.head.len());
        for (k, block) in self.head.iter().enumerate() {
            let frozen = freeze_old_heads && k < last_block;
            let (w, b) = if frozen {
                (
                    tape.constant(block.weight.shape().to_vec(), block.weight.values().to_vec())?,
                    tape.constant(block.bias.shape().to_vec(), block.bias.values().to_vec())?,
                )
            } else {
                let w = tape.leaf(&block.weight)?;
                let b = tape.leaf(&block.bias)?;
                params.push((format!("head.{k}.weight"), w));
                params.push((format!("head.{k}.bias"), b));
                (w, b)
            };
            let lin = tape.matmul(h, w)?;
            block_logits.push(tape.add_bias(lin, b)?);
        }
        let logits = if block_logits.len() == 1 {
            block_logits[0]
        } else {
            tape.concat_cols(&block_logits)?
        };
        taps.insert("linear".to_string(), logits);
        Ok(TapeForward { logits, taps, params })
    }

    /// Plain forward pass: logits plus the requested taps, no gradients.
    /// Shares the tape code path, so values match training bit for bit.
    pub fn forward(&self, x: &Tensor, taps: &[&str]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, x, false)?;
        let mut out = BTreeMap::new();
        for &name in taps {
            let node = fwd
                .taps
                .get(name)
                .ok_or_else(|| Error::UnknownTap { name: name.to_string() })?;
            out.insert(name.to_string(), tape.to_tensor(*node));
        }
        Ok((tape.to_tensor(fwd.logits), out))
    }

    /// Logits only.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, &[])?.0)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        for (k, b) in self.head.iter().enumerate() {
            out.push((format!("head.{k}.weight"), &b.weight));
            out.push((format!("head.{k}.bias"), &b.bias));
        }
        out
    }

    /// Mutable parameter list; optionally leaves old head blocks out so the
    /// optimizer never touches them.
    pub fn named_params_mut(&mut self, freeze_old_heads: bool) -> Vec<(String, &mut Tensor)> {
        let last_block = self.head.len().saturating_sub(1);
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut l.weight));
            out.push((format!("encoder.{i}.bias"), &mut l.bias));
        }
        for (k, b) in self.head.iter_mut().enumerate() {
            if freeze_old_heads && k < last_block {
                continue;
            }
            out.push((format!("head.{k}.weight"), &mut b.weight));
            out.push((format!("head.{k}.bias"), &mut b.bias));
        }
        out
    }

    pub fn clear_grads(&mut self) {
        for (_, p) in self.named_params_mut(false) {
            p.clear_grad();
        }
    }

    /// Serializes to named tensors: encoder layers, head blocks, and a
    /// metadata record with the per-block class counts.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, t) in self.named_params() {
            out.push(NamedTensor::new(name, t.shape().to_vec(), t.values().to_vec()));
        }
        let widths: Vec<f64> = self.head_widths().iter().map(|&w| w as f64).collect();
        out.push(NamedTensor::new(
            META_HEAD_BLOCKS,
            vec![widths.len()],
            widths,
        ));
        out
    }

    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let by_name: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let get = |name: &str| {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::MissingTensor { name: name.to_string() })
        };

        let mut layers = Vec::new();
        let mut hidden_dims = Vec::new();
        let mut input_dim = 0;
        for i in 0.. {
            let wname = format!("encoder.{i}.weight");
            if !by_name.contains_key(wname.as_str()) {
                break;
            }
            let w = get(&wname)?;
            let b = get(&format!("encoder.{i}.bias"))?;
            if w.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != w.shape[1] {
                return Err(Error::CheckpointStructure {
                    reason: format!("encoder layer {i} has inconsistent shapes"),
                });
            }
            if i == 0 {
                input_dim = w.shape[0];
            } else if w.shape[0] != hidden_dims[i - 1] {
                return Err(Error::CheckpointStructure {
                    reason: format!("encoder layer {i} does not chain with layer {}", i - 1),
                });
            }
            hidden_dims.push(w.shape[1]);
            layers.push(Linear {
                weight: Tensor::new(w.shape.clone(), w.values.clone())?.with_grad(),
                bias: Tensor::new(b.shape.clone(), b.values.clone())?.with_grad(),
            });
        }
        if layers.is_empty() {
            return Err(Error::CheckpointStructure {
                reason: "no encoder layers found".into(),
            });
        }
        let pen = *hidden_dims.last().expect("non-empty");

        let mut head = Vec::new();
        for k in 0.. {
            let wname = format!("head.{k}.weight");
            if !by_name.contains_key(wname.as_str()) {
                break;
            }
            let w = get(&wname)?;
            let b = get(&format!("head.{k}.bias"))?;
            if w.shape.len() != 2 || w.shape[0] != pen || b.shape != vec![w.shape[1]] {
                return Err(Error::CheckpointStructure {
                    reason: format!("head block {k} has inconsistent shapes"),
                });
            }
            head.push(Linear {
                weight: Tensor::new(w.shape.clone(), w.values.clone())?.with_grad(),
                bias: Tensor::new(b.shape.clone(), b.values.clone())?.with_grad(),
            });
        }

        let meta = get(META_HEAD_BLOCKS)?;
        let recorded: Vec<usize> = meta.values.iter().map(|&v| v as usize).collect();
        let actual: Vec<usize> = head.iter().map(|b| b.weight.shape()[1]).collect();
        if recorded != actual {
            return Err(Error::CheckpointStructure {
                reason: format!("head metadata {recorded:?} does not match blocks {actual:?}"),
            });
        }

        Ok(Model {
            spec: EncoderSpec {
                input_dim,
                hidden_dims,
            },
            layers,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save(path, &self.to_named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_named_tensors(&container::load(path)?)
    }

    /// Copies encoder weights from another model, leaving the head alone.
    /// Shapes must agree exactly.
    pub fn load_encoder_from(&mut self, other: &Model) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::CheckpointStructure {
                reason: format!(
                    "encoder spec mismatch: {:?}/{:?} vs {:?}/{:?}",
                    other.spec.input_dim, other.spec.hidden_dims, self.spec.input_dim, self.spec.hidden_dims
                ),
            });
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weight = src.weight.clone();
            dst.bias = src.bias.clone();
        }
        Ok(())
    }
}

/// A frozen copy of the model at a task boundary. No gradient ever flows
/// here: parameters drop their grad slots at freeze time and the struct
/// hands out no mutable access.
#[derive(Debug, Clone)]
pub struct CheckpointModel {
    model: Model,
    fisher: Option<FisherDiagonal>,
    frozen_at: u64,
}

impl CheckpointModel {
    /// Deep-copies the live model. `frozen_at` is the trainer's global step
    /// counter, used to assert that anchors predate the training they guide.
    pub fn freeze(live: &Model, frozen_at: u64) -> Self {
        let mut model = live.clone();
        for (_, p) in model.named_params_mut(false) {
            p.clear_grad();
            p.set_requires_grad(false);
        }
        CheckpointModel {
            model,
            fisher: None,
            frozen_at,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn frozen_at(&self) -> u64 {
        self.frozen_at
    }

    pub fn fisher(&self) -> Option<&FisherDiagonal> {
        self.fisher.as_ref()
    }

    pub fn set_fisher(&mut self, fisher: FisherDiagonal) {
        self.fisher = Some(fisher);
    }

    pub fn total_classes(&self) -> usize {
        self.model.total_classes()
    }

    pub fn forward(&self, x: &Tensor, taps: &[&str]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        self.model.forward(x, taps)
    }

    /// Asserts the no-gradient contract; cheap, used by tests and debug paths.
    pub fn grads_absent(&self) -> bool {
        self.model
            .named_params()
            .iter()
            .all(|(_, p)| p.grad().is_none() && !p.requires_grad())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(CheckpointModel::freeze(&Model::load(path)?, 0))
    }
}
