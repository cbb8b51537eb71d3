//! Datasets and task splits. Features are f64 vectors, labels dense class
//! ids 0..M-1, and every class keeps separate train and test examples.
//! Sources: seeded synthetic Gaussian clusters, and the classic binary
//! image-classification formats (one label byte, or coarse+fine label
//! bytes, followed by 3072 pixel bytes per record).

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub provenance: String,
    train: Vec<Example>,
    test: Vec<Example>,
}

impl Dataset {
    /// Validates density of labels and per-class coverage: every class id in
    /// 0..num_classes must own at least one train and one test example.
    pub fn new(
        dim: usize,
        num_classes: usize,
        train: Vec<Example>,
        test: Vec<Example>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument {
                what: format!("dataset needs at least 2 classes, got {num_classes}"),
            });
        }
        let mut train_seen = vec![false; num_classes];
        let mut test_seen = vec![false; num_classes];
        for (split, seen) in [(&train, &mut train_seen), (&test, &mut test_seen)] {
            for ex in split.iter() {
                if ex.label >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: ex.label,
                        limit: num_classes,
                    });
                }
                if ex.features.len() != dim {
                    return Err(Error::ShapeMismatch {
                        op: "dataset",
                        left: vec![dim],
                        right: vec![ex.features.len()],
                    });
                }
                seen[ex.label] = true;
            }
        }
        for c in 0..num_classes {
            if !train_seen[c] || !test_seen[c] {
                return Err(Error::InvalidArgument {
                    what: format!("class {c} is missing a train or test example"),
                });
            }
        }
        Ok(Dataset {
            dim,
            num_classes,
            provenance: provenance.into(),
            train,
            test,
        })
    }

    pub fn examples(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Indices of examples whose label belongs to `classes`, in stored order.
    pub fn indices_of_classes(&self, split: Split, classes: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = classes.iter().copied().collect();
        self.examples(split)
            .iter()
            .enumerate()
            .filter(|(_, ex)| set.contains(&ex.label))
            .map(|(i, _)| i)
            .collect()
    }

    /// Gathers rows into a batch tensor plus the matching labels.
    pub fn batch(&self, split: Split, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let examples = self.examples(split);
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(&examples[i].features);
            labels.push(examples[i].label);
        }
        let t = Tensor::matrix(indices.len(), self.dim, values).expect("gather shape");
        (t, labels)
    }

    /// Serializes to the shared tensor container (labels stored as f64).
    pub fn save(&self, path: &Path) -> Result<()> {
        container::save(path, &self.to_named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_named_tensors(&container::load(path)?)
    }

    fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let pack = |name: &str, examples: &[Example]| {
            let n = examples.len();
            let mut feats = Vec::with_capacity(n * self.dim);
            let mut labels = Vec::with_capacity(n);
            for ex in examples {
                feats.extend_from_slice(&ex.features);
                labels.push(ex.label as f64);
            }
            vec![
                NamedTensor::new(format!("{name}/features"), vec![n, self.dim], feats),
                NamedTensor::new(format!("{name}/labels"), vec![n], labels),
            ]
        };
        let mut out = pack("train", &self.train);
        out.extend(pack("test", &self.test));
        out.push(NamedTensor::new(
            "meta/num_classes",
            vec![1],
            vec![self.num_classes as f64],
        ));
        out
    }

    fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::MissingTensor { name: name.to_string() })
        };
        let unpack = |prefix: &str| -> Result<(Vec<Example>, usize)> {
            let feats = find(&format!("{prefix}/features"))?;
            let labels = find(&format!("{prefix}/labels"))?;
            if feats.shape.len() != 2 || labels.shape != vec![feats.shape[0]] {
                return Err(Error::ShapeTable {
                    reason: format!("{prefix} split has inconsistent shapes"),
                });
            }
            let (n, dim) = (feats.shape[0], feats.shape[1]);
            let examples = (0..n)
                .map(|i| Example {
                    features: feats.values[i * dim..(i + 1) * dim].to_vec(),
                    label: labels.values[i] as usize,
                })
                .collect();
            Ok((examples, dim))
        };
        let (train, dim) = unpack("train")?;
        let (test, _) = unpack("test")?;
        let classes = find("meta/num_classes")?.values[0] as usize;
        Dataset::new(dim, classes, train, test, "container")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Gaussian clusters: each class mean is a uniformly random unit direction
/// scaled by `separation`, covariance is the identity. 80/20 train/test per
/// class (at least one example each side). Fully determined by the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument {
            what: format!("need at least 2 classes, got {}", spec.classes),
        });
    }
    if spec.dim == 0 {
        return Err(Error::InvalidArgument {
            what: "feature dim must be positive".into(),
        });
    }
    if spec.per_class < 2 {
        return Err(Error::InvalidArgument {
            what: format!("need at least 2 examples per class, got {}", spec.per_class),
        });
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(Error::InvalidArgument {
            what: format!("separation must be finite and non-negative, got {}", spec.separation),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_test = ((spec.per_class as f64 * 0.2).round() as usize).max(1);
    let n_train = spec.per_class - n_test;

    let mut train = Vec::with_capacity(spec.classes * n_train);
    let mut test = Vec::with_capacity(spec.classes * n_test);
    for class in 0..spec.classes {
        let mean = random_direction(spec.dim, &mut rng, spec.separation);
        for i in 0..spec.per_class {
            let features: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ex = Example { features, label: class };
            if i < n_train {
                train.push(ex);
            } else {
                test.push(ex);
            }
        }
    }
    Dataset::new(
        spec.dim,
        spec.classes,
        train,
        test,
        format!(
            "synthetic(classes={},dim={},per_class={},separation={},seed={})",
            spec.classes, spec.dim, spec.per_class, spec.separation, spec.seed
        ),
    )
}

fn random_direction<R: Rng>(dim: usize, rng: &mut R, scale: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm * scale).collect();
        }
    }
}

// ── binary image records ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + 3072,
            CifarVariant::Cifar100 => 2 + 3072,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Reads one binary batch file. Each record holds the label byte(s) then
/// 3072 pixel bytes (channel-major 32x32), scaled to [0,1]. The 100-class
/// variant stores a coarse label byte first and the fine label second; the
/// fine label is what lands in `Example::label`.
pub fn read_cifar_records(path: &Path, variant: CifarVariant) -> Result<Vec<Example>> {
    let bytes = std::fs::read(path)?;
    parse_cifar_records(&bytes, variant, &path.display().to_string())
}

fn parse_cifar_records(bytes: &[u8], variant: CifarVariant, path: &str) -> Result<Vec<Example>> {
    let record = variant.record_len();
    if !bytes.len().is_multiple_of(record) {
        let offset = (bytes.len() / record * record) as u64;
        return Err(Error::DatasetSize {
            path: path.to_string(),
            record,
            actual: bytes.len() as u64,
            offset,
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / record);
    for (i, chunk) in bytes.chunks_exact(record).enumerate() {
        let base = (i * record) as u64;
        let label = match variant {
            CifarVariant::Cifar10 => {
                check_label(path, base, chunk[0], 9)?;
                chunk[0] as usize
            }
            CifarVariant::Cifar100 => {
                check_label(path, base, chunk[0], 19)?;
                check_label(path, base + 1, chunk[1], 99)?;
                chunk[1] as usize
            }
        };
        let pixels = &chunk[record - 3072..];
        let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
        out.push(Example { features, label });
    }
    Ok(out)
}

fn check_label(path: &str, offset: u64, value: u8, max: u8) -> Result<()> {
    if value > max {
        return Err(Error::DatasetLabel {
            path: path.to_string(),
            offset,
            value,
            max,
        });
    }
    Ok(())
}

/// Assembles a full dataset from standard batch files under `dir`:
/// `data_batch_1..5.bin` + `test_batch.bin` for the 10-class variant,
/// `train.bin` + `test.bin` for the 100-class variant.
pub fn load_cifar_dataset(dir: &Path, variant: CifarVariant) -> Result<Dataset> {
    let (train_files, test_file): (Vec<String>, &str) = match variant {
        CifarVariant::Cifar10 => (
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            "test_batch.bin",
        ),
        CifarVariant::Cifar100 => (vec!["train.bin".to_string()], "test.bin"),
    };
    let mut train = Vec::new();
    for f in &train_files {
        train.extend(read_cifar_records(&dir.join(f), variant)?);
    }
    let test = read_cifar_records(&dir.join(test_file), variant)?;
    Dataset::new(
        3072,
        variant.num_classes(),
        train,
        test,
        format!("{variant:?}@{}", dir.display()),
    )
}

// ── task splits ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSpec {
    /// N tasks of equal class count.
    Uniform {
        tasks: usize,
        classes_per_task: usize,
        seed: u64,
    },
    /// A large first task followed by the given tail sizes.
    Expansion {
        first: usize,
        tail: Vec<usize>,
        seed: u64,
    },
}

impl SplitSpec {
    pub fn sizes(&self) -> Vec<usize> {
        match self {
            SplitSpec::Uniform {
                tasks,
                classes_per_task,
                ..
            } => vec![*classes_per_task; *tasks],
            SplitSpec::Expansion { first, tail, .. } => {
                let mut v = vec![*first];
                v.extend_from_slice(tail);
                v
            }
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            SplitSpec::Uniform { seed, .. } | SplitSpec::Expansion { seed, .. } => *seed,
        }
    }
}

/// Disjoint class sets, one per task, in head-column order: task n's classes
/// occupy the next |T_n| logit columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    tasks: Vec<Vec<usize>>,
}

impl TaskSequence {
    /// Builds a sequence from explicit class lists; tasks must be non-empty
    /// and pairwise disjoint.
    pub fn from_tasks(tasks: Vec<Vec<usize>>) -> Result<Self> {
        if tasks.is_empty() || tasks.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidArgument {
                what: "every task needs at least one class".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for &c in tasks.iter().flatten() {
            if !seen.insert(c) {
                return Err(Error::InvalidArgument {
                    what: format!("class {c} appears in more than one task"),
                });
            }
        }
        Ok(TaskSequence { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn classes(&self, task: usize) -> &[usize] {
        &self.tasks[task]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.len()).collect()
    }

    /// Head column of each task's first class.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tasks.len());
        let mut acc = 0;
        for t in &self.tasks {
            out.push(acc);
            acc += t.len();
        }
        out
    }

    /// Class ids in column order (flattened tasks).
    pub fn class_order(&self) -> Vec<usize> {
        self.tasks.iter().flatten().copied().collect()
    }

    /// Head column of a class id, if the class is covered by any task.
    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.class_order().iter().position(|&c| c == class)
    }
}

/// Shuffles class ids with the split seed and deals them greedily into the
/// requested task sizes. Classes beyond the total requested stay unused.
pub fn make_task_sequence(num_classes: usize, spec: &SplitSpec) -> Result<TaskSequence> {
    let sizes = spec.sizes();
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument {
            what: "every task needs at least one class".into(),
        });
    }
    let need: usize = sizes.iter().sum();
    if need > num_classes {
        return Err(Error::SplitInfeasible {
            need,
            have: num_classes,
        });
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed());
    ids.shuffle(&mut rng);
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut cursor = 0;
    for s in sizes {
        tasks.push(ids[cursor..cursor + s].to_vec());
        cursor += s;
    }
    Ok(TaskSequence { tasks })
}

/// Splits off `fraction` of the classes (rounded) as an auxiliary dataset
/// for pre-training. Both sides are densely relabeled in ascending original
/// class order; each must keep at least two classes.
pub fn auxiliary_split(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(Error::InvalidArgument {
            what: format!("aux fraction must be in [0,1], got {fraction}"),
        });
    }
    let m = dataset.num_classes;
    let k = (m as f64 * fraction).round() as usize;
    if k < 2 {
        return Err(Error::AuxSplitTooSmall {
            side: "auxiliary",
            classes: k,
        });
    }
    if m - k < 2 {
        return Err(Error::AuxSplitTooSmall {
            side: "main",
            classes: m - k,
        });
    }
    let mut ids: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut aux_classes: Vec<usize> = ids[..k].to_vec();
    let mut main_classes: Vec<usize> = ids[k..].to_vec();
    aux_classes.sort_unstable();
    main_classes.sort_unstable();

    let carve = |classes: &[usize], tag: &str| -> Result<Dataset> {
        let relabel: std::collections::BTreeMap<usize, usize> = classes
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        let pick = |examples: &[Example]| {
            examples
                .iter()
                .filter(|ex| relabel.contains_key(&ex.label))
                .map(|ex| Example {
                    features: ex.features.clone(),
                    label: relabel[&ex.label],
                })
                .collect::<Vec<_>>()
        };
        Dataset::new(
            dataset.dim,
            classes.len(),
            pick(&dataset.train),
            pick(&dataset.test),
            format!("{}#{tag}{:?}", dataset.provenance, classes),
        )
    };
    Ok((carve(&aux_classes, "aux")?, carve(&main_classes, "main")?))
}
