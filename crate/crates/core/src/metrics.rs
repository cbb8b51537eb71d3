//! Accuracy bookkeeping across a task sequence and the three summary
//! metrics derived from it: pooled final accuracy, global forgetting
//! (class-count-weighted drop in all-class accuracy), and local forgetting
//! (mean drop in task-restricted accuracy). Positive forgetting means
//! performance was lost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy tables. Entry (i, n), n <= i, is measured after
/// training task i on task n's test set. `local` restricts the argmax to
/// task n's own columns; `global` ranks all columns seen through task i.
/// Tasks are 0-indexed here; the serialized form is 1-indexed for reading.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    task_sizes: Vec<usize>,
    test_sizes: Vec<usize>,
    local: Vec<Option<f64>>,
    global: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    /// `task_sizes` are class counts per task, `test_sizes` test example
    /// counts. Both fix the task count N.
    pub fn new(task_sizes: Vec<usize>, test_sizes: Vec<usize>) -> Result<Self> {
        if task_sizes.is_empty() || task_sizes.len() != test_sizes.len() {
            return Err(Error::MatrixFormat {
                reason: format!(
                    "task sizes ({}) and test sizes ({}) must be equal-length and non-empty",
                    task_sizes.len(),
                    test_sizes.len()
                ),
            });
        }
        if task_sizes.contains(&0) || test_sizes.contains(&0) {
            return Err(Error::MatrixFormat {
                reason: "every task needs at least one class and one test example".into(),
            });
        }
        let n = task_sizes.len();
        Ok(AccuracyMatrix {
            task_sizes,
            test_sizes,
            local: vec![None; n * n],
            global: vec![None; n * n],
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_sizes.len()
    }

    pub fn task_sizes(&self) -> &[usize] {
        &self.task_sizes
    }

    pub fn test_sizes(&self) -> &[usize] {
        &self.test_sizes
    }

    fn index(&self, i: usize, n: usize) -> Result<usize> {
        let tasks = self.n_tasks();
        if i >= tasks || n > i {
            return Err(Error::MatrixFormat {
                reason: format!("entry ({i},{n}) outside the lower triangle of {tasks} tasks"),
            });
        }
        Ok(i * tasks + n)
    }

    /// Records both accuracies for (i, n). Entries are write-once.
    pub fn record(&mut self, i: usize, n: usize, local: f64, global: f64) -> Result<()> {
        let idx = self.index(i, n)?;
        for v in [local, global] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::MatrixFormat {
                    reason: format!("accuracy {v} at ({i},{n}) outside [0,1]"),
                });
            }
        }
        if self.local[idx].is_some() {
            return Err(Error::MatrixFormat {
                reason: format!("entry ({i},{n}) recorded twice"),
            });
        }
        self.local[idx] = Some(local);
        self.global[idx] = Some(global);
        Ok(())
    }

    pub fn local(&self, i: usize, n: usize) -> Result<f64> {
        let idx = self.index(i, n)?;
        self.local[idx].ok_or(Error::MatrixIncomplete { row: i, task: n })
    }

    pub fn global(&self, i: usize, n: usize) -> Result<f64> {
        let idx = self.index(i, n)?;
        self.global[idx].ok_or(Error::MatrixIncomplete { row: i, task: n })
    }

    pub fn is_complete(&self) -> bool {
        let n = self.n_tasks();
        (0..n).all(|i| (0..=i).all(|j| self.local[i * n + j].is_some()))
    }

    fn require_complete(&self) -> Result<()> {
        let tasks = self.n_tasks();
        for i in 0..tasks {
            for n in 0..=i {
                if self.local[i * tasks + n].is_none() {
                    return Err(Error::MatrixIncomplete { row: i, task: n });
                }
            }
        }
        Ok(())
    }

    /// CSV form: one row per (table, task) pair with task columns, task
    /// numbers 1-based, upper-triangle cells left empty. Two trailing rows
    /// carry the class and test-example counts.
    pub fn to_csv(&self) -> Result<String> {
        let tasks = self.n_tasks();
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["table".to_string(), "task".to_string()];
        header.extend((1..=tasks).map(|n| format!("eval_{n}")));
        wtr.write_record(&header)?;
        for (name, cells) in [("A", &self.local), ("R", &self.global)] {
            for i in 0..tasks {
                let mut row = vec![name.to_string(), (i + 1).to_string()];
                for n in 0..tasks {
                    row.push(match cells[i * tasks + n] {
                        Some(v) => format!("{v}"),
                        None => String::new(),
                    });
                }
                wtr.write_record(&row)?;
            }
        }
        for (name, sizes) in [("classes", &self.task_sizes), ("test_examples", &self.test_sizes)] {
            let mut row = vec![name.to_string(), String::new()];
            row.extend(sizes.iter().map(|s| s.to_string()));
            wtr.write_record(&row)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::MatrixFormat {
            reason: e.to_string(),
        })?;
        String::from_utf8(bytes).map_err(|e| Error::MatrixFormat {
            reason: e.to_string(),
        })
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "table" || &headers[1] != "task" {
            return Err(Error::MatrixFormat {
                reason: "header must start with table,task".into(),
            });
        }
        let tasks = headers.len() - 2;
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::MatrixFormat {
                reason: format!("cannot parse {what} value '{s}'"),
            })
        };
        let mut local = vec![None; tasks * tasks];
        let mut global = vec![None; tasks * tasks];
        let mut task_sizes = None;
        let mut test_sizes = None;
        for record in rdr.records() {
            let record = record?;
            let table = &record[0];
            match table {
                "A" | "R" => {
                    let i: usize = record[1].parse().map_err(|_| Error::MatrixFormat {
                        reason: format!("bad task number '{}'", &record[1]),
                    })?;
                    if i == 0 || i > tasks {
                        return Err(Error::MatrixFormat {
                            reason: format!("task number {i} outside 1..={tasks}"),
                        });
                    }
                    let dest = if table == "A" { &mut local } else { &mut global };
                    for n in 0..tasks {
                        let cell = record[2 + n].trim();
                        if !cell.is_empty() {
                            dest[(i - 1) * tasks + n] = Some(parse_f64(cell, table)?);
                        }
                    }
                }
                "classes" | "test_examples" => {
                    let mut sizes = Vec::with_capacity(tasks);
                    for n in 0..tasks {
                        let v = parse_f64(record[2 + n].trim(), table)?;
                        sizes.push(v as usize);
                    }
                    if table == "classes" {
                        task_sizes = Some(sizes);
                    } else {
                        test_sizes = Some(sizes);
                    }
                }
                other => {
                    return Err(Error::MatrixFormat {
                        reason: format!("unknown table '{other}'"),
                    });
                }
            }
        }
        let task_sizes = task_sizes.ok_or(Error::MatrixFormat {
            reason: "missing classes row".into(),
        })?;
        let test_sizes = test_sizes.ok_or(Error::MatrixFormat {
            reason: "missing test_examples row".into(),
        })?;
        let mut m = AccuracyMatrix::new(task_sizes, test_sizes)?;
        for i in 0..tasks {
            for n in 0..=i {
                match (local[i * tasks + n], global[i * tasks + n]) {
                    (Some(a), Some(r)) => m.record(i, n, a, r)?,
                    (None, None) => {}
                    _ => {
                        return Err(Error::MatrixFormat {
                            reason: format!("entry ({i},{n}) present in only one table"),
                        });
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Accuracy over the pooled test set after the final task: test-example-
/// count-weighted mean of the all-column accuracies R_{N,n}.
pub fn final_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let last = m.n_tasks() - 1;
    let mut num = 0.0;
    let mut den = 0.0;
    for n in 0..m.n_tasks() {
        let w = m.test_sizes[n] as f64;
        num += w * m.global(last, n)?;
        den += w;
    }
    Ok(num / den)
}

/// Mean over later tasks i of the class-count-weighted drop in all-column
/// accuracy on earlier tasks:
/// (1/(N-1)) sum_{i>=1} sum_{n<i} (|T_n| / |T_{0..=i}|) (R_{n,n} - R_{i,n}).
/// Negative when later training improved old tasks.
pub fn global_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let tasks = m.n_tasks();
    if tasks < 2 {
        return Err(Error::MetricUndefined {
            metric: "global forgetting",
            tasks,
        });
    }
    let mut total = 0.0;
    for i in 1..tasks {
        let seen: usize = m.task_sizes[..=i].iter().sum();
        for n in 0..i {
            let w = m.task_sizes[n] as f64 / seen as f64;
            total += w * (m.global(n, n)? - m.global(i, n)?);
        }
    }
    Ok(total / (tasks - 1) as f64)
}

/// Mean drop in task-restricted accuracy between each task's own evaluation
/// and the final one: mean over n < N-1 of A_{n,n} - A_{N,n}. Positive means
/// forgetting.
pub fn local_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let tasks = m.n_tasks();
    if tasks < 2 {
        return Err(Error::MetricUndefined {
            metric: "local forgetting",
            tasks,
        });
    }
    let last = tasks - 1;
    let mut total = 0.0;
    for n in 0..last {
        total += m.local(n, n)? - m.local(last, n)?;
    }
    Ok(total / last as f64)
}

/// The three summary metrics plus the full tables, ready for JSON emission.
/// The forgetting entries are `None` for single-task runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub final_accuracy: f64,
    pub global_forgetting: Option<f64>,
    pub local_forgetting: Option<f64>,
    pub n_tasks: usize,
    pub task_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    /// Row i holds entries for tasks 0..=i.
    pub local_table: Vec<Vec<f64>>,
    pub global_table: Vec<Vec<f64>>,
}

pub fn compute_report(m: &AccuracyMatrix) -> Result<MetricsReport> {
    m.require_complete()?;
    let tasks = m.n_tasks();
    let undefined_ok = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::MetricUndefined { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut local_table = Vec::with_capacity(tasks);
    let mut global_table = Vec::with_capacity(tasks);
    for i in 0..tasks {
        local_table.push((0..=i).map(|n| m.local(i, n)).collect::<Result<Vec<_>>>()?);
        global_table.push((0..=i).map(|n| m.global(i, n)).collect::<Result<Vec<_>>>()?);
    }
    Ok(MetricsReport {
        final_accuracy: final_accuracy(m)?,
        global_forgetting: undefined_ok(global_forgetting(m))?,
        local_forgetting: undefined_ok(local_forgetting(m))?,
        n_tasks: tasks,
        task_sizes: m.task_sizes().to_vec(),
        test_sizes: m.test_sizes().to_vec(),
        local_table,
        global_table,
    })
}

/// Plain-text comparison table: one row per labeled run, with accuracy
/// (higher is better) and both forgetting metrics (lower is better).
/// `label` names the key column ("method", "seed", ...).
pub fn render_table(label: &str, rows: &[(String, MetricsReport)]) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    };
    let name_width = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once(label.len()))
        .max()
        .unwrap_or(6);
    let mut out = format!(
        "{:<name_width$}  {:>8}  {:>8}  {:>8}\n",
        label, "acc \u{2191}", "F^G \u{2193}", "F^L \u{2193}"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<name_width$}  {:>8}  {:>8}  {:>8}\n",
            name,
            fmt(Some(r.final_accuracy)),
            fmt(r.global_forgetting),
            fmt(r.local_forgetting),
        ));
    }
    out
}
