//! The four subcommands. `run` owns the write path; `report` and `cka`
//! only read artifacts and recompute, so their outputs can be checked
//! against what the run recorded.

use std::path::{Path, PathBuf};

use driftbench::cka::cka_trajectory;
use driftbench::container::{self, NamedTensor};
use driftbench::data::{auxiliary_split, make_task_sequence, Dataset};
use driftbench::metrics::{self, AccuracyMatrix, MetricsReport};
use driftbench::model::{CheckpointModel, Model};
use driftbench::tensor::Tensor;
use driftbench::trainer::{loss_log_to_csv, pretrain_encoder, run_experiment, RunOutput};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    atomic_write, checkpoint_name, sha256_hex, FileEntry, Layout, Manifest, CKA_FILE,
    CONFIG_FILE, LOSS_FILE, MANIFEST_FILE, MATRIX_FILE, METRICS_FILE, PROBE_FILE, REPORT_CSV,
    REPORT_TXT,
};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Environment override for the artifacts root.
pub const OUT_ENV: &str = "DRIFTBENCH_OUT";

fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn runtime_at(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Write to stdout. A reader that closes the pipe early (`cka ... | head`)
/// ends the process quietly instead of panicking.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().write_all(text.as_bytes()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => Err(CliError::Runtime(format!("stdout: {e}"))),
    }
}

// ── run ──

#[derive(Debug, Serialize, Deserialize)]
struct MetricsDoc {
    digest: String,
    seed: u64,
    report: MetricsReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedSummary {
    seed: u64,
    final_accuracy: f64,
    global_forgetting: Option<f64>,
    local_forgetting: Option<f64>,
    pretrain_accuracy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    digest: String,
    method: String,
    per_seed: Vec<SeedSummary>,
    mean_final_accuracy: f64,
    mean_global_forgetting: Option<f64>,
    mean_local_forgetting: Option<f64>,
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    if xs.iter().any(|x| x.is_none()) {
        return None;
    }
    Some(xs.iter().map(|x| x.unwrap()).sum::<f64>() / xs.len() as f64)
}

pub fn cmd_run(config_path: &Path, force: bool) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let digest = cfg.digest();
    let layout = Layout::new(&output_root(&cfg), &digest);
    if layout.any_manifest() && !force {
        return Err(CliError::Runtime(format!(
            "artifacts exist at {}; pass --force to overwrite",
            layout.exp_dir.display()
        )));
    }
    std::fs::create_dir_all(&layout.exp_dir)
        .map_err(|e| runtime_at(&layout.exp_dir, e))?;
    atomic_write(&layout.config_path(), cfg.resolved_json().as_bytes())?;

    let dataset = cfg
        .dataset
        .build()
        .map_err(|e| CliError::Runtime(format!("dataset: {e}")))?;
    let method = cfg.method.to_spec()?;
    let encoder = cfg.encoder.to_spec(dataset.dim);

    let mut per_seed = Vec::new();
    let mut table_rows = Vec::new();
    for &seed in &cfg.seeds {
        let seed_ctx = |e: CliError| match e {
            CliError::Runtime(msg) => CliError::Runtime(format!("seed {seed}: {msg}")),
            other => other,
        };
        let (trial_data, init_model, pre_acc) =
            prepare_trial(&cfg, &dataset, seed).map_err(seed_ctx)?;
        let seq = make_task_sequence(trial_data.num_classes, &cfg.split.with_seed(seed))
            .map_err(|e| CliError::Runtime(format!("seed {seed}: split: {e}")))?;
        let schedule = cfg.schedule.with_seed(seed);
        let out = run_experiment(
            &trial_data,
            &seq,
            &method,
            &schedule,
            &encoder,
            init_model.as_ref(),
            cfg.analysis.probe_size,
        )
        .map_err(|e| CliError::Runtime(format!("seed {seed}: {e}")))?;

        write_seed_artifacts(&layout, &digest, seed, &out, pre_acc).map_err(seed_ctx)?;
        table_rows.push((seed.to_string(), out.report.clone()));
        per_seed.push(SeedSummary {
            seed,
            final_accuracy: out.report.final_accuracy,
            global_forgetting: out.report.global_forgetting,
            local_forgetting: out.report.local_forgetting,
            pretrain_accuracy: pre_acc,
        });
    }

    let summary = Summary {
        digest: digest.clone(),
        method: method.name(),
        mean_final_accuracy: per_seed.iter().map(|s| s.final_accuracy).sum::<f64>()
            / per_seed.len() as f64,
        mean_global_forgetting: mean_opt(
            &per_seed.iter().map(|s| s.global_forgetting).collect::<Vec<_>>(),
        ),
        mean_local_forgetting: mean_opt(
            &per_seed.iter().map(|s| s.local_forgetting).collect::<Vec<_>>(),
        ),
        per_seed,
    };
    let mut summary_json =
        serde_json::to_string_pretty(&summary).expect("summary serializes");
    summary_json.push('\n');
    atomic_write(&layout.summary_path(), summary_json.as_bytes())?;

    emit(&metrics::render_table("seed", &table_rows))?;
    emit(&format!(
        "mean over {} trial(s): final {:.4}{}{}\n",
        cfg.seeds.len(),
        summary.mean_final_accuracy,
        summary
            .mean_global_forgetting
            .map(|v| format!(", F^G {v:.4}"))
            .unwrap_or_default(),
        summary
            .mean_local_forgetting
            .map(|v| format!(", F^L {v:.4}"))
            .unwrap_or_default(),
    ))?;
    emit(&format!("artifacts: {}\n", layout.exp_dir.display()))?;
    Ok(())
}

/// Builds the per-trial dataset and optional encoder initialization.
fn prepare_trial(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<(Dataset, Option<Model>, Option<f64>)> {
    let Some(pre) = cfg.pretrain.as_ref().filter(|p| p.enabled) else {
        return Ok((dataset.clone(), None, None));
    };
    if let Some(path) = &pre.encoder_file {
        let model = Model::load(path).map_err(|e| runtime_at(path, e))?;
        return Ok((dataset.clone(), Some(model), None));
    }
    let fraction = pre.aux_fraction.expect("validated: one source set");
    let (aux, continual) = auxiliary_split(dataset, fraction, seed)?;
    let schedule = pre
        .schedule
        .as_ref()
        .unwrap_or(&cfg.schedule)
        .with_seed(seed);
    let encoder = cfg.encoder.to_spec(dataset.dim);
    let (model, acc) = pretrain_encoder(&aux, &encoder, pre.head_mode, &schedule)?;
    Ok((continual, Some(model), Some(acc)))
}

fn write_seed_artifacts(
    layout: &Layout,
    digest: &str,
    seed: u64,
    out: &RunOutput,
    pretrain_accuracy: Option<f64>,
) -> Result<()> {
    let dir = layout.seed_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| runtime_at(&dir, e))?;
    let mut files: Vec<FileEntry> = Vec::new();
    let put = |name: &str, bytes: &[u8], files: &mut Vec<FileEntry>| -> Result<()> {
        atomic_write(&dir.join(name), bytes)?;
        files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    };

    put(MATRIX_FILE, out.matrix.to_csv()?.as_bytes(), &mut files)?;
    let metrics_doc = MetricsDoc {
        digest: digest.to_string(),
        seed,
        report: out.report.clone(),
    };
    let mut metrics_json =
        serde_json::to_string_pretty(&metrics_doc).expect("report serializes");
    metrics_json.push('\n');
    put(METRICS_FILE, metrics_json.as_bytes(), &mut files)?;
    put(CKA_FILE, out.cka.to_csv()?.as_bytes(), &mut files)?;
    put(LOSS_FILE, loss_log_to_csv(&out.loss_log)?.as_bytes(), &mut files)?;

    let (rows, cols) = out.probe.dims2()?;
    let probe_bytes = container::encode(&[
        NamedTensor::new("probe", vec![rows, cols], out.probe.values().to_vec()),
        NamedTensor::new(
            "labels",
            vec![1, out.probe_labels.len()],
            out.probe_labels.iter().map(|&l| l as f64).collect(),
        ),
    ]);
    put(PROBE_FILE, &probe_bytes, &mut files)?;

    for (i, ckpt) in out.checkpoints.iter().enumerate() {
        let name = checkpoint_name(i + 1);
        let tmp = dir.join(format!(".{name}.tmp"));
        ckpt.save(&tmp).map_err(|e| runtime_at(&tmp, e))?;
        let bytes = std::fs::read(&tmp).map_err(|e| runtime_at(&tmp, e))?;
        std::fs::rename(&tmp, dir.join(&name))
            .map_err(|e| runtime_at(&dir.join(&name), e))?;
        files.push(FileEntry {
            name,
            sha256: sha256_hex(&bytes),
        });
    }

    let manifest = Manifest {
        digest: digest.to_string(),
        seed,
        method: out.method.clone(),
        n_tasks: out.matrix.n_tasks(),
        task_sizes: out.matrix.task_sizes().to_vec(),
        test_sizes: out.matrix.test_sizes().to_vec(),
        probe_rows: rows,
        pretrain_accuracy,
        files,
    };
    let mut manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    atomic_write(&dir.join(MANIFEST_FILE), manifest_json.as_bytes())
}

// ── report ──

struct ReportRow {
    method: String,
    trials: usize,
    final_accuracy: f64,
    global_forgetting: Option<f64>,
    local_forgetting: Option<f64>,
}

pub fn cmd_report(dirs: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for dir in dirs {
        match report_row(dir, &mut missing)? {
            Some(row) => rows.push(row),
            None => continue,
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!(
            "incomplete artifacts:\n  {}",
            missing.join("\n  ")
        )));
    }

    let text = render_report(&rows);
    let csv = report_csv(&rows)?;
    atomic_write(&dirs[0].join(REPORT_TXT), text.as_bytes())?;
    atomic_write(&dirs[0].join(REPORT_CSV), csv.as_bytes())?;
    emit(&text)?;
    Ok(())
}

/// One table row per artifact directory; missing pieces are collected by
/// name instead of failing fast so the user sees everything at once.
fn report_row(dir: &Path, missing: &mut Vec<String>) -> Result<Option<ReportRow>> {
    let config_path = dir.join(CONFIG_FILE);
    if !config_path.is_file() {
        missing.push(config_path.display().to_string());
        return Ok(None);
    }
    let cfg = ExperimentConfig::from_path(&config_path)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let layout = Layout {
        exp_dir: dir.to_path_buf(),
    };
    let seeds = layout.completed_seeds();
    if seeds.is_empty() {
        missing.push(format!("{}: no completed trials", dir.display()));
        return Ok(None);
    }
    let mut reports = Vec::new();
    for seed in seeds {
        let matrix_path = layout.seed_dir(seed).join(MATRIX_FILE);
        if !matrix_path.is_file() {
            missing.push(matrix_path.display().to_string());
            continue;
        }
        let matrix = AccuracyMatrix::from_csv(&read_file(&matrix_path)?)
            .map_err(|e| runtime_at(&matrix_path, e))?;
        reports.push(metrics::compute_report(&matrix)?);
    }
    if reports.is_empty() {
        return Ok(None);
    }
    Ok(Some(ReportRow {
        method: cfg.method.to_spec()?.name(),
        trials: reports.len(),
        final_accuracy: reports.iter().map(|r| r.final_accuracy).sum::<f64>()
            / reports.len() as f64,
        global_forgetting: mean_opt(
            &reports.iter().map(|r| r.global_forgetting).collect::<Vec<_>>(),
        ),
        local_forgetting: mean_opt(
            &reports.iter().map(|r| r.local_forgetting).collect::<Vec<_>>(),
        ),
    }))
}

fn render_report(rows: &[ReportRow]) -> String {
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let name_w = rows
        .iter()
        .map(|r| r.method.len())
        .chain(["method".len()])
        .max()
        .unwrap_or(6);
    let mut text = format!(
        "{:<name_w$}  trials  A_final  F_G     F_L\n",
        "method"
    );
    for r in rows {
        text.push_str(&format!(
            "{:<name_w$}  {:>6}  {:.4}   {:<6}  {:<6}\n",
            r.method,
            r.trials,
            r.final_accuracy,
            fmt_opt(r.global_forgetting),
            fmt_opt(r.local_forgetting),
        ));
    }
    text
}

fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "method",
        "trials",
        "final_accuracy",
        "global_forgetting",
        "local_forgetting",
    ])
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        wtr.write_record([
            r.method.clone(),
            r.trials.to_string(),
            format!("{}", r.final_accuracy),
            fmt_opt(r.global_forgetting),
            fmt_opt(r.local_forgetting),
        ])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

// ── cka ──

pub fn cmd_cka(dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_path(&dir.join(CONFIG_FILE))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let layout = Layout {
        exp_dir: dir.to_path_buf(),
    };
    let seeds = layout.completed_seeds();
    if seeds.is_empty() {
        return Err(CliError::Runtime(format!(
            "no completed trials under {}",
            dir.display()
        )));
    }
    for seed in seeds {
        let sd = layout.seed_dir(seed);
        let manifest = Manifest::load(&sd.join(MANIFEST_FILE))?;

        let mut checkpoints = Vec::with_capacity(manifest.n_tasks);
        for task in 1..=manifest.n_tasks {
            let path = sd.join(checkpoint_name(task));
            if !path.is_file() {
                return Err(CliError::Runtime(format!(
                    "missing checkpoint {}",
                    path.display()
                )));
            }
            checkpoints.push(CheckpointModel::load(&path).map_err(|e| runtime_at(&path, e))?);
        }

        let probe_path = sd.join(PROBE_FILE);
        let probe_bytes =
            std::fs::read(&probe_path).map_err(|e| runtime_at(&probe_path, e))?;
        let tensors =
            container::decode(&probe_bytes).map_err(|e| runtime_at(&probe_path, e))?;
        let probe = tensors
            .iter()
            .find(|t| t.name == "probe")
            .ok_or_else(|| runtime_at(&probe_path, "no 'probe' tensor in container"))?;
        let probe = Tensor::matrix(probe.shape[0], probe.shape[1], probe.values.clone())?;

        let matrix_path = sd.join(MATRIX_FILE);
        let matrix = AccuracyMatrix::from_csv(&read_file(&matrix_path)?)
            .map_err(|e| runtime_at(&matrix_path, e))?;

        let taps = cfg
            .analysis
            .taps
            .clone()
            .unwrap_or_else(|| checkpoints[0].model().tap_names());
        let trajectory = cka_trajectory(
            &checkpoints,
            &probe,
            &taps,
            matrix.task_sizes()[0],
            Some(&matrix),
        )?;
        emit(&format!("# seed {seed}\n"))?;
        emit(&trajectory.to_csv()?)?;
    }
    Ok(())
}

// ── validate ──

pub fn cmd_validate(config_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    emit(&format!("config ok: digest {}\n", cfg.digest()))?;
    Ok(())
}
