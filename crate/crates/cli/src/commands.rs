//! Subcommand implementations.

use std::io::Write;
use std::path::Path;

use labelnoise::bmm;
use labelnoise::data::{load_dataset, DataFormat, Split};
use labelnoise::model::Checkpoint;
use labelnoise::noise::{self, NoiseSpec};
use labelnoise::training::{
    evaluate, run_experiment, sub_seed, ExperimentSpec, MetricsReport, TrainingError,
};

use crate::config::RunConfig;
use crate::CliError;

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn from_training_error(e: TrainingError) -> CliError {
    match e {
        TrainingError::InvalidConfig(msg) => CliError::Usage(format!("invalid config: {msg}")),
        other => CliError::Runtime(other.to_string()),
    }
}

/// Runs one training experiment. Artifacts are staged in a temporary
/// directory and moved into the final output directory only on success, so
/// failures leave no partial outputs behind. `poison_clean_labels` is the
/// no-peeking audit switch; it is not a config key and never appears in
/// resolved_config.
pub fn run_single_train(
    config: &RunConfig,
    poison_clean_labels: bool,
    quiet: bool,
) -> Result<MetricsReport, CliError> {
    let train_config = config.train_config();
    train_config.validate().map_err(from_training_error)?;
    let noise_spec = config.noise_spec()?;
    let data_spec = config.data_spec()?;
    let out_dir = config.out_dir()?;

    let parent = out_dir.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        std::fs::create_dir_all(parent)
            .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    let staging = match parent {
        Some(parent) => tempfile::TempDir::new_in(parent),
        None => tempfile::TempDir::new_in("."),
    }
    .map_err(|e| runtime(format!("cannot create staging directory: {e}")))?;

    let spec = ExperimentSpec {
        config: train_config,
        noise: noise_spec,
        data: data_spec,
        out_dir: staging.path().to_path_buf(),
        poison_clean_labels,
    };
    std::fs::write(staging.path().join("resolved_config"), config.to_config_text())
        .map_err(|e| runtime(format!("cannot write resolved_config: {e}")))?;
    let report = run_experiment(&spec).map_err(from_training_error)?;

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    for entry in std::fs::read_dir(staging.path())
        .map_err(|e| runtime(format!("cannot read staging directory: {e}")))?
    {
        let entry = entry.map_err(|e| runtime(e.to_string()))?;
        let target = out_dir.join(entry.file_name());
        std::fs::rename(entry.path(), &target)
            .map_err(|e| runtime(format!("cannot move {} into place: {e}", target.display())))?;
    }
    if !quiet {
        println!(
            "best={:.4} last={:.4} gap={:.4}",
            report.best_test_accuracy, report.last_test_accuracy, report.gap
        );
    }
    Ok(report)
}

pub fn cmd_inject(
    input: &Path,
    format: DataFormat,
    spec: &NoiseSpec,
    output: &Path,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let dataset = load_dataset(input, format, Split::Train)
        .map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let (noisy, report) = noise::inject(&dataset, spec).map_err(|e| runtime(e.to_string()))?;
    noise::write_noisy_dataset(&noisy, output).map_err(|e| runtime(e.to_string()))?;
    let report_path = match report_path {
        Some(p) => p.to_path_buf(),
        None => output
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_default()
            .join("noise_report.json"),
    };
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| runtime(format!("cannot serialize noise report: {e}")))?;
    text.push('\n');
    std::fs::write(&report_path, text)
        .map_err(|e| runtime(format!("cannot write {}: {e}", report_path.display())))?;
    println!(
        "flipped={} of {} (realized noise fraction {:.4})",
        report.flipped_count,
        noisy.len(),
        report.realized_noise_fraction
    );
    Ok(())
}

pub fn cmd_fit_bmm(input: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "id,raw_loss" => {}
        Some(other) => {
            return Err(runtime(format!(
                "expected header \"id,raw_loss\", got {other:?}"
            )))
        }
        None => return Err(runtime("empty loss CSV")),
    }
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, loss) = line.split_once(',').ok_or_else(|| {
            runtime(format!("line {}: expected \"id,raw_loss\"", idx + 2))
        })?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| runtime(format!("line {}: bad id {id:?}", idx + 2)))?;
        let loss: f64 = loss
            .trim()
            .parse()
            .map_err(|_| runtime(format!("line {}: bad raw_loss {loss:?}", idx + 2)))?;
        ids.push(id);
        raw.push(loss);
    }
    if raw.len() < 10 {
        return Err(runtime(format!(
            "need at least 10 loss rows to fit a mixture, got {}",
            raw.len()
        )));
    }
    let normalized = bmm::normalize_losses(&raw).map_err(|e| runtime(e.to_string()))?;
    if normalized.degenerate {
        return Err(runtime(
            "all losses are identical; a two-component mixture cannot be fit (degenerate input)",
        ));
    }
    let mixture = bmm::fit_bmm(&normalized.values).map_err(|e| runtime(e.to_string()))?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let record = labelnoise::training::BmmFileRecord {
        lambda_c: mixture.lambda_c,
        lambda_n: mixture.lambda_n,
        alpha_c: mixture.alpha_c,
        beta_c: mixture.beta_c,
        alpha_n: mixture.alpha_n,
        beta_n: mixture.beta_n,
        fit_log_likelihood: mixture.fit_log_likelihood,
        iterations_run: mixture.iterations_run,
        converged: mixture.converged,
        degenerate: false,
    };
    let mut text = serde_json::to_string_pretty(&record)
        .map_err(|e| runtime(format!("cannot serialize mixture: {e}")))?;
    text.push('\n');
    std::fs::write(out_dir.join("bmm.json"), text)
        .map_err(|e| runtime(format!("cannot write bmm.json: {e}")))?;

    let scored_path = out_dir.join("losses_scored.csv");
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&scored_path)
            .map_err(|e| runtime(format!("cannot write {}: {e}", scored_path.display())))?,
    );
    writeln!(out, "id,raw_loss,normalized_loss,posterior").map_err(|e| runtime(e.to_string()))?;
    for ((id, r), n) in ids.iter().zip(&raw).zip(&normalized.values) {
        let posterior = bmm::posterior_clean(&mixture, *n);
        writeln!(out, "{id},{r},{n},{posterior}").map_err(|e| runtime(e.to_string()))?;
    }
    out.flush().map_err(|e| runtime(e.to_string()))?;
    println!(
        "lambda_c={:.4} clean_mean={:.4} noisy_mean={:.4} iterations={} converged={}",
        mixture.lambda_c,
        mixture.clean_mean(),
        mixture.noisy_mean(),
        mixture.iterations_run,
        mixture.converged
    );
    Ok(())
}

struct SweepRow {
    t0: usize,
    beta: f64,
    result: Result<MetricsReport, String>,
}

/// Runs the grid, one cell per (t0, beta) pair, each with a sub-seed derived
/// from the master seed and the cell coordinates. Cell failures are recorded
/// and the sweep continues.
pub fn cmd_sweep(
    base: &RunConfig,
    grid_t0: &[usize],
    grid_beta: &[f64],
) -> Result<(), CliError> {
    let sweep_dir = base.out_dir()?;
    std::fs::create_dir_all(&sweep_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", sweep_dir.display())))?;
    let master_seed = base.seed;
    let mut rows = Vec::new();
    for &t0 in grid_t0 {
        for &beta in grid_beta {
            let mut cell = base.clone();
            cell.t0 = t0;
            cell.beta = beta;
            cell.seed = sub_seed(master_seed, &format!("sweep/t0={t0}/beta={beta}"));
            cell.out_dir = Some(sweep_dir.join(format!("cell_t0{t0}_beta{beta}")));
            let result = run_single_train(&cell, false, true).map_err(|e| e.to_string());
            if let Err(msg) = &result {
                eprintln!("cell t0={t0} beta={beta} failed: {msg}");
            }
            rows.push(SweepRow { t0, beta, result });
        }
    }

    let summary_path = sweep_dir.join("sweep_summary.csv");
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&summary_path)
            .map_err(|e| runtime(format!("cannot write {}: {e}", summary_path.display())))?,
    );
    writeln!(out, "t0,beta,best_val,best,last,gap,status").map_err(|e| runtime(e.to_string()))?;
    for row in &rows {
        match &row.result {
            Ok(r) => writeln!(
                out,
                "{},{},{},{},{},{},ok",
                row.t0,
                row.beta,
                r.best_val_accuracy,
                r.best_test_accuracy,
                r.last_test_accuracy,
                r.gap
            ),
            Err(_) => writeln!(out, "{},{},,,,,error", row.t0, row.beta),
        }
        .map_err(|e| runtime(e.to_string()))?;
    }
    out.flush().map_err(|e| runtime(e.to_string()))?;

    // Model selection stays on validation accuracy; the test column is
    // reported but never used to pick a cell.
    let selected = rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            row.result
                .as_ref()
                .ok()
                .map(|r| (i, r.best_val_accuracy))
        })
        .fold(None::<(usize, f64)>, |best, (i, val)| match best {
            Some((_, bv)) if bv >= val => best,
            _ => Some((i, val)),
        })
        .map(|(i, _)| i);

    if let Some(i) = selected {
        let row = &rows[i];
        let report = row.result.as_ref().expect("selected cell succeeded");
        let selected_json = serde_json::json!({
            "t0": row.t0,
            "beta": row.beta,
            "best_val_accuracy": report.best_val_accuracy,
            "best_test_accuracy": report.best_test_accuracy,
            "last_test_accuracy": report.last_test_accuracy,
            "gap": report.gap,
        });
        let mut text = serde_json::to_string_pretty(&selected_json)
            .map_err(|e| runtime(e.to_string()))?;
        text.push('\n');
        std::fs::write(sweep_dir.join("selected.json"), text)
            .map_err(|e| runtime(e.to_string()))?;
        println!(
            "selected t0={} beta={} best_val={:.4} best={:.4} last={:.4} gap={:.4}",
            row.t0,
            row.beta,
            report.best_val_accuracy,
            report.best_test_accuracy,
            report.last_test_accuracy,
            report.gap
        );
    } else {
        eprintln!("warning: every sweep cell failed");
    }
    Ok(())
}

pub fn cmd_synth(args: &crate::SynthArgs) -> Result<(), CliError> {
    match args.kind.as_str() {
        "trec" => {
            let mut spec = labelnoise::synth::TrecLikeSpec {
                num_examples: args.num,
                seed: args.seed,
                unique_tokens: !args.no_unique_tokens,
                uid_start: args.uid_start,
                ..Default::default()
            };
            if let Some(v) = args.p_own {
                spec.p_own = v;
            }
            if let Some(v) = args.p_other {
                spec.p_other = v;
            }
            labelnoise::synth::write_trec_like(&spec, &args.out)
                .map_err(|e| runtime(format!("cannot write {}: {e}", args.out.display())))?;
        }
        "agnews" => {
            let mut spec = labelnoise::synth::AgNewsLikeSpec {
                num_examples: args.num,
                seed: args.seed,
                ..Default::default()
            };
            if let Some(v) = args.ap_fraction {
                spec.ap_fraction = v;
            }
            if let Some(v) = args.reuters_fraction {
                spec.reuters_fraction = v;
            }
            labelnoise::synth::write_agnews_like(&spec, &args.out)
                .map_err(|e| runtime(format!("cannot write {}: {e}", args.out.display())))?;
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown synth kind {other:?} (expected trec or agnews)"
            )))
        }
    }
    println!("wrote {} ({} examples)", args.out.display(), args.num);
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, format: DataFormat) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| runtime(e.to_string()))?;
    let dataset = load_dataset(data, format, Split::Test)
        .map_err(|e| runtime(format!("{}: {e}", data.display())))?;
    let dataset = dataset.with_vocab(std::sync::Arc::new(ckpt.vocab.clone()));
    for e in &dataset.examples {
        if e.clean_label >= ckpt.num_classes {
            return Err(runtime(format!(
                "example {} has label {} but the checkpoint was trained with {} classes",
                e.id, e.clean_label, ckpt.num_classes
            )));
        }
    }
    let accuracy = evaluate(&ckpt.classifier, &dataset).map_err(|e| runtime(e.to_string()))?;
    println!("accuracy={accuracy:.4} ({} examples)", dataset.len());
    Ok(())
}
