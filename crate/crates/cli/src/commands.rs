use std::path::{Path, PathBuf};

use hetfl::orchestrator::{build_partition, load_source, run_experiment, write_atomic, DatasetSource, ExperimentConfig};
use hetfl::Error;
use log::info;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => core_exit_code(e),
            CliError::Threads(_) => 2,
            CliError::Path { .. } | CliError::Artifact { .. } | CliError::Csv(_) => 4,
        }
    }
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_divergence() => 3,
        Error::Stage { source, .. } => core_exit_code(source),
        Error::Io(_) | Error::Json(_) | Error::Format { .. } => 4,
        _ => 2,
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Read the config, failing with the path when it cannot be opened.
fn load_config(path: &Path, dataset: Option<PathBuf>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    if !path.is_file() {
        return Err(CliError::Path {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
        });
    }
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(d) = dataset {
        config.dataset = DatasetSource::Path(d);
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn partition(config: &Path, out: &Path, dataset: Option<PathBuf>, seed: Option<u64>) -> CliResult<()> {
    let config = load_config(config, dataset, seed)?;
    let data = load_source(&config.dataset)?;
    let public = config.partition.public_dataset.as_ref().map(load_source).transpose()?;
    let partition = build_partition(&config, &data, public.as_ref())?;
    partition.validate(&data, Some(config.partition.samples_per_device))?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Path { path: dir.to_path_buf(), source })?;
    }
    write_atomic(out, partition.to_json()?.as_bytes())?;
    println!(
        "{} devices, {} public samples -> {}",
        partition.devices.len(),
        partition.public.len(),
        out.display()
    );
    Ok(())
}

pub fn run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
    ablations: &[String],
    dataset: Option<PathBuf>,
) -> CliResult<()> {
    let mut config = load_config(config, dataset, seed)?;
    for a in ablations {
        config.apply_ablation(a)?;
    }
    config.validate()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    info!("running {} for {} rounds into {}", config.method_tag(), config.rounds, out.display());
    let summary = run_experiment::<f32>(config, out)?;
    let fmt_acc: Vec<String> = summary.final_accuracy.iter().map(|a| format!("{a:.4}")).collect();
    let converged = match &summary.converged {
        None => "n/a".to_string(),
        Some(c) => c
            .iter()
            .map(|r| r.map_or("none".to_string(), |t| t.to_string()))
            .collect::<Vec<_>>()
            .join(";"),
    };
    println!(
        "{}: {} rounds, final accuracy [{}], converged [{}], {:.3} MB -> {}",
        summary.tag,
        summary.rounds,
        fmt_acc.join(", "),
        converged,
        summary.cumulative_bytes as f64 / 1e6,
        out.display()
    );
    Ok(())
}
