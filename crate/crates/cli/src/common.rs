use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use thiserror::Error;

use csd_core::config::RunConfig;
use csd_core::data::{Manifest, load_image, save_image};
use csd_core::train::Checkpoint;
use csd_core::{CsdError, Image};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CsdError),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical abort.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) => match e {
                CsdError::Config(_) => 1,
                CsdError::NonFinite { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model.variant=arc_d`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    /// Applies the config file and then every `--set` on top of `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) -> CliResult {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text, path).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes `resolved.cfg` into `dir`.
pub fn echo_config(dir: &Path, text: &str) -> CliResult {
    write_text(&dir.join("resolved.cfg"), text)
}

/// Settings of a checkpoint as config text: model, optimizer, discriminator
/// and run settings.
pub fn checkpoint_config(ck: &Checkpoint) -> String {
    let mut pairs = ck.model.config().to_pairs();
    pairs.extend(csd_core::train::optimizer_pairs(&ck.optimizer.config));
    if let Some((d, _)) = &ck.disc {
        pairs.extend(d.config().to_pairs());
    }
    pairs.extend(ck.settings.iter().cloned());
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pgm" | "pnm")
    )
}

/// A single image file, or every PPM/PGM in a directory in name order.
pub fn input_images(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .ppm/.pgm images", input.display())));
    }
    Ok(files)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn load(path: &Path) -> CliResult<Image> {
    Ok(load_image(path)?)
}

pub fn save(path: &Path, img: &Image) -> CliResult {
    Ok(save_image(path, img)?)
}

pub fn load_manifest(path: &Path) -> CliResult<Manifest> {
    Ok(Manifest::load(path)?)
}

/// Worker count: `CSD_THREADS` when set, otherwise the available cores.
pub fn worker_count() -> usize {
    std::env::var("CSD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `job` over `items` on up to [`worker_count`] threads and returns the
/// results in input order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], job: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<O>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let done = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                let out = job(&items[k]);
                done.lock().expect("result slot")[k] = Some(out);
            });
        }
    });
    results.into_iter().map(|r| r.expect("every item ran")).collect()
}
