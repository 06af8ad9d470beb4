use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use region_extract::acoustic_sim::{mix_scene, read_manifest, ManifestEntry};
use region_extract::network::{load_checkpoint, save_checkpoint, train_step, AdamW, Example, Model};

use crate::config::{Config, TrainSection};
use crate::data::{
    check_compatible, derive_seed, entry_example, example, resolve_corpus, SceneSource, STREAM_INIT, STREAM_TRAIN,
};
use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub steps: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

pub enum DataSource {
    OnTheFly(Box<SceneSource>),
    Manifest { entries: Vec<ManifestEntry>, base: PathBuf },
}

impl DataSource {
    /// Examples for `step`; depends only on `(seed, step)`.
    pub fn batch(&self, model: &Model, seed: u64, step: u64, size: usize) -> Result<Vec<Example>> {
        (0..size)
            .map(|i| {
                let index = step * size as u64 + i as u64;
                match self {
                    DataSource::OnTheFly(source) => {
                        let scene = source.scene(derive_seed(seed, STREAM_TRAIN, index))?;
                        check_compatible(&model.config, &scene)?;
                        Ok(example(format!("step{step}_{i}"), &scene, mix_scene(&scene)?))
                    }
                    DataSource::Manifest { entries, base } => {
                        let n = entries.len() as u64;
                        let epoch = index / n;
                        let mut order: Vec<usize> = (0..entries.len()).collect();
                        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TRAIN, epoch)));
                        let entry = &entries[order[(index % n) as usize]];
                        check_compatible(&model.config, &entry.scene)?;
                        entry_example(entry, base)
                    }
                }
            })
            .collect()
    }

    pub fn epoch(&self, section: &TrainSection, step: u64) -> usize {
        match self {
            DataSource::OnTheFly(_) => (step / section.steps_per_epoch as u64) as usize,
            DataSource::Manifest { entries, .. } => (step * section.batch_size as u64 / entries.len() as u64) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub smoothed: f64,
}

/// Bias-corrected exponential moving average.
#[derive(Debug, Clone)]
pub struct Smoother {
    alpha: f64,
    value: f64,
    weight: f64,
}

impl Smoother {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            value: 0.0,
            weight: 0.0,
        }
    }

    pub fn push(&mut self, x: f64) -> f64 {
        self.value = (1.0 - self.alpha) * self.value + self.alpha * x;
        self.weight = (1.0 - self.alpha) * self.weight + self.alpha;
        self.value / self.weight
    }
}

/// Runs steps `start..end`, returning one log row per step.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &mut Model,
    opt: &mut AdamW,
    data: &DataSource,
    section: &TrainSection,
    seed: u64,
    start: u64,
    end: u64,
    mut on_step: impl FnMut(&Model, &AdamW, u64) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let mut smoother = Smoother::new(0.1);
    let mut rows = Vec::new();
    for step in start..end {
        let batch = data.batch(model, seed, step, section.batch_size)?;
        let epoch = data.epoch(section, step);
        let loss = train_step(model, opt, &batch, epoch)?;
        let smoothed = smoother.push(loss);
        if section.log_every > 0 && (step + 1) % section.log_every as u64 == 0 {
            log::info!("step {} loss {loss:.4} smoothed {smoothed:.4}", step + 1);
        }
        rows.push(LogRow {
            step: step + 1,
            loss,
            smoothed,
        });
        on_step(model, opt, step + 1)?;
    }
    Ok(rows)
}

pub fn data_source(cfg: &Config, manifest: Option<&Path>, corpus: Option<&Path>) -> Result<DataSource> {
    match manifest {
        Some(path) => {
            let entries = read_manifest(path)?;
            if entries.is_empty() {
                return Err(CliError::Data(format!("{}: empty manifest", path.display())));
            }
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok(DataSource::Manifest { entries, base })
        }
        None => Ok(DataSource::OnTheFly(Box::new(SceneSource::new(
            &cfg.simulation,
            resolve_corpus(corpus)?,
        )?))),
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,smoothed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.loss, r.smoothed);
    }
    out
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn run(args: &TrainArgs) -> Result<Vec<LogRow>> {
    let cfg = Config::load(args.config.as_deref())?;
    let mut section = cfg.training.clone();
    if let Some(s) = args.steps {
        section.steps = s;
    }
    let opt_cfg = section.optimizer()?;
    let model_cfg = cfg.model.model_config(cfg.simulation.array()?)?;
    let (mut model, mut opt, start) = match &args.resume {
        Some(path) => {
            let (model, opt, header) = load_checkpoint(path)?;
            if model.config != model_cfg {
                return Err(CliError::Config(format!(
                    "{}: checkpoint model differs from the config",
                    path.display()
                )));
            }
            let opt = opt.ok_or_else(|| CliError::Data(format!("{}: no optimizer state to resume", path.display())))?;
            (model, opt, header.step)
        }
        None => {
            let model = Model::new(model_cfg, derive_seed(args.seed, STREAM_INIT, 0))?;
            let opt = AdamW::new(opt_cfg, &model.params);
            (model, opt, 0)
        }
    };
    log::info!(
        "model has {} parameters, starting at step {start}",
        model.num_parameters()
    );
    let data = data_source(&cfg, args.manifest.as_deref(), args.corpus.as_deref())?;
    let end = start + section.steps as u64;
    let every = section.checkpoint_every as u64;
    let rows = train_loop(
        &mut model,
        &mut opt,
        &data,
        &section,
        args.seed,
        start,
        end,
        |m, o, step| {
            if every > 0 && step % every == 0 && step < end {
                save_checkpoint(&args.out, m, Some(o), step, data.epoch(&section, step))?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&args.out, &model, Some(&opt), end, data.epoch(&section, end))?;
    if let Some(log) = &args.log {
        write_atomic(log, log_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoother_is_bias_corrected() {
        let mut s = Smoother::new(0.1);
        assert_eq!(s.push(5.0), 5.0);
        assert!((s.push(5.0) - 5.0).abs() < 1e-12);
        let v = s.push(2.0);
        assert!(v < 5.0 && v > 2.0);
    }
}
