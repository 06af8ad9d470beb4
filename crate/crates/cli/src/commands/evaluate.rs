use std::path::{Path, PathBuf};

use rayon::prelude::*;
use region_extract::acoustic_sim::{mix_scene, read_manifest, ManifestEntry, REFERENCE_MIC};
use region_extract::baselines::{run_baseline, BaselineSystem};
use region_extract::dsp::StftConfig;
use region_extract::metrics::{Report, UtteranceScore};
use region_extract::network::ConicalScheme;
use region_extract::spatial_features::SpatialConfig;

use super::extract::Models;
use super::train::write_atomic;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Model,
    Baseline(BaselineSystem),
}

impl std::str::FromStr for System {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "model" {
            return Ok(System::Model);
        }
        s.parse::<BaselineSystem>().map(System::Baseline).map_err(|_| {
            CliError::Config(format!(
                "unknown system '{s}' (model, das, irm-mvdr, csm-mvdr, mixture)"
            ))
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub manifest: PathBuf,
    pub system: System,
    pub checkpoints: Vec<PathBuf>,
    /// Writes `<out>.csv` and `<out>.json`.
    pub out: PathBuf,
    pub scheme: ConicalScheme,
}

pub fn score_entry(
    entry: &ManifestEntry,
    system: System,
    models: Option<&Models>,
    scheme: ConicalScheme,
) -> Result<UtteranceScore> {
    let audio = mix_scene(&entry.scene)?;
    let estimate = match system {
        System::Model => models.expect("models are loaded for the model system").extract(
            &audio.mixture,
            &entry.scene.query,
            scheme,
        )?,
        System::Baseline(b) => {
            let stft = StftConfig {
                sample_rate: entry.scene.room.sample_rate,
                ..StftConfig::default()
            };
            run_baseline(b, &entry.scene, &audio, &stft, SpatialConfig::default().sound_speed)?
        }
    };
    let mixture_ref = audio.mixture.row(REFERENCE_MIC).to_vec();
    Ok(UtteranceScore::evaluate(
        entry.id.clone(),
        audio.metadata.q,
        &mixture_ref,
        &audio.target,
        &estimate,
    )?)
}

pub fn evaluate_entries(
    entries: &[ManifestEntry],
    system: System,
    models: Option<&Models>,
    scheme: ConicalScheme,
    name: &str,
) -> Result<Report> {
    let rows = entries
        .par_iter()
        .map(|e| score_entry(e, system, models, scheme))
        .collect::<Result<Vec<_>>>()?;
    let mut report = Report::new(name);
    report.rows = rows;
    Ok(report)
}

pub fn baseline_name(b: BaselineSystem) -> &'static str {
    match b {
        BaselineSystem::Mixture => "mixture",
        BaselineSystem::Das => "das",
        BaselineSystem::IrmMvdr => "irm-mvdr",
        BaselineSystem::CsmMvdr => "csm-mvdr",
    }
}

pub fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

pub fn run(args: &EvaluateArgs) -> Result<Report> {
    let entries = read_manifest(&args.manifest)?;
    let models = match args.system {
        System::Model => {
            if args.checkpoints.is_empty() {
                return Err(CliError::Config(
                    "--system model needs at least one --checkpoint".into(),
                ));
            }
            Some(Models::load(&args.checkpoints)?)
        }
        System::Baseline(_) => None,
    };
    let name = match args.system {
        System::Model => "model".to_string(),
        System::Baseline(b) => baseline_name(b).to_string(),
    };
    let report = evaluate_entries(&entries, args.system, models.as_ref(), args.scheme, &name)?;
    write_atomic(&with_extension(&args.out, "csv"), report.to_csv().as_bytes())?;
    let json = serde_json::to_vec_pretty(&report.summary_json()).map_err(region_extract::error::Error::from)?;
    write_atomic(&with_extension(&args.out, "json"), &json)?;
    Ok(report)
}
