use std::path::{Path, PathBuf};

use rayon::prelude::*;
use region_extract::acoustic_sim::{mix_scene, write_manifest, ManifestEntry};
use region_extract::dsp::{write_wav, WavFormat};
use serde::Serialize;

use crate::config::Config;
use crate::data::{derive_seed, resolve_corpus, scene_id, SceneSource, STREAM_SIMULATE};
use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub scenes: usize,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    /// Write only the manifest (scenes are re-simulated on demand).
    pub manifest_only: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub scenes: usize,
    pub q_counts: Vec<usize>,
    pub q_percent: Vec<f64>,
    pub manifest: PathBuf,
}

pub fn run(args: &SimulateArgs) -> Result<SimulateSummary> {
    let cfg = Config::load(args.config.as_deref())?;
    let source = SceneSource::new(&cfg.simulation, resolve_corpus(args.corpus.as_deref())?)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let wav_dir = args.out.join("wav");
    if !args.manifest_only {
        std::fs::create_dir_all(&wav_dir).map_err(|e| CliError::Data(format!("{}: {e}", wav_dir.display())))?;
    }
    let entries: Vec<ManifestEntry> = (0..args.scenes)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let id = scene_id(i);
            let scene = source.scene(derive_seed(args.seed, STREAM_SIMULATE, i as u64))?;
            let (mixture, target) = if args.manifest_only {
                (None, None)
            } else {
                let audio = mix_scene(&scene)?;
                let sr = scene.room.sample_rate;
                let mix = Path::new("wav").join(format!("{id}_mix.wav"));
                let tgt = Path::new("wav").join(format!("{id}_target.wav"));
                write_wav(args.out.join(&mix), &audio.mixture, sr, WavFormat::Float32)?;
                let target =
                    ndarray::Array2::from_shape_vec((1, audio.target.len()), audio.target).expect("row vector");
                write_wav(args.out.join(&tgt), &target, sr, WavFormat::Float32)?;
                (Some(mix), Some(tgt))
            };
            Ok(ManifestEntry {
                id,
                scene,
                mixture,
                target,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = args.out.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    let mut q_counts = vec![0usize; 3];
    for e in &entries {
        let q = e.scene.q.min(2);
        q_counts[q] += 1;
    }
    let n = entries.len().max(1) as f64;
    Ok(SimulateSummary {
        scenes: entries.len(),
        q_percent: q_counts.iter().map(|&c| 100.0 * c as f64 / n).collect(),
        q_counts,
        manifest,
    })
}
