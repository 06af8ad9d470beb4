use std::path::{Path, PathBuf};

use region_extract::acoustic_sim::{
    fixed_family_scene, mix_scene, random_scene, Corpus, ManifestEntry, SceneAudio, SceneSpec, SimConfig,
};
use region_extract::dsp::read_wav;
use region_extract::geometry::RegionKind;
use region_extract::network::{Example, ModelConfig, Variant};

use crate::config::{Profile, SimSection};
use crate::error::{CliError, Result};

pub const CORPUS_ENV: &str = "RSX_CORPUS";

/// Independent per-item seed derived from a master seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_SIMULATE: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_INIT: u64 = 4;

/// `--corpus` if given, else the environment variable, else synthetic sources.
pub fn resolve_corpus(flag: Option<&Path>) -> Result<Option<Corpus>> {
    let root: Option<PathBuf> = flag
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CORPUS_ENV).map(PathBuf::from));
    match root {
        None => Ok(None),
        Some(dir) => {
            let corpus = Corpus::from_dir(&dir)?;
            if corpus.speech.is_empty() {
                return Err(CliError::Data(format!("{}: no speech/*.wav files", dir.display())));
            }
            Ok(Some(corpus))
        }
    }
}

pub struct SceneSource {
    pub section: SimSection,
    pub config: SimConfig,
    pub corpus: Option<Corpus>,
}

impl SceneSource {
    pub fn new(section: &SimSection, corpus: Option<Corpus>) -> Result<Self> {
        Ok(Self {
            section: section.clone(),
            config: section.sim_config()?,
            corpus,
        })
    }

    pub fn scene(&self, seed: u64) -> Result<SceneSpec> {
        let spec = match self.section.profile {
            Profile::FixedFamily => {
                let sr = self.config.sample_rate;
                let len = (self.config.duration.0 * sr as f64).round() as usize;
                fixed_family_scene(&self.config.array, sr, len, seed)?
            }
            _ => random_scene(self.section.scene_profile(), &self.config, seed, self.corpus.as_ref())?,
        };
        Ok(spec)
    }
}

pub fn check_compatible(model: &ModelConfig, scene: &SceneSpec) -> Result<()> {
    if model.array != scene.array {
        return Err(CliError::Config("scene array differs from the model's array".into()));
    }
    if model.stft.sample_rate != scene.room.sample_rate {
        return Err(CliError::Config(format!(
            "scene sample rate {} differs from the model's {}",
            scene.room.sample_rate, model.stft.sample_rate
        )));
    }
    let ok = match model.variant {
        Variant::A => scene.query.kind == RegionKind::Angular,
        Variant::D => scene.query.kind == RegionKind::Spherical,
    };
    if !ok {
        return Err(CliError::Config(format!(
            "{:?} models train on {} queries, not {}",
            model.variant,
            if model.variant == Variant::A {
                "angular"
            } else {
                "spherical"
            },
            scene.query.kind
        )));
    }
    Ok(())
}

pub fn example(id: String, scene: &SceneSpec, audio: SceneAudio) -> Example {
    Example {
        id,
        q: audio.metadata.q,
        mixture: audio.mixture,
        target: audio.target,
        query: scene.query,
    }
}

/// Audio for a manifest entry: WAV files when present, otherwise re-simulated.
pub fn entry_example(entry: &ManifestEntry, base: &Path) -> Result<Example> {
    match (&entry.mixture, &entry.target) {
        (Some(m), Some(t)) => {
            let (mixture, _) = read_wav(base.join(m))?;
            let (target, _) = read_wav(base.join(t))?;
            Ok(Example {
                id: entry.id.clone(),
                mixture,
                target: target.row(0).to_vec(),
                query: entry.scene.query,
                q: entry.scene.q,
            })
        }
        _ => Ok(example(entry.id.clone(), &entry.scene, mix_scene(&entry.scene)?)),
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}
