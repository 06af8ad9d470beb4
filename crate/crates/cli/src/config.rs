use std::path::Path;

use region_extract::acoustic_sim::{NoisePreset, RoomPreset, SceneProfile, SimConfig};
use region_extract::dsp::StftConfig;
use region_extract::geometry::{MicArray, PairSelection};
use region_extract::network::{AdamWConfig, ModelConfig, Variant};
use region_extract::region_features::{AggregationMethod, BandScheme, SamplingStrategy};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub simulation: SimSection,
    pub model: ModelSection,
    pub training: TrainSection,
    pub evaluation: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Angular,
    Spherical,
    Conical,
    /// Two fixed speakers in an anechoic room with angular queries.
    FixedFamily,
}

impl std::str::FromStr for Profile {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angular" => Ok(Self::Angular),
            "spherical" => Ok(Self::Spherical),
            "conical" => Ok(Self::Conical),
            "fixed_family" | "fixed-family" => Ok(Self::FixedFamily),
            other => Err(CliError::Config(format!("unknown profile '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub profile: Profile,
    /// Room preset name.
    pub room: String,
    pub t60: Option<(f64, f64)>,
    pub noise: NoisePreset,
    /// Array preset name or position file.
    pub array: String,
    pub sample_rate: u32,
    pub duration: Option<(f64, f64)>,
    pub speech_count: Option<(usize, usize)>,
    pub speech_sir_db: Option<(f64, f64)>,
    pub snr_db: Option<(f64, f64)>,
    pub noise_count: Option<(usize, usize)>,
    pub angular_width: Option<(f64, f64)>,
    pub distance_threshold: Option<(f64, f64)>,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            profile: Profile::Angular,
            room: "default".into(),
            t60: None,
            noise: NoisePreset::Training,
            array: "circ8_5cm".into(),
            sample_rate: 16_000,
            duration: None,
            speech_count: None,
            speech_sir_db: None,
            snr_db: None,
            noise_count: None,
            angular_width: None,
            distance_threshold: None,
        }
    }
}

impl SimSection {
    pub fn array(&self) -> Result<MicArray> {
        Ok(MicArray::load(&self.array)?)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut room = RoomPreset::named(&self.room)?;
        if let Some(t60) = self.t60 {
            room.t60 = t60;
        }
        let mut cfg = SimConfig {
            room,
            noise: self.noise,
            array: self.array()?,
            sample_rate: self.sample_rate,
            ..SimConfig::default()
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set!(
            duration,
            speech_count,
            speech_sir_db,
            snr_db,
            noise_count,
            angular_width,
            distance_threshold
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene_profile(&self) -> SceneProfile {
        match self.profile {
            Profile::Angular | Profile::FixedFamily => SceneProfile::Angular,
            Profile::Spherical => SceneProfile::Spherical,
            Profile::Conical => SceneProfile::Conical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub variant: Variant,
    pub aggregation: Option<AggregationMethod>,
    pub sampling: Option<SamplingStrategy>,
    pub pairs: Option<PairSelection>,
    pub bands: Option<BandScheme>,
    pub stft: Option<StftConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            variant: Variant::A,
            aggregation: None,
            sampling: None,
            pairs: None,
            bands: None,
            stft: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, array: MicArray) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset, self.variant, array)?;
        if let Some(a) = self.aggregation {
            cfg.aggregation = a;
        }
        if let Some(s) = self.sampling {
            cfg.sampling = s;
        }
        if let Some(p) = &self.pairs {
            cfg.pairs = p.clone();
        }
        if let Some(b) = &self.bands {
            cfg.bands = b.clone();
        }
        if let Some(s) = self.stft {
            cfg.stft = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Steps per epoch for the learning-rate schedule in on-the-fly mode.
    pub steps_per_epoch: usize,
    pub log_every: usize,
    /// 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 0.01,
            steps_per_epoch: 1000,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> Result<AdamWConfig> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(CliError::Config(
                "batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CliError::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out scenes per ablation row.
    pub scenes: usize,
    pub repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { scenes: 16, repeats: 3 }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::parse("[simulation]\nprofil = \"angular\"\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(Config::parse("[trainig]\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = Config::parse(
            "[simulation]\nprofile = \"spherical\"\nduration = [0.5, 0.5]\n[model]\nvariant = \"D\"\nsampling = { kind = \"fixed_interval\", step = 10.0 }\n[training]\nsteps = 5\n",
        )
        .unwrap();
        assert_eq!(c.simulation.profile, Profile::Spherical);
        assert_eq!(c.training.steps, 5);
        assert_eq!(c.training.batch_size, 1);
        let sim = c.simulation.sim_config().unwrap();
        assert_eq!(sim.duration, (0.5, 0.5));
        let model = c.model.model_config(sim.array.clone()).unwrap();
        assert_eq!(model.variant, Variant::D);
        assert_eq!(model.sampling, SamplingStrategy::FixedInterval { step: 10.0 });
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = Config::parse("[simulation]\nroom = \"cathedral\"\n").unwrap();
        assert_eq!(
            CliError::from(c.simulation.sim_config().unwrap_err().into_core()).exit_code(),
            2
        );
        let c =
            Config::parse("[model]\naggregation = \"tac\"\nsampling = { kind = \"fixed_interval\", step = 10.0 }\n")
                .unwrap();
        assert!(c.model.model_config(MicArray::preset("circ8_5cm").unwrap()).is_err());
    }

    impl CliError {
        fn into_core(self) -> region_extract::error::Error {
            match self {
                CliError::Core(e) => e,
                other => panic!("expected a core error, got {other:?}"),
            }
        }
    }
}
