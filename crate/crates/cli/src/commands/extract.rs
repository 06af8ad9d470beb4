use std::path::{Path, PathBuf};

use ndarray::Array2;
use region_extract::dsp::{read_wav, write_wav, WavFormat};
use region_extract::geometry::{QueryRegion, RegionKind};
use region_extract::network::{compose_conical, load_checkpoint, ConicalScheme, Model, Variant};

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct ExtractArgs {
    pub checkpoints: Vec<PathBuf>,
    pub input: PathBuf,
    pub query: String,
    pub output: PathBuf,
    pub scheme: ConicalScheme,
}

pub struct Models {
    pub a: Option<Model>,
    pub d: Option<Model>,
}

impl Models {
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut models = Models { a: None, d: None };
        for p in paths {
            let (model, _, _) = load_checkpoint(p)?;
            let slot = match model.config.variant {
                Variant::A => &mut models.a,
                Variant::D => &mut models.d,
            };
            if slot.is_some() {
                return Err(CliError::Config(format!(
                    "{}: two checkpoints of the same variant",
                    p.display()
                )));
            }
            *slot = Some(model);
        }
        Ok(models)
    }

    pub fn single(model: Model) -> Self {
        match model.config.variant {
            Variant::A => Models {
                a: Some(model),
                d: None,
            },
            Variant::D => Models {
                a: None,
                d: Some(model),
            },
        }
    }

    fn need<'a>(model: &'a Option<Model>, what: &str) -> Result<&'a Model> {
        model
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("this query needs a {what} checkpoint")))
    }

    /// Routes `query` to the A model, the D model, or their composition.
    pub fn extract(&self, mixture: &Array2<f64>, query: &QueryRegion, scheme: ConicalScheme) -> Result<Vec<f64>> {
        Ok(match query.kind {
            RegionKind::Angular => Self::need(&self.a, "angular (A)")?.extract(mixture, query)?.estimate,
            RegionKind::Spherical | RegionKind::Ring => {
                Self::need(&self.d, "distance (D)")?.extract(mixture, query)?.estimate
            }
            RegionKind::Conical => compose_conical(
                Self::need(&self.a, "angular (A)")?,
                Self::need(&self.d, "distance (D)")?,
                mixture,
                query,
                scheme,
            )?,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.a
            .as_ref()
            .or(self.d.as_ref())
            .map_or(16_000, |m| m.config.stft.sample_rate)
    }
}

pub fn run(args: &ExtractArgs) -> Result<usize> {
    let query = QueryRegion::parse(&args.query)?;
    let models = Models::load(&args.checkpoints)?;
    let (mixture, sr) = read_wav(&args.input)?;
    if sr != models.sample_rate() {
        return Err(CliError::Data(format!(
            "{}: sample rate {sr}, model expects {}",
            args.input.display(),
            models.sample_rate()
        )));
    }
    let estimate = models.extract(&mixture, &query, args.scheme)?;
    write_mono(&args.output, &estimate, sr)?;
    Ok(estimate.len())
}

pub fn write_mono(path: &Path, x: &[f64], sr: u32) -> Result<()> {
    let data = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    write_wav(path, &data, sr, WavFormat::Float32)?;
    Ok(())
}
