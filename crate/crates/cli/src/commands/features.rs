use std::path::PathBuf;

use region_extract::dsp::{read_wav, stft, StftConfig};
use region_extract::geometry::{enumerate_pairs, MicArray, PairSelection};
use region_extract::spatial_features::FeaturePack;
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct FeaturesArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub array: String,
    pub pairs: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct FeatureConfig<'a> {
    array: &'a MicArray,
    pairs: &'a PairSelection,
    stft: StftConfig,
}

pub fn run(args: &FeaturesArgs) -> Result<[usize; 3]> {
    let array = MicArray::load(&args.array)?;
    let (signal, sr) = read_wav(&args.input)?;
    if signal.nrows() != array.num_mics() {
        return Err(CliError::Data(format!(
            "{} has {} channels, array '{}' has {} mics",
            args.input.display(),
            signal.nrows(),
            args.array,
            array.num_mics()
        )));
    }
    let stft_cfg = StftConfig {
        sample_rate: sr,
        ..StftConfig::default()
    };
    let selection = args.pairs.clone().map_or(PairSelection::All, PairSelection::Subset);
    let pairs = enumerate_pairs(&array, &selection)?;
    let spec = stft(&signal, &stft_cfg)?;
    let pack = FeaturePack::compute(&spec, &pairs)?;
    let config = FeatureConfig {
        array: &array,
        pairs: &selection,
        stft: stft_cfg,
    };
    pack.dump(&args.out, &config)?;
    let s = pack.ipd.shape();
    Ok([s[0], s[1], s[2]])
}
