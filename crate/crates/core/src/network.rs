//! Multichannel band-split recurrent extraction network (A and D variants).
//!
//! Features for one utterance are computed outside the tape; everything from
//! the band input projections to the waveform estimate is recorded on it, so
//! gradients reach every parameter and, for the D variant, the distance input.

use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::dsp::{stft_with, Spectrogram, StftConfig, StftPlan};
use crate::error::{Error, Result};
use crate::geometry::{enumerate_pairs, MicArray, MicPair, PairSelection, QueryRegion, RegionKind};
use crate::nn::{BatchNorm, Graph, LayerNorm, Linear, Lstm, ParamGrads, Params};
use crate::region_features::{
    build_band_layout, clamp_distance, sample_directions, tdoa_order, AggregationMethod, Aggregator, BandLayout,
    BandScheme, Deg, SamplingStrategy,
};
use crate::spatial_features::{direction_feature_from_ipd, ild, ipd, SpatialConfig};
use crate::tensor_io::{load_container, save_container, NamedTensor};

pub const LOSS_LAMBDA: f64 = 0.01;
/// SNR cap of the Q > 0 loss, in dB.
pub const LOSS_SNR_CAP_DB: f64 = 60.0;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSXC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Angular queries: direction features aggregated into region descriptors.
    #[serde(alias = "a")]
    A,
    /// Distance queries: learned distance embeddings.
    #[serde(alias = "d")]
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialInput {
    Ipd,
    Ild,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Residual block count `R`.
    pub blocks: usize,
    /// Feature dimension `H`.
    pub hidden: usize,
    /// Region feature dimension `P`.
    pub p: usize,
    pub bands: BandScheme,
    pub pairs: PairSelection,
    pub aggregation: AggregationMethod,
    pub sampling: SamplingStrategy,
    pub spatial_input: SpatialInput,
    pub stft: StftConfig,
    pub array: MicArray,
    pub spatial: SpatialConfig,
}

/// `(name, R, H, P, bands)` for the named presets.
pub const PRESETS: [(&str, usize, usize, usize, &str); 6] = [
    ("m", 8, 48, 16, "bs1"),
    ("s", 8, 36, 16, "bs1"),
    ("xs", 6, 32, 16, "bs2"),
    ("xxs", 5, 24, 16, "bs2"),
    ("xxxs", 4, 16, 12, "bs2"),
    ("toy", 2, 8, 4, "explicit"),
];

impl ModelConfig {
    pub fn preset(name: &str, variant: Variant, array: MicArray) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let key = key.trim_start_matches("bsrnn-");
        let &(_, blocks, hidden, p, bands) = PRESETS
            .iter()
            .find(|row| row.0 == key)
            .ok_or_else(|| Error::Config(format!("unknown model preset '{name}'")))?;
        let spatial_input = match variant {
            Variant::A => SpatialInput::Ipd,
            Variant::D => SpatialInput::Ild,
        };
        if key == "toy" {
            let m = array.num_mics();
            let pairs = if m > 4 {
                PairSelection::Subset((0..m).step_by(m / 4).take(4).collect())
            } else {
                PairSelection::All
            };
            return Ok(Self {
                variant,
                blocks,
                hidden,
                p,
                bands: BandScheme::Explicit(vec![(0, 8), (8, 20), (20, 40), (40, 65)]),
                pairs,
                aggregation: AggregationMethod::RnnLoop,
                sampling: SamplingStrategy::FixedNumber { count: 4 },
                spatial_input,
                stft: Self::toy_stft(),
                array,
                spatial: SpatialConfig::default(),
            });
        }
        Ok(Self {
            variant,
            blocks,
            hidden,
            p,
            bands: if bands == "bs1" {
                BandScheme::Bs1
            } else {
                BandScheme::Bs2
            },
            pairs: PairSelection::All,
            aggregation: AggregationMethod::RnnLoop,
            sampling: SamplingStrategy::default(),
            spatial_input,
            stft: StftConfig::default(),
            array,
            spatial: SpatialConfig::default(),
        })
    }

    /// Short-window analysis used by the toy preset (65 bins).
    pub fn toy_stft() -> StftConfig {
        StftConfig {
            sample_rate: 16_000,
            window_len: 128,
            hop: 64,
            fft_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.p == 0 {
            return Err(Error::Config("blocks, hidden and p must be positive".into()));
        }
        self.stft.validate()?;
        self.sampling.validate()?;
        if self.aggregation.needs_fixed_views() && !matches!(self.sampling, SamplingStrategy::FixedNumber { .. }) {
            return Err(Error::Config(format!(
                "{} aggregation needs fixed_number sampling",
                self.aggregation.name()
            )));
        }
        Ok(())
    }
}

struct BandInput {
    spec_norm: BatchNorm,
    spec_fc: Linear,
    spatial_norm: BatchNorm,
    spatial_fc: Linear,
    region_norm: Option<BatchNorm>,
    region_fc: Linear,
}

struct Block {
    time_norm: LayerNorm,
    time_rnn: Lstm,
    time_fc: Linear,
    band_norm: LayerNorm,
    band_fwd: Lstm,
    band_bwd: Lstm,
    band_fc: Linear,
}

struct MaskHead {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

enum RegionEncoder {
    Direction(Aggregator),
    Distance(Deg),
}

/// Per-utterance inputs, computed outside the tape.
#[derive(Debug, Clone)]
pub struct Features {
    /// Reference-channel STFT `[T × F]`.
    pub reference: Array2<Complex64>,
    /// Per band `[T × 2·BW]`: real parts then imaginary parts.
    pub spectral: Vec<Tensor>,
    /// Per band: IPD as `cos | sin` per pair, or ILD per pair.
    pub spatial: Vec<Tensor>,
    pub region: RegionInput,
    pub signal_len: usize,
}

#[derive(Debug, Clone)]
pub enum RegionInput {
    /// Per band, per view `[T × BW]` direction features (in aggregation order).
    Views(Vec<Vec<Tensor>>),
    /// Distance threshold in meters.
    Distance(f64),
}

/// Handles to the taped forward outputs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Fused band features `[K·T × H]`, band-major.
    pub fused: Var,
    /// `[T × F]` real and imaginary mask parts.
    pub mask_re: Var,
    pub mask_im: Var,
    /// Masked reference spectrogram `[T × 2F]` (real | imaginary).
    pub zhat: Var,
    /// Waveform estimate `[1 × L]`.
    pub estimate: Var,
    /// Distance input node (D variant).
    pub distance: Option<Var>,
}

/// Inference output.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub estimate: Vec<f64>,
    pub mask: Array2<Complex64>,
    pub zhat: Array2<Complex64>,
}

pub struct Model {
    pub config: ModelConfig,
    pub layout: BandLayout,
    pub pairs: Vec<MicPair>,
    pub params: Params,
    plan: StftPlan,
    inputs: Vec<BandInput>,
    region: RegionEncoder,
    blocks: Vec<Block>,
    heads: Vec<MaskHead>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.num_trainable())
            .finish()
    }
}

fn tensor_from(a: &Array2<f64>) -> Tensor {
    Tensor::from_vec(a.nrows(), a.ncols(), a.iter().copied().collect())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = build_band_layout(&config.bands, &config.stft)?;
        let pairs = enumerate_pairs(&config.array, &config.pairs)?;
        let plan = StftPlan::new(config.stft)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (h, p, k) = (config.hidden, config.p, layout.num_bands());

        let region = match config.variant {
            Variant::A => RegionEncoder::Direction(Aggregator::new(
                &mut params,
                "region.agg",
                config.aggregation,
                &layout,
                p,
                &mut rng,
            )),
            Variant::D => RegionEncoder::Distance(Deg::new(&mut params, "region.deg", k, p, &mut rng)),
        };
        let views = config.sampling.num_views(0.0);
        let spatial_per_bin = match config.spatial_input {
            SpatialInput::Ipd => 2 * pairs.len(),
            SpatialInput::Ild => pairs.len(),
        };
        let inputs = (0..k)
            .map(|b| {
                let bw = layout.width(b);
                let name = format!("input.band{b}");
                let region_dim = match &region {
                    RegionEncoder::Direction(agg) => agg.descriptor_dim(b, views),
                    RegionEncoder::Distance(_) => p,
                };
                BandInput {
                    spec_norm: BatchNorm::new(&mut params, &format!("{name}.spec_norm"), 2 * bw),
                    spec_fc: Linear::new(&mut params, &format!("{name}.spec_fc"), 2 * bw, h, &mut rng),
                    spatial_norm: BatchNorm::new(&mut params, &format!("{name}.spatial_norm"), spatial_per_bin * bw),
                    spatial_fc: Linear::new(
                        &mut params,
                        &format!("{name}.spatial_fc"),
                        spatial_per_bin * bw,
                        h,
                        &mut rng,
                    ),
                    region_norm: matches!(region, RegionEncoder::Direction(_))
                        .then(|| BatchNorm::new(&mut params, &format!("{name}.region_norm"), region_dim)),
                    region_fc: Linear::new(&mut params, &format!("{name}.region_fc"), region_dim, h, &mut rng),
                }
            })
            .collect();
        let blocks = (0..config.blocks)
            .map(|r| {
                let name = format!("block{r}");
                Block {
                    time_norm: LayerNorm::new(&mut params, &format!("{name}.time_norm"), h),
                    time_rnn: Lstm::new(&mut params, &format!("{name}.time_rnn"), h, 2 * h, &mut rng),
                    time_fc: Linear::new(&mut params, &format!("{name}.time_fc"), 2 * h, h, &mut rng),
                    band_norm: LayerNorm::new(&mut params, &format!("{name}.band_norm"), h),
                    band_fwd: Lstm::new(&mut params, &format!("{name}.band_fwd"), h, 2 * h, &mut rng),
                    band_bwd: Lstm::new(&mut params, &format!("{name}.band_bwd"), h, 2 * h, &mut rng),
                    band_fc: Linear::new(&mut params, &format!("{name}.band_fc"), 4 * h, h, &mut rng),
                }
            })
            .collect();
        let heads = (0..k)
            .map(|b| {
                let bw = layout.width(b);
                let name = format!("mask.band{b}");
                MaskHead {
                    norm: LayerNorm::new(&mut params, &format!("{name}.norm"), h),
                    fc1: Linear::new(&mut params, &format!("{name}.fc1"), h, 4 * h, &mut rng),
                    fc2: Linear::new(&mut params, &format!("{name}.fc2"), 4 * h, 4 * bw, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            layout,
            pairs,
            params,
            plan,
            inputs,
            region,
            blocks,
            heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn plan(&self) -> &StftPlan {
        &self.plan
    }

    /// Checks that `query` is one this variant answers in a single pass.
    pub fn check_query(&self, query: &QueryRegion) -> Result<()> {
        let ok = match self.config.variant {
            Variant::A => query.kind == RegionKind::Angular,
            Variant::D => query.kind == RegionKind::Spherical,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "{} query is incompatible with the {:?} model",
                query.kind, self.config.variant
            )))
        }
    }

    pub fn analyze(&self, mixture: &Array2<f64>) -> Result<Spectrogram> {
        if mixture.nrows() != self.config.array.num_mics() {
            return Err(Error::Shape(format!(
                "mixture has {} channels, model expects {}",
                mixture.nrows(),
                self.config.array.num_mics()
            )));
        }
        stft_with(&self.plan, mixture)
    }

    /// Builds the constant inputs for `spec` and `query`.
    pub fn features(&self, spec: &Spectrogram, query: &QueryRegion) -> Result<Features> {
        self.check_query(query)?;
        if spec.config != self.config.stft {
            return Err(Error::Config(
                "spectrogram STFT settings differ from the model's".into(),
            ));
        }
        let (t, f) = (spec.num_frames(), spec.num_bins());
        let reference = spec.data.index_axis(ndarray::Axis(0), 0).to_owned();
        let spectral = (0..self.layout.num_bands())
            .map(|k| {
                let r = self.layout.range(k);
                let bw = r.len();
                Tensor::from_fn(t, 2 * bw, |ti, j| {
                    let c = reference[[ti, r.start + j % bw]];
                    if j < bw {
                        c.re
                    } else {
                        c.im
                    }
                })
            })
            .collect();
        let spatial = match self.config.spatial_input {
            SpatialInput::Ipd => self.band_pairs(&ipd(spec, &self.pairs)?, true),
            SpatialInput::Ild => self.band_pairs(&ild(spec, &self.pairs)?, false),
        };
        let region = match self.config.variant {
            Variant::A => {
                let mut azimuths = sample_directions(query, self.config.sampling)?;
                let elevation = 0.5 * (query.elevation.0 + query.elevation.1);
                if matches!(
                    self.config.aggregation,
                    AggregationMethod::Rnn | AggregationMethod::RnnLoop
                ) {
                    let order = tdoa_order(&azimuths, elevation, &self.pairs);
                    azimuths = order.iter().map(|&i| azimuths[i]).collect();
                }
                let phase = ipd(spec, &self.pairs)?;
                let views: Vec<Array2<f64>> = azimuths
                    .iter()
                    .map(|&az| {
                        direction_feature_from_ipd(
                            &phase,
                            &self.pairs,
                            az,
                            elevation,
                            &spec.config,
                            &self.config.spatial,
                        )
                    })
                    .collect::<Result<_>>()?;
                RegionInput::Views(
                    (0..self.layout.num_bands())
                        .map(|k| {
                            let r = self.layout.range(k);
                            views
                                .iter()
                                .map(|v| tensor_from(&v.slice(ndarray::s![.., r.clone()]).to_owned()))
                                .collect()
                        })
                        .collect(),
                )
            }
            Variant::D => RegionInput::Distance(clamp_distance(query.distance.1)?),
        };
        debug_assert_eq!(reference.dim(), (t, f));
        Ok(Features {
            reference,
            spectral,
            spatial,
            region,
            signal_len: spec.signal_len,
        })
    }

    fn band_pairs(&self, x: &Array3<f64>, trig: bool) -> Vec<Tensor> {
        let (pairs, t) = (x.shape()[0], x.shape()[1]);
        (0..self.layout.num_bands())
            .map(|k| {
                let r = self.layout.range(k);
                let bw = r.len();
                let per_pair = if trig { 2 * bw } else { bw };
                Tensor::from_fn(t, pairs * per_pair, |ti, j| {
                    let (p, rest) = (j / per_pair, j % per_pair);
                    let v = x[[p, ti, r.start + rest % bw]];
                    match (trig, rest < bw) {
                        (false, _) => v,
                        (true, true) => v.cos(),
                        (true, false) => v.sin(),
                    }
                })
            })
            .collect()
    }

    /// Sum of the spectral, spatial and region paths per band, stacked band-major `[K·T × H]`.
    pub fn band_split_fuse(&self, g: &mut Graph, feats: &Features) -> Result<(Var, Option<Var>)> {
        let k = self.layout.num_bands();
        if feats.spectral.len() != k || feats.spatial.len() != k {
            return Err(Error::Shape(format!(
                "features carry {} bands, model has {k}",
                feats.spectral.len()
            )));
        }
        let t = feats.reference.nrows();
        let mut distance = None;
        let mut fused = Vec::with_capacity(k);
        for (b, input) in self.inputs.iter().enumerate() {
            let check = |what: &str, tensor: &Tensor, cols: usize| {
                if tensor.shape() != (t, cols) {
                    Err(Error::Shape(format!(
                        "band {b} {what} input is {:?}, expected ({t}, {cols})",
                        tensor.shape()
                    )))
                } else {
                    Ok(())
                }
            };
            check("spectral", &feats.spectral[b], input.spec_fc.input)?;
            check("spatial", &feats.spatial[b], input.spatial_fc.input)?;
            let x = g.constant(feats.spectral[b].clone());
            let x = input.spec_norm.forward(g, x);
            let spec_path = input.spec_fc.forward(g, x);
            let s = g.constant(feats.spatial[b].clone());
            let s = input.spatial_norm.forward(g, s);
            let spatial_path = input.spatial_fc.forward(g, s);
            let sum = g.tape.add(spec_path, spatial_path);
            let sum = match (&self.region, &feats.region) {
                (RegionEncoder::Direction(agg), RegionInput::Views(views)) => {
                    let vars: Vec<Var> = views[b].iter().map(|v| g.constant(v.clone())).collect();
                    let desc = agg.forward(g, b, &vars)?;
                    if g.tape.shape(desc).1 != input.region_fc.input {
                        return Err(Error::Shape(format!(
                            "band {b} region descriptor width {} differs from {}",
                            g.tape.shape(desc).1,
                            input.region_fc.input
                        )));
                    }
                    let desc = input
                        .region_norm
                        .as_ref()
                        .expect("direction path is normalized")
                        .forward(g, desc);
                    let region_path = input.region_fc.forward(g, desc);
                    g.tape.add(sum, region_path)
                }
                (RegionEncoder::Distance(deg), RegionInput::Distance(d)) => {
                    let dv = *distance.get_or_insert_with(|| g.tape.leaf(Tensor::scalar(*d)));
                    let e = deg.forward(g, b, dv);
                    let region_path = input.region_fc.forward(g, e);
                    g.tape.add_row(sum, region_path)
                }
                _ => return Err(Error::Input("region input does not match the model variant".into())),
            };
            fused.push(sum);
        }
        Ok((g.tape.concat_rows(&fused), distance))
    }

    fn block_forward(&self, g: &mut Graph, block: &Block, x: Var, k: usize, t: usize) -> Var {
        // Across time: one unidirectional LSTM shared by all bands, bands as the batch.
        let normed = block.time_norm.forward(g, x);
        let steps: Vec<Var> = (0..t)
            .map(|ti| {
                let rows: Vec<usize> = (0..k).map(|b| b * t + ti).collect();
                g.tape.gather_rows(normed, &rows)
            })
            .collect();
        let hs = block.time_rnn.run(g, &steps);
        let stacked = g.tape.concat_rows(&hs);
        let band_major: Vec<usize> = (0..k).flat_map(|b| (0..t).map(move |ti| ti * k + b)).collect();
        let y = g.tape.gather_rows(stacked, &band_major);
        let y = block.time_fc.forward(g, y);
        let x = g.tape.add(x, y);

        // Across bands: bidirectional, frames as the batch.
        let normed = block.band_norm.forward(g, x);
        let steps: Vec<Var> = (0..k)
            .map(|b| {
                let rows: Vec<usize> = (b * t..(b + 1) * t).collect();
                g.tape.gather_rows(normed, &rows)
            })
            .collect();
        let fwd = block.band_fwd.run(g, &steps);
        let rev: Vec<Var> = steps.iter().rev().copied().collect();
        let mut bwd = block.band_bwd.run(g, &rev);
        bwd.reverse();
        let joined: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&a, &b)| g.tape.concat_cols(&[a, b]))
            .collect();
        let y = g.tape.concat_rows(&joined);
        let y = block.band_fc.forward(g, y);
        g.tape.add(x, y)
    }

    /// Records the full forward pass for `feats`.
    pub fn forward_graph(&self, g: &mut Graph, feats: &Features) -> Result<ForwardVars> {
        let (t, f) = feats.reference.dim();
        let k = self.layout.num_bands();
        let (fused, distance) = self.band_split_fuse(g, feats)?;
        let mut x = fused;
        for block in &self.blocks {
            x = self.block_forward(g, block, x, k, t);
        }
        let (mut mr, mut mi, mut zr, mut zi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (b, head) in self.heads.iter().enumerate() {
            let bw = self.layout.width(b);
            let range = self.layout.range(b);
            let rows: Vec<usize> = (b * t..(b + 1) * t).collect();
            let xb = g.tape.gather_rows(x, &rows);
            let h = head.norm.forward(g, xb);
            let h = head.fc1.forward(g, h);
            let h = g.tape.tanh(h);
            let h = head.fc2.forward(g, h);
            let value = g.tape.slice_cols(h, 0, 2 * bw);
            let gate = g.tape.slice_cols(h, 2 * bw, 4 * bw);
            let gate = g.tape.sigmoid(gate);
            let mask = g.tape.mul(value, gate);
            let m_re = g.tape.slice_cols(mask, 0, bw);
            let m_im = g.tape.slice_cols(mask, bw, 2 * bw);
            let yr = g.constant(Tensor::from_fn(t, bw, |ti, j| {
                feats.reference[[ti, range.start + j]].re
            }));
            let yi = g.constant(Tensor::from_fn(t, bw, |ti, j| {
                feats.reference[[ti, range.start + j]].im
            }));
            let a = g.tape.mul(m_re, yr);
            let bb = g.tape.mul(m_im, yi);
            zr.push(g.tape.sub(a, bb));
            let c = g.tape.mul(m_re, yi);
            let d = g.tape.mul(m_im, yr);
            zi.push(g.tape.add(c, d));
            mr.push(m_re);
            mi.push(m_im);
        }
        let mask_re = g.tape.concat_cols(&mr);
        let mask_im = g.tape.concat_cols(&mi);
        let zr = g.tape.concat_cols(&zr);
        let zi = g.tape.concat_cols(&zi);
        let zhat = g.tape.concat_cols(&[zr, zi]);
        debug_assert_eq!(g.tape.shape(zhat), (t, 2 * f));
        let estimate = istft_var(g, &self.plan, zhat, feats.signal_len);
        Ok(ForwardVars {
            fused,
            mask_re,
            mask_im,
            zhat,
            estimate,
            distance,
        })
    }

    /// Eval-mode extraction of the region `query` from `mixture` (`[M × L]`).
    ///
    /// D models answer ring queries by subtracting the inner sphere's output
    /// from the outer sphere's output.
    pub fn extract(&self, mixture: &Array2<f64>, query: &QueryRegion) -> Result<Extraction> {
        if self.config.variant == Variant::D && query.kind == RegionKind::Ring {
            return self.extract_ring(mixture, query);
        }
        let spec = self.analyze(mixture)?;
        self.extract_spec(&spec, query)
    }

    pub fn extract_spec(&self, spec: &Spectrogram, query: &QueryRegion) -> Result<Extraction> {
        let feats = self.features(spec, query)?;
        let mut g = Graph::new(&self.params, false);
        let vars = self.forward_graph(&mut g, &feats)?;
        let (t, f) = feats.reference.dim();
        let complex = |re: &Tensor, im: &Tensor| {
            Array2::from_shape_fn((t, f), |(i, j)| Complex64::new(re.get(i, j), im.get(i, j)))
        };
        let z = g.value(vars.zhat);
        let zr = Tensor::from_fn(t, f, |i, j| z.get(i, j));
        let zi = Tensor::from_fn(t, f, |i, j| z.get(i, f + j));
        let out = Extraction {
            estimate: g.value(vars.estimate).data().to_vec(),
            mask: complex(g.value(vars.mask_re), g.value(vars.mask_im)),
            zhat: complex(&zr, &zi),
        };
        if let Some(bad) = out.estimate.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical("estimate", format!("non-finite output sample {bad}")));
        }
        Ok(out)
    }

    /// `output([0, outer]) − output([0, inner])` at waveform level.
    pub fn extract_ring(&self, mixture: &Array2<f64>, query: &QueryRegion) -> Result<Extraction> {
        let (outer, inner) = query
            .ring_bounds()
            .ok_or_else(|| Error::Input(format!("{} query is not a ring", query.kind)))?;
        let spec = self.analyze(mixture)?;
        let a = self.extract_spec(&spec, &outer)?;
        let b = self.extract_spec(&spec, &inner)?;
        Ok(Extraction {
            estimate: a.estimate.iter().zip(&b.estimate).map(|(x, y)| x - y).collect(),
            mask: &a.mask - &b.mask,
            zhat: &a.zhat - &b.zhat,
        })
    }
}

fn frames_from_tensor(x: &Tensor) -> Array2<Complex64> {
    let f = x.cols() / 2;
    Array2::from_shape_fn((x.rows(), f), |(t, k)| Complex64::new(x.get(t, k), x.get(t, f + k)))
}

fn tensor_from_frames(frames: &Array2<Complex64>) -> Tensor {
    let (t, f) = frames.dim();
    Tensor::from_fn(t, 2 * f, |i, j| {
        if j < f {
            frames[[i, j]].re
        } else {
            frames[[i, j - f]].im
        }
    })
}

/// ISTFT of a `[T × 2F]` (real | imaginary) node into a `[1 × len]` waveform node.
pub fn istft_var(g: &mut Graph, plan: &StftPlan, zhat: Var, len: usize) -> Var {
    let frames = frames_from_tensor(g.value(zhat));
    let mut out = ndarray::Array1::zeros(len);
    plan.synthesize(frames.view(), out.view_mut());
    let (t, f) = frames.dim();
    let plan = plan.clone();
    g.tape
        .linear_map(zhat, Tensor::from_vec(1, len, out.to_vec()), move |grad| {
            let mut gf = Array2::zeros((t, f));
            plan.synthesize_adjoint(ndarray::ArrayView1::from(grad.data()), gf.view_mut());
            tensor_from_frames(&gf)
        })
}

/// STFT of a `[1 × len]` waveform node into a `[T × 2F]` (real | imaginary) node.
pub fn stft_var(g: &mut Graph, plan: &StftPlan, x: Var) -> Var {
    let signal = g.value(x).data().to_vec();
    let len = signal.len();
    let t = plan.config().num_frames(len);
    let mut frames = Array2::zeros((t, plan.config().num_bins()));
    plan.analyze(ndarray::ArrayView1::from(&signal), frames.view_mut());
    let plan = plan.clone();
    g.tape.linear_map(x, tensor_from_frames(&frames), move |grad| {
        let gf = frames_from_tensor(grad);
        Tensor::from_vec(1, len, plan.analyze_adjoint(gf.view(), len))
    })
}

/// Applies a complex mask to the reference spectrogram and resynthesizes.
pub fn apply_mask(
    plan: &StftPlan,
    reference: &Array2<Complex64>,
    mask: &Array2<Complex64>,
    len: usize,
) -> Result<Vec<f64>> {
    if reference.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrogram {:?}",
            mask.dim(),
            reference.dim()
        )));
    }
    let z = reference * mask;
    let mut out = ndarray::Array1::zeros(len);
    plan.synthesize(z.view(), out.view_mut());
    Ok(out.to_vec())
}

/// Records the training loss: `λ·‖STFT(ẑ)‖₁` when `q = 0`, otherwise
/// `10·log10(‖z − ẑ‖² / ‖z‖²)` floored at −60 dB.
pub fn loss_var(g: &mut Graph, plan: &StftPlan, estimate: Var, target: &[f64], q: usize, lambda: f64) -> Result<Var> {
    let len = g.tape.shape(estimate).1;
    if target.len() != len {
        return Err(Error::Shape(format!(
            "target has {} samples, estimate {len}",
            target.len()
        )));
    }
    if q == 0 {
        let spec = stft_var(g, plan, estimate);
        let a = g.tape.abs(spec);
        let s = g.tape.sum(a);
        return Ok(g.tape.scale(s, lambda));
    }
    let energy: f64 = target.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::Input("Q > 0 needs a target with non-zero energy".into()));
    }
    let residual: f64 = g
        .value(estimate)
        .data()
        .iter()
        .zip(target)
        .map(|(e, z)| (z - e).powi(2))
        .sum();
    if residual <= energy * 10f64.powf(-LOSS_SNR_CAP_DB / 10.0) {
        return Ok(g.constant(Tensor::scalar(-LOSS_SNR_CAP_DB)));
    }
    let z = g.constant(Tensor::from_vec(1, len, target.to_vec()));
    let diff = g.tape.sub(estimate, z);
    let sq = g.tape.square(diff);
    let s = g.tape.sum(sq);
    let l = g.tape.ln(s);
    let db = g.tape.scale(l, 10.0 / std::f64::consts::LN_10);
    Ok(g.tape.add_scalar(db, -10.0 * energy.log10()))
}

/// Plain-value loss matching [`loss_var`].
pub fn loss(estimate: &[f64], target: &[f64], q: usize, lambda: f64, stft: &StftConfig) -> Result<f64> {
    let plan = StftPlan::new(*stft)?;
    let params = Params::new();
    let mut g = Graph::new(&params, false);
    let e = g.constant(Tensor::from_vec(1, estimate.len(), estimate.to_vec()));
    let l = loss_var(&mut g, &plan, e, target, q, lambda)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplies the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.98,
            decay_every: 2,
        }
    }
}

/// AdamW with decoupled weight decay over the trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Params) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let every = self.config.decay_every.max(1);
        self.config.lr * self.config.decay_factor.powi((epoch / every) as i32)
    }

    /// One update; fails before touching any parameter if a gradient is non-finite.
    pub fn update(&mut self, params: &mut Params, grads: &ParamGrads, epoch: usize) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::numerical(
                        params.name(id),
                        format!("non-finite gradient at element {i}"),
                    ));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let lr = self.lr_at(epoch);
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !params.entry(id).trainable {
                continue;
            }
            let n = params.value(id).len();
            let (rows, cols) = params.value(id).shape();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let g = grads.get(id);
            let p = params.value_mut(id).data_mut();
            for j in 0..n {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                let mj = &mut m.data_mut()[j];
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let step = (m.data()[j] / bias1) / ((v.data()[j] / bias2).sqrt() + c.eps);
                p[j] -= lr * (step + c.weight_decay * p[j]);
            }
        }
        Ok(())
    }

    fn to_named(&self, params: &Params) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, id) in params.ids().enumerate() {
            for (tag, state) in [("m", &self.m[i]), ("v", &self.v[i])] {
                if let Some(t) = state {
                    out.push(NamedTensor {
                        name: format!("adam.{tag}.{}", params.name(id)),
                        shape: vec![t.rows(), t.cols()],
                        data: t.data().to_vec(),
                    });
                }
            }
        }
        out
    }

    fn load_named(&mut self, params: &Params, tensors: &[NamedTensor]) {
        for (i, id) in params.ids().enumerate() {
            for t in tensors {
                let Some(rest) = t.name.strip_prefix("adam.") else {
                    continue;
                };
                let (tag, name) = rest.split_at(1);
                if &name[1..] != params.name(id) {
                    continue;
                }
                let value = Some(Tensor::from_vec(t.shape[0], t.shape[1], t.data.clone()));
                if tag == "m" {
                    self.m[i] = value;
                } else {
                    self.v[i] = value;
                }
            }
        }
    }
}

/// One supervised utterance.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub mixture: Array2<f64>,
    pub target: Vec<f64>,
    pub query: QueryRegion,
    pub q: usize,
}

/// Loss and parameter gradients for one example; BatchNorm running statistics
/// are updated in place.
pub fn example_gradients(model: &mut Model, example: &Example, lambda: f64) -> Result<(f64, ParamGrads)> {
    let spec = model.analyze(&example.mixture)?;
    let feats = model.features(&spec, &example.query)?;
    let (value, grads, updates) = {
        let mut g = Graph::new(&model.params, true);
        let vars = model.forward_graph(&mut g, &feats)?;
        let l = loss_var(&mut g, &model.plan, vars.estimate, &example.target, example.q, lambda)?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::numerical("loss", format!("non-finite loss on {}", example.id)));
        }
        let (_, grads) = g.param_grads(l);
        (value, grads, std::mem::take(&mut g.stat_updates))
    };
    for (id, v) in updates {
        *model.params.value_mut(id) = v;
    }
    Ok((value, grads))
}

/// One optimizer step over `batch` (examples processed one at a time, gradients averaged).
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &[Example], epoch: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let mut total = 0.0;
    let mut acc: Option<ParamGrads> = None;
    for ex in batch {
        let (l, g) = example_gradients(model, ex, LOSS_LAMBDA)?;
        total += l;
        match acc.as_mut() {
            Some(a) => a.accumulate(&g),
            None => acc = Some(g),
        }
    }
    let mut grads = acc.expect("non-empty batch");
    grads.scale(1.0 / batch.len() as f64);
    opt.update(&mut model.params, &grads, epoch)?;
    Ok(total / batch.len() as f64)
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn five_point(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
}

/// Compares backpropagated gradients of the training loss with five-point differences:
/// a random direction plus `entries` random elements for every trainable tensor,
/// and the distance input for D models. Elements are drawn from those whose gradient
/// is at least 1% of the tensor's RMS gradient.
pub fn gradient_check(
    model: &Model,
    example: &Example,
    entries: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    use rand::Rng;
    let spec = model.analyze(&example.mixture)?;
    let feats = model.features(&spec, &example.query)?;
    let eval = |params: &Params, feats: &Features| -> Result<f64> {
        let mut g = Graph::new(params, true);
        let vars = model.forward_graph(&mut g, feats)?;
        let l = loss_var(
            &mut g,
            &model.plan,
            vars.estimate,
            &example.target,
            example.q,
            LOSS_LAMBDA,
        )?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new(&model.params, true);
    let vars = model.forward_graph(&mut g, &feats)?;
    let l = loss_var(
        &mut g,
        &model.plan,
        vars.estimate,
        &example.target,
        example.q,
        LOSS_LAMBDA,
    )?;
    let (all, grads) = g.param_grads(l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in model.params.ids() {
        if !model.params.entry(id).trainable {
            continue;
        }
        let n = model.params.value(id).len();
        let (rows, cols) = model.params.value(id).shape();
        let grad = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols));
        let mut directions: Vec<(String, Vec<f64>)> = Vec::new();
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        directions.push((String::from("direction"), dir.iter().map(|v| v / norm).collect()));
        let rms = (grad.data().iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let resolvable: Vec<usize> = (0..n).filter(|&j| grad.data()[j].abs() >= 1e-2 * rms).collect();
        for _ in 0..entries.min(resolvable.len()) {
            let j = resolvable[rng.gen_range(0..resolvable.len())];
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            directions.push((format!("[{j}]"), e));
        }
        for (label, dir) in directions {
            let analytic: f64 = grad.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = model.params.clone();
                for (v, d) in p.value_mut(id).data_mut().iter_mut().zip(&dir) {
                    *v += delta * d;
                }
                eval(&p, &feats)
            };
            let numeric = five_point(shifted, step)?;
            out.push(GradCheck {
                name: format!("{} {label}", model.params.name(id)),
                analytic,
                numeric,
            });
        }
    }
    if let (Some(dv), RegionInput::Distance(d)) = (vars.distance, &feats.region) {
        let analytic = all.get(dv).map_or(0.0, |t| t.item());
        let shifted = |delta: f64| {
            let mut f = feats.clone();
            f.region = RegionInput::Distance(d + delta);
            eval(&model.params, &f)
        };
        let numeric = five_point(shifted, step)?;
        out.push(GradCheck {
            name: "distance".into(),
            analytic,
            numeric,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConicalScheme {
    /// Per-bin minimum-magnitude selection between the two outputs.
    Intersection,
    /// Distance model first, angular model on its multichannel output.
    DistanceThenAngle,
    /// Angular model first, distance model on its multichannel output.
    AngleThenDistance,
}

fn masked_multichannel(model: &Model, spec: &Spectrogram, mask: &Array2<Complex64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((spec.num_channels(), spec.signal_len));
    for (m, mut row) in out.outer_iter_mut().enumerate() {
        let z = &spec.data.index_axis(ndarray::Axis(0), m) * mask;
        model.plan.synthesize(z.view(), row.view_mut());
    }
    Ok(out)
}

/// Conical extraction from an A model (azimuth window) and a D model (radius).
pub fn compose_conical(
    a_model: &Model,
    d_model: &Model,
    mixture: &Array2<f64>,
    query: &QueryRegion,
    scheme: ConicalScheme,
) -> Result<Vec<f64>> {
    if query.kind != RegionKind::Conical {
        return Err(Error::Input(format!(
            "conical composition needs a conical query, got {}",
            query.kind
        )));
    }
    if a_model.config.variant != Variant::A || d_model.config.variant != Variant::D {
        return Err(Error::Config("compose_conical needs an A model and a D model".into()));
    }
    if a_model.config.stft != d_model.config.stft {
        return Err(Error::Config("A and D models use different STFT settings".into()));
    }
    let angular = QueryRegion::angular_2d(query.azimuth, query.elevation)?;
    let spherical = QueryRegion::spherical(query.distance.1)?;
    let spec = a_model.analyze(mixture)?;
    match scheme {
        ConicalScheme::Intersection => {
            let a = a_model.extract_spec(&spec, &angular)?;
            let d = d_model.extract_spec(&spec, &spherical)?;
            let z = ndarray::Zip::from(&a.zhat).and(&d.zhat).map_collect(|x, y| {
                if x.norm_sqr() <= y.norm_sqr() {
                    *x
                } else {
                    *y
                }
            });
            let mut out = ndarray::Array1::zeros(mixture.ncols());
            a_model.plan.synthesize(z.view(), out.view_mut());
            Ok(out.to_vec())
        }
        ConicalScheme::DistanceThenAngle => {
            let first = d_model.extract_spec(&spec, &spherical)?;
            let stage = masked_multichannel(d_model, &spec, &first.mask)?;
            Ok(a_model.extract(&stage, &angular)?.estimate)
        }
        ConicalScheme::AngleThenDistance => {
            let first = a_model.extract_spec(&spec, &angular)?;
            let stage = masked_multichannel(a_model, &spec, &first.mask)?;
            Ok(d_model.extract(&stage, &spherical)?.estimate)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub band_bounds: Vec<usize>,
    pub step: u64,
    pub epoch: usize,
    pub optimizer: Option<AdamWConfig>,
    pub optimizer_step: u64,
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: Option<&AdamW>, step: u64, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        band_bounds: model.layout.bounds().to_vec(),
        step,
        epoch,
        optimizer: opt.map(|o| o.config),
        optimizer_step: opt.map_or(0, |o| o.step),
    };
    let mut tensors = model.params.to_named();
    if let Some(o) = opt {
        tensors.extend(o.to_named(&model.params));
    }
    save_container(path, CHECKPOINT_MAGIC, &serde_json::to_value(&header)?, &tensors)
}

/// Loads a model, its optimizer state (when saved) and the header.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<AdamW>, CheckpointHeader)> {
    let (header, tensors) = load_container(path, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_value(header)
        .map_err(|e| Error::Data(format!("{}: bad checkpoint header: {e}", path.display())))?;
    let mut model = Model::new(header.config.clone(), 0)?;
    if model.layout.bounds() != header.band_bounds.as_slice() {
        return Err(Error::Data("checkpoint band layout differs from its config".into()));
    }
    let (adam, weights): (Vec<NamedTensor>, Vec<NamedTensor>) =
        tensors.into_iter().partition(|t| t.name.starts_with("adam."));
    model.params.load_named(&weights)?;
    let opt = header.optimizer.map(|cfg| {
        let mut o = AdamW::new(cfg, &model.params);
        o.step = header.optimizer_step;
        o.load_named(&model.params, &adam);
        o
    });
    Ok((model, opt, header))
}
