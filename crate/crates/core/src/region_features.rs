//! Direction sampling inside a query window, band layouts, view aggregation and
//! the distance embedding generator.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::geometry::{tdoa_distance, MicPair, QueryRegion};
use crate::nn::{Graph, Linear, Lstm, Params};

/// How azimuths are drawn from an angular window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplingStrategy {
    FixedInterval { step: f64 },
    FixedNumber { count: usize },
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::FixedNumber { count: 8 }
    }
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingStrategy::FixedInterval { step } if !(step > 0.0) => {
                Err(Error::Config(format!("sampling interval must be positive, got {step}")))
            }
            SamplingStrategy::FixedNumber { count } if count < 2 => {
                Err(Error::Config(format!("sampling count must be at least 2, got {count}")))
            }
            _ => Ok(()),
        }
    }

    /// View count for a window of `width` degrees.
    pub fn num_views(&self, width: f64) -> usize {
        match *self {
            SamplingStrategy::FixedInterval { step } => (width / step + 1e-9).floor() as usize + 1,
            SamplingStrategy::FixedNumber { count } => count,
        }
    }
}

/// Sampled azimuths in degrees, in window order (possibly beyond 180 for wrapped windows).
pub fn sample_directions(region: &QueryRegion, strategy: SamplingStrategy) -> Result<Vec<f64>> {
    strategy.validate()?;
    if !region.has_angular_window() {
        return Err(Error::Input(format!("{} query has no azimuth window", region.kind)));
    }
    let (lo, hi) = region.azimuth;
    Ok(sample_window(lo, hi, strategy))
}

pub(crate) fn sample_window(lo: f64, hi: f64, strategy: SamplingStrategy) -> Vec<f64> {
    let width = hi - lo;
    match strategy {
        SamplingStrategy::FixedNumber { count } => {
            (0..count).map(|n| lo + n as f64 * width / (count - 1) as f64).collect()
        }
        SamplingStrategy::FixedInterval { step } => {
            (0..strategy.num_views(width)).map(|n| lo + n as f64 * step).collect()
        }
    }
}

/// Indices ordering `azimuths` by increasing pair-averaged TDOA; ties keep window order.
pub fn tdoa_order(azimuths: &[f64], elevation: f64, pairs: &[MicPair]) -> Vec<usize> {
    let key = |az: f64| pairs.iter().map(|p| tdoa_distance(p, az, elevation)).sum::<f64>() / pairs.len().max(1) as f64;
    let keys: Vec<f64> = azimuths.iter().map(|&a| key(a)).collect();
    let mut order: Vec<usize> = (0..azimuths.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    order
}

/// Named or explicit subband partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandScheme {
    /// 10×100 Hz, 12×200 Hz, 8×500 Hz, then the remainder.
    Bs1,
    /// 5×200 Hz, 6×500 Hz, 4×1 kHz; the last band runs to Nyquist.
    Bs2,
    Full,
    /// Explicit `[start, end)` bin ranges.
    Explicit(Vec<(usize, usize)>),
    /// `count` bands of near-equal bin width.
    Uniform(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandLayout {
    /// Band boundaries in bins; band `k` is `bounds[k]..bounds[k + 1]`.
    bounds: Vec<usize>,
}

impl BandLayout {
    pub fn from_bounds(bounds: Vec<usize>, num_bins: usize) -> Result<Self> {
        if bounds.len() < 2 || bounds[0] != 0 || *bounds.last().unwrap() != num_bins {
            return Err(Error::Config(format!(
                "band boundaries must start at 0 and end at {num_bins}"
            )));
        }
        if let Some(w) = bounds.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("empty or reversed band [{}, {})", w[0], w[1])));
        }
        Ok(Self { bounds })
    }

    pub fn num_bands(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn num_bins(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.bounds[k]..self.bounds[k + 1]
    }

    pub fn width(&self, k: usize) -> usize {
        self.bounds[k + 1] - self.bounds[k]
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.num_bands()).map(|k| self.width(k)).collect()
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }
}

fn hz_layout(widths_hz: &[f64], remainder_band: bool, stft: &StftConfig) -> Result<BandLayout> {
    let f = stft.num_bins();
    let bin = stft.bin_width();
    let mut bounds = vec![0];
    let mut cum = 0.0;
    for w in widths_hz {
        cum += w;
        bounds.push(((cum / bin).round() as usize).min(f));
    }
    if remainder_band {
        bounds.push(f);
    } else {
        *bounds.last_mut().unwrap() = f;
    }
    BandLayout::from_bounds(bounds, f)
}

pub fn build_band_layout(scheme: &BandScheme, stft: &StftConfig) -> Result<BandLayout> {
    let f = stft.num_bins();
    match scheme {
        BandScheme::Bs1 => {
            let widths: Vec<f64> = [(10, 100.0), (12, 200.0), (8, 500.0)]
                .iter()
                .flat_map(|&(n, w)| std::iter::repeat_n(w, n))
                .collect();
            hz_layout(&widths, true, stft)
        }
        BandScheme::Bs2 => {
            let widths: Vec<f64> = [(5, 200.0), (6, 500.0), (4, 1000.0)]
                .iter()
                .flat_map(|&(n, w)| std::iter::repeat_n(w, n))
                .collect();
            hz_layout(&widths, false, stft)
        }
        BandScheme::Full => BandLayout::from_bounds(vec![0, f], f),
        BandScheme::Uniform(count) => {
            if *count == 0 || *count > f {
                return Err(Error::Config(format!("cannot split {f} bins into {count} bands")));
            }
            BandLayout::from_bounds((0..=*count).map(|k| k * f / count).collect(), f)
        }
        BandScheme::Explicit(ranges) => {
            if ranges.is_empty() {
                return Err(Error::Config("explicit band scheme is empty".into()));
            }
            let mut bounds = vec![ranges[0].0];
            for (i, &(start, end)) in ranges.iter().enumerate() {
                if start != *bounds.last().unwrap() {
                    let what = if start > *bounds.last().unwrap() {
                        "gap"
                    } else {
                        "overlap"
                    };
                    return Err(Error::Config(format!("{what} before band {i} starting at bin {start}")));
                }
                bounds.push(end);
            }
            BandLayout::from_bounds(bounds, f)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Concatenate,
    Tac,
    Taa,
    Rnn,
    RnnLoop,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 5] = [
        AggregationMethod::Concatenate,
        AggregationMethod::Tac,
        AggregationMethod::Taa,
        AggregationMethod::Rnn,
        AggregationMethod::RnnLoop,
    ];

    /// Descriptor width for `views` views of a `band_width`-bin band.
    pub fn descriptor_dim(&self, views: usize, band_width: usize, p: usize) -> usize {
        match self {
            AggregationMethod::Concatenate => views * band_width,
            AggregationMethod::Tac => views * p,
            AggregationMethod::Taa | AggregationMethod::Rnn => p,
            AggregationMethod::RnnLoop => 2 * p,
        }
    }

    /// Whether the descriptor width depends on the number of views.
    pub fn needs_fixed_views(&self) -> bool {
        matches!(self, AggregationMethod::Concatenate | AggregationMethod::Tac)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationMethod::Concatenate => "concatenate",
            AggregationMethod::Tac => "tac",
            AggregationMethod::Taa => "taa",
            AggregationMethod::Rnn => "rnn",
            AggregationMethod::RnnLoop => "rnn_loop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum BandAggregator {
    None,
    Mlp { hidden: Linear, out: Linear },
    Recurrent(Lstm),
}

/// Per-band learned aggregation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregator {
    pub method: AggregationMethod,
    pub p: usize,
    widths: Vec<usize>,
    bands: Vec<BandAggregator>,
}

impl Aggregator {
    pub fn new(
        params: &mut Params,
        prefix: &str,
        method: AggregationMethod,
        layout: &BandLayout,
        p: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bands = (0..layout.num_bands())
            .map(|k| {
                let bw = layout.width(k);
                let name = format!("{prefix}.band{k}");
                match method {
                    AggregationMethod::Concatenate => BandAggregator::None,
                    AggregationMethod::Tac | AggregationMethod::Taa => BandAggregator::Mlp {
                        hidden: Linear::new(params, &format!("{name}.fc1"), bw, p, rng),
                        out: Linear::new(params, &format!("{name}.fc2"), p, p, rng),
                    },
                    AggregationMethod::Rnn | AggregationMethod::RnnLoop => {
                        BandAggregator::Recurrent(Lstm::new(params, &format!("{name}.lstm"), bw, p, rng))
                    }
                }
            })
            .collect();
        Self {
            method,
            p,
            widths: layout.widths(),
            bands,
        }
    }

    pub fn descriptor_dim(&self, band: usize, views: usize) -> usize {
        self.method.descriptor_dim(views, self.widths[band], self.p)
    }

    /// Aggregates `views` (each `[T × BW_k]`, already in TDOA order for recurrent methods).
    pub fn forward(&self, g: &mut Graph, band: usize, views: &[Var]) -> Result<Var> {
        if views.is_empty() {
            return Err(Error::Input("aggregation needs at least one view".into()));
        }
        let bw = self.widths[band];
        if let Some(v) = views.iter().find(|v| g.tape.shape(**v).1 != bw) {
            return Err(Error::Shape(format!(
                "band {band} expects views of width {bw}, got {}",
                g.tape.shape(*v).1
            )));
        }
        let out = match (self.method, &self.bands[band]) {
            (AggregationMethod::Concatenate, _) => g.tape.concat_cols(views),
            (AggregationMethod::Tac, BandAggregator::Mlp { hidden, out }) => {
                let transformed: Vec<Var> = views.iter().map(|&v| mlp(g, hidden, out, v)).collect();
                g.tape.concat_cols(&transformed)
            }
            (AggregationMethod::Taa, BandAggregator::Mlp { hidden, out }) => {
                let mut acc = mlp(g, hidden, out, views[0]);
                for &v in &views[1..] {
                    let t = mlp(g, hidden, out, v);
                    acc = g.tape.add(acc, t);
                }
                g.tape.scale(acc, 1.0 / views.len() as f64)
            }
            (AggregationMethod::Rnn, BandAggregator::Recurrent(cell)) => *cell.run(g, views).last().expect("non-empty"),
            (AggregationMethod::RnnLoop, BandAggregator::Recurrent(cell)) => {
                let mut seq = views.to_vec();
                seq.push(views[0]);
                let hs = cell.run(g, &seq);
                g.tape.concat_cols(&hs[hs.len() - 2..])
            }
            _ => unreachable!("aggregator parameters match their method"),
        };
        Ok(out)
    }
}

fn mlp(g: &mut Graph, hidden: &Linear, out: &Linear, x: Var) -> Var {
    let h = hidden.forward(g, x);
    let h = g.tape.tanh(h);
    out.forward(g, h)
}

/// Aggregated region features, one `[T × D]` matrix per band.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptor {
    pub method: AggregationMethod,
    pub bands: Vec<Tensor>,
}

/// Aggregates plain per-band view matrices outside any training graph.
pub fn aggregate(params: &Params, aggregator: &Aggregator, views_per_band: &[Vec<Tensor>]) -> Result<RegionDescriptor> {
    let mut g = Graph::new(params, false);
    let mut bands = Vec::with_capacity(views_per_band.len());
    for (k, views) in views_per_band.iter().enumerate() {
        let vars: Vec<Var> = views.iter().map(|v| g.constant(v.clone())).collect();
        let out = aggregator.forward(&mut g, k, &vars)?;
        bands.push(g.value(out).clone());
    }
    Ok(RegionDescriptor {
        method: aggregator.method,
        bands,
    })
}

pub const DEG_HIDDEN: usize = 32;
pub const DEG_RANGE: (f64, f64) = (0.2, 2.0);

/// Distance embedding generator: one `1 → 32 → 32 → P` tanh MLP per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deg {
    pub p: usize,
    layers: Vec<[Linear; 3]>,
}

/// Clamps `d` into the generator's range, warning when it moves.
pub fn clamp_distance(d: f64) -> Result<f64> {
    if !d.is_finite() {
        return Err(Error::Input(format!("distance threshold must be finite, got {d}")));
    }
    let c = d.clamp(DEG_RANGE.0, DEG_RANGE.1);
    if c != d {
        log::warn!("distance threshold {d} m clamped to {c} m");
    }
    Ok(c)
}

impl Deg {
    pub fn new(params: &mut Params, prefix: &str, num_bands: usize, p: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..num_bands)
            .map(|k| {
                let name = format!("{prefix}.band{k}");
                [
                    Linear::new(params, &format!("{name}.fc1"), 1, DEG_HIDDEN, rng),
                    Linear::new(params, &format!("{name}.fc2"), DEG_HIDDEN, DEG_HIDDEN, rng),
                    Linear::new(params, &format!("{name}.fc3"), DEG_HIDDEN, p, rng),
                ]
            })
            .collect();
        Self { p, layers }
    }

    pub fn num_bands(&self) -> usize {
        self.layers.len()
    }

    /// Embedding `[1 × P]` of band `band` for the `1 × 1` distance node `d`.
    pub fn forward(&self, g: &mut Graph, band: usize, d: Var) -> Var {
        let [a, b, c] = &self.layers[band];
        let h = a.forward(g, d);
        let h = g.tape.tanh(h);
        let h = b.forward(g, h);
        let h = g.tape.tanh(h);
        c.forward(g, h)
    }
}

/// Embeddings `E_k(d)` for every band; `d` is clamped to the generator range.
pub fn deg_forward(d: f64, params: &Params, deg: &Deg) -> Result<Vec<Vec<f64>>> {
    let d = clamp_distance(d)?;
    let mut g = Graph::new(params, false);
    let dv = g.constant(Tensor::scalar(d));
    Ok((0..deg.num_bands())
        .map(|k| {
            let e = deg.forward(&mut g, k, dv);
            g.value(e).data().to_vec()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enumerate_pairs, MicArray, PairSelection};
    use crate::nn::lstm_reference;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stft() -> StftConfig {
        StftConfig::default()
    }

    fn rand_views(rng: &mut ChaCha8Rng, n: usize, t: usize, bw: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| Tensor::from_fn(t, bw, |_, _| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn sampling_examples() {
        let q = QueryRegion::angular(0.0, 70.0).unwrap();
        let s = sample_directions(&q, SamplingStrategy::FixedNumber { count: 8 }).unwrap();
        let expect: Vec<f64> = (0..8).map(|i| 10.0 * i as f64).collect();
        for (a, b) in s.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
        let q = QueryRegion::angular(10.0, 80.0).unwrap();
        let s = sample_directions(&q, SamplingStrategy::FixedInterval { step: 15.0 }).unwrap();
        assert_eq!(s, vec![10.0, 25.0, 40.0, 55.0, 70.0]);
        let q = QueryRegion::angular(-30.0, 30.0).unwrap();
        let s = sample_directions(&q, SamplingStrategy::FixedNumber { count: 3 }).unwrap();
        assert_eq!(s, vec![-30.0, 0.0, 30.0]);
    }

    #[test]
    fn sampling_degenerate_and_errors() {
        let q = QueryRegion::angular(20.0, 20.0).unwrap();
        let s = sample_directions(&q, SamplingStrategy::FixedNumber { count: 4 }).unwrap();
        assert_eq!(s, vec![20.0; 4]);
        assert!(sample_directions(&QueryRegion::spherical(1.0).unwrap(), SamplingStrategy::default()).is_err());
        assert!(SamplingStrategy::FixedNumber { count: 1 }.validate().is_err());
        assert!(SamplingStrategy::FixedInterval { step: 0.0 }.validate().is_err());
    }

    #[test]
    fn sampling_across_wrap() {
        let q = QueryRegion::angular(170.0, -170.0).unwrap();
        let s = sample_directions(&q, SamplingStrategy::FixedNumber { count: 3 }).unwrap();
        assert_eq!(s, vec![170.0, 180.0, 190.0]);
    }

    #[test]
    fn band_layouts() {
        let bs1 = build_band_layout(&BandScheme::Bs1, &stft()).unwrap();
        assert_eq!(bs1.num_bands(), 31);
        assert_eq!(bs1.widths().iter().sum::<usize>(), 257);
        // 100 Hz at 31.25 Hz per bin rounds to 3 bins, starting with the DC bin.
        assert_eq!(bs1.range(0), 0..3);
        let bs2 = build_band_layout(&BandScheme::Bs2, &stft()).unwrap();
        assert_eq!(bs2.num_bands(), 15);
        assert_eq!(bs2.num_bins(), 257);
        let full = build_band_layout(&BandScheme::Full, &stft()).unwrap();
        assert_eq!(full.widths(), vec![257]);
        let uni = build_band_layout(&BandScheme::Uniform(4), &stft()).unwrap();
        assert_eq!(uni.widths().iter().sum::<usize>(), 257);
    }

    #[test]
    fn explicit_layout_validation() {
        let ok = BandScheme::Explicit(vec![(0, 100), (100, 257)]);
        assert_eq!(build_band_layout(&ok, &stft()).unwrap().num_bands(), 2);
        let gap = BandScheme::Explicit(vec![(0, 100), (101, 257)]);
        assert!(build_band_layout(&gap, &stft())
            .unwrap_err()
            .to_string()
            .contains("gap"));
        let overlap = BandScheme::Explicit(vec![(0, 100), (90, 257)]);
        assert!(build_band_layout(&overlap, &stft())
            .unwrap_err()
            .to_string()
            .contains("overlap"));
        let short = BandScheme::Explicit(vec![(0, 100)]);
        assert!(build_band_layout(&short, &stft()).is_err());
    }

    fn make_agg(method: AggregationMethod, bw: usize, p: usize, seed: u64) -> (Params, Aggregator) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let layout = BandLayout::from_bounds(vec![0, bw], bw).unwrap();
        let agg = Aggregator::new(&mut params, "agg", method, &layout, p, &mut rng);
        (params, agg)
    }

    #[test]
    fn descriptor_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let views = rand_views(&mut rng, 8, 5, 4);
        for method in AggregationMethod::ALL {
            let (params, agg) = make_agg(method, 4, 16, 1);
            let d = aggregate(&params, &agg, std::slice::from_ref(&views)).unwrap();
            let expected = match method {
                AggregationMethod::Concatenate => 32,
                AggregationMethod::Tac => 128,
                AggregationMethod::Taa | AggregationMethod::Rnn => 16,
                AggregationMethod::RnnLoop => 32,
            };
            assert_eq!(d.bands[0].shape(), (5, expected), "{method:?}");
            assert_eq!(agg.descriptor_dim(0, 8), expected);
        }
    }

    #[test]
    fn taa_of_identical_views_is_single_transform() {
        let (params, agg) = make_agg(AggregationMethod::Taa, 4, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let view = rand_views(&mut rng, 1, 3, 4).remove(0);
        let many = aggregate(&params, &agg, &[vec![view.clone(); 5]]).unwrap();
        let one = aggregate(&params, &agg, &[vec![view]]).unwrap();
        for (a, b) in many.bands[0].data().iter().zip(one.bands[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rnn_matches_manual_recurrence() {
        let (params, agg) = make_agg(AggregationMethod::Rnn, 4, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let views = rand_views(&mut rng, 3, 2, 4);
        let out = aggregate(&params, &agg, std::slice::from_ref(&views)).unwrap();
        let BandAggregator::Recurrent(cell) = agg.bands[0] else {
            panic!()
        };
        for t in 0..2 {
            let steps: Vec<Vec<f64>> = views.iter().map(|v| v.row(t).to_vec()).collect();
            let h = lstm_reference(&params, &cell, &steps);
            for (a, b) in out.bands[0].row(t).iter().zip(h.last().unwrap()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rnn_loop_single_view_repeats_it() {
        let (params, agg) = make_agg(AggregationMethod::RnnLoop, 3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let views = rand_views(&mut rng, 1, 2, 3);
        let out = aggregate(&params, &agg, std::slice::from_ref(&views)).unwrap();
        assert_eq!(out.bands[0].shape(), (2, 8));
        let BandAggregator::Recurrent(cell) = agg.bands[0] else {
            panic!()
        };
        let steps = vec![views[0].row(0).to_vec(); 2];
        let h = lstm_reference(&params, &cell, &steps);
        let expect: Vec<f64> = h.concat();
        for (a, b) in out.bands[0].row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let views = rand_views(&mut rng, 4, 3, 4);
        let mut permuted = views.clone();
        permuted.swap(0, 2);
        for method in AggregationMethod::ALL {
            let (params, agg) = make_agg(method, 4, 5, 11);
            let a = aggregate(&params, &agg, std::slice::from_ref(&views)).unwrap();
            let b = aggregate(&params, &agg, &[permuted.clone()]).unwrap();
            let diff: f64 = a.bands[0]
                .data()
                .iter()
                .zip(b.bands[0].data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if method == AggregationMethod::Taa {
                assert!(diff < 1e-12, "TAA must ignore view order");
            } else {
                assert!(diff > 1e-6, "{method:?} should depend on view order");
            }
        }
    }

    #[test]
    fn aggregate_rejects_wrong_width() {
        let (params, agg) = make_agg(AggregationMethod::Tac, 4, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let views = rand_views(&mut rng, 2, 3, 5);
        assert!(aggregate(&params, &agg, &[views]).is_err());
    }

    #[test]
    fn tdoa_order_on_endfire_pair() {
        let array = MicArray::linear(2, 0.1).unwrap();
        let pairs = enumerate_pairs(&array, &PairSelection::All).unwrap();
        // Pair (0, 1) has its axis towards -x, so TDOA increases with azimuth on [0, 180].
        let order = tdoa_order(&[90.0, 0.0, 180.0, 45.0], 0.0, &pairs);
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn deg_shapes_determinism_and_clamping() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = Params::new();
        let deg = Deg::new(&mut params, "deg", 31, 16, &mut rng);
        let a = deg_forward(0.9, &params, &deg).unwrap();
        let b = deg_forward(0.9, &params, &deg).unwrap();
        assert_eq!(a.len(), 31);
        assert!(a.iter().all(|e| e.len() == 16));
        assert_eq!(a, b);
        assert_eq!(
            deg_forward(5.0, &params, &deg).unwrap(),
            deg_forward(2.0, &params, &deg).unwrap()
        );
        assert!(deg_forward(f64::NAN, &params, &deg).is_err());
    }

    #[test]
    fn deg_gradient_wrt_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = Params::new();
        let deg = Deg::new(&mut params, "deg", 3, 4, &mut rng);
        let eval = |d: f64| -> (f64, f64) {
            let mut g = Graph::new(&params, false);
            let dv = g.tape.leaf(Tensor::scalar(d));
            let e = deg.forward(&mut g, 2, dv);
            let s = g.tape.slice_cols(e, 1, 2);
            let s = g.tape.sum(s);
            let grads = g.tape.backward(s);
            (g.value(s).item(), grads.get(dv).unwrap().item())
        };
        for d in [0.3, 0.8, 1.7] {
            let (_, analytic) = eval(d);
            let h = 1e-5;
            let fd = (eval(d + h).0 - eval(d - h).0) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "{analytic} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn fixed_number_uniform_with_endpoints(lo in -180.0f64..180.0, width in 0.0f64..359.0, n in 2usize..20) {
            let s = sample_window(lo, lo + width, SamplingStrategy::FixedNumber { count: n });
            prop_assert_eq!(s.len(), n);
            prop_assert!((s[0] - lo).abs() < 1e-9);
            prop_assert!((s[n - 1] - (lo + width)).abs() < 1e-9);
            let step = width / (n - 1) as f64;
            for w in s.windows(2) {
                prop_assert!((w[1] - w[0] - step).abs() < 1e-9);
            }
        }

        #[test]
        fn fixed_interval_closed_form(lo in -180.0f64..180.0, width in 0.0f64..300.0, step in 1.0f64..60.0) {
            let s = sample_window(lo, lo + width, SamplingStrategy::FixedInterval { step });
            let n = (width / step).floor() as usize + 1;
            prop_assert!(s.len() == n || s.len() == n + 1 && ((width / step) - (width / step).round()).abs() < 1e-8);
            prop_assert!(*s.last().unwrap() <= lo + width + 1e-6);
        }

        #[test]
        fn descriptor_dim_rule(views in 1usize..10, bw in 1usize..20, p in 1usize..20) {
            prop_assert_eq!(AggregationMethod::Concatenate.descriptor_dim(views, bw, p), views * bw);
            prop_assert_eq!(AggregationMethod::Tac.descriptor_dim(views, bw, p), views * p);
            prop_assert_eq!(AggregationMethod::Taa.descriptor_dim(views, bw, p), p);
            prop_assert_eq!(AggregationMethod::Rnn.descriptor_dim(views, bw, p), p);
            prop_assert_eq!(AggregationMethod::RnnLoop.descriptor_dim(views, bw, p), 2 * p);
        }

        #[test]
        fn uniform_layouts_cover_spectrum(count in 1usize..64) {
            let layout = build_band_layout(&BandScheme::Uniform(count), &StftConfig::default()).unwrap();
            prop_assert_eq!(layout.num_bands(), count);
            prop_assert_eq!(layout.widths().iter().sum::<usize>(), 257);
        }
    }
}
