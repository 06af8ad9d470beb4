//! Inter-channel phase/level differences and the direction feature.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::dsp::{Spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::geometry::{tdoa_distance, MicPair};
use crate::tensor_io::{self, NamedTensor};

pub const DEFAULT_SOUND_SPEED: f64 = 343.0;
/// Magnitude floor applied before taking level ratios.
pub const ILD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialConfig {
    pub sound_speed: f64,
    /// Divide the direction feature by the number of pairs.
    pub normalize_direction: bool,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            sound_speed: DEFAULT_SOUND_SPEED,
            normalize_direction: false,
        }
    }
}

/// Wraps a phase into `(-π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

fn check_pairs(spec: &Spectrogram, pairs: &[MicPair]) -> Result<()> {
    let m = spec.num_channels();
    match pairs.iter().find(|p| p.p1 >= m || p.p2 >= m) {
        Some(p) => Err(Error::Shape(format!(
            "pair ({}, {}) out of range for {m} channels",
            p.p1, p.p2
        ))),
        None => Ok(()),
    }
}

/// `∠Y^{p1} − ∠Y^{p2}` wrapped to `(-π, π]`, shape `[pairs × T × F]`.
pub fn ipd(spec: &Spectrogram, pairs: &[MicPair]) -> Result<Array3<f64>> {
    check_pairs(spec, pairs)?;
    let (t, f) = (spec.num_frames(), spec.num_bins());
    let mut out = Array3::zeros((pairs.len(), t, f));
    for (pair, mut plane) in pairs.iter().zip(out.outer_iter_mut()) {
        let a = spec.data.index_axis(Axis(0), pair.p1);
        let b = spec.data.index_axis(Axis(0), pair.p2);
        Zip::from(&mut plane).and(&a).and(&b).for_each(|o, ya, yb| {
            *o = wrap_phase(ya.arg() - yb.arg());
        });
    }
    Ok(out)
}

/// `20·log10(|Y^{p1}| / |Y^{p2}|)` with magnitudes floored at [`ILD_FLOOR`].
pub fn ild(spec: &Spectrogram, pairs: &[MicPair]) -> Result<Array3<f64>> {
    check_pairs(spec, pairs)?;
    let (t, f) = (spec.num_frames(), spec.num_bins());
    let mut out = Array3::zeros((pairs.len(), t, f));
    for (pair, mut plane) in pairs.iter().zip(out.outer_iter_mut()) {
        let a = spec.data.index_axis(Axis(0), pair.p1);
        let b = spec.data.index_axis(Axis(0), pair.p2);
        Zip::from(&mut plane).and(&a).and(&b).for_each(|o, ya, yb| {
            *o = 20.0 * (ya.norm().max(ILD_FLOOR) / yb.norm().max(ILD_FLOOR)).log10();
        });
    }
    Ok(out)
}

/// Theoretical phase difference `2π·f·d(θ, φ)/v` of pair `pair` at frequency `freq_hz`.
///
/// Written with normalized frequency this is `2π·(k/N)·(d·fs/v)`; both forms are
/// identical for `freq_hz = k·fs/N`.
pub fn tpd(pair: &MicPair, azimuth: f64, elevation: f64, freq_hz: f64, sound_speed: f64) -> f64 {
    2.0 * PI * freq_hz * tdoa_distance(pair, azimuth, elevation) / sound_speed
}

/// TPD for every bin of `config`, shape `[pairs × F]`.
pub fn tpd_table(
    pairs: &[MicPair],
    azimuth: f64,
    elevation: f64,
    config: &StftConfig,
    sound_speed: f64,
) -> Array2<f64> {
    Array2::from_shape_fn((pairs.len(), config.num_bins()), |(p, k)| {
        let tdoa_samples = tdoa_distance(&pairs[p], azimuth, elevation) * config.sample_rate as f64 / sound_speed;
        2.0 * PI * (k as f64 / config.fft_size as f64) * tdoa_samples
    })
}

/// `V(θ, φ, t, f) = Σ_p ⟨e^{IPD}, e^{TPD}⟩` from precomputed IPD (`[pairs × T × F]`).
pub fn direction_feature_from_ipd(
    ipd: &Array3<f64>,
    pairs: &[MicPair],
    azimuth: f64,
    elevation: f64,
    stft: &StftConfig,
    spatial: &SpatialConfig,
) -> Result<Array2<f64>> {
    if ipd.shape()[0] != pairs.len() || ipd.shape()[2] != stft.num_bins() {
        return Err(Error::Shape(format!(
            "ipd shape {:?} inconsistent with {} pairs and {} bins",
            ipd.shape(),
            pairs.len(),
            stft.num_bins()
        )));
    }
    let table = tpd_table(pairs, azimuth, elevation, stft, spatial.sound_speed);
    let (cos_t, sin_t) = (table.mapv(f64::cos), table.mapv(f64::sin));
    let mut v = Array2::zeros((ipd.shape()[1], ipd.shape()[2]));
    for (p, plane) in ipd.outer_iter().enumerate() {
        let (ct, st) = (cos_t.row(p), sin_t.row(p));
        for (mut out_row, in_row) in v.outer_iter_mut().zip(plane.outer_iter()) {
            for (k, (o, &a)) in out_row.iter_mut().zip(in_row.iter()).enumerate() {
                *o += a.cos() * ct[k] + a.sin() * st[k];
            }
        }
    }
    if spatial.normalize_direction {
        v /= pairs.len() as f64;
    }
    Ok(v)
}

/// Direction feature `[T × F]` for the hypothesised direction `(θ, φ)`.
pub fn direction_feature(
    spec: &Spectrogram,
    pairs: &[MicPair],
    azimuth: f64,
    elevation: f64,
    spatial: &SpatialConfig,
) -> Result<Array2<f64>> {
    let ipd = ipd(spec, pairs)?;
    direction_feature_from_ipd(&ipd, pairs, azimuth, elevation, &spec.config, spatial)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub ipd: Array3<f64>,
    pub ild: Array3<f64>,
    pub pairs: Vec<MicPair>,
}

impl FeaturePack {
    pub fn compute(spec: &Spectrogram, pairs: &[MicPair]) -> Result<Self> {
        Ok(Self {
            ipd: ipd(spec, pairs)?,
            ild: ild(spec, pairs)?,
            pairs: pairs.to_vec(),
        })
    }

    /// Writes the tensors to `path` and a JSON sidecar to `path` + `.json`.
    pub fn dump<C: Serialize>(&self, path: &Path, config: &C) -> Result<()> {
        let shape = self.ipd.shape().to_vec();
        let tensors = vec![
            NamedTensor::new("ipd", shape.clone(), self.ipd.iter().copied().collect())?,
            NamedTensor::new("ild", shape.clone(), self.ild.iter().copied().collect())?,
        ];
        let meta = serde_json::json!({
            "tensors": {"ipd": shape, "ild": self.ild.shape()},
            "pairs": self.pairs.iter().map(|p| [p.p1, p.p2]).collect::<Vec<_>>(),
            "config": config,
            "config_hash": tensor_io::config_hash(config)?,
        });
        tensor_io::save_container(path, FEATURE_MAGIC, &serde_json::json!({}), &tensors)?;
        let sidecar = sidecar_path(path);
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"RSXF";

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft;
    use crate::geometry::{enumerate_pairs, ArrayLayout, MicArray, PairSelection, Point3};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn two_channel(a: &[f64], b: &[f64]) -> Spectrogram {
        let x = Array2::from_shape_fn((2, a.len()), |(c, i)| if c == 0 { a[i] } else { b[i] });
        stft(&x, &StftConfig::default()).unwrap()
    }

    fn pair01() -> Vec<MicPair> {
        let arr = MicArray::linear(2, 0.05).unwrap();
        enumerate_pairs(&arr, &PairSelection::All).unwrap()
    }

    #[test]
    fn identical_channels() {
        let x = noise(4000, 1);
        let spec = two_channel(&x, &x);
        assert!(ipd(&spec, &pair01()).unwrap().iter().all(|v| *v == 0.0));
        assert!(ild(&spec, &pair01()).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sign_flip_is_pi() {
        let x = noise(4000, 2);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let spec = two_channel(&x, &neg);
        for v in ipd(&spec, &pair01()).unwrap().iter() {
            assert!((v.abs() - PI).abs() < 1e-9);
        }
    }

    #[test]
    fn ild_gain_and_floor() {
        let x = noise(4000, 3);
        let scaled: Vec<f64> = x.iter().map(|v| 0.1 * v).collect();
        let spec = two_channel(&x, &scaled);
        for v in ild(&spec, &pair01()).unwrap().iter() {
            assert!((v - 20.0).abs() < 1e-9);
        }
        let zeros = vec![0.0; 4000];
        let spec = two_channel(&zeros, &x);
        let l = ild(&spec, &pair01()).unwrap();
        assert!(l.iter().all(|v| v.is_finite() && *v < -100.0));
    }

    /// Sum of bin-centered cosines spaced 4 bins apart; with a periodic Hann window
    /// each component leaks only into its two neighbours, so its own bin carries the
    /// exact delay phase `2πkn/N`.
    #[test]
    fn integer_delay_phase_on_active_bins() {
        let n_delay = 3usize;
        let len = 8000;
        let active: Vec<usize> = (4..250).step_by(4).collect();
        let sig = |i: isize| -> f64 {
            active
                .iter()
                .map(|&k| (2.0 * PI * k as f64 * i as f64 / 512.0 + 0.37 * k as f64).cos())
                .sum()
        };
        let a: Vec<f64> = (0..len as isize).map(sig).collect();
        let b: Vec<f64> = (0..len as isize).map(|i| sig(i - n_delay as isize)).collect();
        let spec = two_channel(&a, &b);
        let forward = ipd(&spec, &pair01()).unwrap();
        let arr = MicArray::linear(2, 0.05).unwrap();
        let reversed = vec![MicPair::new(&arr, 1, 0).unwrap()];
        let backward = ipd(&spec, &reversed).unwrap();
        for t in 4..spec.num_frames() - 4 {
            for &k in &active {
                let expected = 2.0 * PI * k as f64 * n_delay as f64 / 512.0;
                let err = wrap_phase(forward[[0, t, k]] - expected).abs();
                assert!(err < 1e-3, "bin {k}: err {err}");
                let err = wrap_phase(backward[[0, t, k]] + expected).abs();
                assert!(err < 1e-3);
            }
        }
    }

    #[test]
    fn tpd_examples() {
        let pair = pair01()[0];
        assert!(tpd(&pair, 90.0, 0.0, 1000.0, 343.0).abs() < 1e-15);
        assert_eq!(tpd(&pair, 0.0, 0.0, 0.0, 343.0), 0.0);
        // Mic 0 sits at -x, so the endfire direction of pair (0, 1) is 180 degrees.
        let v = tpd(&pair, 180.0, 0.0, 1000.0, 343.0);
        assert!((v - 2.0 * PI * 1000.0 * 0.05 / 343.0).abs() < 1e-12);
        assert!((v - 0.9158).abs() < 5e-4);
        // Bin form equals the physical-frequency form.
        let cfg = StftConfig::default();
        let table = tpd_table(&[pair], 20.0, 10.0, &cfg, 343.0);
        for k in 0..cfg.num_bins() {
            let direct = tpd(&pair, 20.0, 10.0, cfg.bin_frequency(k), 343.0);
            assert!((table[[0, k]] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn direction_feature_peaks_when_ipd_matches_tpd() {
        let circ = MicArray::preset("circ8_5cm").unwrap();
        let pairs = enumerate_pairs(&circ, &PairSelection::All).unwrap();
        let cfg = StftConfig::default();
        let table = tpd_table(&pairs, 40.0, 0.0, &cfg, 343.0);
        let mut ipd = Array3::zeros((28, 3, cfg.num_bins()));
        for p in 0..28 {
            for t in 0..3 {
                for k in 0..cfg.num_bins() {
                    ipd[[p, t, k]] = wrap_phase(table[[p, k]]);
                }
            }
        }
        let v = direction_feature_from_ipd(&ipd, &pairs, 40.0, 0.0, &cfg, &SpatialConfig::default()).unwrap();
        assert!(v.iter().all(|x| (x - 28.0).abs() < 1e-9));
        let norm = SpatialConfig {
            normalize_direction: true,
            ..Default::default()
        };
        let v = direction_feature_from_ipd(&ipd, &pairs, 40.0, 0.0, &cfg, &norm).unwrap();
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-9));
    }

    #[test]
    fn direction_feature_is_gain_invariant() {
        let arr = MicArray::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(0.03, 0.0, 0.0),
                Point3::new(0.0, 0.04, 0.0),
            ],
            ArrayLayout::Custom,
        )
        .unwrap();
        let pairs = enumerate_pairs(&arr, &PairSelection::All).unwrap();
        let x = Array2::from_shape_vec((3, 3000), noise(9000, 5)).unwrap();
        let spec = stft(&x, &StftConfig::default()).unwrap();
        let spec2 = stft(&(&x * 3.7), &StftConfig::default()).unwrap();
        let cfg = SpatialConfig::default();
        let a = direction_feature(&spec, &pairs, 30.0, 0.0, &cfg).unwrap();
        let b = direction_feature(&spec2, &pairs, 30.0, 0.0, &cfg).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_dump_writes_sidecar() {
        let x = noise(3000, 6);
        let spec = two_channel(&x, &x);
        let pack = FeaturePack::compute(&spec, &pair01()).unwrap();
        let dir = std::env::temp_dir().join(format!("rsx-feat-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.bin");
        pack.dump(&path, &StftConfig::default()).unwrap();
        let (_, tensors) = tensor_io::load_container(&path, FEATURE_MAGIC).unwrap();
        assert_eq!(tensors[0].shape, vec![1, spec.num_frames(), 257]);
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta["pairs"][0], serde_json::json!([0, 1]));
        assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
        std::fs::remove_dir_all(dir).ok();
    }

    proptest! {
        #[test]
        fn inner_product_equals_cosine(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let inner = a.cos() * b.cos() + a.sin() * b.sin();
            prop_assert!((inner - (a - b).cos()).abs() < 1e-12);
        }

        #[test]
        fn wrap_phase_range(x in -100.0f64..100.0) {
            let w = wrap_phase(x);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!(((x - w) / (2.0 * PI)).fract().abs() < 1e-9
                || (1.0 - ((x - w) / (2.0 * PI)).fract().abs()) < 1e-9);
        }

        #[test]
        fn pair_reversal_antisymmetry(seed in 0u64..500) {
            let a = noise(1200, seed);
            let b = noise(1200, seed + 1);
            let spec = two_channel(&a, &b);
            let arr = MicArray::linear(2, 0.05).unwrap();
            let fwd = [MicPair::new(&arr, 0, 1).unwrap()];
            let rev = [MicPair::new(&arr, 1, 0).unwrap()];
            let (i1, i2) = (ipd(&spec, &fwd).unwrap(), ipd(&spec, &rev).unwrap());
            let (l1, l2) = (ild(&spec, &fwd).unwrap(), ild(&spec, &rev).unwrap());
            for (x, y) in i1.iter().zip(i2.iter()) {
                prop_assert!(wrap_phase(x + y).abs() < 1e-9);
            }
            for (x, y) in l1.iter().zip(l2.iter()) {
                prop_assert!((x + y).abs() < 1e-9);
            }
        }

        #[test]
        fn direction_feature_bounded(seed in 0u64..200, az in -180.0f64..180.0) {
            let circ = MicArray::preset("circ8_5cm").unwrap();
            let pairs = enumerate_pairs(&circ, &PairSelection::All).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ipd = Array3::from_shape_fn((28, 2, 257), |_| rng.gen_range(-PI..PI));
            let v = direction_feature_from_ipd(&ipd, &pairs, az, 0.0, &StftConfig::default(), &SpatialConfig::default()).unwrap();
            prop_assert!(v.iter().all(|x| x.abs() <= 28.0 + 1e-9));
        }
    }
}
