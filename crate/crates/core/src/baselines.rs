//! Delay-and-sum and oracle MVDR beamformers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::acoustic_sim::{SceneAudio, SceneSpec, REFERENCE_MIC};
use crate::dsp::{stft, Spectrogram, StftConfig, StftPlan};
use crate::error::{Error, Result};
use crate::geometry::{unit_direction, MicArray};

pub const DIAGONAL_LOADING: f64 = 1e-6;

/// Per-channel far-field steering phases `exp(j·2πf·(p_m·u)/c)` at one frequency.
pub fn steering_vector(
    array: &MicArray,
    azimuth: f64,
    elevation: f64,
    freq_hz: f64,
    sound_speed: f64,
) -> Vec<Complex64> {
    let u = unit_direction(azimuth, elevation);
    array
        .positions()
        .map(|p| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * freq_hz * p.dot(&u) / sound_speed))
        .collect()
}

/// Channel average after phase alignment toward `(azimuth, elevation)`; `[T × F]`.
pub fn das_beamform(
    spec: &Spectrogram,
    array: &MicArray,
    azimuth: f64,
    elevation: f64,
    sound_speed: f64,
) -> Result<Array2<Complex64>> {
    let m = spec.num_channels();
    if m != array.num_mics() {
        return Err(Error::Shape(format!(
            "{m} channels for a {}-mic array",
            array.num_mics()
        )));
    }
    let (t, f) = (spec.num_frames(), spec.num_bins());
    let mut out = Array2::zeros((t, f));
    for k in 0..f {
        let a = steering_vector(array, azimuth, elevation, spec.config.bin_frequency(k), sound_speed);
        for ti in 0..t {
            let s: Complex64 = (0..m).map(|c| a[c].conj() * spec.data[[c, ti, k]]).sum();
            out[[ti, k]] = s / m as f64;
        }
    }
    Ok(out)
}

/// Per-frequency Hermitian `M × M` target and noise covariances.
#[derive(Debug, Clone)]
pub struct SpatialCovariance {
    pub target: Vec<DMatrix<Complex64>>,
    pub noise: Vec<DMatrix<Complex64>>,
}

/// Ground truth available to the MVDR beamformer.
#[derive(Debug, Clone)]
pub enum Oracle {
    /// Target mask `[T × F]`; the noise mask is its complement.
    Irm(Array2<f64>),
    /// Multichannel target spectrogram; the noise is mixture minus target.
    Csm(Spectrogram),
}

/// `|S| / (|S| + |N|)` per bin (0 where both vanish).
pub fn ideal_ratio_mask(target: &Array2<Complex64>, noise: &Array2<Complex64>) -> Result<Array2<f64>> {
    if target.dim() != noise.dim() {
        return Err(Error::Shape(format!(
            "target {:?} vs noise {:?}",
            target.dim(),
            noise.dim()
        )));
    }
    Ok(ndarray::Zip::from(target).and(noise).map_collect(|s, n| {
        let (s, n) = (s.norm(), n.norm());
        if s + n > 0.0 {
            s / (s + n)
        } else {
            0.0
        }
    }))
}

fn outer_sum(columns: impl Iterator<Item = (f64, DVector<Complex64>)>, m: usize) -> DMatrix<Complex64> {
    let mut r = DMatrix::zeros(m, m);
    let mut weight = 0.0;
    for (w, x) in columns {
        r += (&x * x.adjoint()) * Complex64::new(w, 0.0);
        weight += w;
    }
    if weight > 0.0 {
        r /= Complex64::new(weight, 0.0);
    }
    r
}

fn frame_vector(spec: &Spectrogram, t: usize, k: usize) -> DVector<Complex64> {
    DVector::from_iterator(
        spec.num_channels(),
        (0..spec.num_channels()).map(|c| spec.data[[c, t, k]]),
    )
}

impl SpatialCovariance {
    pub fn estimate(mixture: &Spectrogram, oracle: &Oracle) -> Result<Self> {
        let (m, t, f) = (mixture.num_channels(), mixture.num_frames(), mixture.num_bins());
        let mut target = Vec::with_capacity(f);
        let mut noise = Vec::with_capacity(f);
        match oracle {
            Oracle::Irm(mask) => {
                if mask.dim() != (t, f) {
                    return Err(Error::Shape(format!("mask {:?} vs spectrogram ({t}, {f})", mask.dim())));
                }
                for k in 0..f {
                    target.push(outer_sum(
                        (0..t).map(|ti| (mask[[ti, k]], frame_vector(mixture, ti, k))),
                        m,
                    ));
                    noise.push(outer_sum(
                        (0..t).map(|ti| (1.0 - mask[[ti, k]], frame_vector(mixture, ti, k))),
                        m,
                    ));
                }
            }
            Oracle::Csm(s) => {
                if s.data.dim() != mixture.data.dim() {
                    return Err(Error::Shape(format!(
                        "target {:?} vs mixture {:?}",
                        s.data.dim(),
                        mixture.data.dim()
                    )));
                }
                for k in 0..f {
                    target.push(outer_sum((0..t).map(|ti| (1.0, frame_vector(s, ti, k))), m));
                    noise.push(outer_sum(
                        (0..t).map(|ti| (1.0, frame_vector(mixture, ti, k) - frame_vector(s, ti, k))),
                        m,
                    ));
                }
            }
        }
        Ok(Self { target, noise })
    }
}

/// MVDR weights at one frequency together with the unit-norm steering vector.
#[derive(Debug, Clone)]
pub struct MvdrWeights {
    pub w: DVector<Complex64>,
    pub steering: DVector<Complex64>,
}

/// `w = R_n⁻¹d / (dᴴR_n⁻¹d)` with `d` the principal eigenvector of `r_target`.
/// Returns `None` when the target covariance is empty.
pub fn mvdr_weights(
    r_target: &DMatrix<Complex64>,
    r_noise: &DMatrix<Complex64>,
    fallback_trace: f64,
) -> Result<Option<MvdrWeights>> {
    let m = r_target.nrows();
    if r_target.trace().re <= 0.0 {
        return Ok(None);
    }
    let eig = SymmetricEigen::new(r_target.clone());
    let top = eig.eigenvalues.imax();
    let d: DVector<Complex64> = eig.eigenvectors.column(top).into_owned();
    let mut trace = r_noise.trace().re;
    if trace <= 0.0 {
        trace = fallback_trace;
    }
    let loading = DIAGONAL_LOADING * trace / m as f64;
    if !(loading > 0.0) {
        return Err(Error::numerical(
            "mvdr",
            "noise covariance is zero and cannot be loaded",
        ));
    }
    let loaded = r_noise + DMatrix::<Complex64>::identity(m, m) * Complex64::new(loading, 0.0);
    let chol = loaded
        .cholesky()
        .ok_or_else(|| Error::numerical("mvdr", "noise covariance is singular after loading"))?;
    let rd = chol.solve(&d);
    let denom = d.dotc(&rd);
    if !denom.is_finite() || denom.norm() == 0.0 {
        return Err(Error::numerical("mvdr", "degenerate distortionless normalization"));
    }
    Ok(Some(MvdrWeights {
        w: rd / denom,
        steering: d,
    }))
}

/// Oracle MVDR output scaled to the reference channel; `[T × F]`.
pub fn mvdr_oracle(spec: &Spectrogram, oracle: &Oracle) -> Result<Array2<Complex64>> {
    let cov = SpatialCovariance::estimate(spec, oracle)?;
    let (t, f) = (spec.num_frames(), spec.num_bins());
    let mut out = Array2::zeros((t, f));
    for k in 0..f {
        let mixture_trace: f64 =
            (0..t).map(|ti| frame_vector(spec, ti, k).norm_squared()).sum::<f64>() / t.max(1) as f64;
        let Some(mw) = mvdr_weights(&cov.target[k], &cov.noise[k], mixture_trace)? else {
            continue;
        };
        let scale = mw.steering[REFERENCE_MIC];
        for ti in 0..t {
            out[[ti, k]] = scale * mw.w.dotc(&frame_vector(spec, ti, k));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineSystem {
    Mixture,
    Das,
    IrmMvdr,
    CsmMvdr,
}

impl std::str::FromStr for BaselineSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(Self::Mixture),
            "das" => Ok(Self::Das),
            "irm-mvdr" => Ok(Self::IrmMvdr),
            "csm-mvdr" => Ok(Self::CsmMvdr),
            other => Err(Error::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Runs `system` on a simulated scene. Direction-dependent systems run once per
/// in-region speaker and sum; with no speaker in the region, DAS steers to the
/// query center and the MVDR oracles see an all-zero target.
pub fn run_baseline(
    system: BaselineSystem,
    scene: &SceneSpec,
    audio: &SceneAudio,
    config: &StftConfig,
    sound_speed: f64,
) -> Result<Vec<f64>> {
    if system == BaselineSystem::Mixture {
        return Ok(audio.mixture.row(REFERENCE_MIC).to_vec());
    }
    let plan = StftPlan::new(*config)?;
    let spec = stft(&audio.mixture, config)?;
    let inside: Vec<usize> = (0..scene.speech.len())
        .filter(|&i| audio.metadata.in_region[i])
        .collect();
    let mut total = Array2::<Complex64>::zeros((spec.num_frames(), spec.num_bins()));
    let mut add = |z: Array2<Complex64>| total += &z;
    match system {
        BaselineSystem::Mixture => unreachable!(),
        BaselineSystem::Das => {
            if inside.is_empty() {
                let az = 0.5 * (scene.query.azimuth.0 + scene.query.azimuth.1);
                let el = 0.5 * (scene.query.elevation.0 + scene.query.elevation.1);
                add(das_beamform(&spec, &scene.array, az, el, sound_speed)?);
            }
            for &i in &inside {
                let pose = &scene.speech[i].pose;
                add(das_beamform(
                    &spec,
                    &scene.array,
                    pose.azimuth,
                    pose.elevation,
                    sound_speed,
                )?);
            }
        }
        BaselineSystem::IrmMvdr | BaselineSystem::CsmMvdr => {
            let targets: Vec<Array2<f64>> = if inside.is_empty() {
                vec![Array2::zeros(audio.mixture.dim())]
            } else {
                inside.iter().map(|&i| audio.speech_early[i].clone()).collect()
            };
            for target in targets {
                let s = stft(&target, config)?;
                let oracle = if system == BaselineSystem::IrmMvdr {
                    let s_ref = s.data.index_axis(Axis(0), REFERENCE_MIC).to_owned();
                    let n_ref = &spec.data.index_axis(Axis(0), REFERENCE_MIC) - &s_ref;
                    Oracle::Irm(ideal_ratio_mask(&s_ref, &n_ref)?)
                } else {
                    Oracle::Csm(s)
                };
                add(mvdr_oracle(&spec, &oracle)?);
            }
        }
    }
    let mut out = ndarray::Array1::zeros(audio.mixture.ncols());
    plan.synthesize(total.view(), out.view_mut());
    Ok(out.to_vec())
}
