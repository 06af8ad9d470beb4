//! Shoebox room simulation, noise synthesis and scene mixing.
//!
//! Room impulse responses come from an image-source model with one frequency
//! independent reflection coefficient per room, derived from Eyring's formula
//! for the requested T60. Images arriving within the early window use an
//! 81-tap windowed-sinc fractional delay; later images are rounded to the
//! nearest sample.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{fft_convolve, read_wav};
use crate::error::{Error, Result};
use crate::geometry::{MicArray, Point3, QueryRegion, SourcePose};
use crate::spatial_features::DEFAULT_SOUND_SPEED;

pub const WALL_MARGIN: f64 = 0.5;
pub const BABBLE_MIN_DISTANCE: f64 = 1.5;
pub const REFERENCE_MIC: usize = 0;
/// Early-reflection window around the direct-path peak, in milliseconds.
pub const EARLY_WINDOW_MS: (f64, f64) = (-6.0, 50.0);
pub const FRACTIONAL_TAPS: usize = 81;
pub const T60_RANGE: (f64, f64) = (0.05, 0.7);

fn point(p: [f64; 3]) -> Point3 {
    Point3::new(p[0], p[1], p[2])
}

fn arr(p: Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    /// Reverberation time in seconds; `0` simulates free field (direct path only).
    pub t60: f64,
    pub sample_rate: u32,
}

impl RoomSpec {
    pub fn new(dims: [f64; 3], t60: f64, sample_rate: u32) -> Result<Self> {
        if dims.iter().any(|d| !d.is_finite() || *d <= 2.0 * WALL_MARGIN) {
            return Err(Error::Geometry(format!(
                "room dimensions {dims:?} must exceed twice the {WALL_MARGIN} m wall margin"
            )));
        }
        if !(t60 == 0.0 || (T60_RANGE.0..=T60_RANGE.1).contains(&t60)) {
            return Err(Error::Geometry(format!(
                "T60 {t60} s outside [{}, {}] (or 0 for free field)",
                T60_RANGE.0, T60_RANGE.1
            )));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { dims, t60, sample_rate })
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [l, w, h] = self.dims;
        2.0 * (l * w + l * h + w * h)
    }

    /// Eyring absorption `α = 1 − exp(−0.161·V / (S·T60))`.
    pub fn eyring_absorption(&self) -> f64 {
        if self.t60 == 0.0 {
            return 1.0;
        }
        1.0 - (-0.161 * self.volume() / (self.surface() * self.t60)).exp()
    }

    /// Pressure reflection coefficient used by the image-source engine.
    ///
    /// Image energy along direction `u` decays as `β^(2·c·t·Σ|uᵢ|/Lᵢ)`. The
    /// direction average of that decay, cut where the image set ends at
    /// 1.2·T60, is fitted like a measured Schroeder curve (T30) and `β` is
    /// solved so that fit returns the requested T60.
    pub fn reflection_coefficient(&self) -> f64 {
        if self.t60 == 0.0 {
            return 0.0;
        }
        let rates = self.direction_rates();
        let end = 1.2 * self.t60;
        // Start from the Eyring decay constant; the fitted T60 falls as a rises.
        let eyring = -(1.0 - self.eyring_absorption()).ln();
        let (mut lo, mut hi) = (0.2 * eyring, 5.0 * eyring);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if fitted_t60(&rates, mid, end) > self.t60 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = 0.5 * (lo + hi);
        // Energy per wall hit is β² = exp(−a).
        (-a / 2.0).exp()
    }

    pub fn contains(&self, p: Point3, margin: f64) -> bool {
        (0..3).all(|i| p[i] >= margin - 1e-12 && p[i] <= self.dims[i] - margin + 1e-12)
    }

    /// Wall hits per second along a Fibonacci sphere of directions.
    fn direction_rates(&self) -> Vec<f64> {
        const N: usize = 800;
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..N)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / N as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                let u = [r * phi.cos(), r * phi.sin(), z];
                (0..3).map(|k| u[k].abs() / self.dims[k]).sum::<f64>() * DEFAULT_SOUND_SPEED
            })
            .collect()
    }
}

/// T30-based T60 of the truncated direction-averaged decay `mean exp(−a·g·t)`.
fn fitted_t60(rates: &[f64], a: f64, end: f64) -> f64 {
    // Schroeder integral from t to `end` of exp(−a·g·s) is (e^(−agt) − e^(−ag·end)) / (a·g).
    let edc = |t: f64| {
        rates
            .iter()
            .map(|g| ((-a * g * t).exp() - (-a * g * end).exp()) / (a * g))
            .sum::<f64>()
    };
    let e0 = edc(0.0);
    let level = |t: f64| 10.0 * (edc(t).max(1e-300) / e0).log10();
    let crossing = |target: f64| {
        let (mut lo, mut hi) = (0.0, end);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if level(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (t5, t35) = (crossing(-5.0), crossing(-35.0));
    let n = 100;
    let pts: Vec<(f64, f64)> = (0..=n)
        .map(|i| {
            let t = t5 + (t35 - t5) * i as f64 / n as f64;
            (t, level(t))
        })
        .collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -60.0 / (sxy / sxx)
}

/// Ranges from which rooms are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomPreset {
    pub min_dims: [f64; 3],
    pub max_dims: [f64; 3],
    pub t60: (f64, f64),
}

impl RoomPreset {
    /// Named presets: `default` (training ranges), `g`, `m3` (the two filled
    /// rows of the per-model configuration table) and `anechoic`.
    pub fn named(name: &str) -> Result<Self> {
        let (min_dims, max_dims, t60) = match name {
            "default" => ([3.0, 3.0, 2.5], [10.0, 8.0, 4.0], T60_RANGE),
            "g" => ([3.0, 3.0, 2.5], [8.0, 6.0, 4.0], T60_RANGE),
            "m3" => ([5.0, 5.0, 3.0], [12.0, 10.0, 4.0], (0.05, 0.4)),
            "anechoic" => ([3.0, 3.0, 2.5], [10.0, 8.0, 4.0], (0.0, 0.0)),
            other => return Err(Error::Config(format!("unknown room preset '{other}'"))),
        };
        Ok(Self {
            min_dims,
            max_dims,
            t60,
        })
    }

    pub fn sample(&self, sample_rate: u32, rng: &mut impl Rng) -> Result<RoomSpec> {
        let mut dims = [0.0; 3];
        for i in 0..3 {
            dims[i] = uniform(rng, self.min_dims[i], self.max_dims[i]);
        }
        RoomSpec::new(dims, uniform(rng, self.t60.0, self.t60.1), sample_rate)
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Multichannel room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    /// `[M × taps]`.
    pub filters: Array2<f64>,
    /// Direct-path peak sample per channel.
    pub peaks: Vec<usize>,
}

impl Rir {
    /// Wraps measured filters, locating each channel's peak by maximum magnitude.
    pub fn from_filters(filters: Array2<f64>) -> Self {
        let peaks = filters
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, 0.0),
                        |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) },
                    )
                    .0
            })
            .collect();
        Self { filters, peaks }
    }

    pub fn num_taps(&self) -> usize {
        self.filters.ncols()
    }
}

fn add_fractional(row: &mut [f64], delay: f64, amp: f64) {
    let half = (FRACTIONAL_TAPS / 2) as i64;
    let center = delay.round() as i64;
    for k in center - half..=center + half {
        if k < 0 || k as usize >= row.len() {
            continue;
        }
        let t = k as f64 - delay;
        let sinc = if t.abs() < 1e-12 {
            1.0
        } else {
            (PI * t).sin() / (PI * t)
        };
        let window = 0.5 + 0.5 * (PI * t / (half as f64 + 1.0)).cos();
        row[k as usize] += amp * sinc * window;
    }
}

/// Cutoff of the high-pass applied to reverberant responses; removes the DC
/// build-up of coinciding positive image taps.
pub const HIGHPASS_HZ: f64 = 80.0;

/// Second-order Butterworth high-pass (bilinear transform), applied causally.
fn highpass_in_place(x: &mut [f64], cutoff: f64, fs: f64) {
    let k = (PI * cutoff / fs).tan();
    let q = std::f64::consts::FRAC_1_SQRT_2;
    let norm = 1.0 / (1.0 + k / q + k * k);
    let (b0, b1, b2) = (norm, -2.0 * norm, norm);
    let (a1, a2) = (2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Image-source RIR from `source` (world coordinates) to the microphones of
/// `array` placed at `center`.
///
/// The engine is deterministic; `seed` is accepted so callers can treat it like
/// a stochastic simulator.
pub fn simulate_rir(room: &RoomSpec, center: Point3, source: Point3, array: &MicArray, _seed: u64) -> Result<Rir> {
    let mics: Vec<Point3> = array.positions().map(|p| center + p).collect();
    if let Some(i) = mics.iter().position(|m| !room.contains(*m, 0.0)) {
        return Err(Error::Geometry(format!("microphone {i} lies outside the room")));
    }
    if !room.contains(source, 0.0) {
        return Err(Error::Geometry("source lies outside the room".into()));
    }
    let c = DEFAULT_SOUND_SPEED;
    let fs = room.sample_rate as f64;
    let beta = room.reflection_coefficient();
    let direct: Vec<f64> = mics.iter().map(|m| (source - m).norm().max(1e-3)).collect();
    let max_direct = direct.iter().cloned().fold(0.0, f64::max);
    let tail = if beta > 0.0 { 1.2 * room.t60 * c } else { 0.0 };
    let max_dist = max_direct + tail;
    let early_limit: Vec<f64> = direct.iter().map(|d| d + EARLY_WINDOW_MS.1 * 1e-3 * c).collect();
    let taps = (max_dist / c * fs).ceil() as usize + FRACTIONAL_TAPS / 2 + 2;
    let mut filters = Array2::<f64>::zeros((mics.len(), taps));

    // Per-axis candidate image coordinates with their wall-hit counts.
    let axis_images = |axis: usize| -> Vec<(f64, i32)> {
        let l = room.dims[axis];
        let s = source[axis];
        if beta == 0.0 {
            return vec![(s, 0)];
        }
        let n_max = (max_dist / (2.0 * l)).ceil() as i32 + 1;
        let mut out = Vec::new();
        for n in -n_max..=n_max {
            for p in 0..2 {
                let coord = (1 - 2 * p) as f64 * s + 2.0 * n as f64 * l;
                out.push((coord, (n - p).abs() + n.abs()));
            }
        }
        out
    };
    let (xs, ys, zs) = (axis_images(0), axis_images(1), axis_images(2));
    let reach = max_dist + array.max_pairwise_distance();
    for &(ix, ox) in &xs {
        let dx = ix - center.x;
        if dx.abs() > reach {
            continue;
        }
        for &(iy, oy) in &ys {
            let dy = iy - center.y;
            if dx * dx + dy * dy > reach * reach {
                continue;
            }
            for &(iz, oz) in &zs {
                let dz = iz - center.z;
                if dx * dx + dy * dy + dz * dz > reach * reach {
                    continue;
                }
                let order = ox + oy + oz;
                let gain = if order == 0 { 1.0 } else { beta.powi(order) };
                let image = Point3::new(ix, iy, iz);
                for (m, mic) in mics.iter().enumerate() {
                    let d = (image - mic).norm().max(1e-3);
                    if d > max_dist + 1e-9 {
                        continue;
                    }
                    let amp = gain / (4.0 * PI * d);
                    let delay = d / c * fs;
                    let mut row = filters.row_mut(m);
                    let row = row.as_slice_mut().expect("contiguous row");
                    if d <= early_limit[m] {
                        add_fractional(row, delay, amp);
                    } else {
                        let k = delay.round() as usize;
                        if k < row.len() {
                            row[k] += amp;
                        }
                    }
                }
            }
        }
    }
    if beta > 0.0 {
        for mut row in filters.outer_iter_mut() {
            highpass_in_place(row.as_slice_mut().expect("contiguous row"), HIGHPASS_HZ, fs);
        }
    }
    let peaks = direct.iter().map(|d| (d / c * fs).round() as usize).collect();
    Ok(Rir { filters, peaks })
}

/// Splits each channel into the `[peak − 6 ms, peak + 50 ms]` window and the rest.
pub fn split_direct_early(rir: &Rir, sample_rate: u32) -> (Rir, Rir) {
    let fs = sample_rate as f64;
    let before = (-EARLY_WINDOW_MS.0 * 1e-3 * fs).round() as usize;
    let after = (EARLY_WINDOW_MS.1 * 1e-3 * fs).round() as usize;
    let mut early = Array2::zeros(rir.filters.dim());
    let mut late = rir.filters.clone();
    for (m, &peak) in rir.peaks.iter().enumerate() {
        let start = peak.saturating_sub(before);
        let end = (peak + after + 1).min(rir.num_taps());
        if start >= end {
            continue;
        }
        early
            .slice_mut(s![m, start..end])
            .assign(&rir.filters.slice(s![m, start..end]));
        late.slice_mut(s![m, start..end]).fill(0.0);
    }
    (
        Rir {
            filters: early,
            peaks: rir.peaks.clone(),
        },
        Rir {
            filters: late,
            peaks: rir.peaks.clone(),
        },
    )
}

/// T60 from a T30 line fit (−5 to −35 dB) on the Schroeder decay curve.
pub fn measure_t60(h: &[f64], sample_rate: u32) -> Option<f64> {
    let mut edc: Vec<f64> = h.iter().map(|v| v * v).collect();
    for i in (0..edc.len().saturating_sub(1)).rev() {
        edc[i] += edc[i + 1];
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).max(1e-30).log10()).collect();
    let pts: Vec<(f64, f64)> = db
        .iter()
        .enumerate()
        .filter(|(_, &d)| (-35.0..=-5.0).contains(&d))
        .map(|(i, &d)| (i as f64 / sample_rate as f64, d))
        .collect();
    if pts.len() < 10 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Renders a mono signal through every channel of `rir`.
pub fn apply_rir(signal: &[f64], rir: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((rir.nrows(), signal.len()));
    for (mut o, h) in out.outer_iter_mut().zip(rir.outer_iter()) {
        let y = fft_convolve(signal, &h.to_vec());
        o.assign(&ndarray::ArrayView1::from(&y));
    }
    out
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Spherically isotropic noise `[M × len]`: white Gaussian channels mixed per
/// frequency so that pair coherence follows `sin(x)/x` with `x = 2πf·d/v`.
pub fn make_isotropic_noise(array: &MicArray, len: usize, sample_rate: u32, seed: u64) -> Array2<f64> {
    let m = array.num_mics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = gaussian_matrix(m, len, &mut rng);
    if len < 2 {
        return white;
    }
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let spectra: Vec<Vec<Complex64>> = white
        .outer_iter()
        .map(|row| {
            let mut buf = row.to_vec();
            let mut out = fwd.make_output_vec();
            fwd.process(&mut buf, &mut out).expect("fft length matches plan");
            out
        })
        .collect();
    let bins = spectra[0].len();
    let positions: Vec<Point3> = array.positions().collect();
    // Mixing matrices on a fine frequency grid, looked up by nearest grid point.
    const GRID: usize = 2048;
    let nyquist = sample_rate as f64 / 2.0;
    let mixers: Vec<DMatrix<f64>> = (0..=GRID)
        .map(|g| {
            let f = nyquist * g as f64 / GRID as f64;
            let gamma = DMatrix::from_fn(m, m, |i, j| {
                let x = 2.0 * PI * f * (positions[i] - positions[j]).norm() / DEFAULT_SOUND_SPEED;
                if x.abs() < 1e-12 {
                    1.0
                } else {
                    x.sin() / x
                }
            });
            let eig = SymmetricEigen::new(gamma);
            let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
            &eig.eigenvectors * sqrt_l
        })
        .collect();
    let mut mixed = vec![vec![Complex64::new(0.0, 0.0); bins]; m];
    for k in 0..bins {
        let f = k as f64 * sample_rate as f64 / len as f64;
        let a = &mixers[((f / nyquist) * GRID as f64).round().min(GRID as f64) as usize];
        for i in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..m {
                acc += spectra[j][k] * a[(i, j)];
            }
            mixed[i][k] = acc;
        }
    }
    let mut out = Array2::zeros((m, len));
    for (i, mut spec) in mixed.into_iter().enumerate() {
        spec[0].im = 0.0;
        if len.is_multiple_of(2) {
            spec[bins - 1].im = 0.0;
        }
        let mut buf = vec![0.0; len];
        inv.process(&mut spec, &mut buf).expect("fft length matches plan");
        for (o, v) in out.row_mut(i).iter_mut().zip(&buf) {
            *o = v / len as f64;
        }
    }
    out
}

/// Reference to a mono source waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SourceRef {
    SyntheticSpeech { seed: u64 },
    SyntheticNoise { seed: u64 },
    File { path: PathBuf, offset: usize },
}

impl SourceRef {
    /// Loads exactly `len` samples (files shorter than that are zero padded).
    pub fn load(&self, len: usize, sample_rate: u32) -> Result<Vec<f64>> {
        match self {
            SourceRef::SyntheticSpeech { seed } => Ok(synth_speech(len, sample_rate, *seed)),
            SourceRef::SyntheticNoise { seed } => Ok(synth_noise(len, sample_rate, *seed)),
            SourceRef::File { path, offset } => {
                let (data, sr) = read_wav(path)?;
                if sr != sample_rate {
                    return Err(Error::Data(format!(
                        "{} is sampled at {sr} Hz, expected {sample_rate} Hz",
                        path.display()
                    )));
                }
                let row = data.row(0);
                let mut out = vec![0.0; len];
                for (o, v) in out.iter_mut().zip(row.iter().skip(*offset)) {
                    *o = *v;
                }
                Ok(out)
            }
        }
    }
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Speech-like test signal: voiced syllables with formant-shaped harmonics,
/// unvoiced bursts and pauses.
pub fn synth_speech(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let mut out = vec![0.0; len];
    let f0_base = rng.gen_range(90.0..220.0);
    let mut t = 0usize;
    while t < len {
        if t > 0 && rng.gen_bool(0.2) {
            t += (rng.gen_range(0.04..0.2) * fs) as usize;
            continue;
        }
        let n = ((rng.gen_range(0.08..0.3) * fs) as usize).max(1);
        let end = (t + n).min(len);
        let formants = [
            (rng.gen_range(300.0..900.0), 120.0),
            (rng.gen_range(900.0..2500.0), 180.0),
            (rng.gen_range(2300.0..3400.0), 250.0),
        ];
        let envelope = |i: usize| (PI * i as f64 / n as f64).sin().powi(2);
        if rng.gen_bool(0.8) {
            let glide = rng.gen_range(-0.25..0.25);
            let f0 = f0_base * rng.gen_range(0.85..1.2);
            let harmonics = ((4500.0 / f0) as usize).max(1);
            let amps: Vec<f64> = (1..=harmonics)
                .map(|h| {
                    let f = h as f64 * f0;
                    0.05 + formants
                        .iter()
                        .map(|(fc, bw)| (-((f - fc) / bw).powi(2)).exp())
                        .sum::<f64>()
                })
                .collect();
            let mut phase = 0.0;
            for i in t..end {
                let u = (i - t) as f64 / n as f64;
                let f = f0 * (1.0 + glide * u + 0.02 * (2.0 * PI * 5.0 * u).sin());
                phase += 2.0 * PI * f / fs;
                let s: f64 = amps
                    .iter()
                    .enumerate()
                    .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                    .sum();
                out[i] += envelope(i - t) * s;
            }
        } else {
            let mut prev = 0.0;
            for i in t..end {
                let w: f64 = StandardNormal.sample(&mut rng);
                out[i] += 0.3 * envelope(i - t) * (w - 0.9 * prev);
                prev = w;
            }
        }
        t = end;
    }
    normalize_rms(&mut out, 0.05);
    out
}

/// Noise-like test signal drawn from several families (white, pink, brown, hum, bursts).
pub fn synth_noise(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let mut white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut out = match rng.gen_range(0..5) {
        0 => white,
        1 => {
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        2 => {
            let mut acc = 0.0;
            white
                .iter()
                .map(|w| {
                    acc = 0.98 * acc + w;
                    acc
                })
                .collect()
        }
        3 => {
            let base = rng.gen_range(50.0..240.0);
            (0..len)
                .map(|i| {
                    let t = i as f64 / fs;
                    (1..6)
                        .map(|h| (2.0 * PI * base * h as f64 * t).sin() / h as f64)
                        .sum::<f64>()
                        + 0.1 * white[i]
                })
                .collect()
        }
        _ => {
            let rate = rng.gen_range(2.0..8.0);
            for (i, w) in white.iter_mut().enumerate() {
                let phase = (i as f64 / fs * rate).fract();
                *w *= (-phase * 20.0).exp();
            }
            white
        }
    };
    normalize_rms(&mut out, 0.05);
    out
}

/// Directory of WAV files split into `speech/` and `noise/` subdirectories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub speech: Vec<PathBuf>,
    pub noise: Vec<PathBuf>,
}

impl Corpus {
    pub fn from_dir(root: &Path) -> Result<Self> {
        let list = |sub: &str| -> Result<Vec<PathBuf>> {
            let dir = root.join(sub);
            if !dir.is_dir() {
                return Ok(Vec::new());
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            Ok(files)
        };
        let corpus = Self {
            speech: list("speech")?,
            noise: list("noise")?,
        };
        if corpus.speech.is_empty() {
            return Err(Error::Data(format!(
                "no speech WAV files under {}",
                root.join("speech").display()
            )));
        }
        Ok(corpus)
    }

    fn speech_ref(&self, rng: &mut impl Rng) -> SourceRef {
        SourceRef::File {
            path: self.speech[rng.gen_range(0..self.speech.len())].clone(),
            offset: 0,
        }
    }

    fn noise_ref(&self, rng: &mut impl Rng) -> SourceRef {
        if self.noise.is_empty() {
            return SourceRef::SyntheticNoise { seed: rng.gen() };
        }
        SourceRef::File {
            path: self.noise[rng.gen_range(0..self.noise.len())].clone(),
            offset: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneProfile {
    Angular,
    Spherical,
    Conical,
}

impl SceneProfile {
    /// Target proportions of `Q = 0, 1, 2`.
    pub fn q_proportions(&self) -> [f64; 3] {
        match self {
            SceneProfile::Angular => [0.27, 0.65, 0.08],
            SceneProfile::Spherical | SceneProfile::Conical => [0.10, 0.45, 0.45],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePreset {
    /// One to four point or isotropic noises, joint SNR.
    Training,
    /// Directional `[0, 2]`, isotropic `[0, 1]` and babble `[10, 20]` talkers,
    /// each type at its own SNR.
    Appendix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub room: RoomPreset,
    pub noise: NoisePreset,
    pub array: MicArray,
    pub sample_rate: u32,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    pub speech_count: (usize, usize),
    pub speech_sir_db: (f64, f64),
    pub noise_sir_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub noise_count: (usize, usize),
    pub isotropic_probability: f64,
    pub directional_count: (usize, usize),
    pub directional_snr_db: (f64, f64),
    pub isotropic_count: (usize, usize),
    pub isotropic_snr_db: (f64, f64),
    pub babble_talkers: (usize, usize),
    pub babble_snr_db: (f64, f64),
    pub angular_width: (f64, f64),
    pub distance_threshold: (f64, f64),
    /// Closest a speaker may be to the array center.
    pub min_source_distance: f64,
    pub max_source_distance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            room: RoomPreset::named("default").expect("built-in preset"),
            noise: NoisePreset::Training,
            array: MicArray::preset("circ8_5cm").expect("built-in preset"),
            sample_rate: 16_000,
            duration: (4.0, 6.0),
            speech_count: (1, 2),
            speech_sir_db: (-6.0, 6.0),
            noise_sir_db: (-15.0, 15.0),
            snr_db: (5.0, 15.0),
            noise_count: (1, 4),
            isotropic_probability: 0.25,
            directional_count: (0, 2),
            directional_snr_db: (6.0, 15.0),
            isotropic_count: (0, 1),
            isotropic_snr_db: (8.0, 15.0),
            babble_talkers: (10, 20),
            babble_snr_db: (20.0, 40.0),
            angular_width: (30.0, 90.0),
            distance_threshold: (0.2, 2.0),
            min_source_distance: 0.1,
            max_source_distance: 5.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (a, b): (f64, f64)| {
            if a.is_finite() && b.is_finite() && a <= b {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range [{a}, {b}] is invalid")))
            }
        };
        ordered("duration", self.duration)?;
        ordered("speech_sir_db", self.speech_sir_db)?;
        ordered("noise_sir_db", self.noise_sir_db)?;
        ordered("snr_db", self.snr_db)?;
        ordered("angular_width", self.angular_width)?;
        ordered("distance_threshold", self.distance_threshold)?;
        if self.duration.0 <= 0.0 {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.speech_count.0 < 1 || self.speech_count.1 > 2 || self.speech_count.0 > self.speech_count.1 {
            return Err(Error::Config("speech_count must lie within [1, 2]".into()));
        }
        if self.noise_count.0 > self.noise_count.1 || self.babble_talkers.0 > self.babble_talkers.1 {
            return Err(Error::Config("count ranges must be ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.isotropic_probability) {
            return Err(Error::Config("isotropic_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A positioned point source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedSource {
    /// Room coordinates in meters.
    pub position: [f64; 3],
    /// Pose relative to the array center.
    pub pose: SourcePose,
    pub signal: SourceRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSource {
    Directional {
        source: PlacedSource,
    },
    Isotropic {
        seed: u64,
    },
    /// Independent Gaussian noise on every channel.
    White {
        seed: u64,
    },
    Babble {
        talkers: Vec<PlacedSource>,
    },
}

/// Noises scaled together: `sir_db[j]` is the level of source 0 over source `j`;
/// the group sum sits `snr_db` below the speech sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseGroup {
    pub name: String,
    pub sources: Vec<NoiseSource>,
    pub sir_db: Vec<f64>,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub profile: SceneProfile,
    pub room: RoomSpec,
    pub array: MicArray,
    pub array_center: [f64; 3],
    pub num_samples: usize,
    pub speech: Vec<PlacedSource>,
    /// Level of speech 0 over speech `c`, in dB (entry 0 is 0).
    pub speech_sir_db: Vec<f64>,
    pub noise_groups: Vec<NoiseGroup>,
    pub query: QueryRegion,
    pub q: usize,
}

impl SceneSpec {
    /// Number of speakers inside the query.
    pub fn count_in_region(&self) -> usize {
        self.speech.iter().filter(|s| self.query.contains(&s.pose)).count()
    }

    pub fn duration(&self) -> f64 {
        self.num_samples as f64 / self.room.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub q: usize,
    /// Realized speech 0 over speech `c` levels at the reference channel.
    pub speech_sir_db: Vec<f64>,
    /// Realized speech-sum over group-sum levels.
    pub group_snr_db: Vec<f64>,
    pub in_region: Vec<bool>,
}

/// Rendered scene with every scaled component kept for checks and oracles.
#[derive(Debug, Clone)]
pub struct SceneAudio {
    /// `[M × T]`.
    pub mixture: Array2<f64>,
    /// Direct + early sum of in-region speakers at the reference channel.
    pub target: Vec<f64>,
    /// Direct + early sum of in-region speakers at every channel.
    pub target_multichannel: Array2<f64>,
    pub speech_images: Vec<Array2<f64>>,
    pub speech_early: Vec<Array2<f64>>,
    pub noise_images: Vec<Array2<f64>>,
    pub metadata: SceneMetadata,
}

fn energy(x: impl IntoIterator<Item = f64>) -> f64 {
    x.into_iter().map(|v| v * v).sum()
}

fn ref_energy(a: &Array2<f64>) -> f64 {
    energy(a.row(REFERENCE_MIC).iter().copied())
}

fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

fn render_point(spec: &SceneSpec, src: &PlacedSource, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let signal = src.signal.load(spec.num_samples, spec.room.sample_rate)?;
    if energy(signal.iter().copied()) <= 0.0 {
        return Err(Error::Data(format!("source {:?} has zero energy", src.signal)));
    }
    let rir = simulate_rir(
        &spec.room,
        point(spec.array_center),
        point(src.position),
        &spec.array,
        seed,
    )?;
    let (early, _) = split_direct_early(&rir, spec.room.sample_rate);
    Ok((apply_rir(&signal, &rir.filters), apply_rir(&signal, &early.filters)))
}

fn render_noise(spec: &SceneSpec, noise: &NoiseSource, seed: u64) -> Result<Array2<f64>> {
    let (m, len, sr) = (spec.array.num_mics(), spec.num_samples, spec.room.sample_rate);
    Ok(match noise {
        NoiseSource::Directional { source } => render_point(spec, source, seed)?.0,
        NoiseSource::Isotropic { seed } => make_isotropic_noise(&spec.array, len, sr, *seed),
        NoiseSource::White { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            gaussian_matrix(m, len, &mut rng)
        }
        NoiseSource::Babble { talkers } => make_babble(spec, talkers)?,
    })
}

/// Sum of individually rendered reverberant talkers.
pub fn make_babble(spec: &SceneSpec, talkers: &[PlacedSource]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((spec.array.num_mics(), spec.num_samples));
    for (i, t) in talkers.iter().enumerate() {
        if t.pose.distance < BABBLE_MIN_DISTANCE - 1e-9 {
            return Err(Error::Geometry(format!(
                "babble talker {i} is {} m from the array, closer than {BABBLE_MIN_DISTANCE} m",
                t.pose.distance
            )));
        }
        out += &render_point(spec, t, spec.seed ^ (i as u64 + 1000))?.0;
    }
    Ok(out)
}

/// Renders `spec` into a mixture, its in-region target and the scaled components.
pub fn mix_scene(spec: &SceneSpec) -> Result<SceneAudio> {
    if spec.speech.is_empty() {
        return Err(Error::Input("scene has no speech source".into()));
    }
    if spec.speech_sir_db.len() != spec.speech.len() {
        return Err(Error::Input(
            "speech_sir_db must have one entry per speech source".into(),
        ));
    }
    let mut images = Vec::new();
    let mut early = Vec::new();
    for (c, src) in spec.speech.iter().enumerate() {
        let (img, e) = render_point(spec, src, spec.seed.wrapping_add(c as u64))?;
        images.push(img);
        early.push(e);
    }
    let e0 = ref_energy(&images[0]);
    if e0 <= 0.0 {
        return Err(Error::Data(
            "first speech source is silent at the reference microphone".into(),
        ));
    }
    for c in 0..images.len() {
        let ec = ref_energy(&images[c]);
        if ec <= 0.0 {
            return Err(Error::Data(format!(
                "speech source {c} is silent at the reference microphone"
            )));
        }
        let gain = (e0 / ec / 10f64.powf(spec.speech_sir_db[c] / 10.0)).sqrt();
        images[c] *= gain;
        early[c] *= gain;
    }
    let speech_sum = images.iter().fold(Array2::zeros(images[0].dim()), |acc, x| acc + x);
    let speech_energy = ref_energy(&speech_sum);

    let mut noise_images = Vec::new();
    for (g, group) in spec.noise_groups.iter().enumerate() {
        if group.sources.is_empty() {
            continue;
        }
        if group.sir_db.len() != group.sources.len() {
            return Err(Error::Input(format!(
                "noise group {} needs one SIR per source",
                group.name
            )));
        }
        let mut rendered = Vec::new();
        for (j, n) in group.sources.iter().enumerate() {
            let seed = spec.seed.wrapping_mul(31).wrapping_add((g * 64 + j) as u64 + 17);
            rendered.push(render_noise(spec, n, seed)?);
        }
        let n0 = ref_energy(&rendered[0]);
        for (j, r) in rendered.iter_mut().enumerate() {
            let ej = ref_energy(r);
            if ej <= 0.0 || n0 <= 0.0 {
                return Err(Error::Data(format!(
                    "noise {j} of group {} has zero energy",
                    group.name
                )));
            }
            *r *= (n0 / ej / 10f64.powf(group.sir_db[j] / 10.0)).sqrt();
        }
        let sum = rendered.iter().fold(Array2::zeros(speech_sum.dim()), |acc, x| acc + x);
        let gain = (speech_energy / ref_energy(&sum) / 10f64.powf(group.snr_db / 10.0)).sqrt();
        for mut r in rendered {
            r *= gain;
            noise_images.push(r);
        }
    }

    let mut mixture = speech_sum.clone();
    for n in &noise_images {
        mixture += n;
    }
    let peak = mixture.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    if scale != 1.0 {
        mixture *= scale;
        images.iter_mut().for_each(|x| *x *= scale);
        early.iter_mut().for_each(|x| *x *= scale);
        noise_images.iter_mut().for_each(|x| *x *= scale);
    }

    let in_region: Vec<bool> = spec.speech.iter().map(|s| spec.query.contains(&s.pose)).collect();
    let mut target_multichannel = Array2::zeros(mixture.dim());
    for (e, &inside) in early.iter().zip(&in_region) {
        if inside {
            target_multichannel += e;
        }
    }
    let target = target_multichannel.row(REFERENCE_MIC).to_vec();

    let e0 = ref_energy(&images[0]);
    let speech_sir_db = images.iter().map(|x| db(e0 / ref_energy(x))).collect();
    let speech_energy = ref_energy(&images.iter().fold(Array2::zeros(mixture.dim()), |acc, x| acc + x));
    let mut group_snr_db = Vec::new();
    let mut offset = 0;
    for group in spec.noise_groups.iter().filter(|g| !g.sources.is_empty()) {
        let sum = noise_images[offset..offset + group.sources.len()]
            .iter()
            .fold(Array2::zeros(mixture.dim()), |acc, x| acc + x);
        group_snr_db.push(db(speech_energy / ref_energy(&sum)));
        offset += group.sources.len();
    }
    Ok(SceneAudio {
        mixture,
        target,
        target_multichannel,
        speech_images: images,
        speech_early: early,
        noise_images,
        metadata: SceneMetadata {
            q: in_region.iter().filter(|b| **b).count(),
            speech_sir_db,
            group_snr_db,
            in_region,
        },
    })
}

/// Membership a placed speaker must satisfy.
#[derive(Debug, Clone, Copy)]
enum Want {
    Inside,
    Outside,
}

fn draw_query(profile: SceneProfile, cfg: &SimConfig, rng: &mut impl Rng) -> Result<QueryRegion> {
    let angles = |rng: &mut dyn rand::RngCore| {
        let width = uniform_dyn(rng, cfg.angular_width.0, cfg.angular_width.1);
        let lo = uniform_dyn(rng, -180.0, 180.0);
        (lo, lo + width)
    };
    match profile {
        SceneProfile::Angular => {
            let (lo, hi) = angles(rng);
            QueryRegion::angular(lo, hi)
        }
        SceneProfile::Spherical => {
            QueryRegion::spherical(uniform(rng, cfg.distance_threshold.0, cfg.distance_threshold.1))
        }
        SceneProfile::Conical => {
            let (lo, hi) = angles(rng);
            QueryRegion::conical(lo, hi, uniform(rng, cfg.distance_threshold.0, cfg.distance_threshold.1))
        }
    }
}

fn uniform_dyn(rng: &mut dyn rand::RngCore, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Rejection-samples a position around the array satisfying `want` and the room margins.
fn place(
    room: &RoomSpec,
    center: Point3,
    query: &QueryRegion,
    want: Option<Want>,
    distance: (f64, f64),
    others: &[Point3],
    rng: &mut impl Rng,
) -> Option<(Point3, SourcePose)> {
    for _ in 0..4000 {
        let az = rng.gen_range(-180.0..180.0);
        let el = rng.gen_range(-45.0..45.0);
        let d = uniform(rng, distance.0, distance.1);
        let Ok(pose) = SourcePose::new(az, el, d) else { continue };
        let p = center + pose.to_cartesian();
        if !room.contains(p, WALL_MARGIN) || others.iter().any(|o| (o - p).norm() < 0.3) {
            continue;
        }
        let ok = match want {
            Some(Want::Inside) => query.contains(&pose),
            Some(Want::Outside) => !query.contains(&pose),
            None => true,
        };
        if ok {
            return Some((p, pose));
        }
    }
    None
}

fn draw_q(profile: SceneProfile, rng: &mut impl Rng) -> usize {
    let [p0, p1, _] = profile.q_proportions();
    let u: f64 = rng.gen();
    if u < p0 {
        0
    } else if u < p0 + p1 {
        1
    } else {
        2
    }
}

fn try_scene(
    profile: SceneProfile,
    cfg: &SimConfig,
    seed: u64,
    q: usize,
    corpus: Option<&Corpus>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<SceneSpec>> {
    let room = cfg.room.sample(cfg.sample_rate, rng)?;
    let extent = cfg.array.positions().map(|p| p.norm()).fold(0.0, f64::max);
    let mut center = Point3::zeros();
    for i in 0..3 {
        let margin = WALL_MARGIN + extent;
        center[i] = uniform(rng, margin, room.dims[i] - margin);
    }
    if !room.contains(center, WALL_MARGIN) {
        return Ok(None);
    }
    let query = draw_query(profile, cfg, rng)?;
    let c_min = cfg.speech_count.0.max(q).max(1);
    let c_max = cfg.speech_count.1.max(c_min);
    let c = rng.gen_range(c_min..=c_max);
    let mut wants: Vec<Want> = (0..c)
        .map(|i| if i < q { Want::Inside } else { Want::Outside })
        .collect();
    // Randomize which speaker index is the in-region one.
    for i in (1..wants.len()).rev() {
        wants.swap(i, rng.gen_range(0..=i));
    }
    let mut positions = Vec::new();
    let mut speech = Vec::new();
    for want in wants {
        let Some((p, pose)) = place(
            &room,
            center,
            &query,
            Some(want),
            (cfg.min_source_distance, cfg.max_source_distance),
            &positions,
            rng,
        ) else {
            return Ok(None);
        };
        positions.push(p);
        let signal = match corpus {
            Some(c) => c.speech_ref(rng),
            None => SourceRef::SyntheticSpeech { seed: rng.gen() },
        };
        speech.push(PlacedSource {
            position: arr(p),
            pose,
            signal,
        });
    }
    let speech_sir_db: Vec<f64> = (0..c)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                uniform(rng, cfg.speech_sir_db.0, cfg.speech_sir_db.1)
            }
        })
        .collect();

    let noise_ref = |rng: &mut ChaCha8Rng| match corpus {
        Some(c) => c.noise_ref(rng),
        None => SourceRef::SyntheticNoise { seed: rng.gen() },
    };
    let directional = |rng: &mut ChaCha8Rng, positions: &mut Vec<Point3>| -> Option<NoiseSource> {
        let (p, pose) = place(
            &room,
            center,
            &query,
            None,
            (0.3, cfg.max_source_distance),
            positions,
            rng,
        )?;
        positions.push(p);
        Some(NoiseSource::Directional {
            source: PlacedSource {
                position: arr(p),
                pose,
                signal: noise_ref(rng),
            },
        })
    };
    let sirs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    uniform(rng, cfg.noise_sir_db.0, cfg.noise_sir_db.1)
                }
            })
            .collect()
    };
    let mut noise_groups = Vec::new();
    match cfg.noise {
        NoisePreset::Training => {
            let n = rng.gen_range(cfg.noise_count.0..=cfg.noise_count.1);
            let mut sources = Vec::new();
            for _ in 0..n {
                if rng.gen_bool(cfg.isotropic_probability) {
                    sources.push(NoiseSource::Isotropic { seed: rng.gen() });
                } else {
                    match directional(rng, &mut positions) {
                        Some(s) => sources.push(s),
                        None => return Ok(None),
                    }
                }
            }
            let sir_db = sirs(sources.len(), rng);
            noise_groups.push(NoiseGroup {
                name: "noise".into(),
                sources,
                sir_db,
                snr_db: uniform(rng, cfg.snr_db.0, cfg.snr_db.1),
            });
        }
        NoisePreset::Appendix => {
            let n = rng.gen_range(cfg.directional_count.0..=cfg.directional_count.1);
            let mut sources = Vec::new();
            for _ in 0..n {
                match directional(rng, &mut positions) {
                    Some(s) => sources.push(s),
                    None => return Ok(None),
                }
            }
            let sir_db = sirs(sources.len(), rng);
            noise_groups.push(NoiseGroup {
                name: "directional".into(),
                sources,
                sir_db,
                snr_db: uniform(rng, cfg.directional_snr_db.0, cfg.directional_snr_db.1),
            });
            let n = rng.gen_range(cfg.isotropic_count.0..=cfg.isotropic_count.1);
            let sources: Vec<NoiseSource> = (0..n).map(|_| NoiseSource::Isotropic { seed: rng.gen() }).collect();
            noise_groups.push(NoiseGroup {
                name: "isotropic".into(),
                sir_db: vec![0.0; sources.len()],
                sources,
                snr_db: uniform(rng, cfg.isotropic_snr_db.0, cfg.isotropic_snr_db.1),
            });
            let count = rng.gen_range(cfg.babble_talkers.0..=cfg.babble_talkers.1);
            let mut talkers = Vec::with_capacity(count);
            let mut babble_positions = Vec::new();
            for _ in 0..count {
                let Some((p, pose)) = place(
                    &room,
                    center,
                    &query,
                    None,
                    (BABBLE_MIN_DISTANCE, BABBLE_MIN_DISTANCE + 6.0),
                    &babble_positions,
                    rng,
                ) else {
                    return Ok(None);
                };
                babble_positions.push(p);
                let signal = match corpus {
                    Some(c) => c.speech_ref(rng),
                    None => SourceRef::SyntheticSpeech { seed: rng.gen() },
                };
                talkers.push(PlacedSource {
                    position: arr(p),
                    pose,
                    signal,
                });
            }
            noise_groups.push(NoiseGroup {
                name: "babble".into(),
                sources: vec![NoiseSource::Babble { talkers }],
                sir_db: vec![0.0],
                snr_db: uniform(rng, cfg.babble_snr_db.0, cfg.babble_snr_db.1),
            });
        }
    }
    let duration = uniform(rng, cfg.duration.0, cfg.duration.1);
    let spec = SceneSpec {
        seed,
        profile,
        room,
        array: cfg.array.clone(),
        array_center: arr(center),
        num_samples: (duration * cfg.sample_rate as f64).round() as usize,
        speech,
        speech_sir_db,
        noise_groups,
        query,
        q,
    };
    debug_assert_eq!(spec.count_in_region(), q);
    Ok(Some(spec))
}

/// Draws a scene for `profile`; `Q` follows the profile's proportions.
pub fn random_scene(profile: SceneProfile, cfg: &SimConfig, seed: u64, corpus: Option<&Corpus>) -> Result<SceneSpec> {
    cfg.validate()?;
    if let (NoisePreset::Appendix, Some(c)) = (cfg.noise, corpus) {
        if c.speech.len() < cfg.babble_talkers.0 {
            return Err(Error::Data(format!(
                "babble needs at least {} speech files, corpus has {}",
                cfg.babble_talkers.0,
                c.speech.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = draw_q(profile, &mut rng).min(cfg.speech_count.1);
    for _ in 0..200 {
        if let Some(spec) = try_scene(profile, cfg, seed, q, corpus, &mut rng)? {
            return Ok(spec);
        }
    }
    Err(Error::Geometry(format!(
        "could not place scene sources for seed {seed}"
    )))
}

/// A narrow scene family: a free-field room, two speakers at fixed positions,
/// spatially white noise, and an angular query around speaker 0, speaker 1 or
/// neither.
pub fn fixed_family_scene(array: &MicArray, sample_rate: u32, num_samples: usize, seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = RoomSpec::new([6.0, 5.0, 3.0], 0.0, sample_rate)?;
    let center = Point3::new(3.0, 2.5, 1.2);
    let poses = [SourcePose::new(40.0, 0.0, 1.0)?, SourcePose::new(-110.0, 0.0, 1.4)?];
    let speech: Vec<PlacedSource> = poses
        .iter()
        .map(|pose| PlacedSource {
            position: arr(center + pose.to_cartesian()),
            pose: *pose,
            signal: SourceRef::SyntheticSpeech { seed: rng.gen() },
        })
        .collect();
    let width = rng.gen_range(40.0..70.0);
    let jitter = rng.gen_range(-10.0..10.0);
    let mid = match rng.gen_range(0..3) {
        0 => 40.0,
        1 => -110.0,
        _ => 150.0,
    } + jitter;
    let query = QueryRegion::angular(mid - width / 2.0, mid + width / 2.0)?;
    let mut spec = SceneSpec {
        seed,
        profile: SceneProfile::Angular,
        room,
        array: array.clone(),
        array_center: arr(center),
        num_samples,
        speech_sir_db: vec![0.0, rng.gen_range(-3.0..3.0)],
        speech,
        noise_groups: vec![NoiseGroup {
            name: "white".into(),
            sources: vec![NoiseSource::White { seed: rng.gen() }],
            sir_db: vec![0.0],
            snr_db: rng.gen_range(10.0..20.0),
        }],
        query,
        q: 0,
    };
    spec.q = spec.count_in_region();
    Ok(spec)
}

/// One JSON-lines manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scene: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        for e in entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Reference-channel sum of all noise components.
pub fn noise_reference(audio: &SceneAudio) -> Vec<f64> {
    let mut out = vec![0.0; audio.mixture.ncols()];
    for n in &audio.noise_images {
        for (o, v) in out.iter_mut().zip(n.row(REFERENCE_MIC)) {
            *o += v;
        }
    }
    out
}

/// Everything in the mixture that is not the in-region target, all channels.
pub fn interference(audio: &SceneAudio) -> Array2<f64> {
    &audio.mixture - &audio.target_multichannel
}

/// Per-channel energies, used by statistical checks.
pub fn channel_energies(x: &Array2<f64>) -> Vec<f64> {
    x.axis_iter(Axis(0)).map(|r| energy(r.iter().copied())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn two_mic(spacing: f64) -> MicArray {
        MicArray::linear(2, spacing).unwrap()
    }

    #[test]
    fn room_validation() {
        assert!(RoomSpec::new([3.0, 3.0, 2.5], 0.3, 16000).is_ok());
        assert!(RoomSpec::new([3.0, 3.0, 2.5], 0.9, 16000).is_err());
        assert!(RoomSpec::new([0.8, 3.0, 2.5], 0.3, 16000).is_err());
        assert!(RoomSpec::new([3.0, 3.0, 2.5], 0.0, 16000).is_ok());
        assert!(RoomPreset::named("nope").is_err());
    }

    #[test]
    fn anechoic_rir_is_delayed_impulse() {
        let room = RoomSpec::new([6.0, 5.0, 3.0], 0.0, 16000).unwrap();
        let array = two_mic(0.05);
        let center = Point3::new(2.0, 2.5, 1.5);
        let src = center + Point3::new(0.0, 1.0, 0.0);
        let rir = simulate_rir(&room, center, src, &array, 0).unwrap();
        let d = (1.0f64 + 0.025 * 0.025).sqrt();
        let expect_peak = (d / 343.0 * 16000.0).round() as usize;
        assert_eq!(rir.peaks, vec![expect_peak; 2]);
        assert_eq!(expect_peak, 47);
        let (early, late) = split_direct_early(&rir, 16000);
        assert_eq!(early.filters, rir.filters);
        assert!(late.filters.iter().all(|v| *v == 0.0));
        // Energy sits at the direct path: the 1/(4πd) amplitude.
        let sum: f64 = rir.filters.row(0).iter().sum();
        assert!((sum - 1.0 / (4.0 * PI * d)).abs() < 0.02 / (4.0 * PI * d));
    }

    #[test]
    fn direct_peak_one_meter() {
        let room = RoomSpec::new([6.13, 4.71, 2.93], 0.3, 16000).unwrap();
        let array = two_mic(0.05);
        let center = Point3::new(2.17, 1.93, 1.41);
        let mic0 = center + array.position(0);
        let src = mic0 + Point3::new(0.0, 1.0, 0.0);
        let rir = simulate_rir(&room, center, src, &array, 0).unwrap();
        assert_eq!(rir.peaks[0], 47);
        let argmax = Rir::from_filters(rir.filters.clone()).peaks[0];
        assert_eq!(argmax, 47);
    }

    #[test]
    fn endfire_delay_difference() {
        let room = RoomSpec::new([6.0, 5.0, 3.0], 0.0, 16000).unwrap();
        let array = two_mic(0.05);
        let center = Point3::new(3.0, 2.5, 1.5);
        let src = center + Point3::new(2.0, 0.0, 0.0);
        let rir = simulate_rir(&room, center, src, &array, 0).unwrap();
        let (a, b) = (rir.filters.row(0).to_vec(), rir.filters.row(1).to_vec());
        // Cross-correlation on an 8x oversampled lag grid.
        let xc = |lag: f64| -> f64 {
            // Shift b by `lag` samples through band-limited interpolation of its taps.
            let mut acc = 0.0;
            for (n, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let pos = n as f64 - lag;
                let k0 = pos.floor() as i64;
                let mut v = 0.0;
                for k in k0 - 40..=k0 + 40 {
                    if k < 0 || k as usize >= b.len() {
                        continue;
                    }
                    let t = pos - k as f64;
                    let sinc = if t.abs() < 1e-12 {
                        1.0
                    } else {
                        (PI * t).sin() / (PI * t)
                    };
                    v += b[k as usize] * sinc;
                }
                acc += av * v;
            }
            acc
        };
        let best = (0..=48)
            .map(|i| i as f64 / 8.0)
            .max_by(|x, y| xc(*x).total_cmp(&xc(*y)))
            .unwrap();
        let expected = 0.05 * 16000.0 / 343.0;
        assert!((best - expected).abs() < 0.2, "{best} vs {expected}");
    }

    #[test]
    fn measured_t60_tracks_request() {
        let array = two_mic(0.05);
        for (dims, t60) in [([6.0, 5.0, 3.0], 0.3), ([4.0, 3.5, 2.7], 0.5)] {
            let room = RoomSpec::new(dims, t60, 16000).unwrap();
            let center = Point3::new(dims[0] * 0.4, dims[1] * 0.5, 1.3);
            let src = Point3::new(dims[0] * 0.7, dims[1] * 0.3, 1.6);
            let rir = simulate_rir(&room, center, src, &array, 0).unwrap();
            let measured = measure_t60(&rir.filters.row(0).to_vec(), 16000).unwrap();
            assert!((measured / t60 - 1.0).abs() < 0.2, "{measured} vs {t60}");
        }
    }

    #[test]
    fn late_energy_grows_with_t60() {
        let array = two_mic(0.05);
        let center = Point3::new(2.5, 2.0, 1.3);
        let src = Point3::new(4.0, 3.0, 1.5);
        let late = |t60| {
            let room = RoomSpec::new([6.0, 5.0, 3.0], t60, 16000).unwrap();
            let rir = simulate_rir(&room, center, src, &array, 3).unwrap();
            let (early, late) = split_direct_early(&rir, 16000);
            assert_eq!(&early.filters + &late.filters, rir.filters);
            late.filters.iter().map(|v| v * v).sum::<f64>()
        };
        assert!(late(0.7) > late(0.1));
    }

    #[test]
    fn rir_outside_room_rejected() {
        let room = RoomSpec::new([4.0, 4.0, 3.0], 0.2, 16000).unwrap();
        let array = two_mic(0.05);
        let r = simulate_rir(&room, Point3::new(2.0, 2.0, 1.0), Point3::new(5.0, 2.0, 1.0), &array, 0);
        assert!(r.is_err());
    }

    #[test]
    fn isotropic_noise_single_channel_variance() {
        let positions = vec![Point3::zeros(), Point3::new(0.1, 0.0, 0.0)];
        let array = MicArray::new(positions, crate::geometry::ArrayLayout::Custom).unwrap();
        let n = make_isotropic_noise(&array, 32000, 16000, 4);
        for row in n.outer_iter() {
            let var = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            assert!((var - 1.0).abs() < 0.05, "variance {var}");
        }
    }

    fn welch_coherence(x: &Array2<f64>, i: usize, j: usize) -> (Vec<f64>, StftConfig) {
        let cfg = StftConfig::default();
        let spec = stft(x, &cfg).unwrap();
        let (t, f) = (spec.num_frames(), spec.num_bins());
        let mut out = Vec::with_capacity(f);
        for k in 0..f {
            let (mut sxy, mut sxx, mut syy) = (Complex64::new(0.0, 0.0), 0.0, 0.0);
            for tt in 0..t {
                let (a, b) = (spec.data[[i, tt, k]], spec.data[[j, tt, k]]);
                sxy += a * b.conj();
                sxx += a.norm_sqr();
                syy += b.norm_sqr();
            }
            out.push(sxy.re / (sxx * syy).sqrt());
        }
        (out, cfg)
    }

    #[test]
    fn isotropic_noise_coherence_follows_sinc() {
        let array = MicArray::linear(8, 0.225).unwrap();
        let n = make_isotropic_noise(&array, 16000 * 8, 16000, 11);
        for (i, j) in [(0, 7), (0, 1), (2, 5)] {
            let d = (array.position(i) - array.position(j)).norm();
            let (coh, cfg) = welch_coherence(&n, i, j);
            let mut err = 0.0;
            let mut count = 0;
            for (k, c) in coh.iter().enumerate() {
                let f = cfg.bin_frequency(k);
                if !(200.0..=4000.0).contains(&f) {
                    continue;
                }
                let x = 2.0 * PI * f * d / DEFAULT_SOUND_SPEED;
                err += (c - x.sin() / x).abs();
                count += 1;
            }
            assert!(
                err / (count as f64) < 0.1,
                "pair ({i},{j}) mean error {}",
                err / count as f64
            );
        }
        // 0.225 m pair at 2 kHz: sin(x)/x with x = 2π·2000·0.225/343 ≈ 8.244.
        let x = 2.0 * PI * 2000.0 * 0.225 / 343.0;
        let expected = x.sin() / x;
        assert!((expected - 0.1122).abs() < 1e-3);
        let (coh, cfg) = welch_coherence(&n, 0, 7);
        let k = (2000.0 / cfg.bin_width()).round() as usize;
        let local = coh[k - 2..=k + 2].iter().sum::<f64>() / 5.0;
        assert!((local - expected).abs() < 0.1, "{local} vs {expected}");
    }

    fn small_cfg() -> SimConfig {
        SimConfig {
            duration: (0.5, 0.5),
            room: RoomPreset {
                min_dims: [5.0, 4.0, 3.0],
                max_dims: [6.0, 5.0, 3.0],
                t60: (0.1, 0.2),
            },
            ..SimConfig::default()
        }
    }

    #[test]
    fn mixing_realizes_levels_and_additivity() {
        let cfg = small_cfg();
        for seed in 0..4 {
            let spec = random_scene(SceneProfile::Angular, &cfg, seed, None).unwrap();
            let audio = mix_scene(&spec).unwrap();
            for (a, b) in audio.metadata.speech_sir_db.iter().zip(&spec.speech_sir_db) {
                assert!((a - b).abs() < 0.01);
            }
            assert!((audio.metadata.group_snr_db[0] - spec.noise_groups[0].snr_db).abs() < 0.01);
            let mut sum = Array2::zeros(audio.mixture.dim());
            for x in audio.speech_images.iter().chain(&audio.noise_images) {
                sum += x;
            }
            let err = (&sum - &audio.mixture).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-9);
            assert_eq!(audio.metadata.q, spec.q);
            if spec.q == 0 {
                assert!(audio.target.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn mixing_is_deterministic() {
        let cfg = small_cfg();
        let a = random_scene(SceneProfile::Conical, &cfg, 9, None).unwrap();
        let b = random_scene(SceneProfile::Conical, &cfg, 9, None).unwrap();
        assert_eq!(a, b);
        let (x, y) = (mix_scene(&a).unwrap(), mix_scene(&b).unwrap());
        assert_eq!(x.mixture, y.mixture);
        assert_eq!(x.target, y.target);
    }

    #[test]
    fn anechoic_in_region_target_is_mixture_minus_noise() {
        let array = MicArray::preset("circ8_5cm").unwrap();
        let mut spec = fixed_family_scene(&array, 16000, 8000, 3).unwrap();
        spec.query = QueryRegion::angular(-180.0, 180.0).unwrap();
        spec.q = spec.count_in_region();
        assert_eq!(spec.q, 2);
        let audio = mix_scene(&spec).unwrap();
        let noise = noise_reference(&audio);
        for ((t, m), n) in audio.target.iter().zip(audio.mixture.row(0)).zip(&noise) {
            assert!((t - (m - n)).abs() < 1e-6);
        }
    }

    #[test]
    fn scene_placement_constraints() {
        let cfg = SimConfig::default();
        for seed in 0..200 {
            let profile = [SceneProfile::Angular, SceneProfile::Spherical, SceneProfile::Conical][seed % 3];
            let spec = random_scene(profile, &cfg, seed as u64, None).unwrap();
            assert_eq!(spec.count_in_region(), spec.q);
            for s in &spec.speech {
                assert!(spec.room.contains(point(s.position), WALL_MARGIN));
            }
            if profile != SceneProfile::Spherical {
                let w = spec.query.azimuth_width();
                assert!((30.0..=90.0).contains(&w));
            }
            if profile != SceneProfile::Angular {
                assert!((0.2..=2.0).contains(&spec.query.distance.1));
            }
        }
    }

    #[test]
    fn appendix_babble_bounds() {
        let cfg = SimConfig {
            noise: NoisePreset::Appendix,
            ..SimConfig::default()
        };
        let (mut lo, mut hi) = (usize::MAX, 0);
        for seed in 0..100 {
            let spec = random_scene(SceneProfile::Angular, &cfg, seed, None).unwrap();
            let babble = spec.noise_groups.iter().find(|g| g.name == "babble").unwrap();
            let NoiseSource::Babble { talkers } = &babble.sources[0] else {
                panic!()
            };
            lo = lo.min(talkers.len());
            hi = hi.max(talkers.len());
            assert!(talkers.iter().all(|t| t.pose.distance >= BABBLE_MIN_DISTANCE));
            assert!(talkers
                .iter()
                .all(|t| spec.room.contains(point(t.position), WALL_MARGIN)));
        }
        assert!(lo >= 10 && hi <= 20);
    }

    #[test]
    fn babble_energy_is_additive() {
        let cfg = SimConfig {
            noise: NoisePreset::Appendix,
            duration: (1.0, 1.0),
            room: RoomPreset {
                min_dims: [7.0, 6.0, 3.0],
                max_dims: [7.0, 6.0, 3.0],
                t60: (0.1, 0.1),
            },
            ..SimConfig::default()
        };
        let spec = random_scene(SceneProfile::Angular, &cfg, 5, None).unwrap();
        let babble = spec.noise_groups.iter().find(|g| g.name == "babble").unwrap();
        let NoiseSource::Babble { talkers } = &babble.sources[0] else {
            panic!()
        };
        let total = make_babble(&spec, talkers).unwrap();
        let parts: f64 = talkers
            .iter()
            .enumerate()
            .map(|(i, t)| ref_energy(&render_point(&spec, t, spec.seed ^ (i as u64 + 1000)).unwrap().0))
            .sum();
        let ratio = ref_energy(&total) / parts;
        assert!((ratio - 1.0).abs() < 0.25, "energy ratio {ratio}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("rsx-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = small_cfg();
        let entries: Vec<ManifestEntry> = (0..3)
            .map(|i| ManifestEntry {
                id: format!("s{i}"),
                scene: random_scene(SceneProfile::Spherical, &cfg, i, None).unwrap(),
                mixture: Some(PathBuf::from(format!("s{i}_mix.wav"))),
                target: None,
            })
            .collect();
        let path = dir.join("m.jsonl");
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthetic_sources_are_deterministic_and_normalized() {
        let a = synth_speech(16000, 16000, 1);
        assert_eq!(a, synth_speech(16000, 16000, 1));
        let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - 0.05).abs() < 1e-9);
        for seed in 0..10 {
            let n = synth_noise(8000, 16000, seed);
            assert!(n.iter().all(|v| v.is_finite()));
        }
        for seed in 0..2000 {
            let s = synth_speech(800, 16000, seed);
            assert!(s.iter().any(|v| *v != 0.0), "seed {seed} is silent");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn split_is_a_partition(seed in 0u64..1000, t60 in 0.1f64..0.4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let room = RoomSpec::new([5.0, 4.0, 3.0], t60, 16000).unwrap();
            let center = Point3::new(rng.gen_range(1.0..4.0), rng.gen_range(1.0..3.0), 1.5);
            let src = Point3::new(rng.gen_range(0.6..4.4), rng.gen_range(0.6..3.4), rng.gen_range(0.6..2.4));
            let rir = simulate_rir(&room, center, src, &two_mic(0.05), seed).unwrap();
            let (e, l) = split_direct_early(&rir, 16000);
            prop_assert_eq!(&e.filters + &l.filters, rir.filters.clone());
            prop_assert!(rir.peaks.iter().all(|p| *p < rir.num_taps()));
            prop_assert!(rir.filters.iter().all(|v| v.is_finite()));
        }
    }
}
