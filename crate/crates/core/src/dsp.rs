//! STFT analysis/synthesis with a periodic Hann window and WAV I/O.
//!
//! Signals are reflect-padded by `window_len / 2` on both ends before framing, so
//! frame `t` is centered on sample `t * hop`. Synthesis divides the overlap-added
//! windowed frames by the overlap-added squared window, which makes
//! `istft(stft(x)) == x` up to rounding.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView1, ArrayViewMut1, Axis};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 512,
            hop: 128,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.sample_rate == 0 {
            return Err(Error::Config("stft sizes must be positive".into()));
        }
        if self.window_len > self.fft_size {
            return Err(Error::Config("window_len must not exceed fft_size".into()));
        }
        if !self.window_len.is_multiple_of(2) || !self.fft_size.is_multiple_of(2) {
            return Err(Error::Config("window_len and fft_size must be even".into()));
        }
        if 2 * self.hop > self.window_len {
            return Err(Error::Config("hop must give at least 50% overlap".into()));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn bin_width(&self) -> f64 {
        self.sample_rate as f64 / self.fft_size as f64
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.bin_width()
    }

    pub fn num_frames(&self, signal_len: usize) -> usize {
        signal_len / self.hop + 1
    }

    fn pad(&self) -> usize {
        self.window_len / 2
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Complex multichannel spectrogram `[channels × frames × bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array3<Complex64>,
    pub config: StftConfig,
    /// Length of the analysed waveform, used to trim the synthesis.
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn zeros(channels: usize, signal_len: usize, config: StftConfig) -> Self {
        Self {
            data: Array3::zeros((channels, config.num_frames(signal_len), config.num_bins())),
            config,
            signal_len,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn num_bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channel(&self, m: usize) -> Spectrogram {
        Spectrogram {
            data: self.data.slice(ndarray::s![m..m + 1, .., ..]).to_owned(),
            config: self.config,
            signal_len: self.signal_len,
        }
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.num_bins() != self.config.num_bins() {
            return Err(Error::Config(format!(
                "spectrogram has {} bins, config implies {}",
                self.num_bins(),
                self.config.num_bins()
            )));
        }
        if self.num_frames() != self.config.num_frames(self.signal_len) {
            return Err(Error::Config(format!(
                "spectrogram has {} frames, signal length {} implies {}",
                self.num_frames(),
                self.signal_len,
                self.config.num_frames(self.signal_len)
            )));
        }
        Ok(())
    }
}

/// Reusable FFT plans and window for one [`StftConfig`].
#[derive(Clone)]
pub struct StftPlan {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            config,
            window: hann(config.window_len),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn padded(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let pad = self.config.pad();
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * pad);
        out.extend((0..pad).map(|i| x[pad - i]));
        out.extend(x.iter().copied());
        out.extend((0..pad).map(|i| x[n - 2 - i]));
        out
    }

    /// Single-channel analysis into `frames` (shape `[T × F]`).
    pub fn analyze(&self, x: ArrayView1<f64>, mut frames: ndarray::ArrayViewMut2<Complex64>) {
        let cfg = &self.config;
        let padded = self.padded(x);
        let mut buf = vec![0.0; cfg.fft_size];
        let mut spec = vec![Complex64::new(0.0, 0.0); cfg.num_bins()];
        for (t, mut row) in frames.axis_iter_mut(Axis(0)).enumerate() {
            let start = t * cfg.hop;
            buf.iter_mut().for_each(|v| *v = 0.0);
            for (j, w) in self.window.iter().enumerate() {
                buf[j] = padded[start + j] * w;
            }
            self.forward
                .process(&mut buf, &mut spec)
                .expect("fft buffer sizes match the plan");
            row.iter_mut().zip(&spec).for_each(|(o, s)| *o = *s);
        }
    }

    /// Single-channel synthesis of `frames` into a waveform of `signal_len` samples.
    pub fn synthesize(&self, frames: ndarray::ArrayView2<Complex64>, mut out: ArrayViewMut1<f64>) {
        let cfg = &self.config;
        let signal_len = out.len();
        let pad = cfg.pad();
        let total = (frames.nrows().saturating_sub(1)) * cfg.hop + cfg.window_len;
        let mut acc = vec![0.0; total.max(signal_len + 2 * pad)];
        let mut spec = vec![Complex64::new(0.0, 0.0); cfg.num_bins()];
        let mut buf = vec![0.0; cfg.fft_size];
        let norm = 1.0 / cfg.fft_size as f64;
        for (t, row) in frames.axis_iter(Axis(0)).enumerate() {
            spec.iter_mut().zip(row.iter()).for_each(|(s, r)| *s = *r);
            spec[0].im = 0.0;
            let last = spec.len() - 1;
            spec[last].im = 0.0;
            self.inverse
                .process(&mut spec, &mut buf)
                .expect("fft buffer sizes match the plan");
            let start = t * cfg.hop;
            for (j, w) in self.window.iter().enumerate() {
                acc[start + j] += buf[j] * norm * w;
            }
        }
        let denom = self.window_energy(frames.nrows(), acc.len());
        for (i, o) in out.iter_mut().enumerate() {
            let k = i + pad;
            *o = acc[k] / denom[k];
        }
    }

    /// Overlap-added squared window over `frames` frames.
    fn window_energy(&self, frames: usize, len: usize) -> Vec<f64> {
        let mut denom = vec![0.0; len];
        for t in 0..frames {
            let start = t * self.config.hop;
            for (j, w) in self.window.iter().enumerate() {
                denom[start + j] += w * w;
            }
        }
        denom
    }

    /// Adjoint of [`StftPlan::analyze`]: maps a gradient on the frames (real and
    /// imaginary parts treated as independent reals) to a gradient on the signal.
    pub fn analyze_adjoint(&self, grad_frames: ndarray::ArrayView2<Complex64>, signal_len: usize) -> Vec<f64> {
        let cfg = &self.config;
        let pad = cfg.pad();
        let mut acc = vec![0.0; signal_len + 2 * pad];
        let mut spec = vec![Complex64::new(0.0, 0.0); cfg.num_bins()];
        let mut buf = vec![0.0; cfg.fft_size];
        let last = cfg.num_bins() - 1;
        for (t, row) in grad_frames.axis_iter(Axis(0)).enumerate() {
            for (k, (s, g)) in spec.iter_mut().zip(row.iter()).enumerate() {
                *s = if k == 0 || k == last {
                    Complex64::new(g.re, 0.0)
                } else {
                    g * 0.5
                };
            }
            self.inverse
                .process(&mut spec, &mut buf)
                .expect("fft buffer sizes match the plan");
            let start = t * cfg.hop;
            for (j, w) in self.window.iter().enumerate() {
                acc[start + j] += buf[j] * w;
            }
        }
        // Fold the reflect padding back onto the samples it copied.
        let mut grad = acc[pad..pad + signal_len].to_vec();
        for i in 0..pad {
            grad[pad - i] += acc[i];
            grad[signal_len - 2 - i] += acc[pad + signal_len + i];
        }
        grad
    }

    /// Adjoint of [`StftPlan::synthesize`]: maps a gradient on the waveform to a
    /// gradient on the frames (real and imaginary parts as independent reals).
    pub fn synthesize_adjoint(&self, grad_signal: ArrayView1<f64>, mut grad_frames: ndarray::ArrayViewMut2<Complex64>) {
        let cfg = &self.config;
        let pad = cfg.pad();
        let frames = grad_frames.nrows();
        let total = (frames.saturating_sub(1)) * cfg.hop + cfg.window_len;
        let len = total.max(grad_signal.len() + 2 * pad);
        let denom = self.window_energy(frames, len);
        let mut acc = vec![0.0; len];
        for (i, g) in grad_signal.iter().enumerate() {
            acc[i + pad] = g / denom[i + pad];
        }
        let mut buf = vec![0.0; cfg.fft_size];
        let mut spec = vec![Complex64::new(0.0, 0.0); cfg.num_bins()];
        let norm = 1.0 / cfg.fft_size as f64;
        let last = cfg.num_bins() - 1;
        for (t, mut row) in grad_frames.axis_iter_mut(Axis(0)).enumerate() {
            let start = t * cfg.hop;
            buf.iter_mut().for_each(|v| *v = 0.0);
            for (j, w) in self.window.iter().enumerate() {
                buf[j] = acc[start + j] * w;
            }
            self.forward
                .process(&mut buf, &mut spec)
                .expect("fft buffer sizes match the plan");
            for (k, (o, s)) in row.iter_mut().zip(&spec).enumerate() {
                *o = if k == 0 || k == last {
                    Complex64::new(s.re * norm, 0.0)
                } else {
                    s * (2.0 * norm)
                };
            }
        }
    }
}

/// Multichannel STFT of `signal` (`[channels × samples]`).
pub fn stft(signal: &Array2<f64>, config: &StftConfig) -> Result<Spectrogram> {
    let plan = StftPlan::new(*config)?;
    stft_with(&plan, signal)
}

pub fn stft_with(plan: &StftPlan, signal: &Array2<f64>) -> Result<Spectrogram> {
    let (channels, len) = signal.dim();
    if channels == 0 || len == 0 {
        return Err(Error::Input("cannot analyse an empty signal".into()));
    }
    let cfg = *plan.config();
    if len < cfg.window_len {
        return Err(Error::Input(format!(
            "signal of {len} samples is shorter than one window ({})",
            cfg.window_len
        )));
    }
    let mut spec = Spectrogram::zeros(channels, len, cfg);
    for (x, frames) in signal.outer_iter().zip(spec.data.outer_iter_mut()) {
        plan.analyze(x, frames);
    }
    Ok(spec)
}

/// Inverse of [`stft`]; returns `[channels × signal_len]`.
pub fn istft(spec: &Spectrogram) -> Result<Array2<f64>> {
    spec.check()?;
    let plan = StftPlan::new(spec.config)?;
    istft_with(&plan, spec)
}

pub fn istft_with(plan: &StftPlan, spec: &Spectrogram) -> Result<Array2<f64>> {
    spec.check()?;
    if *plan.config() != spec.config {
        return Err(Error::Config("stft plan does not match spectrogram config".into()));
    }
    let mut out = Array2::zeros((spec.num_channels(), spec.signal_len));
    for (frames, row) in spec.data.outer_iter().zip(out.outer_iter_mut()) {
        plan.synthesize(frames, row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a WAV file into `[channels × samples]` floats and its sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Array2<f64>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let frames = samples.len() / channels;
    let data = Array2::from_shape_fn((channels, frames), |(c, i)| samples[i * channels + c]);
    Ok((data, spec.sample_rate))
}

/// Writes `[channels × samples]` to a WAV file through a temporary file and rename.
pub fn write_wav(path: impl AsRef<Path>, data: &Array2<f64>, sample_rate: u32, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let (channels, frames) = data.dim();
    let spec = hound::WavSpec {
        channels: channels as u16,
        sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let tmp = path.with_extension("wav.tmp");
    {
        let mut writer = hound::WavWriter::create(&tmp, spec).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(&tmp, io),
            other => Error::Wav(other),
        })?;
        for i in 0..frames {
            for c in 0..channels {
                let v = data[[c, i]];
                match format {
                    WavFormat::Pcm16 => {
                        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                        writer.write_sample(q)?;
                    }
                    WavFormat::Float32 => writer.write_sample(v as f32)?,
                }
            }
        }
        writer.finalize()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Linear convolution of `x` with `h`, truncated to `x.len()` samples.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let full = x.len() + h.len() - 1;
    if h.len() <= 64 || x.len() <= 64 {
        let mut out = vec![0.0; x.len()];
        for (j, &hj) in h.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            for (o, xi) in out[j.min(x.len())..].iter_mut().zip(x) {
                *o += hj * xi;
            }
        }
        return out;
    }
    let n = full.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |sig: &[f64]| {
        let mut buf = vec![0.0; n];
        buf[..sig.len()].copy_from_slice(sig);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("fft length matches plan");
        out
    };
    let a = spectrum(x);
    let b = spectrum(h);
    let mut prod: Vec<Complex64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
    prod[0].im = 0.0;
    prod[n / 2].im = 0.0;
    let mut out = vec![0.0; n];
    inv.process(&mut prod, &mut out).expect("fft length matches plan");
    out.truncate(x.len());
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(channels: usize, len: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((channels, len), |_| rng.gen_range(-1.0..1.0))
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let num: f64 = (a - b).iter().map(|v| v * v).sum();
        let den: f64 = b.iter().map(|v| v * v).sum();
        (num / den).sqrt()
    }

    #[test]
    fn default_config_shapes() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.num_bins(), 257);
        assert_eq!(cfg.bin_width(), 31.25);
        let spec = stft(&noise(1, 16000, 1), &cfg).unwrap();
        assert_eq!(spec.num_frames(), 16000 / 128 + 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = StftConfig::default();
        assert!(stft(&Array2::zeros((1, 0)), &cfg).is_err());
        assert!(stft(&Array2::zeros((1, 100)), &cfg).is_err());
        let bad = StftConfig { hop: 300, ..cfg };
        assert!(bad.validate().is_err());
        let mut spec = stft(&noise(1, 2000, 2), &cfg).unwrap();
        spec.signal_len = 5000;
        assert!(istft(&spec).is_err());
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let cfg = StftConfig::default();
        let mut x = Array2::zeros((1, 4096));
        x[[0, 0]] = 1.0;
        let spec = stft(&x, &cfg).unwrap();
        // Frame 0 is centered on sample 0, so the impulse sits at window index 256.
        let w = hann(512)[256];
        for v in spec.data.slice(ndarray::s![0, 0, ..]) {
            assert!((v.norm() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_peak_bin() {
        let cfg = StftConfig::default();
        let x = Array2::from_shape_fn((1, 16000), |(_, i)| {
            (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin()
        });
        let spec = stft(&x, &cfg).unwrap();
        let frame = spec.data.slice(ndarray::s![0, 40, ..]);
        let argmax = (0..frame.len())
            .max_by(|&a, &b| frame[a].norm().partial_cmp(&frame[b].norm()).unwrap())
            .unwrap();
        assert_eq!(argmax, (1000.0f64 / 31.25).round() as usize);
    }

    #[test]
    fn multichannel_matches_single_channel_calls() {
        let cfg = StftConfig::default();
        let x = noise(8, 3000, 3);
        let spec = stft(&x, &cfg).unwrap();
        for m in 0..8 {
            let single = stft(&x.slice(ndarray::s![m..m + 1, ..]).to_owned(), &cfg).unwrap();
            assert_eq!(
                single.data.slice(ndarray::s![0, .., ..]),
                spec.data.slice(ndarray::s![m, .., ..])
            );
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let plan = StftPlan::new(cfg).unwrap();
        let x = noise(1, 4000, 4);
        let spec = stft_with(&plan, &x).unwrap();
        let padded = plan.padded(x.row(0));
        for t in 0..spec.num_frames() {
            let time: f64 = (0..512).map(|j| (padded[t * 128 + j] * plan.window()[j]).powi(2)).sum();
            let row: Vec<Complex64> = spec.data.slice(ndarray::s![0, t, ..]).to_vec();
            let mut freq = row[0].norm_sqr() + row[256].norm_sqr();
            freq += 2.0 * row.iter().skip(1).take(255).map(|c| c.norm_sqr()).sum::<f64>();
            freq /= 512.0;
            assert!((time - freq).abs() <= 1e-6 * time.max(1e-300));
        }
    }

    #[test]
    fn round_trip_white_noise_and_chirp() {
        let cfg = StftConfig::default();
        let x = noise(2, 16000, 5);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        assert!(rel_err(&y, &x) < 1e-6);

        // Speech-shaped chirp: 100 Hz to 4 kHz sweep with syllabic envelope.
        let chirp = Array2::from_shape_fn((1, 16000), |(_, i)| {
            let t = i as f64 / 16000.0;
            let phase = 2.0 * std::f64::consts::PI * (100.0 * t + 0.5 * 3900.0 * t * t);
            let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
            env * phase.sin()
        });
        let back = istft(&stft(&chirp, &cfg).unwrap()).unwrap();
        assert!(rel_err(&back, &chirp) < 1e-6);
    }

    #[test]
    fn zero_spectrogram_gives_zero_waveform() {
        let spec = Spectrogram::zeros(3, 2000, StftConfig::default());
        let y = istft(&spec).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hop_shift_moves_frames_by_one() {
        let cfg = StftConfig::default();
        let x = noise(1, 6000, 6);
        let mut shifted = Array2::zeros((1, 6000));
        for i in 128..6000 {
            shifted[[0, i]] = x[[0, i - 128]];
        }
        let a = stft(&x, &cfg).unwrap();
        let b = stft(&shifted, &cfg).unwrap();
        for t in 4..a.num_frames() - 6 {
            for f in 0..257 {
                assert!((a.data[[0, t, f]] - b.data[[0, t + 1, f]]).norm() < 1e-9);
            }
        }
    }

    /// `<A x, y> == <x, A^T y>` for both the analysis and synthesis operators.
    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let cfg = StftConfig {
            window_len: 64,
            hop: 16,
            fft_size: 64,
            sample_rate: 16000,
        };
        let plan = StftPlan::new(cfg).unwrap();
        let len = 301;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Array1<f64> = Array1::from_shape_fn(len, |_| rng.gen_range(-1.0..1.0));
        let frames = cfg.num_frames(len);
        let y = ndarray::Array2::from_shape_fn((frames, cfg.num_bins()), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let mut ax = ndarray::Array2::zeros((frames, cfg.num_bins()));
        plan.analyze(x.view(), ax.view_mut());
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let aty = plan.analyze_adjoint(y.view(), len);
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

        let mut sy = Array1::zeros(len);
        plan.synthesize(y.view(), sy.view_mut());
        let lhs: f64 = sy.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let mut stx = ndarray::Array2::zeros((frames, cfg.num_bins()));
        plan.synthesize_adjoint(x.view(), stx.view_mut());
        let rhs: f64 = stx.iter().zip(y.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn wav_float32_round_trip_is_sample_exact() {
        let dir = std::env::temp_dir().join(format!("rsx-wav-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let x = noise(3, 1000, 7).mapv(|v| v as f32 as f64);
        let path = dir.join("a.wav");
        write_wav(&path, &x, 16000, WavFormat::Float32).unwrap();
        let (y, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(x, y);
        write_wav(&path, &x, 16000, WavFormat::Pcm16).unwrap();
        let (z, _) = read_wav(&path).unwrap();
        assert!(x.iter().zip(z.iter()).all(|(a, b)| (a - b).abs() <= 1.0 / 32768.0));
        std::fs::remove_dir_all(dir).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn stft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let cfg = StftConfig::default();
            let x = noise(1, 1500, seed);
            let y = noise(1, 1500, seed + 1);
            let lhs = stft(&(&x * a + &y * b), &cfg).unwrap();
            let sx = stft(&x, &cfg).unwrap();
            let sy = stft(&y, &cfg).unwrap();
            for ((l, p), q) in lhs.data.iter().zip(sx.data.iter()).zip(sy.data.iter()) {
                prop_assert!((l - (p * a + q * b)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let x: Vec<f64> = (0..500).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
        let h: Vec<f64> = (0..130)
            .map(|i| (-(i as f64) / 30.0).exp() * if i % 3 == 0 { 1.0 } else { -0.5 })
            .collect();
        let fast = fft_convolve(&x, &h);
        for n in 0..x.len() {
            let direct: f64 = (0..=n.min(h.len() - 1)).map(|j| h[j] * x[n - j]).sum();
            assert!((fast[n] - direct).abs() < 1e-10);
        }
        let short = fft_convolve(&x, &h[..10]);
        assert!((short[20] - (0..10).map(|j| h[j] * x[20 - j]).sum::<f64>()).abs() < 1e-12);
    }
}
