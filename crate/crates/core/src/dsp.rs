//! Waveform → normalised log-mel spectrogram front end, WAV input, the
//! binary spectrogram cache and the graymap dump.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const PIPELINE_SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-10;

/// Pre-training normalisation statistics (AudioSet mean/std).
pub const AUDIOSET_STATS: NormalizationStats = NormalizationStats {
    mean: -4.268,
    std: 4.569,
};

const CACHE_MAGIC: &[u8; 8] = b"SSLAMSPC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        ensure!(sample_rate > 0, InvalidArgument, "sample rate must be positive");
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Crops or zero-pads to exactly `n` samples.
    pub fn fit_to(&self, n: usize) -> Waveform {
        let mut samples = self.samples.clone();
        samples.resize(n, 0.0);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// `T × F` matrix of log mel energies, frames along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    data: Array2<f32>,
}

impl LogMelSpectrogram {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        ensure!(
            data.nrows() >= 1 && data.ncols() >= 1,
            Shape,
            "spectrogram must be non-empty, got {:?}",
            data.dim()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            NonFinite,
            "spectrogram"
        );
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    /// Crops or pads (with `pad_value`) along time to `frames` frames.
    pub fn fit_frames(&self, frames: usize, pad_value: f32) -> LogMelSpectrogram {
        let mut out = Array2::from_elem((frames, self.bins()), pad_value);
        let n = frames.min(self.frames());
        out.slice_mut(ndarray::s![..n, ..])
            .assign(&self.data.slice(ndarray::s![..n, ..]));
        LogMelSpectrogram { data: out }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: N_MELS,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl MelConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * PIPELINE_SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * PIPELINE_SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    /// Waveform length (16 kHz samples) that yields exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.win_samples() + frames.saturating_sub(1) * self.hop_samples()
    }

    /// Frame count for a waveform of `len` samples.
    pub fn frames_for_samples(&self, len: usize) -> usize {
        let win = self.win_samples();
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop_samples()
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Array2<f64> {
    let n_freqs = cfg.n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, n_freqs), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - lo) / (c - lo);
        let down = (hi - f) / (hi - c);
        up.min(down).max(0.0)
    })
}

/// Filter centre frequencies in Hz.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Windowed-sinc resampling to `target_rate`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    ensure!(target_rate > 0, InvalidArgument, "target rate must be positive");
    ensure!(!w.samples.is_empty(), InvalidArgument, "cannot resample an empty waveform");
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input Nyquist.
    let cutoff = ratio.min(1.0) * 0.95;
    const HALF_TAPS: f64 = 32.0;
    let half_width = HALF_TAPS / cutoff;
    let n = w.samples.len() as isize;
    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let x = i as f64 - t;
                let window = 0.5 + 0.5 * (PI * x / half_width).cos();
                acc += w.samples[i as usize] as f64 * cutoff * sinc(cutoff * x) * window;
            }
            acc as f32
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target_rate,
    })
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Log-mel spectrogram with a periodic Hann window, power spectrum, HTK mel
/// filterbank and natural log floored at [`LOG_FLOOR`]. Frames cover only
/// fully populated windows.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<LogMelSpectrogram> {
    ensure!(
        w.sample_rate == PIPELINE_SAMPLE_RATE,
        InvalidArgument,
        "log_mel expects {PIPELINE_SAMPLE_RATE} Hz input, got {}",
        w.sample_rate
    );
    let win = cfg.win_samples();
    let hop = cfg.hop_samples();
    ensure!(win <= cfg.n_fft, InvalidArgument, "window longer than FFT size");
    let frames = cfg.frames_for_samples(w.samples.len());
    ensure!(
        frames >= 1,
        InvalidArgument,
        "waveform of {} samples is shorter than one {win}-sample window",
        w.samples.len()
    );
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg, w.sample_rate);
    let n_freqs = cfg.n_fft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0f64; n_freqs];
    let mut out = Array2::<f32>::zeros((frames, cfg.n_mels));
    for t in 0..frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(w.samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            out[[t, m]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    LogMelSpectrogram::new(out)
}

pub fn normalize(s: &LogMelSpectrogram, stats: NormalizationStats) -> Result<LogMelSpectrogram> {
    ensure!(
        stats.std > 0.0 && stats.std.is_finite(),
        InvalidArgument,
        "normalisation std must be positive, got {}",
        stats.std
    );
    let (mean, std) = (stats.mean, stats.std);
    Ok(LogMelSpectrogram {
        data: s.data.mapv(|v| ((v as f64 - mean) / std) as f32),
    })
}

/// Mean and standard deviation over every value of un-normalised
/// spectrograms (accumulated in f64).
pub fn dataset_stats(specs: &[LogMelSpectrogram]) -> Result<NormalizationStats> {
    let n: usize = specs.iter().map(|s| s.data.len()).sum();
    ensure!(n > 1, InvalidArgument, "statistics need at least two values");
    let mean = specs.iter().flat_map(|s| s.data.iter()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = specs
        .iter()
        .flat_map(|s| s.data.iter())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    ensure!(var > 0.0 && var.is_finite(), InvalidArgument, "spectrograms have no spread");
    Ok(NormalizationStats { mean, std: var.sqrt() })
}

pub fn denormalize(s: &LogMelSpectrogram, stats: NormalizationStats) -> Result<LogMelSpectrogram> {
    ensure!(stats.std > 0.0, InvalidArgument, "normalisation std must be positive");
    Ok(LogMelSpectrogram {
        data: s.data.mapv(|v| (v as f64 * stats.std + stats.mean) as f32),
    })
}

/// Full front end: resample, fit to `frames` frames, log-mel, normalise.
pub fn prepare(
    w: &Waveform,
    frames: usize,
    cfg: &MelConfig,
    stats: NormalizationStats,
) -> Result<LogMelSpectrogram> {
    let w = resample(w, PIPELINE_SAMPLE_RATE)?;
    let w = w.fit_to(cfg.samples_for_frames(frames));
    normalize(&log_mel(&w, cfg)?, stats)
}

/// Reads a mono 16-bit PCM or 32-bit float WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    ensure!(
        spec.channels == 1,
        Format,
        "{}: expected mono audio, found {} channels",
        path.display(),
        spec.channels
    );
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

pub fn write_cache(path: &Path, s: &LogMelSpectrogram) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CACHE_MAGIC)?;
    write(&CACHE_VERSION.to_le_bytes())?;
    write(&(s.frames() as u32).to_le_bytes())?;
    write(&(s.bins() as u32).to_le_bytes())?;
    for v in s.data.iter() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<LogMelSpectrogram> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    ensure!(
        bytes.len() >= 20 && &bytes[..8] == CACHE_MAGIC,
        Format,
        "{}: not a spectrogram cache",
        path.display()
    );
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    ensure!(
        word(8) == CACHE_VERSION as usize,
        Format,
        "{}: unsupported cache version {}",
        path.display(),
        word(8)
    );
    let (t, f) = (word(12), word(16));
    ensure!(
        bytes.len() == 20 + 4 * t * f,
        Format,
        "{}: payload length does not match {t}x{f}",
        path.display()
    );
    let data: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LogMelSpectrogram::new(Array2::from_shape_vec((t, f), data).expect("checked length"))
}

/// Portable graymap (binary P5): time on x, mel bins on y with low
/// frequencies at the bottom, intensities min–max scaled to 0..=255.
pub fn write_pgm(path: &Path, s: &LogMelSpectrogram) -> Result<()> {
    let (lo, hi) = s
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", s.frames(), s.bins()).into_bytes();
    for m in (0..s.bins()).rev() {
        for t in 0..s.frames() {
            out.push(((s.data[[t, m]] - lo) / range * 255.0).round() as u8);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
