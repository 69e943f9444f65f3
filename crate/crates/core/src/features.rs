//! Log-magnitude spectrogram, per-utterance CMVN, context splicing, and
//! frame-rate downsampling.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
const LOG_FLOOR: f64 = 1e-10;
const STD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples in `[-1, 1]`.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Param("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub left_context: usize,
    pub right_context: usize,
    pub downsample: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            left_context: 10,
            right_context: 5,
            downsample: 8,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn context(&self) -> usize {
        self.left_context + 1 + self.right_context
    }
}

/// Spliced, downsampled frames `[T, context, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    /// Seconds between consecutive kept frames.
    pub frame_period: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Raw frame count for `len` samples.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        1 + (len - window) / hop
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Log-magnitude spectrogram `[T0, fft_size/2 + 1]`.
///
/// Each frame is Hamming-windowed, zero-padded to `fft_size`, and mapped to
/// `ln(|X_k| + 1e-10)` for the non-negative frequencies.
pub fn spectrogram(w: &Waveform, config: &FeatureConfig) -> Result<Tensor> {
    let window = config.window_samples(w.sample_rate);
    let hop = config.hop_samples(w.sample_rate);
    if window == 0 || hop == 0 || window > config.fft_size {
        return Err(Error::Param(format!(
            "window {window} / hop {hop} samples incompatible with fft size {}",
            config.fft_size
        )));
    }
    let frames = frame_count(w.samples.len(), window, hop);
    if frames == 0 {
        return Err(Error::WaveformTooShort {
            min_samples: window,
            got: w.samples.len(),
        });
    }
    let bins = config.bins();
    let taper = hamming(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); config.fft_size];
    let mut out = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let seg = &w.samples[t * hop..t * hop + window];
        for (i, c) in buf.iter_mut().enumerate() {
            let v = if i < window { seg[i] * taper[i] } else { 0.0 };
            *c = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| (c.norm() + LOG_FLOOR).ln()));
    }
    Tensor::new(&[frames, bins], out)
}

/// Per-bin mean and variance normalization across an utterance's frames.
pub fn cmvn(spec: &Tensor) -> Result<Tensor> {
    if spec.rank() != 2 {
        return Err(Error::shape("cmvn", "[T, bins]", format!("{:?}", spec.dims())));
    }
    let (t, bins) = (spec.dims()[0], spec.dims()[1]);
    if t < 2 {
        return Err(Error::DegenerateUtterance { frames: t });
    }
    let x = spec.data();
    let mut out = spec.clone();
    for b in 0..bins {
        let mean = (0..t).map(|i| x[i * bins + b]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x[i * bins + b] - mean).powi(2)).sum::<f64>() / t as f64;
        let denom = var.sqrt() + STD_FLOOR;
        for i in 0..t {
            out.data_mut()[i * bins + b] = (x[i * bins + b] - mean) / denom;
        }
    }
    Ok(out)
}

/// Stacks `left + 1 + right` consecutive frames around each frame, giving
/// `[T0, left + 1 + right, bins]`. Out-of-range context repeats the edge
/// frame.
pub fn splice(spec: &Tensor, left: usize, right: usize) -> Result<Tensor> {
    if spec.rank() != 2 {
        return Err(Error::shape("splice", "[T, bins]", format!("{:?}", spec.dims())));
    }
    let (t, bins) = (spec.dims()[0], spec.dims()[1]);
    let ctx = left + 1 + right;
    let mut out = Vec::with_capacity(t * ctx * bins);
    for i in 0..t {
        for j in 0..ctx {
            let src = (i + j).saturating_sub(left).min(t - 1);
            out.extend_from_slice(&spec.data()[src * bins..(src + 1) * bins]);
        }
    }
    Tensor::new(&[t, ctx, bins], out)
}

/// Keeps rows `0, factor, 2*factor, ...` of the leading axis.
pub fn downsample(seq: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Param("downsample factor must be at least 1".into()));
    }
    let t = seq.dims()[0];
    let inner = seq.inner_size(0);
    let kept = t.div_ceil(factor);
    let mut out = Vec::with_capacity(kept * inner);
    for i in (0..t).step_by(factor) {
        out.extend_from_slice(&seq.data()[i * inner..(i + 1) * inner]);
    }
    let mut dims = seq.dims().to_vec();
    dims[0] = kept;
    Tensor::new(&dims, out)
}

/// The full chain: spectrogram, CMVN, splice, downsample.
pub fn extract_features(w: &Waveform, config: &FeatureConfig) -> Result<FeatureSequence> {
    let spec = spectrogram(w, config)?;
    let normalized = cmvn(&spec)?;
    let spliced = splice(&normalized, config.left_context, config.right_context)?;
    let frames = downsample(&spliced, config.downsample)?;
    Ok(FeatureSequence {
        frames,
        frame_period: config.hop_ms / 1000.0 * config.downsample as f64,
    })
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, clamping to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer
            .write_sample(pcm16(s))
            .map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Quantizes a sample in `[-1, 1]` to 16-bit PCM.
pub fn pcm16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}
