//! Waveforms, STFT/ISTFT, and the resampling between the linear STFT grid
//! and the square network grid.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|v| v * gain).collect(),
            self.sample_rate_hz,
        )
    }

    /// Truncates or zero-pads to `len` samples.
    pub fn resized(mut self, len: usize) -> Result<Self> {
        self.samples.resize(len, 0.0);
        Self::new(self.samples, self.sample_rate_hz)
    }
}

/// Elementwise sum of two equally long, equally sampled signals.
pub fn mix(a: &Waveform, b: &Waveform) -> Result<Waveform> {
    if a.len() != b.len() || a.sample_rate_hz != b.sample_rate_hz {
        return Err(Error::InvalidArgument(format!(
            "cannot mix {} samples @ {} Hz with {} samples @ {} Hz",
            a.len(),
            a.sample_rate_hz,
            b.len(),
            b.sample_rate_hz
        )));
    }
    Waveform::new(
        a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(),
        a.sample_rate_hz,
    )
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided STFT: `window_size / 2 + 1` rows (frequency) by frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate_hz: u32,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values: self.values.mapv(|c| c.norm()),
            freq_axis: FreqAxis::Linear,
            time_axis: TimeAxis::Frames,
            window_size: self.window_size,
            hop: self.hop,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Output length of [`istft`].
    pub fn signal_len(&self) -> usize {
        (self.frames() - 1) * self.hop + self.window_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreqAxis {
    Linear,
    /// Log-spaced rows resampled from `linear_bins` STFT bins.
    Log { linear_bins: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeAxis {
    Frames,
    /// Area-averaged down from `frames` STFT frames.
    Pooled { frames: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub values: Array2<f64>,
    pub freq_axis: FreqAxis,
    pub time_axis: TimeAxis,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate_hz: u32,
}

impl MagnitudeSpectrogram {
    pub fn with_values(&self, values: Array2<f64>) -> Self {
        MagnitudeSpectrogram {
            values,
            ..self.clone()
        }
    }
}

/// Hann-windowed short-time Fourier transform.
pub fn stft(w: &Waveform, window_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if window_size < 2 || !window_size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "window size {window_size} is not a power of two"
        )));
    }
    if hop == 0 || hop > window_size {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} must be in 1..={window_size}"
        )));
    }
    if w.len() < window_size {
        return Err(Error::SignalTooShort {
            len: w.len(),
            window: window_size,
        });
    }
    let frames = (w.len() - window_size) / hop + 1;
    let bins = window_size / 2 + 1;
    let window = hann(window_size);
    let fft = FftPlanner::new().plan_fft_forward(window_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    let mut values = Array2::zeros((bins, frames));
    for t in 0..frames {
        let frame = &w.samples[t * hop..t * hop + window_size];
        for ((b, &x), &wv) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(x * wv, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            values[[f, t]] = buf[f];
        }
    }
    Ok(ComplexSpectrogram {
        values,
        window_size,
        hop,
        sample_rate_hz: w.sample_rate_hz,
    })
}

/// Below this fraction of its peak, the summed squared window is not
/// divided out: the first and last few samples, covered only by window
/// tails, are tapered instead of amplified. Without the floor a masked
/// (hence inconsistent) spectrogram can blow up there by four orders of
/// magnitude.
pub const ISTFT_ENVELOPE_FLOOR: f64 = 0.1;

/// Weighted overlap-add inverse of [`stft`], normalized by the summed
/// squared window (floored at [`ISTFT_ENVELOPE_FLOOR`] of its peak).
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let n = s.window_size;
    let hop = s.hop;
    if n < 2 || !n.is_power_of_two() || s.bins() != n / 2 + 1 || s.frames() == 0 {
        return Err(Error::InvalidArgument(format!(
            "spectrogram of {} bins x {} frames does not match window {n}",
            s.bins(),
            s.frames()
        )));
    }
    if hop == 0 || n % hop != 0 || n / hop < 2 {
        return Err(Error::NotCola { window: n, hop });
    }
    let window = hann(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let len = s.signal_len();
    let mut out = vec![0.0; len];
    let mut env = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..s.frames() {
        for f in 0..n / 2 + 1 {
            buf[f] = s.values[[f, t]];
        }
        // Hermitian completion; DC and Nyquist are taken as real.
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for f in 1..n / 2 {
            buf[n - f] = buf[f].conj();
        }
        ifft.process(&mut buf);
        let base = t * hop;
        for i in 0..n {
            out[base + i] += buf[i].re / n as f64 * window[i];
            env[base + i] += window[i] * window[i];
        }
    }
    let floor = ISTFT_ENVELOPE_FLOOR * env.iter().fold(0.0f64, |m, &e| m.max(e));
    for (o, e) in out.iter_mut().zip(&env) {
        *o /= e.max(floor);
    }
    Waveform::new(out, s.sample_rate_hz)
}

/// Fractional linear-bin position of each log-spaced row, from bin 1 up
/// to the Nyquist bin.
pub fn log_bin_centers(linear_bins: usize, out_bins: usize) -> Vec<f64> {
    let top = (linear_bins - 1) as f64;
    (0..out_bins)
        .map(|j| top.powf(j as f64 / (out_bins - 1) as f64))
        .collect()
}

fn interp_rows(src: &Array2<f64>, positions: &[f64]) -> Array2<f64> {
    let (rows, cols) = src.dim();
    let mut out = Array2::zeros((positions.len(), cols));
    for (j, &p) in positions.iter().enumerate() {
        let p = p.clamp(0.0, (rows - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(rows - 1);
        let frac = p - lo as f64;
        for t in 0..cols {
            out[[j, t]] = if frac == 0.0 {
                src[[lo, t]]
            } else {
                (1.0 - frac) * src[[lo, t]] + frac * src[[hi, t]]
            };
        }
    }
    out
}

/// Resamples the frequency axis onto `out_bins` log-spaced rows by linear
/// interpolation between neighbouring STFT bins.
pub fn log_freq_rescale(m: &MagnitudeSpectrogram, out_bins: usize) -> Result<MagnitudeSpectrogram> {
    if out_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "log-frequency grid needs at least 2 rows, got {out_bins}"
        )));
    }
    if m.freq_axis != FreqAxis::Linear || m.values.nrows() < 3 {
        return Err(Error::InvalidArgument(
            "log_freq_rescale expects a linear-frequency spectrogram with at least 3 bins".into(),
        ));
    }
    let linear_bins = m.values.nrows();
    let centers = log_bin_centers(linear_bins, out_bins);
    Ok(MagnitudeSpectrogram {
        values: interp_rows(&m.values, &centers),
        freq_axis: FreqAxis::Log { linear_bins },
        ..m.clone()
    })
}

/// Maps log-spaced rows back onto the linear STFT bins.
pub fn inv_log_freq_rescale(m: &MagnitudeSpectrogram) -> Result<MagnitudeSpectrogram> {
    let FreqAxis::Log { linear_bins } = m.freq_axis else {
        return Err(Error::InvalidArgument(
            "inv_log_freq_rescale expects a log-frequency spectrogram".into(),
        ));
    };
    let out_bins = m.values.nrows();
    if out_bins < 2 {
        return Err(Error::InvalidArgument("log grid has fewer than 2 rows".into()));
    }
    let top = ((linear_bins - 1) as f64).ln();
    let positions: Vec<f64> = (0..linear_bins)
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                (k as f64).ln() / top * (out_bins - 1) as f64
            }
        })
        .collect();
    Ok(MagnitudeSpectrogram {
        values: interp_rows(&m.values, &positions),
        freq_axis: FreqAxis::Linear,
        ..m.clone()
    })
}

/// Area-averages the time axis down to `out_frames` columns.
pub fn pool_time(m: &MagnitudeSpectrogram, out_frames: usize) -> Result<MagnitudeSpectrogram> {
    let frames = m.values.ncols();
    if m.time_axis != TimeAxis::Frames || out_frames == 0 || out_frames > frames {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {frames} frames down to {out_frames}"
        )));
    }
    let rows = m.values.nrows();
    let step = frames as f64 / out_frames as f64;
    let mut out = Array2::zeros((rows, out_frames));
    for j in 0..out_frames {
        let (a, b) = (j as f64 * step, (j + 1) as f64 * step);
        let mut weight_sum = 0.0;
        let first = a.floor() as usize;
        let last = (b.ceil() as usize).min(frames);
        for t in first..last {
            let w = (b.min(t as f64 + 1.0) - a.max(t as f64)).max(0.0);
            if w == 0.0 {
                continue;
            }
            weight_sum += w;
            for r in 0..rows {
                out[[r, j]] += w * m.values[[r, t]];
            }
        }
        for r in 0..rows {
            out[[r, j]] /= weight_sum;
        }
    }
    Ok(MagnitudeSpectrogram {
        values: out,
        time_axis: TimeAxis::Pooled { frames },
        ..m.clone()
    })
}

/// Linear interpolation of pooled columns back to the STFT frame rate.
pub fn unpool_time(m: &MagnitudeSpectrogram) -> Result<MagnitudeSpectrogram> {
    let TimeAxis::Pooled { frames } = m.time_axis else {
        return Err(Error::InvalidArgument("unpool_time expects a pooled spectrogram".into()));
    };
    let pooled = m.values.ncols();
    let step = frames as f64 / pooled as f64;
    let positions: Vec<f64> = (0..frames)
        .map(|t| ((t as f64 + 0.5) / step - 0.5).clamp(0.0, (pooled - 1) as f64))
        .collect();
    let transposed = m.values.t().to_owned();
    let values = interp_rows(&transposed, &positions).t().to_owned();
    Ok(MagnitudeSpectrogram {
        values,
        time_axis: TimeAxis::Frames,
        ..m.clone()
    })
}

/// Linear STFT magnitude to the square network grid: log-frequency rows,
/// pooled frames.
pub fn to_network_grid(m: &MagnitudeSpectrogram, side: usize) -> Result<MagnitudeSpectrogram> {
    pool_time(&log_freq_rescale(m, side)?, side)
}

/// Inverse of [`to_network_grid`] for masks.
pub fn from_network_grid(m: &MagnitudeSpectrogram) -> Result<MagnitudeSpectrogram> {
    inv_log_freq_rescale(&unpool_time(m)?)
}
