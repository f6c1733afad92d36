//! On-disk formats: raw little-endian f32 buffers with JSON sidecars for
//! waveforms and real matrices, plus 16-bit mono WAV input.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct WaveformSidecar {
    sample_rate_hz: u32,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixSidecar {
    rows: usize,
    cols: usize,
}

/// `clip.f32` → `clip.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes, sidecar promises {expected} f32 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Samples are stored as f32; values not representable in f32 are rounded.
pub fn write_waveform(path: &Path, w: &Waveform) -> Result<()> {
    write_f32(path, w.samples().iter().copied())?;
    write_json(
        &sidecar_path(path),
        &WaveformSidecar {
            sample_rate_hz: w.sample_rate_hz(),
            length: w.len(),
        },
    )
}

/// Reads a raw f32 waveform with its sidecar, or a `.wav` file.
pub fn read_waveform(path: &Path) -> Result<Waveform> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
        return read_wav(path);
    }
    let meta: WaveformSidecar = read_json(&sidecar_path(path))?;
    Waveform::new(read_f32(path, meta.length)?, meta.sample_rate_hz)
}

/// 16-bit integer mono WAV, scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit mono PCM, got {} channel(s), {} bits, {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_f32(path, m.iter().copied())?;
    let (rows, cols) = m.dim();
    write_json(&sidecar_path(path), &MatrixSidecar { rows, cols })
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let meta: MatrixSidecar = read_json(&sidecar_path(path))?;
    let data = read_f32(path, meta.rows * meta.cols)?;
    Array2::from_shape_vec((meta.rows, meta.cols), data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
