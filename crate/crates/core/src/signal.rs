//! Audio ingestion, resampling, framing, and spectrogram computation.
//!
//! The spectrogram parameters are fixed project-wide: 1 kHz audio, a
//! 0.256-s Hamming window, and a 0.032-s step, giving a 94x129 dB matrix
//! for a 3-s segment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Sample rate all analysis runs at, in Hz.
pub const TARGET_SAMPLE_RATE: u32 = 1000;
/// Spectrogram analysis window, in seconds (256 samples at 1 kHz).
pub const SPEC_WINDOW_SECS: f64 = 0.256;
/// Spectrogram step between consecutive time slices, in seconds.
pub const SPEC_STEP_SECS: f64 = 0.032;
/// FFT length; one-sided output has `SPEC_NFFT / 2 + 1` frequency bins.
pub const SPEC_NFFT: usize = 256;
/// Number of frequency columns in every spectrogram.
pub const SPEC_N_FREQ: usize = SPEC_NFFT / 2 + 1;
/// Magnitude floor applied before the dB conversion, so silence maps to
/// a finite value instead of -inf.
pub const DB_FLOOR_EPS: f64 = 1e-12;

/// A sampled mono waveform with its provenance.
#[derive(Debug, Clone)]
pub struct AudioClip {
    /// Amplitude samples, nominally in [-1, 1].
    pub samples: Vec<f64>,
    /// Sample rate in Hz.
    pub sample_rate: u32,
    /// Offset of the first sample relative to the recording origin, seconds.
    pub start_time: f64,
    /// Identifier of the source recording.
    pub source_id: String,
}

impl AudioClip {
    pub fn new(
        samples: Vec<f64>,
        sample_rate: u32,
        start_time: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument(
                "audio clip must contain at least one sample".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
            start_time,
            source_id: source_id.into(),
        })
    }

    /// Clip duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time x frequency matrix of dB magnitudes.
///
/// Rows are time slices, columns are frequency slices; this axis
/// convention is fixed project-wide.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// dB values, shape (time, frequency).
    pub values: Array2<f64>,
    /// Seconds between consecutive rows.
    pub time_step: f64,
    /// Hz between consecutive columns.
    pub freq_step: f64,
    /// Time of the first row relative to the recording origin, seconds.
    pub start_time: f64,
    /// Frequency of the first column, Hz (always 0 here).
    pub f_min: f64,
}

impl Spectrogram {
    /// Number of time slices (rows).
    pub fn n_time(&self) -> usize {
        self.values.nrows()
    }

    /// Number of frequency slices (columns).
    pub fn n_freq(&self) -> usize {
        self.values.ncols()
    }

    /// Inclusive column range covering frequencies in `[f_lo, f_hi]` Hz,
    /// or `None` when no column center falls inside the band.
    pub fn band_columns(&self, f_lo: f64, f_hi: f64) -> Option<(usize, usize)> {
        let lo = ((f_lo - self.f_min) / self.freq_step).ceil().max(0.0) as usize;
        let hi_f = (f_hi - self.f_min) / self.freq_step;
        if hi_f < 0.0 {
            return None;
        }
        let hi = (hi_f.floor() as usize).min(self.n_freq() - 1);
        if lo > hi {
            None
        } else {
            Some((lo, hi))
        }
    }

    /// Number of rows spanning `secs` seconds (rounded, at least 1).
    pub fn rows_per_secs(&self, secs: f64) -> usize {
        ((secs / self.time_step).round() as usize).max(1)
    }

    /// Write the spectrogram as a flat binary file: magic "SPEC",
    /// u32 T, u32 F, f64 time_step, f64 freq_step, f64 start_time,
    /// then T*F little-endian f32 values, row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(b"SPEC").map_err(io_err)?;
        w.write_all(&(self.n_time() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(self.n_freq() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&self.time_step.to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.freq_step.to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.start_time.to_le_bytes()).map_err(io_err)?;
        for v in self.values.iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Read a spectrogram written by [`Spectrogram::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: &str| Error::MalformedModel {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != b"SPEC" {
            return Err(bad("bad magic, expected SPEC"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let t = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let f = u32::from_le_bytes(b4) as usize;
        if t == 0 || f == 0 {
            return Err(bad("empty dimensions"));
        }
        r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
        let time_step = f64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
        let freq_step = f64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
        let start_time = f64::from_le_bytes(b8);
        let mut values = Array2::zeros((t, f));
        for v in values.iter_mut() {
            r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
            *v = f32::from_le_bytes(b4) as f64;
        }
        Ok(Self {
            values,
            time_step,
            freq_step,
            start_time,
            f_min: 0.0,
        })
    }
}

/// Read a PCM WAV file (16/24-bit integer or 32-bit float), taking the
/// first channel and scaling samples to [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| Error::MalformedWav {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedWav {
            path: path.to_path_buf(),
            detail: "zero channels".into(),
        });
    }

    let malformed = |e: hound::Error| Error::MalformedWav {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            let mut reader = reader;
            let mut out = Vec::new();
            for (i, s) in reader.samples::<f32>().enumerate() {
                if i % channels == 0 {
                    out.push(s.map_err(malformed)? as f64);
                }
            }
            out
        }
        (hound::SampleFormat::Int, 16) => {
            let mut reader = reader;
            let mut out = Vec::new();
            for (i, s) in reader.samples::<i16>().enumerate() {
                if i % channels == 0 {
                    out.push(s.map_err(malformed)? as f64 / 32768.0);
                }
            }
            out
        }
        (hound::SampleFormat::Int, 24) => {
            let mut reader = reader;
            let mut out = Vec::new();
            for (i, s) in reader.samples::<i32>().enumerate() {
                if i % channels == 0 {
                    out.push(s.map_err(malformed)? as f64 / 8_388_608.0);
                }
            }
            out
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("{bits}-bit {fmt:?} PCM"),
            })
        }
    };

    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());
    AudioClip::new(samples, spec.sample_rate, 0.0, source_id)
}

/// Write a clip as a mono 32-bit float WAV file.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &clip.samples {
        writer.write_sample(s as f32).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind, by series.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= (half / k) * (half / k);
        sum += term;
        if term < sum * 1e-18 {
            return sum;
        }
        k += 1.0;
    }
}

/// Kaiser-windowed sinc lowpass. `cutoff` is in cycles per sample at the
/// design rate; `num_taps` must be odd.
fn kaiser_sinc_lowpass(num_taps: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let center = (num_taps - 1) as f64 / 2.0;
    let i0b = bessel_i0(beta);
    (0..num_taps)
        .map(|j| {
            let x = j as f64 - center;
            let sinc = if x == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * x).sin() / (std::f64::consts::PI * x)
            };
            let r = x / center;
            let win = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            sinc * win
        })
        .collect()
}

/// Rational-ratio resampling with a windowed-sinc polyphase anti-aliasing
/// filter (cutoff 0.45 of the lower Nyquist pair, stopband >= 60 dB).
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be > 0".into()));
    }
    let src_rate = clip.sample_rate;
    if src_rate == target_rate {
        return Ok(clip.clone());
    }
    let g = gcd(src_rate, target_rate);
    let up = (target_rate / g) as usize;
    let down = (src_rate / g) as usize;
    let design_rate = src_rate as f64 * up as f64;

    // Pass/stop edges at 0.45 and 0.5 of the narrower Nyquist; Kaiser
    // design for ~70 dB stopband attenuation.
    let f_limit = src_rate.min(target_rate) as f64;
    let cutoff_hz = 0.45 * f_limit;
    let transition = 0.05 * f_limit;
    let atten_db = 70.0;
    let beta = 0.1102 * (atten_db - 8.7);
    let delta_omega = 2.0 * std::f64::consts::PI * transition / design_rate;
    let mut num_taps = ((atten_db - 7.95) / (2.285 * delta_omega)).ceil() as usize + 1;
    if num_taps.is_multiple_of(2) {
        num_taps += 1;
    }
    let mut taps = kaiser_sinc_lowpass(num_taps, cutoff_hz / design_rate, beta);

    // Normalize each polyphase branch to unit sum so constant signals
    // pass through exactly (this also supplies the factor-of-`up` gain).
    for phase in 0..up {
        let s: f64 = taps[phase..].iter().step_by(up).sum();
        if s.abs() > f64::EPSILON {
            for t in taps[phase..].iter_mut().step_by(up) {
                *t /= s;
            }
        }
    }

    let n_in = clip.samples.len();
    let n_out = (n_in as f64 * target_rate as f64 / src_rate as f64).round() as usize;
    let center = (num_taps - 1) / 2;
    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        // Index on the zero-stuffed grid of the filter center for output n.
        let q = n * down + center;
        let mut acc = 0.0;
        let mut j = q % up;
        // Input index k = (q - j) / up decreases as j grows; skip taps
        // past either end of the signal.
        while j < num_taps && j <= q {
            let k = (q - j) / up;
            if k < n_in {
                acc += taps[j] * x[k];
            }
            j += up;
        }
        out.push(acc);
    }

    Ok(AudioClip {
        samples: out,
        sample_rate: target_rate,
        start_time: clip.start_time,
        source_id: clip.source_id.clone(),
    })
}

/// Split a clip into consecutive windows of `window_s` seconds starting
/// every `hop_s` seconds; a trailing remainder shorter than the window is
/// dropped.
pub fn frame_stream(clip: &AudioClip, window_s: f64, hop_s: f64) -> Result<Vec<AudioClip>> {
    if hop_s <= 0.0 {
        return Err(Error::InvalidArgument("hop must be > 0".into()));
    }
    let rate = clip.sample_rate as f64;
    let win = (window_s * rate).round() as usize;
    let hop = (hop_s * rate).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::InvalidArgument(
            "window and hop must span at least one sample".into(),
        ));
    }
    if win > clip.samples.len() {
        return Err(Error::ClipTooShort(format!(
            "window of {window_s} s exceeds clip duration {:.3} s",
            clip.duration()
        )));
    }
    let n_frames = (clip.samples.len() - win) / hop + 1;
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = i * hop;
        frames.push(AudioClip {
            samples: clip.samples[start..start + win].to_vec(),
            sample_rate: clip.sample_rate,
            start_time: clip.start_time + start as f64 / rate,
            source_id: clip.source_id.clone(),
        });
    }
    Ok(frames)
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Magnitude STFT in dB (20 log10 |X|) of a 1 kHz clip.
///
/// The signal is zero-padded at the end so the row count is
/// `ceil(len / step)`; a 3-s clip therefore yields exactly 94x129.
pub fn compute_spectrogram(clip: &AudioClip) -> Result<Spectrogram> {
    if clip.sample_rate != TARGET_SAMPLE_RATE {
        return Err(Error::WrongSampleRate {
            expected: TARGET_SAMPLE_RATE,
            actual: clip.sample_rate,
        });
    }
    let win = (SPEC_WINDOW_SECS * TARGET_SAMPLE_RATE as f64).round() as usize;
    let step = (SPEC_STEP_SECS * TARGET_SAMPLE_RATE as f64).round() as usize;
    if clip.samples.len() < win {
        return Err(Error::ClipTooShort(format!(
            "need at least {SPEC_WINDOW_SECS} s, got {:.3} s",
            clip.duration()
        )));
    }

    let n_time = clip.samples.len().div_ceil(step);
    let window = hamming(win);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(SPEC_NFFT);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut values = Array2::zeros((n_time, SPEC_N_FREQ));
    let mut buf = vec![Complex::new(0.0, 0.0); SPEC_NFFT];
    for t in 0..n_time {
        let start = t * step;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = clip
                .samples
                .get(start + i)
                .copied()
                .unwrap_or(0.0);
            *c = Complex::new(s * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..SPEC_N_FREQ {
            values[[t, f]] = 20.0 * buf[f].norm().max(DB_FLOOR_EPS).log10();
        }
    }

    Ok(Spectrogram {
        values,
        time_step: step as f64 / TARGET_SAMPLE_RATE as f64,
        freq_step: TARGET_SAMPLE_RATE as f64 / SPEC_NFFT as f64,
        start_time: clip.start_time,
        f_min: 0.0,
    })
}

/// Median of a slice of finite values. Empty input is a caller bug.
pub(crate) fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite value in median"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Two-pass median subtraction: first the median of each time slice
/// (row), then the median of each frequency slice (column) of the
/// intermediate. Reduces broadband impulsive noise, then tonal noise.
pub fn denoise(spec: &Spectrogram) -> Spectrogram {
    let mut values = spec.values.clone();
    let (t, f) = values.dim();
    let mut row_buf = vec![0.0; f];
    for mut row in values.rows_mut() {
        row_buf.copy_from_slice(row.as_slice().expect("row-major layout"));
        let m = median(&row_buf);
        row.mapv_inplace(|v| v - m);
    }
    let mut col_buf = vec![0.0; t];
    for mut col in values.columns_mut() {
        for (i, v) in col.iter().enumerate() {
            col_buf[i] = *v;
        }
        let m = median(&col_buf);
        col.mapv_inplace(|v| v - m);
    }
    Spectrogram {
        values,
        ..spec.clone()
    }
}
