//! Synthetic data generation: upcall chirps, noise backgrounds, labeled
//! 3-s datasets with candidate-style jitter, and continuous annotated
//! recordings. All generators are pure functions of their seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::eval::{Annotation, LabeledSample};
use crate::signal::{compute_spectrogram, AudioClip, TARGET_SAMPLE_RATE};
use crate::snr::{TEMPLATE_F0_HZ, TEMPLATE_F1_HZ, TEMPLATE_HALF_BW_HZ};

/// Duration of a synthetic upcall, seconds.
pub const CALL_SECS: f64 = 1.0;
/// Length of each labeled segment, seconds.
pub const SEGMENT_SECS: f64 = 3.0;
/// Raised-cosine onset/offset ramp, seconds.
const RAMP_SECS: f64 = 0.05;
/// Band used for noise-power measurement when realizing nominal SNR, Hz.
const CALIB_BAND: (f64, f64) = (80.0, 200.0);
/// Bandwidth the call occupies at any instant (+/- 10 Hz around the
/// sweep); nominal SNR references the noise power within this width.
const CALL_BW_HZ: f64 = 2.0 * TEMPLATE_HALF_BW_HZ;

/// Background noise families, loosely modeling flow noise, strum, and
/// knocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Tonal,
    Transient,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "tonal" => Ok(NoiseKind::Tonal),
            "transient" => Ok(NoiseKind::Transient),
            other => Err(Error::InvalidArgument(format!(
                "unknown noise kind '{other}' (expected white|tonal|transient)"
            ))),
        }
    }
}

/// Relative power weights of the three noise families.
#[derive(Debug, Clone, Copy)]
pub struct NoiseMix {
    pub white: f64,
    pub tonal: f64,
    pub transient: f64,
}

impl Default for NoiseMix {
    fn default() -> Self {
        Self {
            white: 1.0,
            tonal: 0.3,
            transient: 0.3,
        }
    }
}

impl NoiseMix {
    pub fn white_only() -> Self {
        Self {
            white: 1.0,
            tonal: 0.0,
            transient: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.white < 0.0 || self.tonal < 0.0 || self.transient < 0.0 {
            return Err(Error::InvalidArgument(
                "noise mix weights must be non-negative".into(),
            ));
        }
        if self.white + self.tonal + self.transient <= 0.0 {
            return Err(Error::InvalidArgument(
                "noise mix weights must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Recipe for a labeled synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Nominal SNR range the positives are drawn from, dB.
    pub snr_lo: f64,
    pub snr_hi: f64,
    /// Maximum misalignment of the call center, seconds (<= 1.0 keeps
    /// the 1-s call inside the 3-s segment).
    pub jitter_max: f64,
    pub noise_mix: NoiseMix,
    /// Fraction of negatives spiked with confusable tonal/transient
    /// artifacts.
    pub confusable_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg: 100,
            snr_lo: 0.0,
            snr_hi: 15.0,
            jitter_max: 0.5,
            noise_mix: NoiseMix::default(),
            confusable_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_pos + self.n_neg == 0 {
            return Err(Error::InvalidArgument("empty dataset spec".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter_max) {
            return Err(Error::InvalidArgument(format!(
                "jitter_max must be in [0, 1], got {}",
                self.jitter_max
            )));
        }
        if self.snr_hi < self.snr_lo {
            return Err(Error::InvalidArgument("snr range is inverted".into()));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return Err(Error::InvalidArgument(
                "confusable_fraction must be in [0, 1]".into(),
            ));
        }
        self.noise_mix.validate()
    }
}

/// Linear frequency sweep with raised-cosine onset/offset ramps.
pub fn synth_upcall(
    duration: f64,
    f0: f64,
    f1: f64,
    amplitude: f64,
    sample_rate: u32,
) -> Result<AudioClip> {
    if f1 <= f0 {
        return Err(Error::InvalidArgument(format!(
            "sweep must rise: f0 {f0} >= f1 {f1}"
        )));
    }
    if 2.0 * f1 >= sample_rate as f64 {
        return Err(Error::InvalidArgument(format!(
            "sweep top {f1} Hz would alias at {sample_rate} Hz"
        )));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    let rate = sample_rate as f64;
    let sweep = (f1 - f0) / duration;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let phase = 2.0 * std::f64::consts::PI * (f0 * t + 0.5 * sweep * t * t);
            let edge = (t / RAMP_SECS).min((duration - t) / RAMP_SECS).min(1.0);
            let ramp = if edge < 1.0 {
                0.5 * (1.0 - (std::f64::consts::PI * edge.max(0.0)).cos())
            } else {
                1.0
            };
            amplitude * ramp * phase.sin()
        })
        .collect();
    AudioClip::new(samples, sample_rate, 0.0, "upcall")
}

fn white_noise(rng: &mut ChaCha8Rng, n: usize, level: f64) -> Vec<f64> {
    (0..n)
        .map(|_| level * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn tonal_noise(rng: &mut ChaCha8Rng, n: usize, level: f64, rate: f64) -> Vec<f64> {
    let count = rng.gen_range(1..=3usize);
    let comps: Vec<(f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.gen_range(40.0..250.0),
                rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            )
        })
        .collect();
    // Per-sinusoid amplitude chosen so the summed RMS equals `level`.
    let amp = level * (2.0 / count as f64).sqrt();
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            comps
                .iter()
                .map(|&(f, ph)| amp * (2.0 * std::f64::consts::PI * f * t + ph).sin())
                .sum()
        })
        .collect()
}

fn transient_noise(rng: &mut ChaCha8Rng, n: usize, level: f64, rate: f64) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let burst_len = (0.010 * rate).round() as usize;
    let tau = 0.0025 * rate;
    // Poisson arrivals at ~1.5 clicks per second.
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.gen_range(0.0f64..1.0);
        t += -u.ln() / 1.5;
        let start = (t * rate) as usize;
        if start >= n {
            break;
        }
        let strength: f64 = rng.gen_range(0.5..2.0);
        for i in 0..burst_len.min(n - start) {
            let decay = (-(i as f64) / tau).exp();
            x[start + i] += strength * decay * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        let scale = level / rms;
        for v in &mut x {
            *v *= scale;
        }
    }
    x
}

fn noise_samples(rng: &mut ChaCha8Rng, kind: NoiseKind, n: usize, level: f64) -> Vec<f64> {
    let rate = TARGET_SAMPLE_RATE as f64;
    match kind {
        NoiseKind::White => white_noise(rng, n, level),
        NoiseKind::Tonal => tonal_noise(rng, n, level, rate),
        NoiseKind::Transient => transient_noise(rng, n, level, rate),
    }
}

/// Seeded noise clip of one kind at 1 kHz; `level` is the target RMS.
pub fn synth_noise(kind: NoiseKind, duration: f64, level: f64, seed: u64) -> Result<AudioClip> {
    if duration <= 0.0 {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    if level < 0.0 {
        return Err(Error::InvalidArgument("level must be non-negative".into()));
    }
    let n = (duration * TARGET_SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new(
        noise_samples(&mut rng, kind, n, level),
        TARGET_SAMPLE_RATE,
        0.0,
        "noise",
    )
}

/// Weighted sum of the three noise families with total RMS near `level`.
fn mixed_noise(rng: &mut ChaCha8Rng, mix: &NoiseMix, n: usize, level: f64) -> Vec<f64> {
    let total = mix.white + mix.tonal + mix.transient;
    let mut out = vec![0.0; n];
    for (kind, w) in [
        (NoiseKind::White, mix.white),
        (NoiseKind::Tonal, mix.tonal),
        (NoiseKind::Transient, mix.transient),
    ] {
        if w <= 0.0 {
            continue;
        }
        let component_level = level * (w / total).sqrt();
        for (o, v) in out.iter_mut().zip(noise_samples(rng, kind, n, component_level)) {
            *o += v;
        }
    }
    out
}

/// Periodogram power summed over the 80-200 Hz band.
fn band_power(x: &[f64], rate: f64) -> f64 {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(x.len());
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let df = rate / x.len() as f64;
    buf[..x.len() / 2 + 1]
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            (CALIB_BAND.0..=CALIB_BAND.1).contains(&f)
        })
        .map(|(_, c)| c.norm_sqr())
        .sum()
}

/// Amplitude realizing a nominal SNR against a measured noise segment.
///
/// Nominal SNR is defined as 10 log10 of call power over the noise power
/// within the call's occupied bandwidth (+/- 10 Hz around the sweep);
/// the noise spectral density is measured in the 80-200 Hz band over the
/// call duration. This deliberately parallels, but stays independent of,
/// the spectrogram-median SNR estimator.
fn calibrated_amplitude(noise_during_call: &[f64], nominal_snr_db: f64) -> Result<f64> {
    let rate = TARGET_SAMPLE_RATE as f64;
    let unit = synth_upcall(CALL_SECS, TEMPLATE_F0_HZ, TEMPLATE_F1_HZ, 1.0, TARGET_SAMPLE_RATE)?;
    let sig_power = band_power(&unit.samples, rate);
    let noise_density =
        band_power(noise_during_call, rate) / (CALIB_BAND.1 - CALIB_BAND.0);
    let noise_ref = noise_density * CALL_BW_HZ;
    if noise_ref <= 0.0 {
        // Silent background: any positive amplitude is "infinite" SNR.
        return Ok(1.0);
    }
    Ok((noise_ref * 10f64.powf(nominal_snr_db / 10.0) / sig_power).sqrt())
}

/// One generated segment before spectrogram conversion.
#[derive(Debug, Clone)]
pub struct SynthSegment {
    pub clip: AudioClip,
    pub label: bool,
    /// Nominal SNR for positives; absent for noise-only segments.
    pub snr: Option<f64>,
    pub timestamp: f64,
}

/// Generate labeled 3-s audio segments: positives hold one jittered
/// upcall at a nominal SNR drawn from the recipe's range, negatives hold
/// noise only (some spiked with confusable artifacts).
pub fn synth_labeled_audio(spec: &SynthSpec) -> Result<Vec<SynthSegment>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (SEGMENT_SECS * TARGET_SAMPLE_RATE as f64).round() as usize;
    let call_len = (CALL_SECS * TARGET_SAMPLE_RATE as f64).round() as usize;

    let mut labels = vec![true; spec.n_pos];
    labels.extend(vec![false; spec.n_neg]);
    labels.shuffle(&mut rng);

    let mut out = Vec::with_capacity(labels.len());
    for (i, label) in labels.into_iter().enumerate() {
        let timestamp = i as f64 * 5.0;
        let source_rng_level = rng.gen_range(0.05..0.15);
        let clip = if label {
            let mut samples = mixed_noise(&mut rng, &spec.noise_mix, n, source_rng_level);
            let jitter = rng.gen_range(-spec.jitter_max..=spec.jitter_max);
            let center = SEGMENT_SECS / 2.0 + jitter;
            let start = ((center - CALL_SECS / 2.0) * TARGET_SAMPLE_RATE as f64).round() as usize;
            debug_assert!(start + call_len <= n);
            let nominal = rng.gen_range(spec.snr_lo..=spec.snr_hi);
            let amp = calibrated_amplitude(&samples[start..start + call_len], nominal)?;
            let call =
                synth_upcall(CALL_SECS, TEMPLATE_F0_HZ, TEMPLATE_F1_HZ, amp, TARGET_SAMPLE_RATE)?;
            for (j, v) in call.samples.iter().enumerate() {
                samples[start + j] += v;
            }
            out.push(SynthSegment {
                clip: AudioClip::new(samples, TARGET_SAMPLE_RATE, timestamp, "synth")?,
                label: true,
                snr: Some(nominal),
                timestamp,
            });
            continue;
        } else if rng.gen_bool(spec.confusable_fraction) {
            // Confusable negative: tonal/transient heavy.
            let mix = NoiseMix {
                white: 0.3,
                tonal: 1.0,
                transient: 1.0,
            };
            mixed_noise(&mut rng, &mix, n, source_rng_level)
        } else {
            mixed_noise(&mut rng, &spec.noise_mix, n, source_rng_level)
        };
        out.push(SynthSegment {
            clip: AudioClip::new(clip, TARGET_SAMPLE_RATE, timestamp, "synth")?,
            label: false,
            snr: None,
            timestamp,
        });
    }
    Ok(out)
}

/// Generate a labeled spectrogram dataset (94x129 per sample).
pub fn synth_labeled_dataset(spec: &SynthSpec) -> Result<Vec<LabeledSample>> {
    synth_labeled_audio(spec)?
        .into_iter()
        .map(|seg| {
            let spectrogram = compute_spectrogram(&seg.clip)?;
            Ok(LabeledSample {
                spectrogram,
                label: seg.label,
                timestamp: seg.timestamp,
                snr: seg.snr,
                source_id: seg.clip.source_id,
            })
        })
        .collect()
}

/// Continuous recording with upcalls inserted at the given times, plus
/// the matching annotations (`[t, t+1]`, nominal SNR).
pub fn synth_continuous(
    duration_s: f64,
    call_times: &[f64],
    snr_per_call: &[f64],
    noise_mix: &NoiseMix,
    seed: u64,
) -> Result<(AudioClip, Vec<Annotation>)> {
    noise_mix.validate()?;
    if call_times.len() != snr_per_call.len() {
        return Err(Error::InvalidArgument(
            "call_times and snr_per_call lengths differ".into(),
        ));
    }
    for &t in call_times {
        if t < 0.0 || t > duration_s - CALL_SECS {
            return Err(Error::InvalidArgument(format!(
                "call at {t} s falls outside [0, {}]",
                duration_s - CALL_SECS
            )));
        }
    }
    let mut order: Vec<usize> = (0..call_times.len()).collect();
    order.sort_by(|&a, &b| call_times[a].partial_cmp(&call_times[b]).unwrap());
    for pair in order.windows(2) {
        if call_times[pair[1]] < call_times[pair[0]] + CALL_SECS {
            return Err(Error::InvalidArgument(format!(
                "calls at {} s and {} s overlap",
                call_times[pair[0]], call_times[pair[1]]
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * TARGET_SAMPLE_RATE as f64).round() as usize;
    let call_len = (CALL_SECS * TARGET_SAMPLE_RATE as f64).round() as usize;
    let mut samples = mixed_noise(&mut rng, noise_mix, n, 0.1);

    let mut annotations = Vec::with_capacity(call_times.len());
    for &i in &order {
        let t = call_times[i];
        let start = (t * TARGET_SAMPLE_RATE as f64).round() as usize;
        let amp = calibrated_amplitude(&samples[start..start + call_len], snr_per_call[i])?;
        let call =
            synth_upcall(CALL_SECS, TEMPLATE_F0_HZ, TEMPLATE_F1_HZ, amp, TARGET_SAMPLE_RATE)?;
        for (j, v) in call.samples.iter().enumerate() {
            samples[start + j] += v;
        }
        annotations.push(Annotation {
            source_id: "synth".into(),
            t_start: t,
            t_end: t + CALL_SECS,
            snr: Some(snr_per_call[i]),
        });
    }
    let clip = AudioClip::new(samples, TARGET_SAMPLE_RATE, 0.0, "synth")?;
    Ok((clip, annotations))
}
