//! Continuous-data detection: window the audio, score each 3-s segment,
//! smooth the score series, threshold it, and merge positive bins into
//! buffered detection events.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal::{compute_spectrogram, frame_stream, AudioClip, Spectrogram};

/// Classification window length, seconds.
pub const DETECT_WINDOW_SECS: f64 = 3.0;
/// Step between consecutive windows, seconds.
pub const DETECT_HOP_SECS: f64 = 0.5;
/// Width of the score-smoothing window, bins (2.5 s).
pub const SMOOTH_WIDTH: usize = 5;
/// Temporal buffer applied to each side of an event, in hop bins (1.0 s).
pub const BUFFER_BINS: usize = 2;

/// Anything that maps a 3-s spectrogram to a positive-class score in
/// [0, 1]. Both classifiers implement this, so the detector is agnostic
/// to which one it runs.
pub trait Scorer: Sync {
    fn score(&self, spec: &Spectrogram) -> Result<f64>;
}

/// A time series of classification scores at a fixed hop.
#[derive(Debug, Clone)]
pub struct ScoreSeries {
    /// Scores in [0, 1], one per window.
    pub scores: Vec<f64>,
    /// Seconds between consecutive scores.
    pub hop: f64,
    /// Start time of the first window, seconds.
    pub start_time: f64,
}

/// A maximal run of positive bins, expanded by the temporal buffer.
#[derive(Debug, Clone)]
pub struct DetectionEvent {
    /// Buffered interval start, seconds (may precede the recording start).
    pub t_start: f64,
    /// Buffered interval end, seconds.
    pub t_end: f64,
    /// Unbuffered run start, seconds.
    pub core_start: f64,
    /// Unbuffered run end, seconds.
    pub core_end: f64,
    /// Maximum smoothed score inside the core.
    pub peak_score: f64,
}

impl DetectionEvent {
    pub fn core_duration(&self) -> f64 {
        self.core_end - self.core_start
    }
}

/// Score every 3-s window of a 1 kHz clip at 0.5-s steps.
///
/// Windows are scored in parallel; the output order is by window index.
pub fn score_stream(clip: &AudioClip, model: &dyn Scorer) -> Result<ScoreSeries> {
    let frames = frame_stream(clip, DETECT_WINDOW_SECS, DETECT_HOP_SECS)?;
    let scores = frames
        .par_iter()
        .map(|f| compute_spectrogram(f).and_then(|s| model.score(&s)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreSeries {
        scores,
        hop: DETECT_HOP_SECS,
        start_time: clip.start_time,
    })
}

/// Centered moving average with an odd window. Edges use the available
/// (truncated) window renormalized by its actual length, so a constant
/// series stays constant.
pub fn smooth(series: &ScoreSeries, width: usize) -> Result<ScoreSeries> {
    if width == 0 || width.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "smoothing width must be odd and >= 1, got {width}"
        )));
    }
    let half = width / 2;
    let n = series.scores.len();
    let scores = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            series.scores[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    Ok(ScoreSeries {
        scores,
        hop: series.hop,
        start_time: series.start_time,
    })
}

/// Threshold a score series: positive iff score >= threshold.
pub fn binarize(series: &ScoreSeries, threshold: f64) -> Vec<bool> {
    series.scores.iter().map(|&s| s >= threshold).collect()
}

/// Merge maximal runs of positive bins into detection events, expanding
/// each run by `buffer_bins` hops on both sides. Buffered intervals may
/// overlap; events are not re-merged. The peak score is taken over the
/// core bins of `series` (pass the smoothed series used for
/// thresholding).
pub fn merge_events(
    binary: &[bool],
    series: &ScoreSeries,
    buffer_bins: usize,
) -> Vec<DetectionEvent> {
    debug_assert_eq!(binary.len(), series.scores.len());
    let hop = series.hop;
    let buffer = buffer_bins as f64 * hop;
    let mut events = Vec::new();
    let mut i = 0;
    while i < binary.len() {
        if !binary[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < binary.len() && binary[i] {
            i += 1;
        }
        let n = i - start;
        let core_start = series.start_time + start as f64 * hop;
        let core_end = core_start + n as f64 * hop;
        let peak_score = series.scores[start..i]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        events.push(DetectionEvent {
            t_start: core_start - buffer,
            t_end: core_end + buffer,
            core_start,
            core_end,
            peak_score,
        });
    }
    events
}

/// Full pipeline: score, smooth (5 bins), threshold, merge (+/- 1 s).
pub fn detect(clip: &AudioClip, model: &dyn Scorer, threshold: f64) -> Result<Vec<DetectionEvent>> {
    let series = score_stream(clip, model)?;
    let smoothed = smooth(&series, SMOOTH_WIDTH)?;
    let binary = binarize(&smoothed, threshold);
    Ok(merge_events(&binary, &smoothed, BUFFER_BINS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    struct ConstScorer(f64);
    impl Scorer for ConstScorer {
        fn score(&self, _spec: &Spectrogram) -> Result<f64> {
            Ok(self.0)
        }
    }

    /// Scores 1.0 for windows starting inside [lo, hi), else 0.0.
    struct RegionScorer {
        lo: f64,
        hi: f64,
    }
    impl Scorer for RegionScorer {
        fn score(&self, spec: &Spectrogram) -> Result<f64> {
            Ok(if spec.start_time >= self.lo && spec.start_time < self.hi {
                1.0
            } else {
                0.0
            })
        }
    }

    fn series(scores: Vec<f64>) -> ScoreSeries {
        ScoreSeries {
            scores,
            hop: 0.5,
            start_time: 0.0,
        }
    }

    #[test]
    fn score_stream_lengths_and_stub() {
        let clip = AudioClip::new(vec![0.0; 1_800_000], 1000, 0.0, "long").unwrap();
        let s = score_stream(&clip, &ConstScorer(0.7)).unwrap();
        assert_eq!(s.scores.len(), 3595);
        assert!(s.scores.iter().all(|&v| v == 0.7));

        let exact = AudioClip::new(vec![0.0; 3000], 1000, 0.0, "one").unwrap();
        assert_eq!(score_stream(&exact, &ConstScorer(0.3)).unwrap().scores.len(), 1);

        let short = AudioClip::new(vec![0.0; 2000], 1000, 0.0, "short").unwrap();
        assert!(score_stream(&short, &ConstScorer(0.3)).is_err());
    }

    #[test]
    fn smooth_constant_and_spike() {
        let s = smooth(&series(vec![0.4; 20]), 5).unwrap();
        assert!(s.scores.iter().all(|&v| (v - 0.4).abs() < 1e-12));

        let mut v = vec![0.0; 21];
        v[10] = 1.0;
        let s = smooth(&series(v), 5).unwrap();
        for i in 8..=12 {
            assert!((s.scores[i] - 0.2).abs() < 1e-12);
        }
        assert_eq!(s.scores[7], 0.0);
        assert_eq!(s.scores[13], 0.0);
    }

    #[test]
    fn smooth_edges_renormalized() {
        let mut v = vec![0.0; 10];
        v[0] = 1.0;
        let s = smooth(&series(v), 5).unwrap();
        // First bin sees {0, 1, 2}: mean 1/3.
        assert!((s.scores[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.scores[1] - 0.25).abs() < 1e-12);
        assert!((s.scores[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn smooth_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = smooth(&series(v.clone()), 5).unwrap();
        for i in 2..98 {
            let mean = v[i - 2..=i + 2].iter().sum::<f64>() / 5.0;
            assert!((s.scores[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_rejects_even_width() {
        assert!(smooth(&series(vec![0.0; 5]), 4).is_err());
        assert!(smooth(&series(vec![0.0; 5]), 0).is_err());
        assert!(smooth(&series(vec![0.5; 5]), 1).is_ok());
    }

    #[test]
    fn binarize_is_inclusive() {
        let s = series(vec![0.4, 0.5, 0.6]);
        assert_eq!(binarize(&s, 0.5), vec![false, true, true]);
        assert_eq!(binarize(&s, 0.0), vec![true, true, true]);
        assert_eq!(binarize(&s, 0.61), vec![false, false, false]);
    }

    #[test]
    fn merge_events_buffering() {
        let mut scores = vec![0.0; 10];
        for s in &mut scores[3..6] {
            *s = 0.8;
        }
        let s = series(scores);
        let binary = binarize(&s, 0.5);
        let events = merge_events(&binary, &s, 2);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert!((e.core_start - 1.5).abs() < 1e-12);
        assert!((e.core_end - 3.0).abs() < 1e-12);
        assert!((e.t_start - 0.5).abs() < 1e-12);
        assert!((e.t_end - 4.0).abs() < 1e-12);
        assert!((e.peak_score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn merge_events_empty_and_gap() {
        let s = series(vec![0.0; 8]);
        assert!(merge_events(&binarize(&s, 0.5), &s, 2).is_empty());

        let mut scores = vec![0.0; 8];
        scores[1] = 1.0;
        scores[3] = 1.0;
        let s = series(scores);
        let events = merge_events(&binarize(&s, 0.5), &s, 2);
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn merge_event_count_matches_run_length_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..1000 {
            let n = rng.gen_range(1..60);
            let bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let s = series(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
            let events = merge_events(&bits, &s, 2);
            // Brute-force run counter.
            let mut runs = 0;
            let mut prev = false;
            for &b in &bits {
                if b && !prev {
                    runs += 1;
                }
                prev = b;
            }
            assert_eq!(events.len(), runs);
            for e in &events {
                assert!((e.t_end - e.t_start) - (e.core_duration() + 2.0) < 1e-12);
                assert!((e.t_end - e.t_start) - (e.core_duration() + 2.0) > -1e-12);
            }
        }
    }

    #[test]
    fn detect_single_region() {
        let clip = AudioClip::new(vec![0.0; 30_000], 1000, 0.0, "r").unwrap();
        let events = detect(&clip, &RegionScorer { lo: 10.0, hi: 13.0 }, 0.5).unwrap();
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert!((e.core_start - 10.0).abs() < 1e-9);
        assert!((e.core_end - 13.0).abs() < 1e-9);
        assert!((e.t_start - 9.0).abs() < 1e-9);
        assert!((e.t_end - 14.0).abs() < 1e-9);
    }

    #[test]
    fn detect_threshold_one_with_submaximal_scores() {
        let clip = AudioClip::new(vec![0.0; 10_000], 1000, 0.0, "c").unwrap();
        let events = detect(&clip, &ConstScorer(0.99), 1.0).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn threshold_monotonicity_of_positive_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let s = series((0..200).map(|_| rng.gen_range(0.0..1.0)).collect());
        let sm = smooth(&s, 5).unwrap();
        for _ in 0..50 {
            let t1: f64 = rng.gen_range(0.0..1.0);
            let t2 = rng.gen_range(t1..1.0);
            let b1 = binarize(&sm, t1);
            let b2 = binarize(&sm, t2);
            for (x1, x2) in b1.iter().zip(&b2) {
                assert!(*x1 || !*x2, "positive at t2 must be positive at t1");
            }
        }
    }

    /// An isolated spike of height h crosses threshold tau after 5-bin
    /// smoothing iff h/5 >= tau (enumerated).
    #[test]
    fn smoothing_suppression_of_isolated_spikes() {
        for h_step in 0..=20 {
            let h = h_step as f64 / 20.0;
            for tau_step in 1..=20 {
                let tau = tau_step as f64 / 20.0;
                let mut v = vec![0.0; 11];
                v[5] = h;
                let s = smooth(&series(v), 5).unwrap();
                let crossed = binarize(&s, tau).iter().any(|&b| b);
                assert_eq!(
                    crossed,
                    h / 5.0 >= tau,
                    "h={h} tau={tau}"
                );
            }
        }
    }
}
