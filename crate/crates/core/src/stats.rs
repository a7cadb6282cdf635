//! Latency summaries.

use std::time::Duration;

use serde::Serialize;

/// Nearest-rank percentiles and mean over a set of samples, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub p50_ns: f64,
    pub p99_ns: f64,
    pub mean_ns: f64,
}

impl LatencyStats {
    /// `None` for an empty sample set.
    pub fn from_nanos(mut samples: Vec<f64>) -> Option<LatencyStats> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(f64::total_cmp);
        let mean_ns = samples.iter().sum::<f64>() / samples.len() as f64;
        Some(LatencyStats {
            samples: samples.len(),
            p50_ns: nearest_rank(&samples, 50.0),
            p99_ns: nearest_rank(&samples, 99.0),
            mean_ns,
        })
    }

    pub fn from_durations(samples: &[Duration]) -> Option<LatencyStats> {
        Self::from_nanos(samples.iter().map(|d| d.as_nanos() as f64).collect())
    }
}

/// Smallest sample with at least `pct` percent of samples at or below it.
/// `sorted` must be non-empty and ascending.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let s = LatencyStats::from_nanos(vec![42.0]).unwrap();
        assert_eq!((s.p50_ns, s.p99_ns, s.mean_ns), (42.0, 42.0, 42.0));
    }

    #[test]
    fn hundred_samples() {
        let s = LatencyStats::from_nanos((1..=100).rev().map(f64::from).collect()).unwrap();
        assert_eq!(s.p50_ns, 50.0);
        assert_eq!(s.p99_ns, 99.0);
        assert_eq!(s.mean_ns, 50.5);
    }

    #[test]
    fn empty_is_none() {
        assert!(LatencyStats::from_nanos(Vec::new()).is_none());
    }
}
