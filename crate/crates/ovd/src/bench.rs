//! Wall-clock benchmarking of a session, with per-stage breakdown.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use ovd_core::pipelines::{Counters, Event, Instrument, Stage, Variant};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::session::Session;

/// Accumulates time spent in each stage plus encoder counters.
#[derive(Debug, Default, Clone)]
pub struct StageTimer {
    open: BTreeMap<Stage, Instant>,
    pub totals: BTreeMap<Stage, Duration>,
    pub counters: Counters,
}

impl Instrument for StageTimer {
    fn begin(&mut self, stage: Stage) {
        self.open.insert(stage, Instant::now());
    }

    fn end(&mut self, stage: Stage) {
        if let Some(t0) = self.open.remove(&stage) {
            *self.totals.entry(stage).or_default() += t0.elapsed();
        }
    }

    fn count(&mut self, event: Event) {
        self.counters.count(event);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerImageCounts {
    pub detector_passes: f64,
    pub full_encodes: f64,
    pub head_encodes: f64,
    pub crop_encodes: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub variant: Variant,
    pub params: u64,
    pub proposals: usize,
    pub images: usize,
    pub reps: usize,
    /// Images divided by the summed fastest-repetition latency of each
    /// image; taking the best repetition filters scheduler noise.
    pub images_per_sec: f64,
    /// Images divided by total wall time over all repetitions.
    pub wall_images_per_sec: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub stage_mean_ms: BTreeMap<Stage, f64>,
    pub counts_per_image: PerImageCounts,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Time `reps` passes over every image after one untimed warm-up pass.
/// Timing is single-threaded.
pub fn bench(session: &Session, reps: usize) -> Result<TimingReport> {
    if reps == 0 {
        return Err(Error::config("--reps must be at least 1"));
    }
    let ids = session.image_ids();
    if ids.is_empty() {
        return Err(Error::config("the bundle has no images to time"));
    }
    let pipeline = session.pipeline()?;
    for &id in &ids {
        session.detect_image(&pipeline, id, &mut ())?;
    }
    let mut timer = StageTimer::default();
    let mut latencies = Vec::with_capacity(ids.len() * reps);
    let mut best = vec![f64::INFINITY; ids.len()];
    let wall = Instant::now();
    for _ in 0..reps {
        for (i, &id) in ids.iter().enumerate() {
            let t0 = Instant::now();
            session.detect_image(&pipeline, id, &mut timer)?;
            let t = ms(t0.elapsed());
            best[i] = best[i].min(t);
            latencies.push(t);
        }
    }
    let elapsed = wall.elapsed().as_secs_f64();
    let n = latencies.len() as f64;
    latencies.sort_by(f64::total_cmp);
    let c = timer.counters;
    Ok(TimingReport {
        variant: pipeline.variant(),
        params: pipeline.param_count(),
        proposals: pipeline.config().proposals,
        images: ids.len(),
        reps,
        images_per_sec: 1e3 * ids.len() as f64 / best.iter().sum::<f64>().max(f64::MIN_POSITIVE),
        wall_images_per_sec: n / elapsed.max(f64::MIN_POSITIVE),
        mean_ms: latencies.iter().sum::<f64>() / n,
        p50_ms: percentile(&latencies, 50.0),
        p95_ms: percentile(&latencies, 95.0),
        stage_mean_ms: Stage::ALL
            .iter()
            .map(|s| (*s, timer.totals.get(s).map_or(0.0, |d| ms(*d)) / n))
            .collect(),
        counts_per_image: PerImageCounts {
            detector_passes: c.detector_passes as f64 / n,
            full_encodes: c.full_encodes as f64 / n,
            head_encodes: c.head_encodes as f64 / n,
            crop_encodes: c.crop_encodes as f64 / n,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0), 10.0);
        assert_eq!(percentile(&s, 95.0), 19.0);
        assert_eq!(percentile(&s, 100.0), 20.0);
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn timer_accumulates_only_closed_stages() {
        let mut t = StageTimer::default();
        t.begin(Stage::Encode);
        t.end(Stage::Encode);
        t.end(Stage::Classify);
        t.count(Event::HeadEncode);
        assert!(t.totals.contains_key(&Stage::Encode));
        assert!(!t.totals.contains_key(&Stage::Classify));
        assert_eq!(t.counters.head_encodes, 1);
    }
}
