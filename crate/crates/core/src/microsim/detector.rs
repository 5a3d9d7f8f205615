//! Loop-detector emulation: vehicle counts and time occupancy per window.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectorSample {
    pub station_p: f64,
    pub window_start: f64,
    pub window_end: f64,
    /// veh/h
    pub flow: f64,
    /// Fraction of the window the detector was covered, in [0, 1].
    pub occupancy: f64,
}

/// Aggregates one window of raw detections.
///
/// `crossings` are the times at which vehicle fronts passed the station and
/// `presence` the intervals during which the station was covered by some
/// vehicle's effective length. Both are clipped to the window.
pub fn detector_sample(
    crossings: &[f64],
    presence: &[(f64, f64)],
    station_p: f64,
    window_start: f64,
    window_len: f64,
) -> DetectorSample {
    let window_end = window_start + window_len;
    let count = crossings
        .iter()
        .filter(|&&t| t >= window_start && t < window_end)
        .count();
    let covered: f64 = presence
        .iter()
        .map(|&(a, b)| (b.min(window_end) - a.max(window_start)).max(0.0))
        .sum();
    DetectorSample {
        station_p,
        window_start,
        window_end,
        flow: count as f64 * 3600.0 / window_len,
        occupancy: (covered / window_len).clamp(0.0, 1.0),
    }
}

/// One detector station accumulating detections between window ends.
#[derive(Debug, Clone)]
pub struct LoopDetector {
    pub station_p: f64,
    effective_length: f64,
    crossings: Vec<f64>,
    presence: Vec<(f64, f64)>,
}

impl LoopDetector {
    pub fn new(station_p: f64, effective_length: f64) -> Self {
        Self {
            station_p,
            effective_length,
            crossings: Vec::new(),
            presence: Vec::new(),
        }
    }

    /// Whether a front moving over `[p_old, p_new]` can interact with this
    /// station.
    pub fn touches(&self, p_old: f64, p_new: f64) -> bool {
        p_new >= self.station_p && p_old < self.station_p + self.effective_length
    }

    /// Records a vehicle front moving linearly from `p_old` to `p_new`
    /// during `[t_old, t_old + dt]`. The station is covered while the front
    /// lies in `[station, station + effective_length)`.
    pub fn record(&mut self, p_old: f64, p_new: f64, t_old: f64, dt: f64) {
        let lo = self.station_p;
        let hi = self.station_p + self.effective_length;
        if p_old < lo && p_new >= lo {
            let frac = (lo - p_old) / (p_new - p_old);
            self.crossings.push(t_old + frac * dt);
        }
        let (start, end) = if p_new > p_old {
            let a = p_old.max(lo);
            let b = p_new.min(hi);
            if b <= a {
                return;
            }
            let speed = (p_new - p_old) / dt;
            (t_old + (a - p_old) / speed, t_old + (b - p_old) / speed)
        } else if p_old >= lo && p_old < hi {
            (t_old, t_old + dt)
        } else {
            return;
        };
        match self.presence.last_mut() {
            Some(last) if (last.1 - start).abs() < 1e-9 => last.1 = end,
            _ => self.presence.push((start, end)),
        }
    }

    /// Emits the window's sample and clears the accumulators.
    pub fn take_sample(&mut self, window_start: f64, window_len: f64) -> DetectorSample {
        let sample = detector_sample(
            &self.crossings,
            &self.presence,
            self.station_p,
            window_start,
            window_len,
        );
        self.crossings.clear();
        self.presence.clear();
        sample
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_window() {
        let s = detector_sample(&[], &[], 500.0, 0.0, 60.0);
        assert_eq!(s.flow, 0.0);
        assert_eq!(s.occupancy, 0.0);
        assert_eq!(s.window_end - s.window_start, 60.0);
    }

    #[test]
    fn thirty_crossings_is_1800_vph() {
        let crossings: Vec<f64> = (0..30).map(|k| k as f64 * 2.0).collect();
        let s = detector_sample(&crossings, &[], 500.0, 0.0, 60.0);
        assert_eq!(s.flow, 1800.0);
    }

    #[test]
    fn stopped_vehicle_fully_occupies() {
        let mut d = LoopDetector::new(500.0, 7.0);
        for k in 0..6000 {
            d.record(503.0, 503.0, k as f64 * 0.01, 0.01);
        }
        let s = d.take_sample(0.0, 60.0);
        assert!((s.occupancy - 1.0).abs() < 1e-9);
        assert_eq!(s.flow, 0.0);
    }

    #[test]
    fn passing_vehicle_occupancy_is_length_over_speed() {
        let mut d = LoopDetector::new(500.0, 7.0);
        let mut p = 400.0;
        for k in 0..6000 {
            let p_new = p + 20.0 * 0.01;
            d.record(p, p_new, k as f64 * 0.01, 0.01);
            p = p_new;
        }
        let s = d.take_sample(0.0, 60.0);
        assert_eq!(s.flow, 60.0);
        assert!((s.occupancy - (7.0 / 20.0) / 60.0).abs() < 1e-9);
    }

    #[test]
    fn crossing_time_is_interpolated() {
        let mut d = LoopDetector::new(500.0, 7.0);
        d.record(499.0, 501.0, 10.0, 0.01);
        assert!((d.crossings[0] - 10.005).abs() < 1e-12);
    }
}
