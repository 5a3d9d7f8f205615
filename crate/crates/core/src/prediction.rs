//! Shadow-trajectory rollout of the absorbing vehicle through a frozen
//! equilibrium speed field, and the absorbing end time derived from it.

use serde::Serialize;
use thiserror::Error;

use crate::ctm::CellGrid;

/// Predicted no-control trajectory of the absorbing vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowTrajectory {
    pub issued_at: f64,
    /// `(time, position, cell)` per rollout step, starting at `issued_at`.
    pub points: Vec<(f64, f64, usize)>,
}

impl ShadowTrajectory {
    /// Shadow position at `t`, interpolated between rollout points and held
    /// constant past the horizon.
    pub fn position_at(&self, t: f64) -> f64 {
        let k = self.points.partition_point(|&(ti, _, _)| ti <= t);
        if k == 0 {
            return self.points[0].1;
        }
        if k == self.points.len() {
            return self.points[k - 1].1;
        }
        let (t0, p0, _) = self.points[k - 1];
        let (t1, p1, _) = self.points[k];
        p0 + (p1 - p0) * (t - t0) / (t1 - t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbsorbingPlan {
    pub p_ep: f64,
    pub t_ep: f64,
    pub issued_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PredictionError {
    #[error("shadow trajectory does not reach the absorbing point within the horizon")]
    NoCrossing,
    #[error("shadow trajectory already lies at or beyond the absorbing point")]
    AlreadyPast,
}

impl PredictionError {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictionError::NoCrossing => "no_crossing",
            PredictionError::AlreadyPast => "already_past",
        }
    }
}

/// One rollout step of `dt` seconds. Crossing a cell boundary spends the
/// remaining time at the next cell's speed, recursively. A cell with zero
/// speed holds the shadow in place. Past the last cell the last speed applies.
pub fn shadow_step(p_now: f64, cell: usize, v_field: &[f64], grid: &CellGrid, dt: f64) -> (f64, usize) {
    let last = v_field.len() - 1;
    let mut p = p_now;
    let mut i = cell;
    let mut remaining = dt;
    loop {
        let v = v_field[i];
        let temp = p + v * remaining;
        let p_db = grid.downstream_boundary(i);
        if v <= 0.0 || i == last || temp <= p_db {
            return (temp, i);
        }
        remaining -= (p_db - p) / v;
        p = p_db;
        i += 1;
    }
}

/// Rolls the shadow forward for `horizon_steps` steps of `dt`.
pub fn predict_shadow(
    start_p: f64,
    issued_at: f64,
    v_field: &[f64],
    grid: &CellGrid,
    dt: f64,
    horizon_steps: usize,
) -> ShadowTrajectory {
    let mut cell = grid.cell_of(start_p);
    let mut p = start_p;
    let mut points = Vec::with_capacity(horizon_steps + 1);
    points.push((issued_at, p, cell));
    for eta in 1..=horizon_steps {
        (p, cell) = shadow_step(p, cell, v_field, grid, dt);
        points.push((issued_at + eta as f64 * dt, p, cell));
    }
    ShadowTrajectory { issued_at, points }
}

/// First time the shadow reaches `p_ep`, linearly interpolated.
pub fn absorbing_end_time(shadow: &ShadowTrajectory, p_ep: f64) -> Result<f64, PredictionError> {
    let (_, p0, _) = shadow.points[0];
    if p0 >= p_ep {
        return Err(PredictionError::AlreadyPast);
    }
    shadow
        .points
        .windows(2)
        .find(|w| w[1].1 >= p_ep)
        .map(|w| {
            let (t0, p0, _) = w[0];
            let (t1, p1, _) = w[1];
            t0 + (t1 - t0) * (p_ep - p0) / (p1 - p0)
        })
        .ok_or(PredictionError::NoCrossing)
}
