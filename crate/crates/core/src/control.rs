//! Jam-absorption driving controller for the absorbing vehicle.

use serde::Serialize;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::prediction::AbsorbingPlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JadConfig {
    /// Start of the controlled stretch, m.
    pub p_jst: f64,
    /// End of the controlled stretch, m.
    pub p_jen: f64,
    /// Absorbing end point, m.
    pub p_ep: f64,
    pub a_si_min: f64,
    pub a_si_max: f64,
    pub v_si_min: f64,
    pub v_des: f64,
    pub dt_control: f64,
    /// Shadow rollout length in estimator steps.
    pub horizon_steps: usize,
    /// Consecutive congested windows needed to activate.
    pub trigger_windows: u32,
    /// How far upstream of the sag the congestion check reaches, m.
    pub trigger_zone_upstream: f64,
    /// No activation before this time, s.
    pub earliest_trigger: f64,
}

impl Default for JadConfig {
    fn default() -> Self {
        Self {
            p_jst: 0.0,
            p_jen: 8900.0,
            p_ep: 9200.0,
            a_si_min: -1.0,
            a_si_max: 1.0,
            v_si_min: 5.0,
            v_des: 27.0,
            dt_control: 0.1,
            horizon_steps: 1200,
            trigger_windows: 2,
            trigger_zone_upstream: 1000.0,
            earliest_trigger: 0.0,
        }
    }
}

impl JadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_jst < self.p_jen) {
            return Err(Error::config("jad.p_jst_m", "must be below p_jen_m"));
        }
        if !(self.a_si_min < 0.0 && self.a_si_max > 0.0) {
            return Err(Error::config("jad.a_si_min_mps2", "bounds must straddle zero"));
        }
        if !(self.v_si_min > 0.0 && self.v_si_min < self.v_des) {
            return Err(Error::config("jad.v_si_min_mps", "must lie in (0, v_des)"));
        }
        if !(self.dt_control > 0.0) {
            return Err(Error::config("timing.dt_control_s", "must be positive"));
        }
        if self.trigger_windows == 0 {
            return Err(Error::config("jad.trigger_windows", "must be at least 1"));
        }
        if !(self.trigger_zone_upstream >= 0.0 && self.earliest_trigger >= 0.0) {
            return Err(Error::config("jad", "trigger zone and earliest trigger must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("plan is stale: the absorbing point is already reached in time or space")]
pub struct StalePlan;

/// Target speed that reaches `p_ep` exactly at `t_ep`, clamped to
/// `[v_si_min, v_des]`.
pub fn slow_in_speed(p_abv: f64, t: f64, plan: &AbsorbingPlan, cfg: &JadConfig) -> std::result::Result<f64, StalePlan> {
    if t >= plan.t_ep || p_abv >= plan.p_ep {
        return Err(StalePlan);
    }
    let ratio = (plan.p_ep - p_abv) / (plan.t_ep - t);
    Ok(cfg.v_des.min(cfg.v_si_min.max(ratio)))
}

pub fn slow_in_acceleration(v_si: f64, v_abv: f64, dt_control: f64) -> f64 {
    (v_si - v_abv) / dt_control
}

/// Clamped acceleration toward `v_si`. The `-v/Δt_c` and `(v_des - v)/Δt_c`
/// terms keep one control step inside `[0, v_des]`.
pub fn jad_temp_acceleration(v_si: f64, v_abv: f64, a_si: f64, cfg: &JadConfig) -> f64 {
    if v_si < v_abv {
        a_si.max(cfg.a_si_min).max(-v_abv / cfg.dt_control)
    } else if v_si > v_abv {
        a_si.min(cfg.a_si_max).min((cfg.v_des - v_abv) / cfg.dt_control)
    } else {
        0.0
    }
}

/// Crash avoidance: IDM+ braking wins when it is the stronger deceleration.
pub fn jad_acceleration(a_temp: f64, a_des_idm: f64) -> f64 {
    if a_des_idm < 0.0 {
        a_des_idm.min(a_temp)
    } else {
        a_temp
    }
}

/// Which rule produced a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Inside `[p_jst, p_jen]` with a valid plan.
    Jad,
    /// Outside the controlled stretch (including fast-out).
    Idm,
    /// Inside the stretch but the plan is stale or missing.
    Stale,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Jad => "jad",
            Branch::Idm => "idm",
            Branch::Stale => "stale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub accel: f64,
    pub branch: Branch,
}

/// Spatially gated absorbing-vehicle acceleration. `a_des_idm` is the
/// vehicle's IDM+ desired acceleration.
pub fn abv_acceleration(
    p_abv: f64,
    v_abv: f64,
    t: f64,
    a_des_idm: f64,
    plan: Option<&AbsorbingPlan>,
    cfg: &JadConfig,
) -> Command {
    if !(cfg.p_jst..=cfg.p_jen).contains(&p_abv) {
        return Command {
            accel: a_des_idm,
            branch: Branch::Idm,
        };
    }
    match plan.map(|plan| slow_in_speed(p_abv, t, plan, cfg)) {
        Some(Ok(v_si)) => {
            let a_si = slow_in_acceleration(v_si, v_abv, cfg.dt_control);
            let a_temp = jad_temp_acceleration(v_si, v_abv, a_si, cfg);
            Command {
                accel: jad_acceleration(a_temp, a_des_idm),
                branch: Branch::Jad,
            }
        }
        _ => Command {
            accel: a_des_idm,
            branch: Branch::Stale,
        },
    }
}

/// Activation logic: counts consecutive congested windows and designates
/// the first vehicle spawned after activation as the absorbing vehicle.
#[derive(Debug, Clone, Default)]
pub struct JadTrigger {
    consecutive: u32,
    activated_at: Option<f64>,
    abv: Option<u64>,
}

impl JadTrigger {
    /// Feeds one window's congestion verdict. Returns true on activation.
    pub fn observe_window(&mut self, t: f64, congested: bool, cfg: &JadConfig) -> bool {
        if self.activated_at.is_some() {
            return false;
        }
        self.consecutive = if congested { self.consecutive + 1 } else { 0 };
        if self.consecutive >= cfg.trigger_windows && t >= cfg.earliest_trigger {
            self.activated_at = Some(t);
            return true;
        }
        false
    }

    pub fn activated_at(&self) -> Option<f64> {
        self.activated_at
    }

    pub fn abv(&self) -> Option<u64> {
        self.abv
    }

    /// Offers a freshly spawned vehicle; returns true if it becomes the AbV.
    pub fn select_absorbing_vehicle(&mut self, id: u64, spawn_time: f64) -> bool {
        match self.activated_at {
            Some(t0) if self.abv.is_none() && spawn_time >= t0 => {
                self.abv = Some(id);
                true
            }
            _ => false,
        }
    }
}
