//! Rolling-horizon experiment driver.
//!
//! Truth stepping, detector windows, estimation, plan refresh and control
//! all run on one integer clock counted in truth steps. Per truth step:
//! the absorbing-vehicle command is refreshed on control ticks, the entrance
//! releases at most one vehicle, the world advances, and on estimator ticks
//! the CTM forecast runs. At each window end the detectors are sampled, the
//! filter assimilates, the trigger is evaluated and the plan is refreshed.

mod bundle;
mod timespace;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assimilation::{stations_for, Estimator, MeasurementSet, ObservationModel, TrafficStateVector};
use crate::control::{abv_acceleration, Command, JadTrigger};
use crate::ctm::{CellGrid, CtmModel, FdParams};
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::microsim::{DetectorSample, LoopDetector, VehicleRole, VehicleState, World};
use crate::prediction::{absorbing_end_time, predict_shadow, AbsorbingPlan, ShadowTrajectory};
use crate::scenario::Scenario;

pub use bundle::{
    compare_runs, read_manifest, read_metrics, read_trajectory, read_trips, BundleWriter, Manifest,
    TrajectoryRow,
};
pub use timespace::{export_timespace, timespace_grid, TimeSpaceGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    NoJad,
    /// Plans come from an open-loop CTM with the initial parameters.
    JadNoDa,
    /// Plans come from the assimilated estimate.
    JadDa,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::NoJad => "no_jad",
            RunMode::JadNoDa => "jad_no_da",
            RunMode::JadDa => "jad_da",
        }
    }

    /// Accepts both `no-jad` and `no_jad` spellings.
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "no_jad" => Some(RunMode::NoJad),
            "jad_no_da" => Some(RunMode::JadNoDa),
            "jad_da" => Some(RunMode::JadDa),
            _ => None,
        }
    }

    pub fn is_jad(self) -> bool {
        self != RunMode::NoJad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: RunMode,
    pub seed: u64,
    /// Perturb detector samples with the scenario's measurement noise.
    pub noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub metrics: MetricsReport,
    pub activated_at: Option<f64>,
    pub abv: Option<u64>,
    pub end_time: f64,
}

/// Detectors on a uniform grid, looked up by position.
struct DetectorArray {
    p_entry: f64,
    spacing: f64,
    detectors: Vec<LoopDetector>,
}

impl DetectorArray {
    fn observe(&mut self, p_old: f64, veh: &VehicleState, t: f64, dt: f64) {
        let k = ((veh.p - self.p_entry) / self.spacing).floor() as i64;
        if k < 1 {
            return;
        }
        if let Some(d) = self.detectors.get_mut(k as usize - 1) {
            if d.touches(p_old, veh.p) {
                d.record(p_old, veh.p, t, dt);
            }
        }
    }
}

fn estimator_for(scenario: &Scenario, theta: FdParams) -> Result<Estimator> {
    let grid = CellGrid::new(&scenario.road, scenario.timing.cell_length)?;
    let model = CtmModel::new(grid, scenario.rho_jam, scenario.timing.dt_sim, &theta)?;
    let obs = ObservationModel {
        stations: stations_for(&model, scenario.timing.detector_spacing),
        effective_length: scenario.sensors.effective_length(),
    };
    let initial = TrafficStateVector {
        rho: vec![0.0; model.grid.len()],
        theta,
    };
    Ok(Estimator::new(model, obs, scenario.filter, initial))
}

/// Whether any cell overlapping the trigger zone is above its critical
/// density in the filter's current estimate.
fn zone_congested(est: &Estimator, scenario: &Scenario) -> bool {
    let lo = scenario.road.p_sag_begin - scenario.jad.trigger_zone_upstream;
    let hi = scenario.road.p_sag_end;
    let grid = &est.model.grid;
    est.congested_cells()
        .any(|i| grid.downstream_boundary(i) > lo && grid.upstream_boundary(i) < hi)
}

struct JadState {
    trigger: JadTrigger,
    plan: Option<AbsorbingPlan>,
    shadow: Option<ShadowTrajectory>,
    /// Set once the absorbing vehicle has passed the controlled stretch.
    finished: bool,
}

/// Runs one experiment and writes its bundle to `out_dir`.
///
/// On a simulation or filter fault the partial logs are flushed, the error is
/// recorded in `error.txt`, and the fault is returned.
pub fn run_scenario(scenario: &Scenario, opts: RunOptions, out_dir: &Path) -> Result<RunSummary> {
    scenario.validate()?;
    let mut writer = BundleWriter::create(out_dir, scenario, opts)?;
    let outcome = simulate(scenario, opts, &mut writer);
    match outcome {
        Ok((activated_at, abv, end_time)) => {
            let manifest = writer.finish(activated_at, abv, end_time, None)?;
            let metrics = bundle::compute_metrics(out_dir, scenario, opts)?;
            bundle::write_json(&out_dir.join("metrics.json"), &metrics)?;
            bundle::write_manifest(out_dir, manifest)?;
            Ok(RunSummary {
                metrics,
                activated_at,
                abv,
                end_time,
            })
        }
        Err(err) => {
            let manifest = writer.finish(None, None, f64::NAN, Some(&err))?;
            bundle::write_manifest(out_dir, manifest)?;
            Err(err)
        }
    }
}

fn simulate(scenario: &Scenario, opts: RunOptions, log: &mut BundleWriter) -> Result<(Option<f64>, Option<u64>, f64)> {
    let timing = &scenario.timing;
    let dt = timing.dt_truth;
    let ctl_every = timing.ticks(timing.dt_control);
    let sim_every = timing.ticks(timing.dt_sim);
    let win_every = timing.ticks(timing.window);
    let log_every = timing.ticks(timing.log_interval);
    let max_ticks = (scenario.max_duration / dt).round() as u64;
    let demand_done = scenario.demand.exhausted_after();

    let mut world = World::new(scenario.road, scenario.driver, scenario.sensors.vehicle_length);
    let mut filter = estimator_for(scenario, scenario.initial_theta)?;
    let mut open_loop = match opts.mode {
        RunMode::JadNoDa => Some(estimator_for(scenario, scenario.initial_theta)?),
        _ => None,
    };
    let mut detectors = DetectorArray {
        p_entry: scenario.road.p_entry,
        spacing: timing.detector_spacing,
        detectors: filter
            .obs
            .stations
            .iter()
            .map(|s| LoopDetector::new(s.p, scenario.sensors.effective_length()))
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut jad = JadState {
        trigger: JadTrigger::default(),
        plan: None,
        shadow: None,
        finished: false,
    };
    let mut command: Option<(u64, f64)> = None;

    log.estimates(0.0, "filter", &filter)?;
    let mut tick: u64 = 0;
    loop {
        let t = tick as f64 * dt;

        if tick.is_multiple_of(ctl_every) {
            command = None;
            if let Some(id) = jad.trigger.abv() {
                if let Some(veh) = world.vehicle(id).copied() {
                    let a_des = world
                        .desired_acceleration_of(id)
                        .expect("absorbing vehicle is on the road")
                        .map_err(|_| Error::SimulationFault {
                            time_s: t,
                            leader: 0,
                            follower: id,
                            gap: 0.0,
                        })?;
                    let Command { accel, branch } =
                        abv_acceleration(veh.p, veh.v, t, a_des, jad.plan.as_ref(), &scenario.jad);
                    if veh.p > scenario.jad.p_jen {
                        jad.finished = true;
                    }
                    log.command(t, &veh, accel, branch, jad.plan.as_ref())?;
                    command = Some((id, accel));
                }
            }
        }

        if let Some(ev) = world.spawn_vehicles(&scenario.demand, t) {
            let veh = *world.vehicle(ev.id).expect("spawned vehicle exists");
            if opts.mode.is_jad() && jad.trigger.select_absorbing_vehicle(ev.id, t) {
                world.set_role(ev.id, VehicleRole::Absorbing);
                let source = open_loop.as_ref().unwrap_or(&filter);
                refresh_plan(&mut jad, source, scenario, t, Some(veh.p), log)?;
            }
            log.spawn(ev.id, ev.arrival, t, world.vehicle(ev.id).expect("spawned vehicle exists"))?;
        }

        let exits = world.step_truth(t, dt, command, |p_old, veh| detectors.observe(p_old, veh, t, dt))?;
        for ex in &exits {
            log.exit(ex)?;
        }

        tick += 1;
        let t = tick as f64 * dt;

        if tick.is_multiple_of(log_every) {
            for veh in world.vehicles() {
                log.trajectory(t, veh)?;
            }
        }

        if tick.is_multiple_of(sim_every) {
            let inflow = scenario.demand.integral(t - timing.dt_sim, t) * 3600.0 / timing.dt_sim;
            filter.forecast(inflow)?;
            if let Some(ol) = open_loop.as_mut() {
                ol.forecast(inflow)?;
            }
        }

        if tick.is_multiple_of(win_every) {
            let window_start = t - timing.window;
            let samples: Vec<DetectorSample> = detectors
                .detectors
                .iter_mut()
                .map(|d| d.take_sample(window_start, timing.window))
                .collect();
            let measured = measure(&samples, scenario, opts.noise, &mut rng);
            log.detectors(&samples, &measured)?;
            filter.assimilate(&measured)?;
            log.estimates(t, "filter", &filter)?;
            if let Some(ol) = open_loop.as_ref() {
                log.estimates(t, "open_loop", ol)?;
            }

            if opts.mode.is_jad() {
                let congested = zone_congested(&filter, scenario);
                jad.trigger.observe_window(t, congested, &scenario.jad);
                if let Some(id) = jad.trigger.abv() {
                    if !jad.finished && world.vehicle(id).is_some() {
                        let source = open_loop.as_ref().unwrap_or(&filter);
                        refresh_plan(&mut jad, source, scenario, t, None, log)?;
                    }
                }
            }
        }

        let done = t >= demand_done && world.is_empty();
        if done || tick >= max_ticks {
            return Ok((jad.trigger.activated_at(), jad.trigger.abv(), t));
        }
    }
}

/// Re-predicts the shadow trajectory and refreshes the plan. The shadow
/// starts at `start` (the absorbing vehicle at activation) or, afterwards,
/// where the previous shadow trajectory places it now. A failed prediction
/// keeps the previous plan and shadow.
fn refresh_plan(
    jad: &mut JadState,
    source: &Estimator,
    scenario: &Scenario,
    t: f64,
    start: Option<f64>,
    log: &mut BundleWriter,
) -> Result<()> {
    let start_p = match (start, jad.shadow.as_ref()) {
        (Some(p), _) => p,
        (None, Some(shadow)) => shadow.position_at(t),
        (None, None) => return Ok(()),
    };
    let field = source.speed_field();
    let shadow = predict_shadow(
        start_p,
        t,
        &field,
        &source.model.grid,
        scenario.timing.dt_sim,
        scenario.jad.horizon_steps,
    );
    match absorbing_end_time(&shadow, scenario.jad.p_ep) {
        Ok(t_ep) => {
            let plan = AbsorbingPlan {
                p_ep: scenario.jad.p_ep,
                t_ep,
                issued_at: t,
            };
            log.plan(t, start_p, Some(&plan), "ok")?;
            jad.plan = Some(plan);
            jad.shadow = Some(shadow);
        }
        Err(e) => {
            log.plan(t, start_p, jad.plan.as_ref(), e.as_str())?;
            if jad.shadow.is_none() {
                jad.shadow = Some(shadow);
            }
        }
    }
    Ok(())
}

/// Detector samples as seen by the filter, optionally with seeded noise.
fn measure(samples: &[DetectorSample], scenario: &Scenario, noise: bool, rng: &mut ChaCha8Rng) -> MeasurementSet {
    let mut flow: Vec<f64> = samples.iter().map(|s| s.flow).collect();
    let mut occupancy: Vec<f64> = samples.iter().map(|s| s.occupancy).collect();
    let n = &scenario.measurement_noise;
    if noise {
        if n.flow_std_vph > 0.0 {
            let d = Normal::new(0.0, n.flow_std_vph).expect("finite std");
            for f in &mut flow {
                *f = (*f + d.sample(rng)).max(0.0);
            }
        }
        if n.occupancy_std > 0.0 {
            let d = Normal::new(0.0, n.occupancy_std).expect("finite std");
            for o in &mut occupancy {
                *o = (*o + d.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    MeasurementSet { flow, occupancy }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!(RunMode::parse("no-jad"), Some(RunMode::NoJad));
        assert_eq!(RunMode::parse("jad_no_da"), Some(RunMode::JadNoDa));
        assert_eq!(RunMode::parse("jad-da"), Some(RunMode::JadDa));
        assert_eq!(RunMode::parse("jad"), None);
        for m in [RunMode::NoJad, RunMode::JadNoDa, RunMode::JadDa] {
            assert_eq!(RunMode::parse(m.as_str()), Some(m));
        }
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let scenario = Scenario::baseline();
        let samples: Vec<DetectorSample> = (0..19)
            .map(|k| DetectorSample {
                station_p: 500.0 * (k + 1) as f64,
                window_start: 0.0,
                window_end: 60.0,
                flow: 0.0,
                occupancy: 0.0,
            })
            .collect();
        let a = measure(&samples, &scenario, true, &mut ChaCha8Rng::seed_from_u64(7));
        let b = measure(&samples, &scenario, true, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert!(a.flow.iter().all(|&f| f >= 0.0));
        assert!(a.occupancy.iter().all(|&o| (0.0..=1.0).contains(&o)));
        let clean = measure(&samples, &scenario, false, &mut ChaCha8Rng::seed_from_u64(7));
        assert!(clean.flow.iter().all(|&f| f == 0.0));
    }
}
