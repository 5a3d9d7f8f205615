//! Ground-truth single-lane microsimulation with the modified IDM+.

mod detector;
mod idm;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub use detector::{detector_sample, DetectorSample, LoopDetector};
pub use idm::{
    desired_acceleration, desired_gap, gradient_acceleration, update_compensated_gradient,
};

use crate::error::{Error, Result};
use crate::scenario::{DemandProfile, DriverParams, RoadProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleRole {
    Normal,
    Absorbing,
}

impl VehicleRole {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleRole::Normal => "normal",
            VehicleRole::Absorbing => "absorbing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub id: u64,
    /// Front bumper position, m.
    pub p: f64,
    pub v: f64,
    /// Acceleration realized over the last step, m/s².
    pub a: f64,
    pub g_comp: f64,
    pub role: VehicleRole,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnEvent {
    pub id: u64,
    /// When the demand integral reached this vehicle.
    pub arrival: f64,
    /// When it was actually placed at the entrance.
    pub spawned: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitEvent {
    pub id: u64,
    pub role: VehicleRole,
    /// Interpolated time at which the front crossed the exit.
    pub time: f64,
    pub v: f64,
    pub a: f64,
}

/// Turns the demand integral into whole vehicles, queued at the entrance
/// until there is room to place them.
#[derive(Debug, Clone, Default)]
pub struct Spawner {
    released: u64,
    spawned: u64,
    queue: VecDeque<f64>,
}

impl Spawner {
    /// Releases every whole vehicle demanded over `[0, t]`.
    fn accumulate(&mut self, demand: &DemandProfile, t: f64) {
        let total = demand.integral(0.0, t);
        let whole = (total + 1e-9).floor() as u64;
        while self.released < whole {
            self.released += 1;
            self.queue
                .push_back(arrival_time(demand, self.released as f64, t));
        }
    }

    pub fn spawned(&self) -> u64 {
        self.spawned
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }
}

/// Time at which the demand integral reaches `count`, searched on `[0, t]`.
fn arrival_time(demand: &DemandProfile, count: f64, t: f64) -> f64 {
    let mut acc = 0.0;
    let bps = demand.breakpoints();
    for (k, &(start, q)) in bps.iter().enumerate() {
        let end = bps.get(k + 1).map_or(f64::INFINITY, |&(n, _)| n).min(t);
        if end <= start.max(0.0) || q <= 0.0 {
            continue;
        }
        let lo = start.max(0.0);
        let seg = q * (end - lo) / 3600.0;
        if acc + seg + 1e-9 >= count {
            return (lo + (count - acc) * 3600.0 / q).min(t);
        }
        acc += seg;
    }
    t
}

/// The vehicles on the road, ordered leader first, and the entrance queue.
#[derive(Debug, Clone)]
pub struct World {
    pub road: RoadProfile,
    pub params: DriverParams,
    pub vehicle_length: f64,
    vehicles: Vec<VehicleState>,
    next_id: u64,
    spawner: Spawner,
}

impl World {
    pub fn new(road: RoadProfile, params: DriverParams, vehicle_length: f64) -> Self {
        Self {
            road,
            params,
            vehicle_length,
            vehicles: Vec::new(),
            next_id: 1,
            spawner: Spawner::default(),
        }
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: u64) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn spawner(&self) -> &Spawner {
        &self.spawner
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty() && self.spawner.queue.is_empty()
    }

    pub fn set_role(&mut self, id: u64, role: VehicleRole) -> bool {
        match self.vehicles.iter_mut().find(|v| v.id == id) {
            Some(v) => {
                v.role = role;
                true
            }
            None => false,
        }
    }

    /// Inserts a vehicle upstream of all others. Used by tests and presets.
    pub fn push_vehicle(&mut self, p: f64, v: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let g = self.road.gradient_unchecked(p);
        self.vehicles.push(VehicleState {
            id,
            p,
            v,
            a: 0.0,
            g_comp: g,
            role: VehicleRole::Normal,
        });
        id
    }

    /// Bumper-to-bumper gap of vehicle `idx` to its leader (∞ for the first).
    fn gap_and_dv(&self, idx: usize) -> (f64, f64) {
        if idx == 0 {
            return (f64::INFINITY, 0.0);
        }
        let leader = &self.vehicles[idx - 1];
        let me = &self.vehicles[idx];
        (leader.p - self.vehicle_length - me.p, me.v - leader.v)
    }

    /// IDM+ desired acceleration of vehicle `id`, without the gradient term.
    pub fn desired_acceleration_of(&self, id: u64) -> Option<Result<f64>> {
        let idx = self.vehicles.iter().position(|v| v.id == id)?;
        let (gap, dv) = self.gap_and_dv(idx);
        Some(desired_acceleration(self.vehicles[idx].v, dv, gap, &self.params))
    }

    /// Releases demand up to time `t` and places at most one queued vehicle.
    ///
    /// A vehicle enters at `v_des` when the entrance gap covers its desired
    /// gap behind the last vehicle; otherwise it enters at the last vehicle's
    /// speed if the gap covers `s0 + v T`; otherwise it stays queued.
    pub fn spawn_vehicles(&mut self, demand: &DemandProfile, t: f64) -> Option<SpawnEvent> {
        self.spawner.accumulate(demand, t);
        let &arrival = self.spawner.queue.front()?;
        let p = &self.params;
        let speed = match self.vehicles.last() {
            None => p.v_des,
            Some(last) => {
                let gap = last.p - self.vehicle_length - self.road.p_entry;
                if gap >= desired_gap(p.v_des, p.v_des - last.v, p) {
                    p.v_des
                } else {
                    let v = p.v_des.min(last.v);
                    if gap >= p.s0 + v * p.headway_t {
                        v
                    } else {
                        return None;
                    }
                }
            }
        };
        self.spawner.queue.pop_front();
        self.spawner.spawned += 1;
        let id = self.push_vehicle(self.road.p_entry, speed);
        Some(SpawnEvent {
            id,
            arrival,
            spawned: t,
        })
    }

    /// Advances every vehicle by `dt` from time `t`.
    ///
    /// `command` overrides the acceleration of one vehicle (the absorbing
    /// vehicle under control). `observer` sees each vehicle's old position and
    /// new state, before exited vehicles are removed.
    pub fn step_truth(
        &mut self,
        t: f64,
        dt: f64,
        command: Option<(u64, f64)>,
        mut observer: impl FnMut(f64, &VehicleState),
    ) -> Result<Vec<ExitEvent>> {
        let n = self.vehicles.len();
        let mut accel = Vec::with_capacity(n);
        for idx in 0..n {
            let veh = &self.vehicles[idx];
            let a = match command {
                Some((id, a)) if id == veh.id => a,
                _ => {
                    let (gap, dv) = self.gap_and_dv(idx);
                    let a_des = desired_acceleration(veh.v, dv, gap, &self.params).map_err(|_| {
                        Error::SimulationFault {
                            time_s: t,
                            leader: self.vehicles[idx - 1].id,
                            follower: veh.id,
                            gap,
                        }
                    })?;
                    let g_here = self.road.gradient_unchecked(veh.p);
                    a_des + gradient_acceleration(g_here, veh.g_comp, self.params.theta)
                }
            };
            accel.push(a);
        }

        let mut exits = Vec::new();
        for (veh, a) in self.vehicles.iter_mut().zip(accel) {
            let p_old = veh.p;
            let v_new = (veh.v + a * dt).max(0.0);
            veh.a = (v_new - veh.v) / dt;
            veh.v = v_new;
            veh.p += v_new * dt;
            let g_here = self.road.gradient_unchecked(veh.p);
            veh.g_comp = update_compensated_gradient(veh.g_comp, g_here, self.params.lambda, dt);
            observer(p_old, veh);
            if veh.p >= self.road.p_exit {
                let frac = if veh.p > p_old {
                    (self.road.p_exit - p_old) / (veh.p - p_old)
                } else {
                    1.0
                };
                exits.push(ExitEvent {
                    id: veh.id,
                    role: veh.role,
                    time: t + frac * dt,
                    v: veh.v,
                    a: veh.a,
                });
            }
        }

        for idx in 1..self.vehicles.len() {
            let (gap, _) = self.gap_and_dv(idx);
            if !(gap > 0.0) {
                return Err(Error::SimulationFault {
                    time_s: t + dt,
                    leader: self.vehicles[idx - 1].id,
                    follower: self.vehicles[idx].id,
                    gap,
                });
            }
        }

        let exit = self.road.p_exit;
        self.vehicles.retain(|v| v.p < exit);
        Ok(exits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_road() -> RoadProfile {
        RoadProfile::new(0.0, 0.0001, 50_000.0, 50_001.0, 0.0, 100_000.0).unwrap()
    }

    #[test]
    fn free_vehicle_at_desired_speed_cruises() {
        let mut w = World::new(flat_road(), DriverParams::default(), 5.0);
        w.push_vehicle(1000.0, 27.0);
        w.step_truth(0.0, 0.01, None, |_, _| {}).unwrap();
        let v = w.vehicles()[0];
        assert_eq!(v.v, 27.0);
        assert!((v.p - 1000.27).abs() < 1e-9);
    }

    #[test]
    fn speed_clamps_at_zero() {
        let mut w = World::new(flat_road(), DriverParams::default(), 5.0);
        let id = w.push_vehicle(1000.0, 0.05);
        w.step_truth(0.0, 0.01, Some((id, -10.0)), |_, _| {}).unwrap();
        assert_eq!(w.vehicles()[0].v, 0.0);
        assert_eq!(w.vehicles()[0].p, 1000.0);
    }

    /// Equilibrium spacing found by bisection on the IDM+ interaction term.
    #[test]
    fn platoon_at_equilibrium_is_at_rest() {
        let params = DriverParams::default();
        let v = 20.0;
        let (mut lo, mut hi) = (1.0, 500.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let interaction = 1.0 - (desired_gap(v, 0.0, &params) / mid).powi(2);
            if interaction < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let gap = 0.5 * (lo + hi);
        let mut w = World::new(flat_road(), params, 5.0);
        w.push_vehicle(2000.0, v);
        w.push_vehicle(2000.0 - 5.0 - gap, v);
        // The leader (free road) accelerates; the follower must not.
        let idx_follower = 1;
        let (g, dv) = w.gap_and_dv(idx_follower);
        let a = desired_acceleration(v, dv, g, &params).unwrap();
        assert!(a.abs() < 1e-12, "{a}");
    }

    #[test]
    fn zero_demand_never_spawns() {
        let mut w = World::new(RoadProfile::baseline(), DriverParams::default(), 5.0);
        let demand = DemandProfile::new(vec![(0.0, 0.0)]).unwrap();
        for k in 0..100_000 {
            assert!(w.spawn_vehicles(&demand, k as f64 * 0.01).is_none());
        }
    }

    #[test]
    fn free_entrance_spawns_every_two_seconds() {
        let mut w = World::new(RoadProfile::baseline(), DriverParams::default(), 5.0);
        let demand = DemandProfile::new(vec![(0.0, 1800.0)]).unwrap();
        let mut times = Vec::new();
        for k in 0..=6000u64 {
            let t = k as f64 * 0.01;
            if let Some(ev) = w.spawn_vehicles(&demand, t) {
                times.push(ev.spawned);
            }
            w.step_truth(t, 0.01, None, |_, _| {}).unwrap();
        }
        // Accumulated-integral oracle: vehicle n arrives at n * 3600 / 1800.
        assert_eq!(times.len(), 30);
        for (n, t) in times.iter().enumerate() {
            assert!((t - 2.0 * (n + 1) as f64).abs() < 1e-9, "{n}: {t}");
        }
    }

    #[test]
    fn blocked_entrance_queues_demand() {
        let mut w = World::new(RoadProfile::baseline(), DriverParams::default(), 5.0);
        // A stopped vehicle right at the entrance blocks everything.
        let blocker = w.push_vehicle(6.0, 0.0);
        let demand = DemandProfile::new(vec![(0.0, 1500.0)]).unwrap();
        for k in 0..=6000u64 {
            let t = k as f64 * 0.01;
            assert!(w.spawn_vehicles(&demand, t).is_none());
            w.step_truth(t, 0.01, Some((blocker, 0.0)), |_, _| {}).unwrap();
            let expected = demand.integral(0.0, t).floor() as usize;
            assert_eq!(w.spawner().queued() + w.spawner().spawned() as usize, expected);
        }
        assert_eq!(w.spawner().queued(), 25);
    }

    #[test]
    fn exit_time_is_interpolated() {
        let mut w = World::new(RoadProfile::baseline(), DriverParams::default(), 5.0);
        w.push_vehicle(9999.9, 27.0);
        let exits = w.step_truth(100.0, 0.01, None, |_, _| {}).unwrap();
        assert_eq!(exits.len(), 1);
        assert!((exits[0].time - (100.0 + 0.1 / 27.0)).abs() < 1e-9);
        assert!(w.vehicles().is_empty());
    }

    #[test]
    fn overlapping_vehicles_fault() {
        let mut w = World::new(flat_road(), DriverParams::default(), 5.0);
        let lead = w.push_vehicle(1000.0, 0.0);
        let follower = w.push_vehicle(994.0, 30.0);
        let err = w
            .step_truth(5.0, 0.1, Some((follower, 0.0)), |_, _| {})
            .unwrap_err();
        match err {
            Error::SimulationFault { leader, follower: f, .. } => {
                assert_eq!(leader, lead);
                assert_eq!(f, follower);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn spawn_initializes_compensated_gradient() {
        let mut w = World::new(RoadProfile::baseline(), DriverParams::default(), 5.0);
        let demand = DemandProfile::new(vec![(0.0, 3600.0)]).unwrap();
        w.spawn_vehicles(&demand, 1.0).unwrap();
        assert_eq!(w.vehicles()[0].g_comp, -0.005);
    }
}
