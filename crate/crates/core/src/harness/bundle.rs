//! Run bundle: CSV logs, resolved configuration, metrics and manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunMode, RunOptions};
use crate::assimilation::{Estimator, MeasurementSet};
use crate::control::Branch;
use crate::error::{Error, Result};
use crate::evaluation::{
    average_travel_time, benefit_metrics, trajectory_fuel, FuelModel, MetricsReport, RunKey,
    TripRecord,
};
use crate::microsim::{DetectorSample, ExitEvent, VehicleRole, VehicleState};
use crate::prediction::AbsorbingPlan;
use crate::scenario::Scenario;

const BUNDLE_FILES: [&str; 10] = [
    "commands.csv",
    "config.toml",
    "detectors.csv",
    "error.txt",
    "estimates.csv",
    "metrics.json",
    "parameters.csv",
    "plans.csv",
    "trajectory.csv",
    "vehicles.csv",
];

type Csv = csv::Writer<BufWriter<File>>;

fn csv_writer(path: &Path, header: &[&str]) -> Result<Csv> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    Ok(w)
}

fn f(x: f64, decimals: usize) -> String {
    format!("{x:.decimals$}")
}

fn opt(x: Option<f64>, decimals: usize) -> String {
    x.map_or_else(String::new, |x| f(x, decimals))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that shapes the ground truth and its measurement, so
/// runs that differ only in mode or estimator initialization pair up.
pub(crate) fn scenario_hash(scenario: &Scenario, noise: bool) -> String {
    let truth = serde_json::json!({
        "road": scenario.road,
        "driver": scenario.driver,
        "demand": scenario.demand,
        "timing": scenario.timing,
        "sensors": scenario.sensors,
        "measurement_noise": scenario.measurement_noise,
        "max_duration": scenario.max_duration,
        "noise": noise,
    });
    sha256_hex(truth.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub mode: RunMode,
    pub seed: u64,
    pub noise: bool,
    pub version: String,
    pub scenario_hash: String,
    /// Hash of the resolved configuration, mode, seed, noise flag and fuel table.
    pub input_hash: String,
    pub status: String,
    pub activated_at_s: Option<f64>,
    pub abv_id: Option<u64>,
    pub end_time_s: Option<f64>,
    /// SHA-256 of every file in the bundle except the manifest itself.
    pub files: BTreeMap<String, String>,
}

struct Trip {
    role: VehicleRole,
    record: TripRecord,
}

/// Streams the logs of one run.
pub struct BundleWriter {
    dir: std::path::PathBuf,
    manifest: Manifest,
    trajectory: Csv,
    detectors: Csv,
    estimates: Csv,
    parameters: Csv,
    plans: Csv,
    commands: Csv,
    trips: Vec<Trip>,
    exit_position: f64,
}

impl BundleWriter {
    pub fn create(dir: &Path, scenario: &Scenario, opts: RunOptions) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join("error.txt"));
        let config = scenario.to_toml_string();
        fs::write(dir.join("config.toml"), &config)?;
        let input = format!(
            "{config}\nmode={}\nseed={}\nnoise={}\n{:?}",
            opts.mode.as_str(),
            opts.seed,
            opts.noise,
            FuelModel::bundled()
        );
        let manifest = Manifest {
            scenario: scenario.name.clone(),
            mode: opts.mode,
            seed: opts.seed,
            noise: opts.noise,
            version: env!("CARGO_PKG_VERSION").into(),
            scenario_hash: scenario_hash(scenario, opts.noise),
            input_hash: sha256_hex(input.as_bytes()),
            status: "running".into(),
            activated_at_s: None,
            abv_id: None,
            end_time_s: None,
            files: BTreeMap::new(),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            trajectory: csv_writer(
                &dir.join("trajectory.csv"),
                &["t_s", "vehicle_id", "role", "p_m", "v_mps", "a_mps2", "event"],
            )?,
            detectors: csv_writer(
                &dir.join("detectors.csv"),
                &[
                    "window_start_s",
                    "window_end_s",
                    "station_m",
                    "flow_vph",
                    "occupancy",
                    "flow_measured_vph",
                    "occupancy_measured",
                ],
            )?,
            estimates: csv_writer(
                &dir.join("estimates.csv"),
                &["t_s", "source", "cell", "rho_veh_per_km", "rho_std", "speed_mps"],
            )?,
            parameters: csv_writer(
                &dir.join("parameters.csv"),
                &[
                    "t_s",
                    "source",
                    "v_fr_mps",
                    "rho_cr_nor_veh_per_km",
                    "rho_cr_sag_veh_per_km",
                    "v_fr_std",
                    "rho_cr_nor_std",
                    "rho_cr_sag_std",
                ],
            )?,
            plans: csv_writer(
                &dir.join("plans.csv"),
                &["issued_at_s", "p_ep_m", "t_ep_s", "status", "shadow_start_m"],
            )?,
            commands: csv_writer(
                &dir.join("commands.csv"),
                &["t_s", "p_abv_m", "v_abv_mps", "a_cmd_mps2", "branch", "plan_issued_at_s"],
            )?,
            trips: Vec::new(),
            exit_position: scenario.road.p_exit,
        })
    }

    fn row(w: &mut Csv, t: f64, veh: &VehicleState, event: &str) -> Result<()> {
        w.write_record([
            f(t, 4),
            veh.id.to_string(),
            veh.role.as_str().into(),
            f(veh.p, 3),
            f(veh.v, 4),
            f(veh.a, 4),
            event.into(),
        ])?;
        Ok(())
    }

    pub fn trajectory(&mut self, t: f64, veh: &VehicleState) -> Result<()> {
        Self::row(&mut self.trajectory, t, veh, "log")
    }

    pub fn spawn(&mut self, id: u64, arrival: f64, t: f64, veh: &VehicleState) -> Result<()> {
        debug_assert_eq!(id as usize, self.trips.len() + 1);
        self.trips.push(Trip {
            role: veh.role,
            record: TripRecord {
                vehicle_id: id,
                arrival_s: arrival,
                spawn_s: Some(t),
                exit_s: None,
            },
        });
        Self::row(&mut self.trajectory, t, veh, "spawn")
    }

    pub fn exit(&mut self, ex: &ExitEvent) -> Result<()> {
        if let Some(trip) = self.trips.get_mut(ex.id as usize - 1) {
            trip.record.exit_s = Some(ex.time);
            trip.role = ex.role;
        }
        let veh = VehicleState {
            id: ex.id,
            p: self.exit_position,
            v: ex.v,
            a: ex.a,
            g_comp: 0.0,
            role: ex.role,
        };
        Self::row(&mut self.trajectory, ex.time, &veh, "exit")
    }

    pub fn detectors(&mut self, samples: &[DetectorSample], measured: &MeasurementSet) -> Result<()> {
        for (k, s) in samples.iter().enumerate() {
            self.detectors.write_record([
                f(s.window_start, 2),
                f(s.window_end, 2),
                f(s.station_p, 1),
                f(s.flow, 3),
                f(s.occupancy, 6),
                f(measured.flow[k], 3),
                f(measured.occupancy[k], 6),
            ])?;
        }
        Ok(())
    }

    pub fn estimates(&mut self, t: f64, source: &str, est: &Estimator) -> Result<()> {
        let belief = est.belief();
        let speeds = est.speed_field();
        let n = belief.cells();
        for (i, (&rho, v)) in belief.densities().iter().zip(speeds).enumerate() {
            self.estimates.write_record([
                f(t, 2),
                source.into(),
                i.to_string(),
                f(rho, 4),
                f(belief.cov[(i, i)].max(0.0).sqrt(), 4),
                f(v, 4),
            ])?;
        }
        let theta = belief.theta();
        let std = |k: usize| f(belief.cov[(n + k, n + k)].max(0.0).sqrt(), 5);
        self.parameters.write_record([
            f(t, 2),
            source.into(),
            f(theta.v_fr, 5),
            f(theta.rho_cr_nor, 5),
            f(theta.rho_cr_sag, 5),
            std(0),
            std(1),
            std(2),
        ])?;
        Ok(())
    }

    pub fn plan(&mut self, t: f64, shadow_start: f64, plan: Option<&AbsorbingPlan>, status: &str) -> Result<()> {
        self.plans.write_record([
            f(t, 2),
            opt(plan.map(|p| p.p_ep), 1),
            opt(plan.map(|p| p.t_ep), 4),
            status.into(),
            f(shadow_start, 3),
        ])?;
        Ok(())
    }

    pub fn command(
        &mut self,
        t: f64,
        veh: &VehicleState,
        accel: f64,
        branch: Branch,
        plan: Option<&AbsorbingPlan>,
    ) -> Result<()> {
        self.commands.write_record([
            f(t, 2),
            f(veh.p, 3),
            f(veh.v, 4),
            f(accel, 5),
            branch.as_str().into(),
            opt(plan.map(|p| p.issued_at), 2),
        ])?;
        Ok(())
    }

    /// Flushes every log, writes the trip table and the manifest.
    pub fn finish(
        mut self,
        activated_at: Option<f64>,
        abv: Option<u64>,
        end_time: f64,
        error: Option<&Error>,
    ) -> Result<Manifest> {
        for w in [
            &mut self.trajectory,
            &mut self.detectors,
            &mut self.estimates,
            &mut self.parameters,
            &mut self.plans,
            &mut self.commands,
        ] {
            w.flush()?;
        }
        let mut trips = csv_writer(
            &self.dir.join("vehicles.csv"),
            &["vehicle_id", "role", "arrival_s", "spawn_s", "exit_s"],
        )?;
        for trip in &self.trips {
            let r = &trip.record;
            trips.write_record([
                r.vehicle_id.to_string(),
                trip.role.as_str().into(),
                f(r.arrival_s, 4),
                opt(r.spawn_s, 4),
                opt(r.exit_s, 4),
            ])?;
        }
        trips.flush()?;
        drop(trips);

        let m = &mut self.manifest;
        m.activated_at_s = activated_at;
        m.abv_id = abv;
        match error {
            None => {
                m.status = "completed".into();
                m.end_time_s = Some(end_time);
            }
            Some(err) => {
                m.status = format!("aborted: {err}");
                fs::write(self.dir.join("error.txt"), format!("{err}\n"))?;
            }
        }
        Ok(self.manifest)
    }
}

/// Hashes the bundle files and writes `manifest.json`.
pub(crate) fn write_manifest(dir: &Path, mut manifest: Manifest) -> Result<Manifest> {
    manifest.files.clear();
    for name in BUNDLE_FILES {
        let path = dir.join(name);
        if path.exists() {
            manifest.files.insert(name.into(), sha256_hex(&fs::read(path)?));
        }
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join("manifest.json"))
}

pub fn read_metrics(dir: &Path) -> Result<MetricsReport> {
    read_json(&dir.join("metrics.json"))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TrajectoryRow {
    pub t_s: f64,
    pub vehicle_id: u64,
    pub role: VehicleRole,
    pub p_m: f64,
    pub v_mps: f64,
    pub a_mps2: f64,
    pub event: String,
}

pub fn read_trajectory(dir: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(dir.join("trajectory.csv"))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Deserialize)]
struct TripRow {
    vehicle_id: u64,
    #[allow(dead_code)]
    role: VehicleRole,
    arrival_s: f64,
    spawn_s: Option<f64>,
    exit_s: Option<f64>,
}

pub fn read_trips(dir: &Path) -> Result<Vec<TripRecord>> {
    let mut r = csv::Reader::from_path(dir.join("vehicles.csv"))?;
    r.deserialize::<TripRow>()
        .map(|row| {
            let row = row?;
            Ok(TripRecord {
                vehicle_id: row.vehicle_id,
                arrival_s: row.arrival_s,
                spawn_s: row.spawn_s,
                exit_s: row.exit_s,
            })
        })
        .collect()
}

/// Metrics of one bundle, computed from its logs alone.
///
/// Travel time runs from the demand arrival to the exit crossing, so waiting
/// at a blocked entrance counts. Fuel integrates the logged trajectory and
/// charges idle consumption while waiting at the entrance.
pub(crate) fn compute_metrics(dir: &Path, scenario: &Scenario, opts: RunOptions) -> Result<MetricsReport> {
    let trips = read_trips(dir)?;
    let att = average_travel_time(&trips)?;
    let fuel_model = FuelModel::bundled();
    let mut rows: BTreeMap<u64, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for row in read_trajectory(dir)? {
        rows.entry(row.vehicle_id)
            .or_default()
            .push((row.t_s, row.v_mps, row.a_mps2));
    }
    let mut total = 0.0;
    let mut completed = 0usize;
    for trip in trips.iter().filter(|t| t.exit_s.is_some()) {
        let waiting = trip.spawn_s.unwrap_or(trip.arrival_s) - trip.arrival_s;
        let driving = rows
            .get(&trip.vehicle_id)
            .map_or(0.0, |r| trajectory_fuel(&fuel_model, r));
        total += driving + waiting * fuel_model.idle_rate_ml_per_s();
        completed += 1;
    }
    let key = RunKey {
        scenario: scenario.name.clone(),
        scenario_hash: scenario_hash(scenario, opts.noise),
        mode: opts.mode.as_str().into(),
        seed: opts.seed,
    };
    Ok(MetricsReport::single(key, att, total / completed as f64, completed))
}

/// Benefit of bundle `b` over the reference bundle `a` (ΔATT = ATT_a − ATT_b).
pub fn compare_runs(a: &Path, b: &Path) -> Result<MetricsReport> {
    let reference = read_metrics(a)?;
    let treated = read_metrics(b)?;
    benefit_metrics(&treated, &reference)
}
