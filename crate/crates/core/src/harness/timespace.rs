//! Time-space rasterization of a trajectory log.

use std::io::Write;
use std::path::Path;

use super::bundle::{read_trajectory, TrajectoryRow};
use crate::error::{Error, Result};
use crate::microsim::VehicleRole;
use crate::scenario::load_scenario;

/// Mean speed of trajectory samples per `(t, p)` bin.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSpaceGrid {
    pub t0: f64,
    pub p0: f64,
    pub dt: f64,
    pub dp: f64,
    pub nt: usize,
    pub np: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl TimeSpaceGrid {
    pub fn new(t0: f64, t1: f64, p0: f64, p1: f64, dt: f64, dp: f64) -> Self {
        let nt = ((t1 - t0) / dt).ceil().max(1.0) as usize;
        let np = ((p1 - p0) / dp).ceil().max(1.0) as usize;
        Self {
            t0,
            p0,
            dt,
            dp,
            nt,
            np,
            sum: vec![0.0; nt * np],
            count: vec![0; nt * np],
        }
    }

    pub fn bin(&self, t: f64, p: f64) -> Option<(usize, usize)> {
        let i = ((t - self.t0) / self.dt).floor();
        let j = ((p - self.p0) / self.dp).floor();
        if i < 0.0 || j < 0.0 || i as usize >= self.nt || j as usize >= self.np {
            return None;
        }
        Some((i as usize, j as usize))
    }

    pub fn add(&mut self, t: f64, p: f64, v: f64) {
        if let Some((i, j)) = self.bin(t, p) {
            self.sum[i * self.np + j] += v;
            self.count[i * self.np + j] += 1;
        }
    }

    /// Mean speed in bin `(i, j)`, or `None` when no sample fell into it.
    pub fn mean(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.np + j;
        (self.count[k] > 0).then(|| self.sum[k] / self.count[k] as f64)
    }

    pub fn samples(&self, i: usize, j: usize) -> u32 {
        self.count[i * self.np + j]
    }
}

/// Rasterizes logged rows over `[t0, t1) × [p0, p1)`.
pub fn timespace_grid(rows: &[TrajectoryRow], t_range: (f64, f64), p_range: (f64, f64), dt: f64, dp: f64) -> TimeSpaceGrid {
    let mut grid = TimeSpaceGrid::new(t_range.0, t_range.1, p_range.0, p_range.1, dt, dp);
    for r in rows.iter().filter(|r| r.event == "log") {
        grid.add(r.t_s, r.p_m, r.v_mps);
    }
    grid
}

/// Writes `timespace.csv` and `abv_trajectory.csv` into the run directory.
/// Bins without samples have an empty `mean_speed_mps`.
pub fn export_timespace(run_dir: &Path, dt: f64, dp: f64) -> Result<TimeSpaceGrid> {
    if !(dt > 0.0 && dp > 0.0) {
        return Err(Error::config("export-timespace", "resolution must be positive"));
    }
    let scenario = load_scenario(run_dir.join("config.toml"))?;
    let rows = read_trajectory(run_dir)?;
    let t_end = rows.iter().map(|r| r.t_s).fold(0.0, f64::max);
    let grid = timespace_grid(
        &rows,
        (0.0, t_end.max(dt)),
        (scenario.road.p_entry, scenario.road.p_exit),
        dt,
        dp,
    );

    let mut out = csv::Writer::from_path(run_dir.join("timespace.csv"))?;
    out.write_record(["t_start_s", "p_start_m", "mean_speed_mps", "samples"])?;
    for i in 0..grid.nt {
        for j in 0..grid.np {
            out.write_record([
                format!("{:.2}", grid.t0 + i as f64 * dt),
                format!("{:.1}", grid.p0 + j as f64 * dp),
                grid.mean(i, j).map_or_else(String::new, |v| format!("{v:.4}")),
                grid.samples(i, j).to_string(),
            ])?;
        }
    }
    out.flush()?;

    let mut abv = std::io::BufWriter::new(std::fs::File::create(run_dir.join("abv_trajectory.csv"))?);
    writeln!(abv, "t_s,p_m,v_mps")?;
    for r in rows.iter().filter(|r| r.role == VehicleRole::Absorbing) {
        writeln!(abv, "{:.4},{:.3},{:.4}", r.t_s, r.p_m, r.v_mps)?;
    }
    abv.flush()?;
    Ok(grid)
}
