//! Road geometry, driver parameters, demand, discretization constants and
//! the scenario file format.
//!
//! Scenario files are TOML. Every quantity carries its unit in the key name
//! (`cell_length_m`, `g_down_percent`, ...). Only `[demand]` is mandatory;
//! every other table falls back to the baseline sag experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assimilation::NoiseConfig;
use crate::control::JadConfig;
use crate::ctm::FdParams;
use crate::error::{Error, Result};

/// Single-lane freeway section with a sag: downhill, linear transition, uphill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoadProfile {
    pub g_down: f64,
    pub g_up: f64,
    pub p_sag_begin: f64,
    pub p_sag_end: f64,
    pub p_entry: f64,
    pub p_exit: f64,
}

impl RoadProfile {
    pub fn new(
        g_down: f64,
        g_up: f64,
        p_sag_begin: f64,
        p_sag_end: f64,
        p_entry: f64,
        p_exit: f64,
    ) -> Result<Self> {
        let all = [g_down, g_up, p_sag_begin, p_sag_end, p_entry, p_exit];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("road", "all values must be finite"));
        }
        if !(p_entry < p_sag_begin) {
            return Err(Error::config("road.sag_begin_m", "must lie downstream of entry_m"));
        }
        if !(p_sag_begin < p_sag_end) {
            return Err(Error::config("road.sag_end_m", "must lie downstream of sag_begin_m"));
        }
        if !(p_sag_end < p_exit) {
            return Err(Error::config("road.exit_m", "must lie downstream of sag_end_m"));
        }
        if !(g_down < g_up) {
            return Err(Error::config("road.g_up_percent", "must exceed g_down_percent"));
        }
        Ok(Self {
            g_down,
            g_up,
            p_sag_begin,
            p_sag_end,
            p_entry,
            p_exit,
        })
    }

    pub fn baseline() -> Self {
        Self::new(-0.005, 0.03, 8600.0, 8900.0, 0.0, 10_000.0).expect("baseline road is valid")
    }

    pub fn length(&self) -> f64 {
        self.p_exit - self.p_entry
    }

    pub fn max_gradient(&self) -> f64 {
        self.g_up.max(self.g_down)
    }

    /// Road gradient at `p`, continuous and piecewise linear.
    pub fn gradient_at(&self, p: f64) -> Result<f64> {
        if !(p >= self.p_entry && p <= self.p_exit) {
            return Err(Error::Domain {
                what: "position",
                value: p,
            });
        }
        Ok(self.gradient_unchecked(p))
    }

    /// Same as [`gradient_at`](Self::gradient_at) but extends the end
    /// gradients beyond the section; used for vehicles in their last step.
    pub fn gradient_unchecked(&self, p: f64) -> f64 {
        if p <= self.p_sag_begin {
            self.g_down
        } else if p <= self.p_sag_end {
            self.g_down
                + (self.g_up - self.g_down) / (self.p_sag_end - self.p_sag_begin)
                    * (p - self.p_sag_begin)
        } else {
            self.g_up
        }
    }
}

/// Modified IDM+ parameters shared by every driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriverParams {
    /// Maximum acceleration, m/s².
    pub alpha: f64,
    /// Comfortable deceleration, m/s².
    pub beta: f64,
    pub delta: f64,
    /// Standstill gap, m.
    pub s0: f64,
    /// Desired time headway, s.
    pub headway_t: f64,
    /// Desired speed, m/s.
    pub v_des: f64,
    /// Gradient sensitivity, m/s² per unit gradient.
    pub theta: f64,
    /// Maximum gradient compensation rate, 1/s.
    pub lambda: f64,
}

impl DriverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("driver.alpha_mps2", self.alpha),
            ("driver.beta_mps2", self.beta),
            ("driver.s0_m", self.s0),
            ("driver.headway_s", self.headway_t),
            ("driver.v_des_mps", self.v_des),
            ("driver.lambda_per_s", self.lambda),
            ("driver.delta", self.delta),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {value}")));
            }
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::config("driver.theta_mps2", "must be non-negative"));
        }
        Ok(())
    }
}

impl Default for DriverParams {
    fn default() -> Self {
        Self {
            alpha: 1.25,
            beta: 2.0,
            delta: 4.0,
            s0: 3.0,
            headway_t: 1.2,
            v_des: 27.0,
            theta: 20.0,
            lambda: 0.0003,
        }
    }
}

/// Piecewise-constant inflow demand. Segment `k` covers `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DemandProfile {
    breakpoints: Vec<(f64, f64)>,
}

impl DemandProfile {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        for (k, &(t, q)) in breakpoints.iter().enumerate() {
            if !t.is_finite() || !q.is_finite() || q < 0.0 {
                return Err(Error::config(
                    format!("demand.breakpoints[{k}]"),
                    "times must be finite and demands non-negative",
                ));
            }
            if k > 0 && !(t > breakpoints[k - 1].0) {
                return Err(Error::config(
                    format!("demand.breakpoints[{k}]"),
                    "times must be strictly increasing",
                ));
            }
        }
        Ok(Self { breakpoints })
    }

    /// A 15 min peak of 2000 veh/h between 1500 and 1200 veh/h shoulders,
    /// over after one hour.
    pub fn baseline() -> Self {
        Self::new(vec![(0.0, 1500.0), (300.0, 2000.0), (1200.0, 1200.0), (3600.0, 0.0)])
            .expect("baseline demand is valid")
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    /// Demand in veh/h at time `t`.
    pub fn demand_at(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&(tk, _)| tk <= t) {
            0 => 0.0,
            k => self.breakpoints[k - 1].1,
        }
    }

    /// Number of vehicles demanded over `[t0, t1]`.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        if t1 <= t0 {
            return 0.0;
        }
        let mut total = 0.0;
        for (k, &(start, q)) in self.breakpoints.iter().enumerate() {
            let end = self
                .breakpoints
                .get(k + 1)
                .map_or(f64::INFINITY, |&(next, _)| next);
            let lo = start.max(t0);
            let hi = end.min(t1);
            if hi > lo && q > 0.0 {
                total += q * (hi - lo) / 3600.0;
            }
        }
        total
    }

    /// Time after which demand stays at zero forever.
    pub fn exhausted_after(&self) -> f64 {
        match self.breakpoints.last() {
            None => 0.0,
            Some(&(_, q)) if q > 0.0 => f64::INFINITY,
            Some(_) => {
                let last_positive = self.breakpoints.iter().rposition(|&(_, q)| q > 0.0);
                match last_positive {
                    None => 0.0,
                    Some(k) => self.breakpoints[k + 1].0,
                }
            }
        }
    }
}

/// Time and space discretization shared by all components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingConfig {
    pub dt_truth: f64,
    pub dt_sim: f64,
    pub dt_control: f64,
    pub window: f64,
    pub detector_spacing: f64,
    pub cell_length: f64,
    pub log_interval: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            dt_truth: 0.01,
            dt_sim: 3.0,
            dt_control: 0.1,
            window: 60.0,
            detector_spacing: 500.0,
            cell_length: 100.0,
            log_interval: 0.5,
        }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<u64> {
    let r = num / den;
    let n = r.round();
    ((r - n).abs() < 1e-9 * r.abs().max(1.0) && n >= 1.0).then_some(n as u64)
}

impl TimingConfig {
    pub fn validate(&self, road: &RoadProfile) -> Result<()> {
        let fields = [
            ("timing.dt_truth_s", self.dt_truth),
            ("timing.dt_sim_s", self.dt_sim),
            ("timing.dt_control_s", self.dt_control),
            ("timing.window_s", self.window),
            ("timing.detector_spacing_m", self.detector_spacing),
            ("timing.cell_length_m", self.cell_length),
            ("timing.log_interval_s", self.log_interval),
        ];
        for (field, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.dt_truth <= self.dt_control
            && self.dt_control <= self.dt_sim
            && self.dt_sim <= self.window)
        {
            return Err(Error::config(
                "timing",
                "require dt_truth_s <= dt_control_s <= dt_sim_s <= window_s",
            ));
        }
        for (field, value) in [
            ("timing.dt_control_s", self.dt_control),
            ("timing.dt_sim_s", self.dt_sim),
            ("timing.window_s", self.window),
            ("timing.log_interval_s", self.log_interval),
        ] {
            if integer_ratio(value, self.dt_truth).is_none() {
                return Err(Error::config(field, "must be an integer multiple of dt_truth_s"));
            }
        }
        if integer_ratio(self.window, self.dt_sim).is_none() {
            return Err(Error::config("timing.window_s", "must be an integer multiple of dt_sim_s"));
        }
        if integer_ratio(self.dt_sim, self.dt_control).is_none() {
            return Err(Error::config(
                "timing.dt_sim_s",
                "must be an integer multiple of dt_control_s",
            ));
        }
        if integer_ratio(self.detector_spacing, self.cell_length).is_none() {
            return Err(Error::config(
                "timing.detector_spacing_m",
                "must be an integer multiple of cell_length_m",
            ));
        }
        if integer_ratio(road.length(), self.cell_length).is_none() {
            return Err(Error::config(
                "timing.cell_length_m",
                "section length must be an integer multiple of cell_length_m",
            ));
        }
        Ok(())
    }

    /// Number of truth ticks in `dt`. Only meaningful after validation.
    pub fn ticks(&self, dt: f64) -> u64 {
        (dt / self.dt_truth).round() as u64
    }
}

/// Vehicle and loop-detector geometry used by the emulator and by the
/// estimator's occupancy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensorGeometry {
    pub vehicle_length: f64,
    pub detector_length: f64,
}

impl SensorGeometry {
    pub fn effective_length(&self) -> f64 {
        self.vehicle_length + self.detector_length
    }
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            vehicle_length: 5.0,
            detector_length: 2.0,
        }
    }
}

/// Standard deviations of the optional detector noise injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasurementNoise {
    pub flow_std_vph: f64,
    pub occupancy_std: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            flow_std_vph: 60.0,
            occupancy_std: 0.01,
        }
    }
}

/// Everything needed to run one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub road: RoadProfile,
    pub driver: DriverParams,
    pub demand: DemandProfile,
    pub timing: TimingConfig,
    pub sensors: SensorGeometry,
    /// Jam density of the estimator's fundamental diagram, veh/km.
    pub rho_jam: f64,
    /// Initial fundamental-diagram parameters used by the estimator.
    pub initial_theta: FdParams,
    pub filter: NoiseConfig,
    pub measurement_noise: MeasurementNoise,
    pub jad: JadConfig,
    /// Hard stop for runs whose road never empties.
    pub max_duration: f64,
}

impl Scenario {
    pub fn baseline() -> Self {
        let s = Self {
            name: "baseline".into(),
            road: RoadProfile::baseline(),
            driver: DriverParams::default(),
            demand: DemandProfile::baseline(),
            timing: TimingConfig::default(),
            sensors: SensorGeometry::default(),
            rho_jam: 140.0,
            initial_theta: Preset::Baseline.initial_theta(),
            filter: NoiseConfig::default(),
            measurement_noise: MeasurementNoise::default(),
            jad: JadConfig::default(),
            max_duration: 14_400.0,
        };
        s.validate().expect("baseline scenario is valid");
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.driver.validate()?;
        self.timing.validate(&self.road)?;
        if !(self.sensors.vehicle_length > 0.0 && self.sensors.detector_length >= 0.0) {
            return Err(Error::config(
                "sensors",
                "vehicle_length_m must be positive and detector_length_m non-negative",
            ));
        }
        if !(self.rho_jam > 0.0) {
            return Err(Error::config("ctm.rho_jam_veh_per_km", "must be positive"));
        }
        self.initial_theta.validate(self.rho_jam)?;
        let cfl = self.timing.cell_length / self.timing.dt_sim;
        if self.initial_theta.v_fr > cfl {
            return Err(Error::config(
                "ctm.initial_theta.v_fr_mps",
                format!("violates the CFL condition v_fr * dt_sim <= cell_length (max {cfl} m/s)"),
            ));
        }
        self.filter.validate()?;
        if !(self.measurement_noise.flow_std_vph >= 0.0 && self.measurement_noise.occupancy_std >= 0.0)
        {
            return Err(Error::config("measurement_noise", "standard deviations must be non-negative"));
        }
        self.jad.validate()?;
        if !(self.max_duration > 0.0) {
            return Err(Error::config("max_duration_s", "must be positive"));
        }
        Ok(())
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.initial_theta = preset.initial_theta();
        self.name = preset.name().into();
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_scenario()
    }

    /// Resolved configuration, written into every run bundle.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ScenarioFile::from_scenario(self)).expect("scenario serializes")
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Scenario::from_toml_str(&text)
}

/// Initial-parameter presets of the control-failure study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Baseline,
    /// Underestimated control: free-flow speed too high.
    Ue,
    /// Overestimated control: free-flow speed too low, sag capacity too low.
    Oe,
}

impl Preset {
    pub fn initial_theta(self) -> FdParams {
        match self {
            Preset::Baseline => FdParams::new(27.0, 23.0, 18.0),
            Preset::Ue => FdParams::new(30.0, 23.0, 18.0),
            Preset::Oe => FdParams::new(24.0, 26.0, 15.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Ue => "ue",
            Preset::Oe => "oe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Preset::Baseline),
            "ue" => Some(Preset::Ue),
            "oe" => Some(Preset::Oe),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// File schema

/// A gradient given either as a number of percent or as a string like "-0.5%".
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum Percent {
    Number(f64),
    Text(String),
}

impl Percent {
    fn to_slope(&self, field: &str) -> Result<f64> {
        let pct = match self {
            Percent::Number(x) => *x,
            Percent::Text(s) => s
                .trim()
                .trim_end_matches('%')
                .trim()
                .replace('\u{2212}', "-")
                .parse::<f64>()
                .map_err(|_| Error::config(field, format!("cannot parse percent value {s:?}")))?,
        };
        Ok(pct / 100.0)
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default = "default_name")]
    name: String,
    #[serde(default)]
    max_duration_s: Option<f64>,
    #[serde(default)]
    road: Option<RoadFile>,
    #[serde(default)]
    driver: Option<DriverFile>,
    demand: DemandFile,
    #[serde(default)]
    timing: Option<TimingFile>,
    #[serde(default)]
    sensors: Option<SensorsFile>,
    #[serde(default)]
    ctm: Option<CtmFile>,
    #[serde(default)]
    filter: Option<FilterFile>,
    #[serde(default)]
    measurement_noise: Option<MeasurementNoiseFile>,
    #[serde(default)]
    jad: Option<JadFile>,
}

fn default_name() -> String {
    "custom".into()
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RoadFile {
    g_down_percent: Percent,
    g_up_percent: Percent,
    sag_begin_m: f64,
    sag_end_m: f64,
    #[serde(default)]
    entry_m: f64,
    exit_m: f64,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct DriverFile {
    alpha_mps2: Option<f64>,
    beta_mps2: Option<f64>,
    delta: Option<f64>,
    s0_m: Option<f64>,
    headway_s: Option<f64>,
    v_des_mps: Option<f64>,
    theta_mps2: Option<f64>,
    lambda_per_s: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct DemandFile {
    /// `[time_s, veh_per_h]` pairs.
    breakpoints: Vec<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TimingFile {
    dt_truth_s: Option<f64>,
    dt_sim_s: Option<f64>,
    dt_control_s: Option<f64>,
    window_s: Option<f64>,
    detector_spacing_m: Option<f64>,
    cell_length_m: Option<f64>,
    log_interval_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SensorsFile {
    vehicle_length_m: Option<f64>,
    detector_length_m: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ThetaFile {
    v_fr_mps: f64,
    rho_cr_nor_veh_per_km: f64,
    rho_cr_sag_veh_per_km: f64,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct CtmFile {
    rho_jam_veh_per_km: Option<f64>,
    initial_theta: Option<ThetaFile>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FilterFile {
    q_density_veh2_per_km2: Option<f64>,
    q_theta: Option<[f64; 3]>,
    r_flow_vph2: Option<f64>,
    r_occupancy: Option<f64>,
    p0_density_veh2_per_km2: Option<f64>,
    p0_theta: Option<[f64; 3]>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct MeasurementNoiseFile {
    flow_std_vph: Option<f64>,
    occupancy_std: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct JadFile {
    p_jst_m: Option<f64>,
    p_jen_m: Option<f64>,
    p_ep_m: Option<f64>,
    a_si_min_mps2: Option<f64>,
    a_si_max_mps2: Option<f64>,
    v_si_min_mps: Option<f64>,
    horizon_steps: Option<usize>,
    trigger_windows: Option<u32>,
    trigger_zone_upstream_m: Option<f64>,
    earliest_trigger_s: Option<f64>,
}

impl ScenarioFile {
    fn into_scenario(self) -> Result<Scenario> {
        let base = Scenario::baseline();

        let road = match self.road {
            None => base.road,
            Some(r) => RoadProfile::new(
                r.g_down_percent.to_slope("road.g_down_percent")?,
                r.g_up_percent.to_slope("road.g_up_percent")?,
                r.sag_begin_m,
                r.sag_end_m,
                r.entry_m,
                r.exit_m,
            )?,
        };

        let d = self.driver.unwrap_or_default();
        let bd = base.driver;
        let driver = DriverParams {
            alpha: d.alpha_mps2.unwrap_or(bd.alpha),
            beta: d.beta_mps2.unwrap_or(bd.beta),
            delta: d.delta.unwrap_or(bd.delta),
            s0: d.s0_m.unwrap_or(bd.s0),
            headway_t: d.headway_s.unwrap_or(bd.headway_t),
            v_des: d.v_des_mps.unwrap_or(bd.v_des),
            theta: d.theta_mps2.unwrap_or(bd.theta),
            lambda: d.lambda_per_s.unwrap_or(bd.lambda),
        };

        let demand =
            DemandProfile::new(self.demand.breakpoints.iter().map(|&[t, q]| (t, q)).collect())?;

        let t = self.timing.unwrap_or_default();
        let bt = base.timing;
        let timing = TimingConfig {
            dt_truth: t.dt_truth_s.unwrap_or(bt.dt_truth),
            dt_sim: t.dt_sim_s.unwrap_or(bt.dt_sim),
            dt_control: t.dt_control_s.unwrap_or(bt.dt_control),
            window: t.window_s.unwrap_or(bt.window),
            detector_spacing: t.detector_spacing_m.unwrap_or(bt.detector_spacing),
            cell_length: t.cell_length_m.unwrap_or(bt.cell_length),
            log_interval: t.log_interval_s.unwrap_or(bt.log_interval),
        };

        let s = self.sensors.unwrap_or_default();
        let sensors = SensorGeometry {
            vehicle_length: s.vehicle_length_m.unwrap_or(base.sensors.vehicle_length),
            detector_length: s.detector_length_m.unwrap_or(base.sensors.detector_length),
        };

        let c = self.ctm.unwrap_or_default();
        let rho_jam = c.rho_jam_veh_per_km.unwrap_or(base.rho_jam);
        let initial_theta = c.initial_theta.map_or(base.initial_theta, |th| {
            FdParams::new(th.v_fr_mps, th.rho_cr_nor_veh_per_km, th.rho_cr_sag_veh_per_km)
        });

        let f = self.filter.unwrap_or_default();
        let bf = base.filter;
        let filter = NoiseConfig {
            q_density: f.q_density_veh2_per_km2.unwrap_or(bf.q_density),
            q_theta: f.q_theta.unwrap_or(bf.q_theta),
            r_flow: f.r_flow_vph2.unwrap_or(bf.r_flow),
            r_occ: f.r_occupancy.unwrap_or(bf.r_occ),
            p0_density: f.p0_density_veh2_per_km2.unwrap_or(bf.p0_density),
            p0_theta: f.p0_theta.unwrap_or(bf.p0_theta),
        };

        let m = self.measurement_noise.unwrap_or_default();
        let measurement_noise = MeasurementNoise {
            flow_std_vph: m.flow_std_vph.unwrap_or(base.measurement_noise.flow_std_vph),
            occupancy_std: m.occupancy_std.unwrap_or(base.measurement_noise.occupancy_std),
        };

        let j = self.jad.unwrap_or_default();
        let bj = base.jad;
        let jad = JadConfig {
            p_jst: j.p_jst_m.unwrap_or(bj.p_jst),
            p_jen: j.p_jen_m.unwrap_or(bj.p_jen),
            p_ep: j.p_ep_m.unwrap_or(bj.p_ep),
            a_si_min: j.a_si_min_mps2.unwrap_or(bj.a_si_min),
            a_si_max: j.a_si_max_mps2.unwrap_or(bj.a_si_max),
            v_si_min: j.v_si_min_mps.unwrap_or(bj.v_si_min),
            v_des: driver.v_des,
            dt_control: timing.dt_control,
            horizon_steps: j.horizon_steps.unwrap_or(bj.horizon_steps),
            trigger_windows: j.trigger_windows.unwrap_or(bj.trigger_windows),
            trigger_zone_upstream: j.trigger_zone_upstream_m.unwrap_or(bj.trigger_zone_upstream),
            earliest_trigger: j.earliest_trigger_s.unwrap_or(bj.earliest_trigger),
        };

        let scenario = Scenario {
            name: self.name,
            road,
            driver,
            demand,
            timing,
            sensors,
            rho_jam,
            initial_theta,
            filter,
            measurement_noise,
            jad,
            max_duration: self.max_duration_s.unwrap_or(base.max_duration),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    fn from_scenario(s: &Scenario) -> Self {
        Self {
            name: s.name.clone(),
            max_duration_s: Some(s.max_duration),
            road: Some(RoadFile {
                g_down_percent: Percent::Number(s.road.g_down * 100.0),
                g_up_percent: Percent::Number(s.road.g_up * 100.0),
                sag_begin_m: s.road.p_sag_begin,
                sag_end_m: s.road.p_sag_end,
                entry_m: s.road.p_entry,
                exit_m: s.road.p_exit,
            }),
            driver: Some(DriverFile {
                alpha_mps2: Some(s.driver.alpha),
                beta_mps2: Some(s.driver.beta),
                delta: Some(s.driver.delta),
                s0_m: Some(s.driver.s0),
                headway_s: Some(s.driver.headway_t),
                v_des_mps: Some(s.driver.v_des),
                theta_mps2: Some(s.driver.theta),
                lambda_per_s: Some(s.driver.lambda),
            }),
            demand: DemandFile {
                breakpoints: s.demand.breakpoints().iter().map(|&(t, q)| [t, q]).collect(),
            },
            timing: Some(TimingFile {
                dt_truth_s: Some(s.timing.dt_truth),
                dt_sim_s: Some(s.timing.dt_sim),
                dt_control_s: Some(s.timing.dt_control),
                window_s: Some(s.timing.window),
                detector_spacing_m: Some(s.timing.detector_spacing),
                cell_length_m: Some(s.timing.cell_length),
                log_interval_s: Some(s.timing.log_interval),
            }),
            sensors: Some(SensorsFile {
                vehicle_length_m: Some(s.sensors.vehicle_length),
                detector_length_m: Some(s.sensors.detector_length),
            }),
            ctm: Some(CtmFile {
                rho_jam_veh_per_km: Some(s.rho_jam),
                initial_theta: Some(ThetaFile {
                    v_fr_mps: s.initial_theta.v_fr,
                    rho_cr_nor_veh_per_km: s.initial_theta.rho_cr_nor,
                    rho_cr_sag_veh_per_km: s.initial_theta.rho_cr_sag,
                }),
            }),
            filter: Some(FilterFile {
                q_density_veh2_per_km2: Some(s.filter.q_density),
                q_theta: Some(s.filter.q_theta),
                r_flow_vph2: Some(s.filter.r_flow),
                r_occupancy: Some(s.filter.r_occ),
                p0_density_veh2_per_km2: Some(s.filter.p0_density),
                p0_theta: Some(s.filter.p0_theta),
            }),
            measurement_noise: Some(MeasurementNoiseFile {
                flow_std_vph: Some(s.measurement_noise.flow_std_vph),
                occupancy_std: Some(s.measurement_noise.occupancy_std),
            }),
            jad: Some(JadFile {
                p_jst_m: Some(s.jad.p_jst),
                p_jen_m: Some(s.jad.p_jen),
                p_ep_m: Some(s.jad.p_ep),
                a_si_min_mps2: Some(s.jad.a_si_min),
                a_si_max_mps2: Some(s.jad.a_si_max),
                v_si_min_mps: Some(s.jad.v_si_min),
                horizon_steps: Some(s.jad.horizon_steps),
                trigger_windows: Some(s.jad.trigger_windows),
                trigger_zone_upstream_m: Some(s.jad.trigger_zone_upstream),
                earliest_trigger_s: Some(s.jad.earliest_trigger),
            }),
        }
    }
}
